"""Exception hierarchy shared across the package."""


class GazeHOIError(Exception):
    """Base class for all package errors."""


class SchemaError(GazeHOIError):
    """A file or record is missing a field or has the wrong type."""


class IntegrityError(GazeHOIError):
    """Cross-references inside an annotation file are inconsistent."""


class DimensionError(GazeHOIError):
    """A vector or record does not have its declared length."""


class UnknownClass(GazeHOIError, KeyError):
    pass


class ShapeError(GazeHOIError, ValueError):
    pass


class NonFiniteError(GazeHOIError, FloatingPointError):
    """NaN or Inf encountered during a forward/backward pass or update."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NoFeasibleMatching(GazeHOIError):
    """Forbidden cells leave no matching of full size."""


class NoPositiveLabel(GazeHOIError, ValueError):
    pass


class CheckpointMismatch(GazeHOIError):
    """Checkpoint parameters do not agree with the model configuration."""


class ConfigError(GazeHOIError, ValueError):
    pass
