"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise, or when the
environment variable ``GAZEHOI_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the pure-Python module is used. ``BACKEND`` names the active one.
"""
import os

from . import _kernels_py

_force_python = os.environ.get("GAZEHOI_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_python:
        raise ImportError("pure-Python kernels requested")
    from . import _kernels_cy as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

lap_solve = _impl.lap_solve
pairwise_iou = _impl.pairwise_iou
match_ranked = _impl.match_ranked
all_point_ap = _impl.all_point_ap


def compiled_available():
    try:
        from . import _kernels_cy  # noqa: F401
    except ImportError:
        return False
    return True


def backends():
    """Map of backend name to kernel module for every importable backend."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels_cy

        out["cython"] = _kernels_cy
    except ImportError:
        pass
    return out
