"""Run configuration: TOML sections for data, model, training and evaluation.

Every key has a default; unknown keys anywhere are rejected. The effective
configuration is written next to each output so a run can be reproduced by
feeding it back in.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import tomli
import tomli_w

from .errors import ConfigError
from .evaluation import default_thresholds
from .model import ModelConfig
from .training import LossConfig, OptimConfig, TrainConfig

MODEL_PRESETS = ("full", "desk")


@dataclass
class DataConfig:
    annotations: str = ""
    features: str = ""      # HOIF1 store; empty means on-the-fly synthetic features
    detections: str = ""    # detector tracks for detection-mode evaluation
    vocab: str = ""
    scenario: str = ""      # scenario JSON used to rebuild scripted synthetic features
    val_fraction: float = 0.2

    def __post_init__(self):
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("data.val_fraction must lie in [0, 1)")


@dataclass
class EvalConfig:
    split: str = "val"
    mode: str = "oracle"
    k: int = 5
    threshold: float = 0.3
    average: str = "human"
    thresholds: list = field(default_factory=default_thresholds)

    def __post_init__(self):
        if self.split not in ("train", "val", "all"):
            raise ConfigError("eval.split must be train, val or all")
        if self.mode not in ("oracle", "detection"):
            raise ConfigError("eval.mode must be oracle or detection")
        if self.average not in ("human", "frame"):
            raise ConfigError("eval.average must be human or frame")
        if self.k < 1 or not 0 < self.threshold < 1:
            raise ConfigError("eval.k must be positive and eval.threshold in (0, 1)")


# ablation axis name -> (section, key) it overrides
ABLATION_AXES = {
    "loss": ("train.loss", "kind"),
    "sampling": ("train", "sampling"),
    "flip": ("train", "flip"),
    "window_mode": ("model", "window_mode"),
    "window": ("model", "window"),
    "gaze_mode": ("model", "gaze_mode"),
    "global_token": ("model", "global_token"),
    "pe_mode": ("model", "pe_mode"),
    "weight_decay": ("train.optim", "weight_decay"),
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    preset: str = "full"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        return {"seed": self.seed, "out": self.out, "preset": self.preset,
                "data": asdict(self.data), "model": self.model.to_dict(), "train": train,
                "eval": asdict(self.eval), "ablate": {k: list(v) for k, v in self.ablate.items()}}

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _section(cls, raw: Any, name: str, base=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {unknown}")
    try:
        return replace(base, **raw) if base is not None else cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig, starting from the chosen model preset."""
    top = {"seed", "out", "preset", "data", "model", "train", "eval", "ablate"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    preset = raw.get("preset", "full")
    if preset not in MODEL_PRESETS:
        raise ConfigError(f"preset must be one of {MODEL_PRESETS}")
    base_model = ModelConfig.desk() if preset == "desk" else ModelConfig()
    model = _section(ModelConfig, raw.get("model", {}), "model", base_model)
    train_raw = dict(raw.get("train", {}))
    loss = _section(LossConfig, train_raw.pop("loss", {}), "train.loss")
    optim = _section(OptimConfig, train_raw.pop("optim", {}), "train.optim")
    train = _section(TrainConfig, {**train_raw, "loss": loss, "optim": optim}, "train")
    ablate = raw.get("ablate", {})
    if not isinstance(ablate, dict):
        raise ConfigError("[ablate] must be a table")
    for axis, values in ablate.items():
        if axis not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"ablation axis {axis!r} needs a non-empty list")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return RunConfig(seed=seed, out=str(raw.get("out", "runs")), preset=preset,
                     data=_section(DataConfig, raw.get("data", {}), "data"),
                     model=model, train=train,
                     eval=_section(EvalConfig, raw.get("eval", {}), "eval"),
                     ablate={k: list(v) for k, v in ablate.items()})


def loads(text: str) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return from_dict(raw)


def load(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def with_override(cfg: RunConfig, axis: str, value) -> RunConfig:
    """A copy of ``cfg`` with one ablation axis set to ``value``."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    raw = cfg.to_dict()
    section, key = ABLATION_AXES[axis]
    node = raw
    for part in section.split("."):
        node = node[part]
    node[key] = value
    return from_dict(raw)


def ablation_grid(cfg: RunConfig, axes: Optional[dict] = None) -> list[tuple[dict, RunConfig]]:
    """Cartesian product of axis values, in declaration order."""
    axes = cfg.ablate if axes is None else axes
    names = list(axes)
    out = []
    for combo in itertools.product(*(axes[n] for n in names)):
        point = dict(zip(names, combo))
        run = cfg
        for n, v in point.items():
            run = with_override(run, n, v)
        out.append((point, run))
    return out
