"""Losses, optimiser, learning-rate schedule and the training loop."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import build_windows, class_statistics, horizontal_flip, sample_epoch
from .errors import ConfigError, NonFiniteError, NoPositiveLabel
from .features import FrameCache
from .model import HOIModel, ModelConfig, ModelOutput, save_checkpoint

PROB_EPS = 1e-7
LOSS_KINDS = ("cb_focal", "bce", "focal", "mlm")
SAMPLING = ("video", "single", "window")


@dataclass
class LossConfig:
    kind: str = "cb_focal"
    gamma: float = 0.5
    beta: float = 0.9999

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}")
        if not 0 <= self.beta < 1:
            raise ConfigError("beta must lie in [0, 1)")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")


@dataclass
class OptimConfig:
    lr_init: float = 1e-8
    lr_peak: float = 1e-4
    warmup_epochs: int = 3
    decay: float = 0.1
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 8
    tau_a: int = 0
    full_history_only: bool = False
    flip: bool = True
    sampling: str = "video"
    eval_every: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if self.sampling not in SAMPLING:
            raise ConfigError(f"sampling must be one of {SAMPLING}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


# ---------------------------------------------------------------- losses


def class_weights(counts, beta: float) -> np.ndarray:
    """Inverse effective-number weights ``(1 - beta) / (1 - beta**n)``.

    Classes never seen in training (``n == 0``) get ``1 - beta``.
    """
    n = np.asarray(counts, dtype=np.float64)
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 0, (1.0 - beta) / (1.0 - beta ** safe), 1.0 - beta)


def _reduce(per_class: Tensor, reduction: str) -> Tensor:
    if reduction == "none":
        return per_class
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    if per_class.ndim == 1:
        return per_class.mean()
    return per_class.mean(axis=-1).mean()


def cb_focal_loss(p, y, counts=None, beta: float = 0.9999, gamma: float = 0.5,
                  reduction: str = "mean") -> Tensor:
    """Class-balanced focal loss on probabilities ``p`` with binary targets ``y``.

    Mean over classes, then over samples. ``counts=None`` means unit weights.
    """
    p = ad.clip(ad.as_tensor(p), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {p.shape}")
    p_y = p * y + (1.0 - p) * (1.0 - y)
    nll = -ad.log(p_y)
    per = nll if gamma == 0 else (1.0 - p_y) ** gamma * nll
    if counts is not None:
        per = per * class_weights(counts, beta)
    return _reduce(per, reduction)


def focal_loss(p, y, gamma: float = 0.5, reduction: str = "mean") -> Tensor:
    return cb_focal_loss(p, y, None, gamma=gamma, reduction=reduction)


def bce_loss(p, y, reduction: str = "mean") -> Tensor:
    p = ad.clip(ad.as_tensor(p), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    per = -(ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y))
    return _reduce(per, reduction)


def mlm_loss(scores, y) -> Tensor:
    """Multi-label margin loss: mean of ``max(0, 1 - s_pos + s_neg)`` over
    (positive, negative) class pairs, then over samples."""
    s = ad.as_tensor(scores)
    y = np.asarray(y).astype(bool)
    if s.ndim == 1:
        s = s.reshape(1, -1)
        y = y.reshape(1, -1)
    pos_count = y.sum(axis=1)
    if (pos_count == 0).any():
        raise NoPositiveLabel("multi-label margin loss needs a positive class in every sample")
    b, c = s.shape
    pairs = y[:, :, None] & ~y[:, None, :]
    hinge = ad.relu(1.0 - s.reshape(b, c, 1) + s.reshape(b, 1, c))
    n_pairs = pairs.sum(axis=(1, 2))
    weight = pairs / np.maximum(n_pairs, 1)[:, None, None]
    return (hinge * weight).sum() * (1.0 / b)


def softmax_ce(p: Tensor, y: np.ndarray) -> Tensor:
    target = np.argmax(y, axis=1)
    picked = ad.index(p, (np.arange(len(target)), target))
    return (-ad.log(ad.clip(picked, PROB_EPS, 1.0))).mean()


def compute_loss(out: ModelOutput, targets: np.ndarray, heads_spec, loss: LossConfig,
                 counts: Optional[np.ndarray] = None) -> Tensor:
    """Sum over prediction heads of the configured per-head loss."""
    total = None
    start = 0
    for (name, n, act), p, s in zip(heads_spec, out.probs, out.logits):
        y = targets[:, start:start + n]
        c = None if counts is None else counts[start:start + n]
        start += n
        if act == "softmax":
            rows = np.flatnonzero(y.any(axis=1))
            if not len(rows):
                continue
            term = softmax_ce(ad.take(p, rows), y[rows])
        elif loss.kind == "cb_focal":
            term = cb_focal_loss(p, y, c, loss.beta, loss.gamma)
        elif loss.kind == "focal":
            term = focal_loss(p, y, loss.gamma)
        elif loss.kind == "bce":
            term = bce_loss(p, y)
        else:
            rows = np.flatnonzero(y.any(axis=1))
            if not len(rows):
                continue
            term = mlm_loss(ad.take(s, rows), y[rows])
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
               state: OptimizerState) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for k, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {k}", step=state.step)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("parameter and gradient shapes differ")
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, params: Sequence[Tensor], cfg: OptimConfig = OptimConfig()):
        self.params = list(params)
        self.state = OptimizerState.for_params(
            [p.data for p in self.params], weight_decay=cfg.weight_decay,
            beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    def step(self, lr: float) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        adamw_step([p.data for p in self.params], grads, lr, self.state)


def lr_schedule(epoch: int, steps_per_epoch: int, step: int, cfg: OptimConfig = OptimConfig(),
                total_epochs: int = 25) -> float:
    """Step-wise linear warm-up, then one decade of per-epoch exponential decay
    spread so that the final epoch runs at ``decay * lr_peak``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        total = cfg.warmup_epochs * steps_per_epoch
        frac = (epoch * steps_per_epoch + step) / total
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * frac
    span = total_epochs - cfg.warmup_epochs - 1
    if span <= 0:
        return cfg.lr_peak
    return cfg.lr_peak * cfg.decay ** ((epoch - cfg.warmup_epochs) / span)


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: HOIModel
    log: list[dict]
    counts: np.ndarray
    windows: dict


def training_windows(videos, model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    """Windows per video, keeping only pairs that still exist at the label frame."""
    out = {}
    for v in videos:
        ws = build_windows(v, model_cfg.window, train_cfg.tau_a, train_cfg.full_history_only,
                           model_cfg.num_outputs)
        out[v.video_id] = [w for w in ws if w.label_present]
    return out


def _batches(wbv, cfg: TrainConfig, seed: int) -> list:
    if cfg.sampling == "video":
        return sample_epoch(wbv, cfg.batch_size, seed)
    rng = np.random.default_rng(seed)
    if cfg.sampling == "window":
        flat = [w for vid in sorted(wbv) for w in wbv[vid]]
        order = rng.permutation(len(flat))
        return [[flat[k] for k in order[i:i + cfg.batch_size]]
                for i in range(0, len(flat), cfg.batch_size)]
    ids = sorted(vid for vid, ws in wbv.items() if ws)
    order = rng.permutation(len(ids))
    return [list(wbv[ids[k]]) for k in order]


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_videos, source, seed: int = 0,
          val_videos=None, log_path=None, ckpt_dir=None,
          eval_fn: Optional[Callable] = None,
          progress: Optional[Callable[[dict], None]] = None,
          ckpt_extra: Optional[dict] = None) -> TrainResult:
    """Train a model and return it with the per-epoch log.

    ``eval_fn(model, frames)`` supplies validation metrics; when omitted and
    ``val_videos`` is given, oracle-mode metrics at the training gap are used.
    ``ckpt_extra`` is stored in every checkpoint next to the epoch and seed.
    """
    frames = FrameCache(list(train_videos) + list(val_videos or []), source)
    wbv = training_windows(train_videos, model_cfg, train_cfg)
    counts = class_statistics(train_videos, model_cfg.num_outputs).predicate_counts
    model = HOIModel(model_cfg, seed)
    opt = AdamW(model.parameters(), train_cfg.optim)
    streams = np.random.SeedSequence(seed).spawn(3)
    sample_seeds = np.random.default_rng(streams[0])
    flip_rng = np.random.default_rng(streams[1])
    drop_rng = np.random.default_rng(streams[2])
    if eval_fn is None and val_videos:
        from .evaluation import evaluate_model

        def eval_fn(m, fr):
            return evaluate_model(m, val_videos, fr, tau_a=train_cfg.tau_a).summary()

    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    log = []
    global_step = 0
    try:
        for epoch in range(train_cfg.epochs):
            t0 = time.perf_counter()
            batches = _batches(wbv, train_cfg, int(sample_seeds.integers(2**63)))
            losses = []
            lr = None
            for step, batch in enumerate(batches):
                if train_cfg.flip:
                    batch = [horizontal_flip(w) if flip_rng.random() < 0.5 else w for w in batch]
                out = model.forward(batch, frames, True, drop_rng)
                targets = np.stack([w.target for w in batch])
                loss = compute_loss(out, targets, model_cfg.heads_spec, train_cfg.loss, counts)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError("non-finite loss", step=global_step)
                model.zero_grad()
                model.backward(loss, step=global_step)
                lr = lr_schedule(epoch, len(batches), step, train_cfg.optim, train_cfg.epochs)
                try:
                    opt.step(lr)
                except NonFiniteError as exc:
                    raise NonFiniteError(str(exc), step=global_step) from exc
                losses.append(value)
                global_step += 1
            record = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses)) if losses else 0.0,
                      "lr": lr, "steps": len(batches)}
            last = epoch + 1 == train_cfg.epochs
            if eval_fn is not None and ((epoch + 1) % train_cfg.eval_every == 0 or last):
                record["val"] = eval_fn(model, frames)
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if ckpt_dir is not None:
                Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, Path(ckpt_dir) / f"epoch_{epoch + 1:03d}.ckpt",
                                extra={**(ckpt_extra or {}), "epoch": epoch + 1, "seed": seed})
            if progress:
                progress({**record, "seconds": time.perf_counter() - t0})
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, log, counts, wbv)


def config_dict(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {"model": model_cfg.to_dict(), "train": asdict(train_cfg)}
