"""Gaze-aware spatio-temporal transformer for human-object interactions.

A frame's pair representations pass through a spatial encoder with a
learnable global token. For each human-object pair the sliding window of
refined representations is then fused with a per-human context window
(global token output plus gaze embedding) by a temporal encoder whose first
layer cross-attends to that context. Prediction heads read the last
position only.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .errors import CheckpointMismatch, ConfigError, NonFiniteError, ShapeError
from .features import FeatureBundle

GAZE_MODES = ("none", "concat", "cross")
PE_MODES = ("sine", "learned")
WINDOW_MODES = ("pairwise", "framewise")
HUMAN_TARGETS = ("object", "human")
VIDHOI_HEADS = (("spatial", 8, "sigmoid"), ("action", 42, "sigmoid"))


@dataclass
class ModelConfig:
    visual_dim: int = 2048
    d_human: int = 512
    d_object: int = 512
    d_relation: int = 256
    d_mask: int = 256
    semantic_dim: int = 200
    d_gaze: int = 512
    d_ffn: int = 2048
    heads: int = 8
    n_spatial: int = 1
    n_temporal: int = 3
    window: int = 6
    dropout: float = 0.1
    gaze_mode: str = "cross"
    pe_mode: str = "sine"
    window_mode: str = "pairwise"
    global_token: bool = True
    heads_spec: tuple = VIDHOI_HEADS
    mask_size: int = 27
    gaze_size: int = 64
    conv_channels: tuple = (32, 64)
    conv_kernel: int = 5
    pool_grid: int = 4
    human_target: str = "object"

    def __post_init__(self):
        self.heads_spec = tuple(tuple(h) for h in self.heads_spec)
        self.conv_channels = tuple(self.conv_channels)
        self.validate()

    @property
    def d_pair(self) -> int:
        return self.d_human + self.d_object + self.d_relation + self.d_mask + self.semantic_dim

    @property
    def d_model(self) -> int:
        return self.d_pair + (self.d_gaze if self.gaze_mode == "concat" else 0)

    @property
    def num_outputs(self) -> int:
        return sum(n for _, n, _ in self.heads_spec)

    def validate(self) -> None:
        for name, value, choices in (("gaze_mode", self.gaze_mode, GAZE_MODES),
                                     ("pe_mode", self.pe_mode, PE_MODES),
                                     ("window_mode", self.window_mode, WINDOW_MODES),
                                     ("human_target", self.human_target, HUMAN_TARGETS)):
            if value not in choices:
                raise ConfigError(f"{name} must be one of {choices}, got {value!r}")
        if not self.heads_spec:
            raise ConfigError("heads_spec must not be empty")
        for name, n, act in self.heads_spec:
            if act not in ("sigmoid", "softmax") or n < 1:
                raise ConfigError(f"bad head {name!r}: ({n}, {act})")
        if self.n_temporal < 1 or self.n_spatial < 0 or self.window < 1 or self.heads < 1:
            raise ConfigError("layer counts, window and heads must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.pe_mode == "sine" and self.d_model % 2:
            raise ConfigError("sinusoidal encoding needs an even model width")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads_spec"] = [list(h) for h in self.heads_spec]
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, **over) -> "ModelConfig":
        """A reduced-width preset that trains in minutes on one CPU core."""
        base = dict(visual_dim=128, d_human=32, d_object=32, d_relation=16, d_mask=16,
                    semantic_dim=16, d_gaze=32, d_ffn=128, heads=4, conv_channels=(8, 16))
        base.update(over)
        return cls(**base)


@dataclass
class Ctx:
    training: bool = False
    rng: Optional[np.random.Generator] = None


# ---------------------------------------------------------------- layers


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, list):
                for k, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _xavier(rng, d_in, d_out):
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, (d_in, d_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng):
        self.weight = parameter(_xavier(rng, d_in, d_out))
        self.bias = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear layer expects width {self.weight.shape[0]}, got {x.shape[-1]}")
        if x.ndim == 2:
            return x @ self.weight + self.bias
        lead = x.shape[:-1]
        y = x.reshape(-1, x.shape[-1]) @ self.weight + self.bias
        return y.reshape(lead + (self.weight.shape[1],))


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is added to the logits before the softmax.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values disagree on sequence length")
    dk = q.shape[-1]
    if dk == 0 or k.shape[-1] != dk:
        raise ShapeError("query and key widths must agree and be positive")
    kt = ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    logits = (q @ kt) * (1.0 / math.sqrt(dk))
    if mask is not None:
        logits = logits + mask
    return ad.softmax(logits, axis=-1) @ v


class MultiHeadAttention(Module):
    """Multi-head attention with per-head width ``ceil(d / heads)``."""

    def __init__(self, d_q: int, d_kv: int, heads: int, rng):
        self.heads = heads
        self.head_dim = -(-d_q // heads)
        inner = self.head_dim * heads
        self.q = Linear(d_q, inner, rng)
        self.k = Linear(d_kv, inner, rng)
        self.v = Linear(d_kv, inner, rng)
        self.o = Linear(inner, d_q, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, xq: Tensor, xkv: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        b, n, _ = xq.shape
        add = None
        if key_mask is not None:
            add = np.where(key_mask, 0.0, -1e9)[:, None, None, :]
        out = attention(self._split(self.q(xq)), self._split(self.k(xkv)),
                        self._split(self.v(xkv)), add)
        out = out.transpose(0, 2, 1, 3).reshape(b, n, self.heads * self.head_dim)
        return self.o(out)


class FeedForward(Module):
    def __init__(self, d: int, d_ffn: int, rng):
        self.lin1 = Linear(d, d_ffn, rng)
        self.lin2 = Linear(d_ffn, d, rng)

    def __call__(self, x: Tensor, p: float, ctx: Ctx) -> Tensor:
        return self.lin2(ad.dropout(ad.relu(self.lin1(x)), p, ctx.rng, ctx.training))


def _select(x: Tensor, query_pos: Optional[np.ndarray]) -> Tensor:
    """Rows ``x[b, query_pos[b]]`` as a (B, 1, d) tensor, or ``x`` itself."""
    if query_pos is None:
        return x
    b, s, d = x.shape
    rows = np.arange(b) * s + np.asarray(query_pos)
    return ad.take(x.reshape(b * s, d), rows).reshape(b, 1, d)


class EncoderLayer(Module):
    """Post-norm self-attention encoder layer."""

    kind = "self"

    def __init__(self, d: int, heads: int, d_ffn: int, dropout: float, rng):
        self.attn = MultiHeadAttention(d, d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ffn, rng)
        self.norm2 = LayerNorm(d)
        self.p = dropout

    def __call__(self, x: Tensor, key_mask, ctx: Ctx, query_pos=None) -> Tensor:
        q = _select(x, query_pos)
        h = self.norm1(q + ad.dropout(self.attn(q, x, key_mask), self.p, ctx.rng, ctx.training))
        return self.norm2(h + ad.dropout(self.ffn(h, self.p, ctx), self.p, ctx.rng, ctx.training))


class CrossEncoderLayer(Module):
    """Self-attention over the context window, then cross-attention from the
    pair window into it, then a feed-forward block."""

    kind = "cross"

    def __init__(self, d: int, heads: int, d_ffn: int, dropout: float, rng):
        self.ctx_attn = MultiHeadAttention(d, d, heads, rng)
        self.ctx_norm = LayerNorm(d)
        self.cross = MultiHeadAttention(d, d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ffn, rng)
        self.norm2 = LayerNorm(d)
        self.p = dropout

    def __call__(self, x: Tensor, context: Tensor, ctx: Ctx, query_pos=None) -> Tensor:
        drop = lambda t: ad.dropout(t, self.p, ctx.rng, ctx.training)  # noqa: E731
        c = self.ctx_norm(context + drop(self.ctx_attn(context, context)))
        q = _select(x, query_pos)
        h = self.norm1(q + drop(self.cross(q, c)))
        return self.norm2(h + drop(self.ffn(h, self.p, ctx)))


class ConvEncoder(Module):
    """Two strided convolutions, average pooling to a small grid, linear map."""

    def __init__(self, in_ch: int, channels: Sequence[int], kernel: int, pool: int,
                 d_out: int, rng):
        c1, c2 = channels
        self.w1 = parameter(rng.standard_normal((kernel, kernel, in_ch, c1))
                            * math.sqrt(2.0 / (kernel * kernel * in_ch)))
        self.b1 = parameter(np.zeros(c1))
        self.w2 = parameter(rng.standard_normal((kernel, kernel, c1, c2))
                            * math.sqrt(2.0 / (kernel * kernel * c1)))
        self.b2 = parameter(np.zeros(c2))
        self.fc = Linear(c2 * pool * pool, d_out, rng)
        self.pool = pool
        self.pad = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.conv2d(x, self.w1, self.b1, stride=2, pad=self.pad))
        h = ad.conv2d(h, self.w2, self.b2, stride=2, pad=self.pad)
        h = ad.adaptive_avg_pool(h, self.pool, self.pool)
        return self.fc(h.reshape(h.shape[0], -1))


def sinusoidal_pe(length: int, d: int) -> np.ndarray:
    """Sinusoidal position table: sine on even channels, cosine on odd ones."""
    if d % 2:
        raise ValueError("sinusoidal encoding needs an even width")
    pos = np.arange(length)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2) / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def predict(fused: Tensor, heads: Sequence[Linear], heads_spec) -> tuple[list, list, Tensor]:
    """Apply every head; returns (logits, probabilities, concatenated z)."""
    logits, probs = [], []
    for layer, (_, _, act) in zip(heads, heads_spec):
        s = layer(fused)
        logits.append(s)
        probs.append(ad.sigmoid(s) if act == "sigmoid" else ad.softmax(s, axis=-1))
    return logits, probs, ad.concat(probs, axis=-1)


@dataclass
class ModelOutput:
    logits: list
    probs: list
    z: Tensor
    shapes: dict = field(default_factory=dict)


# ---------------------------------------------------------------- model


class HOIModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = cfg = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
        d = cfg.d_model
        self.w_s = Linear(cfg.visual_dim, cfg.d_human, rng)
        self.w_o = Linear(cfg.visual_dim, cfg.d_object, rng)
        self.w_vr = Linear(cfg.visual_dim, cfg.d_relation, rng)
        self.f_mask = ConvEncoder(2, cfg.conv_channels, cfg.conv_kernel, cfg.pool_grid,
                                  cfg.d_mask, rng)
        if cfg.gaze_mode != "none":
            self.f_gaze = ConvEncoder(1, cfg.conv_channels, cfg.conv_kernel, cfg.pool_grid,
                                      cfg.d_gaze, rng)
        if cfg.global_token:
            self.global_token = parameter(rng.standard_normal((1, d)) * 0.02)
        self.spatial = [EncoderLayer(d, cfg.heads, cfg.d_ffn, cfg.dropout, rng)
                        for _ in range(cfg.n_spatial)]
        if cfg.gaze_mode != "concat":
            ctx_in = cfg.d_pair + (cfg.d_gaze if cfg.gaze_mode == "cross" else 0)
            self.ctx_proj = Linear(ctx_in, cfg.d_pair, rng)
            first = CrossEncoderLayer(d, cfg.heads, cfg.d_ffn, cfg.dropout, rng)
        else:
            first = EncoderLayer(d, cfg.heads, cfg.d_ffn, cfg.dropout, rng)
        self.temporal = [first] + [EncoderLayer(d, cfg.heads, cfg.d_ffn, cfg.dropout, rng)
                                   for _ in range(cfg.n_temporal - 1)]
        if cfg.pe_mode == "learned":
            self.pos_table = parameter(rng.standard_normal((cfg.window, d)) * 0.02)
        else:
            self._sine = Tensor(sinusoidal_pe(cfg.window, d))
        self.heads = [Linear(d, n, rng) for _, n, _ in cfg.heads_spec]

    # ------------------------------------------------------------ pieces
    def temporal_layer_kinds(self) -> list[str]:
        return [layer.kind for layer in self.temporal]

    def positional(self) -> Tensor:
        return self.pos_table if self.config.pe_mode == "learned" else self._sine

    def embed(self, v_s, v_o, v_rel, mask, semantic, object_is_human=None) -> Tensor:
        """Stacked pair representations ``[human | object | relation | mask | semantic]``."""
        cfg = self.config
        v_s, v_o, v_rel = (np.atleast_2d(a) for a in (v_s, v_o, v_rel))
        for name, a in (("v_s", v_s), ("v_o", v_o), ("v_rel", v_rel)):
            if a.shape[1] != cfg.visual_dim:
                raise ShapeError(f"{name} has width {a.shape[1]}, expected {cfg.visual_dim}")
        semantic = np.atleast_2d(semantic)
        if semantic.shape[1] != cfg.semantic_dim:
            raise ShapeError(f"semantic width {semantic.shape[1]} != {cfg.semantic_dim}")
        mask = np.asarray(mask, dtype=np.float64).reshape(-1, 2, cfg.mask_size, cfg.mask_size)
        hs = ad.l2_normalize(self.w_s(Tensor(v_s)))
        ob = self.w_o(Tensor(v_o))
        if cfg.human_target == "human" and object_is_human is not None and np.any(object_is_human):
            m = np.asarray(object_is_human, dtype=np.float64)[:, None]
            ob = ob * (1.0 - m) + self.w_s(Tensor(v_o)) * m
        parts = [hs, ad.l2_normalize(ob), ad.l2_normalize(self.w_vr(Tensor(v_rel))),
                 ad.l2_normalize(self.f_mask(Tensor(mask.transpose(0, 2, 3, 1)))),
                 ad.l2_normalize(Tensor(semantic))]
        return ad.concat(parts, axis=-1)

    def embed_gaze(self, gaze) -> Tensor:
        cfg = self.config
        gaze = np.asarray(gaze, dtype=np.float64)
        if gaze.shape[-2:] != (cfg.gaze_size, cfg.gaze_size):
            raise ShapeError(f"gaze maps must be {cfg.gaze_size}x{cfg.gaze_size}")
        return ad.l2_normalize(self.f_gaze(Tensor(gaze.reshape(-1, cfg.gaze_size, cfg.gaze_size, 1))))

    def embed_inputs(self, bundle: FeatureBundle) -> tuple[Tensor, Optional[Tensor]]:
        """Pair representation and gaze embedding for one bundle."""
        x = self.embed(bundle.v_s, bundle.v_o, bundle.v_rel, bundle.mask[None],
                       bundle.semantic, [bundle.object_is_human])
        g = self.embed_gaze(bundle.gaze[None]) if self.config.gaze_mode != "none" else None
        if self.config.gaze_mode == "concat":
            x = ad.concat([x, g], axis=-1)
        return x[0], (None if g is None else g[0])

    def spatial_encode(self, x: Tensor, counts: Sequence[int], ctx: Ctx):
        """Run the spatial encoder over frames packed row-wise in ``x``.

        Returns refined representations laid out as (frames * n_max, d) and
        the per-frame global feature (frames, d).
        """
        cfg = self.config
        f, n_max, d = len(counts), max(counts), x.shape[-1]
        if min(counts) < 1:
            raise ShapeError("every frame needs at least one pair")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pad_row = int(sum(counts))
        idx = np.full((f, n_max), pad_row, dtype=np.int64)
        valid = np.zeros((f, n_max), dtype=bool)
        for k, (s, n) in enumerate(zip(starts, counts)):
            idx[k, :n] = np.arange(s, s + n)
            valid[k, :n] = True
        xz = ad.concat([x, Tensor(np.zeros((1, d)))], axis=0)
        seq = ad.take(xz, idx)
        key_mask = valid
        if cfg.global_token:
            tok = ad.take(self.global_token, np.zeros(f, dtype=np.int64)).reshape(f, 1, d)
            seq = ad.concat([tok, seq], axis=1)
            key_mask = np.concatenate([np.ones((f, 1), dtype=bool), valid], axis=1)
        for layer in self.spatial:
            seq = layer(seq, key_mask, ctx)
        if cfg.global_token:
            c = seq[:, 0, :]
            refined = seq[:, 1:, :]
        else:
            refined = seq
            w = valid / valid.sum(axis=1, keepdims=True)
            c = (refined * w[:, :, None]).sum(axis=1)
        return refined.reshape(f * n_max, d), c, n_max

    def build_context(self, c_seq: Tensor, g_seq: Optional[Tensor]) -> Tensor:
        """Project ``[c_t | g'_t]`` (or ``c_t`` alone) to the pair width and add positions."""
        if self.config.gaze_mode == "cross":
            if g_seq is None:
                raise ShapeError("cross mode needs gaze features")
            c_seq = ad.concat([c_seq, g_seq], axis=-1)
        return self.ctx_proj(c_seq) + self.positional()

    def temporal_encode(self, pairs: Tensor, context: Optional[Tensor], ctx: Ctx,
                        key_mask=None, query_pos=None) -> Tensor:
        """Fuse pair windows (B, S, d) with context windows (B, L, d).

        Only the vector at ``query_pos`` (default: last position) is returned.
        """
        b, s, d = pairs.shape
        if query_pos is None:
            query_pos = np.full(b, s - 1)
        x = pairs
        last = len(self.temporal) - 1
        for k, layer in enumerate(self.temporal):
            qp = query_pos if k == last else None
            if layer.kind == "cross":
                if context is None:
                    raise ShapeError("cross-attention layer needs a context window")
                x = layer(x, context, ctx, qp)
            else:
                x = layer(x, key_mask, ctx, qp)
        return x.reshape(b, d)

    # ------------------------------------------------------------ forward
    def forward(self, windows, frames, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> ModelOutput:
        """Per-window predictions for a batch of window samples.

        ``frames`` is a :class:`gazehoi.features.FrameCache` for the videos.
        """
        cfg = self.config
        if not windows:
            raise ShapeError("empty batch")
        for w in windows:
            if len(w.frames) != cfg.window:
                raise ShapeError(f"window of length {len(w.frames)} != {cfg.window}")
        ctx = Ctx(training, rng)
        keys = sorted({(w.video_id, t, w.flipped) for w in windows for t in w.frames})
        fpos = {k: n for n, k in enumerate(keys)}
        data = [frames.frame(*k) for k in keys]
        counts = [len(fd.pairs) for fd in data]
        pair_slot = [{p: k for k, p in enumerate(fd.pairs)} for fd in data]
        h_start = np.concatenate([[0], np.cumsum([len(fd.humans) for fd in data])[:-1]])
        human_row = [{h: int(h_start[n]) + k for k, h in enumerate(fd.humans)}
                     for n, fd in enumerate(data)]

        cat = np.concatenate
        x = self.embed(cat([fd.v_s for fd in data]), cat([fd.v_o for fd in data]),
                       cat([fd.v_rel for fd in data]), cat([fd.mask for fd in data]),
                       cat([fd.semantic for fd in data]),
                       cat([fd.object_is_human for fd in data]))
        shapes = {"x": x.shape}
        g = None
        if cfg.gaze_mode != "none":
            g = self.embed_gaze(cat([fd.gaze for fd in data]))
            shapes["g"] = g.shape
        if cfg.gaze_mode == "concat":
            rows = [human_row[n][h] for n, fd in enumerate(data) for h, _ in fd.pairs]
            x = ad.concat([x, ad.take(g, rows)], axis=-1)

        refined, c, n_max = self.spatial_encode(x, counts, ctx)
        shapes["refined"], shapes["c"] = refined.shape, c.shape

        b, length = len(windows), cfg.window
        frame_idx = np.empty((b, length), dtype=np.int64)
        pair_idx = np.empty((b, length), dtype=np.int64)
        gaze_idx = np.empty((b, length), dtype=np.int64)
        for i, w in enumerate(windows):
            for l, t in enumerate(w.frames):
                n = fpos[(w.video_id, t, w.flipped)]
                frame_idx[i, l] = n
                pair_idx[i, l] = n * n_max + pair_slot[n][w.pair]
                gaze_idx[i, l] = human_row[n].get(w.human_id, -1)

        context = None
        if cfg.gaze_mode != "concat":
            c_seq = ad.take(c, frame_idx)
            g_seq = ad.take(g, gaze_idx) if cfg.gaze_mode == "cross" else None
            context = self.build_context(c_seq, g_seq)
            shapes["context"] = context.shape

        pe = self.positional()
        if cfg.window_mode == "pairwise":
            seq = ad.take(refined, pair_idx) + pe
            fused = self.temporal_encode(seq, context, ctx)
        else:
            seq, key_mask, query_pos = self._framewise(refined, pe, windows, frame_idx,
                                                       pair_idx, counts, n_max)
            fused = self.temporal_encode(seq, context, ctx, key_mask, query_pos)
        shapes["fused"] = fused.shape
        logits, probs, z = predict(fused, self.heads, cfg.heads_spec)
        if not np.isfinite(z.data).all():
            raise NonFiniteError("non-finite model output in forward pass")
        return ModelOutput(logits, probs, z, shapes)

    __call__ = forward

    def _framewise(self, refined, pe, windows, frame_idx, pair_idx, counts, n_max):
        """All pairs of every window frame in one padded sequence."""
        b, length = frame_idx.shape
        rows, slots, targets = [], [], []
        for i in range(b):
            r, s = [], []
            for l in range(length):
                n = frame_idx[i, l]
                if l == length - 1:
                    targets.append(len(r) + int(pair_idx[i, l] - n * n_max))
                r.extend(range(n * n_max, n * n_max + counts[n]))
                s.extend([l] * counts[n])
            rows.append(r)
            slots.append(s)
        s_max = max(len(r) for r in rows)
        pad = refined.shape[0]
        idx = np.full((b, s_max), pad, dtype=np.int64)
        slot_idx = np.zeros((b, s_max), dtype=np.int64)
        key_mask = np.zeros((b, s_max), dtype=bool)
        for i, (r, s) in enumerate(zip(rows, slots)):
            idx[i, :len(r)] = r
            slot_idx[i, :len(s)] = s
            key_mask[i, :len(r)] = True
        d = refined.shape[1]
        table = ad.concat([refined, Tensor(np.zeros((1, d)))], axis=0)
        seq = ad.take(table, idx) + ad.take(pe, slot_idx) * Tensor(key_mask[:, :, None])
        return seq, key_mask, np.asarray(targets)

    def backward(self, loss: Tensor, step: Optional[int] = None) -> None:
        loss.backward()
        for name, p in self.named_parameters():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for {name}", step=step)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = set(own) - set(state), set(state) - set(own)
            raise CheckpointMismatch(f"parameter names differ: missing {sorted(missing)[:5]}, "
                                     f"unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointMismatch(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(np.float64).copy()


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GZHOICKP"
CKPT_VERSION = 1


def save_checkpoint(model: HOIModel, path, extra: Optional[dict] = None) -> None:
    """Write config and named float32 tensors to a versioned binary file."""
    meta = json.dumps({"config": model.config.to_dict(), "extra": extra or {}},
                      sort_keys=True).encode("utf-8")
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<III", CKPT_VERSION, len(meta), len(params)))
        fh.write(meta)
        for name, p in params:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<HB", len(raw), p.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(p.data.astype("<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointMismatch(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    version, meta_len, count = struct.unpack_from("<III", buf, pos)
    if version != CKPT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {version}")
    pos += 12
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    tensors = {}
    try:
        for _ in range(count):
            n, ndim = struct.unpack_from("<HB", buf, pos)
            pos += 3
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(buf, "<f4", size, pos).reshape(shape).astype(np.float64)
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointMismatch(f"{path}: truncated checkpoint ({exc})") from exc
    return meta, tensors


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> HOIModel:
    """Rebuild a model from a checkpoint, verifying names and shapes.

    When ``config`` is given it must agree with the stored configuration.
    """
    meta, tensors = read_checkpoint(path)
    try:
        stored = ModelConfig.from_dict(meta["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointMismatch(f"{path}: stored config invalid ({exc})") from exc
    if config is not None and config.to_dict() != stored.to_dict():
        diff = sorted(k for k, v in config.to_dict().items() if stored.to_dict().get(k) != v)
        raise CheckpointMismatch(f"{path}: config differs in {diff}")
    model = HOIModel(stored)
    model.load_state_dict(tensors)
    return model
