"""Per-pair input features: synthetic generators, the binary feature store,
and assembly of pair bundles for the model.

The synthetic generators stand in for frozen CNN, word-embedding and gaze
networks. Every generator is a pure function of its arguments and seed.
"""
from __future__ import annotations

import mmap
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import DimensionError, SchemaError, UnknownClass
from .geometry import BoundingBox, spatial_mask
from .vocab import HUMAN_CLASS

VISUAL_DIM = 2048
SEMANTIC_DIM = 200
GAZE_SIZE = 64

KIND_HUMAN, KIND_OBJECT, KIND_RELATION, KIND_SEMANTIC, KIND_GAZE = range(5)
KINDS = (KIND_HUMAN, KIND_OBJECT, KIND_RELATION, KIND_SEMANTIC, KIND_GAZE)


@dataclass
class FeatureBundle:
    v_s: np.ndarray
    v_o: np.ndarray
    v_rel: np.ndarray
    mask: np.ndarray
    semantic: np.ndarray
    gaze: np.ndarray
    object_is_human: bool = False

    def validate(self) -> None:
        for name in ("v_s", "v_o", "v_rel", "semantic", "gaze"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"non-finite entries in {name}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        if (self.gaze < 0).any():
            raise ValueError("gaze heatmap must be non-negative")


# ---------------------------------------------------------------- synthetic


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def class_base(class_id: int, seed: int, dim: int = VISUAL_DIM) -> np.ndarray:
    return _rng(seed, 0, class_id).standard_normal(dim)


def synth_visual(track_id: int, class_id: int, t: int, seed: int, dim: int = VISUAL_DIM,
                 perturbation: float = 0.1) -> np.ndarray:
    """Class-conditioned visual feature with a small track/time perturbation."""
    base = class_base(class_id, seed, dim)
    if perturbation == 0:
        return base
    return base + perturbation * _rng(seed, 1, class_id, track_id, t).standard_normal(dim)


def synth_relation(track_a: int, track_b: int, t: int, seed: int, dim: int = VISUAL_DIM,
                   perturbation: float = 0.1) -> np.ndarray:
    """Union-region stand-in keyed by the unordered pair."""
    lo, hi = sorted((track_a, track_b))
    base = _rng(seed, 2, lo, hi).standard_normal(dim)
    if perturbation == 0:
        return base
    return base + perturbation * _rng(seed, 3, lo, hi, t).standard_normal(dim)


def predicate_direction(predicate: int, seed: int, dim: int = VISUAL_DIM) -> np.ndarray:
    """Fixed direction added to relation features when a predicate holds."""
    return _rng(seed, 4, predicate).standard_normal(dim)


class SemanticTable:
    """Row lookup of per-class word vectors.

    By default rows are seeded Gaussian vectors scaled to unit norm; with
    ``from_file`` the rows of a ``.npy`` table are returned unchanged.
    """

    def __init__(self, num_classes: int = 78, dim: int = SEMANTIC_DIM, seed: int = 0,
                 table: Optional[np.ndarray] = None):
        if table is None:
            table = _rng(seed, 5).standard_normal((num_classes, dim))
            table /= np.linalg.norm(table, axis=1, keepdims=True)
        self.table = np.asarray(table)

    @classmethod
    def from_file(cls, path) -> "SemanticTable":
        table = np.load(path, allow_pickle=False)
        if table.ndim != 2:
            raise SchemaError(f"{path}: semantic table must be 2-D")
        return cls(table=table)

    @property
    def num_classes(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __call__(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.num_classes:
            raise UnknownClass(f"class id {class_id} outside table of {self.num_classes}")
        return self.table[class_id]


def semantic_embedding(class_id: int, table: Optional[SemanticTable] = None) -> np.ndarray:
    return (table or _default_table())(class_id)


_DEFAULT_TABLE: Optional[SemanticTable] = None


def _default_table() -> SemanticTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = SemanticTable()
    return _DEFAULT_TABLE


def synth_gaze(human_box: Optional[BoundingBox], target_point: Optional[Sequence[float]],
               frame_size: tuple[float, float], size: int = GAZE_SIZE, sigma: float = 3.0,
               peak: float = 1.0) -> np.ndarray:
    """Gaussian gaze heatmap on a ``size`` x ``size`` grid (rows index y).

    ``human_box`` is accepted for interface parity with a learned gaze model
    and does not affect the synthetic map. An absent target gives a flat map
    of ``1 / size**2``.
    """
    if target_point is None:
        return np.full((size, size), 1.0 / (size * size))
    w, h = frame_size
    x, y = target_point
    if not (0 <= x <= w and 0 <= y <= h):
        raise ValueError(f"gaze target {target_point} outside frame {frame_size}")
    # cell k is centred on grid coordinate k
    u = x / w * size - 0.5
    v = y / h * size - 0.5
    k = np.arange(size, dtype=np.float64)
    gx = np.exp(-((k - u) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((k - v) ** 2) / (2 * sigma * sigma))
    return peak * np.outer(gy, gx)


# ---------------------------------------------------------------- feature store

MAGIC = b"HOIF1"
_HEADER = struct.Struct("<5sQ5I")
_KEY = struct.Struct("<IIBII")


class FeatureStoreWriter:
    """Sequential writer for the ``HOIF1`` record format.

    Layout (little-endian): magic, record count (u64), five u32 payload
    lengths indexed by kind, then records of ``(video u32, t u32, kind u8,
    id_a u32, id_b u32)`` followed by ``float32[dims[kind]]``.
    """

    def __init__(self, path, dims: Sequence[int]):
        if len(dims) != len(KINDS):
            raise SchemaError("dim table needs one entry per kind")
        self.path = Path(path)
        self.dims = tuple(int(d) for d in dims)
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, 0, *self.dims))
        self.count = 0

    def add(self, video: int, t: int, kind: int, id_a: int, id_b: int, vec) -> None:
        arr = np.asarray(vec, dtype="<f4").ravel()
        if arr.size != self.dims[kind]:
            raise DimensionError(f"kind {kind} expects {self.dims[kind]} values, got {arr.size}")
        self._fh.write(_KEY.pack(video, t, kind, id_a, id_b))
        self._fh.write(arr.tobytes())
        self.count += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(MAGIC, self.count, *self.dims))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FeatureStore:
    """Read-only, memory-mapped view of an ``HOIF1`` file.

    Opening scans record keys once to build an offset table; payloads are
    decoded lazily on lookup.
    """

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            size = os.fstat(fh.fileno()).st_size
            if size < _HEADER.size:
                raise SchemaError(f"{path}: file too short for header")
            self._mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        magic, count, *dims = _HEADER.unpack_from(self._mm, 0)
        if magic != MAGIC:
            raise SchemaError(f"{path}: bad magic {magic!r}")
        self.dims = tuple(dims)
        self.offsets: dict[tuple[int, int, int, int, int], int] = {}
        pos = _HEADER.size
        for n in range(count):
            if pos + _KEY.size > size:
                raise DimensionError(f"{path}: record {n} truncated in its key")
            key = _KEY.unpack_from(self._mm, pos)
            kind = key[2]
            if kind not in KINDS:
                raise SchemaError(f"{path}: record {n} has unknown kind {kind}")
            pos += _KEY.size
            end = pos + 4 * self.dims[kind]
            if end > size:
                raise DimensionError(f"{path}: record {n} payload truncated")
            self.offsets[key] = pos
            pos = end
        if pos != size:
            raise SchemaError(f"{path}: {size - pos} trailing bytes after {count} records")

    def __len__(self) -> int:
        return len(self.offsets)

    def __contains__(self, key) -> bool:
        return tuple(key) in self.offsets

    def get(self, video: int, t: int, kind: int, id_a: int, id_b: int = 0) -> np.ndarray:
        off = self.offsets[(video, t, kind, id_a, id_b)]
        return np.frombuffer(self._mm, dtype="<f4", count=self.dims[kind],
                             offset=off).astype(np.float64)

    def items(self):
        for key in self.offsets:
            yield key, self.get(*key)

    def close(self) -> None:
        self._mm.close()


def load_feature_file(path) -> FeatureStore:
    return FeatureStore(path)


# ---------------------------------------------------------------- sources


class FeatureSource(Protocol):
    def human(self, video, t: int, track: int) -> np.ndarray: ...
    def object(self, video, t: int, track: int) -> np.ndarray: ...
    def relation(self, video, t: int, h: int, o: int) -> np.ndarray: ...
    def semantic(self, class_id: int) -> np.ndarray: ...
    def gaze(self, video, t: int, h: int) -> np.ndarray: ...


class SyntheticFeatures:
    """Features generated on the fly from annotations."""

    def __init__(self, seed: int = 0, visual_dim: int = VISUAL_DIM,
                 semantic: Optional[SemanticTable] = None, perturbation: float = 0.1,
                 gaze_size: int = GAZE_SIZE, gaze_sigma: float = 3.0):
        self.seed = seed
        self.visual_dim = visual_dim
        self.table = semantic or SemanticTable(seed=seed)
        self.perturbation = perturbation
        self.gaze_size = gaze_size
        self.gaze_sigma = gaze_sigma

    @classmethod
    def for_config(cls, config, seed: int = 0, perturbation: float = 0.1) -> "SyntheticFeatures":
        """A source whose widths match a model configuration."""
        return cls(seed, config.visual_dim, SemanticTable(dim=config.semantic_dim, seed=seed),
                   perturbation, config.gaze_size)

    def human(self, video, t, track):
        return synth_visual(track, video.tracks[track].class_id, t, self.seed,
                            self.visual_dim, self.perturbation)

    object = human

    def relation(self, video, t, h, o):
        return synth_relation(h, o, t, self.seed, self.visual_dim, self.perturbation)

    def semantic(self, class_id):
        return self.table(class_id)

    def gaze(self, video, t, h):
        target = video.frame(t).gaze_targets.get(h)
        return synth_gaze(video.box(h, t), target, (video.width, video.height),
                          self.gaze_size, self.gaze_sigma)


class StoreFeatures:
    """Features read from an ``HOIF1`` store.

    Semantic rows are keyed ``(0, 0, KIND_SEMANTIC, class_id, 0)``; every
    other kind is keyed by video id, frame and track ids.
    """

    def __init__(self, store: FeatureStore):
        self.store = store
        self.gaze_size = int(round(np.sqrt(store.dims[KIND_GAZE])))

    def human(self, video, t, track):
        return self.store.get(video.video_id, t, KIND_HUMAN, track)

    def object(self, video, t, track):
        return self.store.get(video.video_id, t, KIND_OBJECT, track)

    def relation(self, video, t, h, o):
        return self.store.get(video.video_id, t, KIND_RELATION, h, o)

    def semantic(self, class_id):
        try:
            return self.store.get(0, 0, KIND_SEMANTIC, class_id)
        except KeyError as exc:
            raise UnknownClass(f"no semantic row for class {class_id}") from exc

    def gaze(self, video, t, h):
        g = self.store.get(video.video_id, t, KIND_GAZE, h)
        return g.reshape(self.gaze_size, self.gaze_size)


def pair_bundle(source: FeatureSource, video, t: int, h: int, o: int,
                flipped: bool = False) -> FeatureBundle:
    """Assemble the six inputs for one pair; masks always come from geometry."""
    hb, ob = video.box(h, t), video.box(o, t)
    if flipped:
        hb, ob = hb.flip(video.width), ob.flip(video.width)
    gaze = source.gaze(video, t, h)
    if flipped:
        gaze = gaze[:, ::-1]
    cls = video.tracks[o].class_id
    return FeatureBundle(
        v_s=source.human(video, t, h),
        v_o=source.object(video, t, o),
        v_rel=source.relation(video, t, h, o),
        mask=spatial_mask(hb, ob),
        semantic=source.semantic(cls),
        gaze=np.ascontiguousarray(gaze),
        object_is_human=cls == HUMAN_CLASS,
    )


@dataclass
class FrameData:
    """Stacked inputs for every candidate pair and human in one frame."""
    pairs: list[tuple[int, int]]
    humans: list[int]
    v_s: np.ndarray
    v_o: np.ndarray
    v_rel: np.ndarray
    mask: np.ndarray
    semantic: np.ndarray
    object_is_human: np.ndarray
    gaze: np.ndarray


class FrameCache:
    """Memoised per-frame feature stacks keyed by ``(video_id, t, flipped)``."""

    def __init__(self, videos, source: FeatureSource):
        self.videos = {v.video_id: v for v in videos}
        self.source = source
        self._cache: dict = {}

    def frame(self, video_id: int, t: int, flipped: bool = False) -> FrameData:
        key = (video_id, t, flipped)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self._build(self.videos[video_id], t, flipped)
        return hit

    def _build(self, video, t, flipped) -> FrameData:
        src = self.source
        pairs = video.candidate_pairs(t)
        humans = video.humans_at(t)
        v_s, v_o, v_rel, masks, sem, is_h = [], [], [], [], [], []
        for h, o in pairs:
            hb, ob = video.box(h, t), video.box(o, t)
            if flipped:
                hb, ob = hb.flip(video.width), ob.flip(video.width)
            cls = video.tracks[o].class_id
            v_s.append(src.human(video, t, h))
            v_o.append(src.object(video, t, o))
            v_rel.append(src.relation(video, t, h, o))
            masks.append(spatial_mask(hb, ob))
            sem.append(src.semantic(cls))
            is_h.append(cls == HUMAN_CLASS)
        gaze = [src.gaze(video, t, h) for h in humans]
        if flipped:
            gaze = [g[:, ::-1] for g in gaze]

        def stack(xs, shape):
            return np.stack(xs).astype(np.float64) if xs else np.zeros((0,) + shape)

        dv = len(v_s[0]) if v_s else 0
        return FrameData(
            pairs=pairs, humans=humans,
            v_s=stack(v_s, (dv,)), v_o=stack(v_o, (dv,)), v_rel=stack(v_rel, (dv,)),
            mask=stack(masks, (2, 27, 27)), semantic=stack(sem, (0,)),
            object_is_human=np.asarray(is_h, dtype=bool),
            gaze=np.ascontiguousarray(stack(gaze, (0, 0))),
        )
