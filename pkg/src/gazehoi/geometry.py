"""Box geometry, spatial relation masks and head-to-human association."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import NoFeasibleMatching

FORBIDDEN = math.inf
MASK_SIZE = 27


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in xs)
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def flip(self, frame_width: float) -> "BoundingBox":
        """Mirror horizontally inside a frame of the given width."""
        return BoundingBox(frame_width - self.x2, self.y1, frame_width - self.x1, self.y2)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def ioh(human: BoundingBox, head: BoundingBox) -> float:
    """Fraction of the head box covered by the human box."""
    return intersection_area(human, head) / head.area


def union_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    return BoundingBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def _footprint(box: BoundingBox, union: BoundingBox, size: int) -> np.ndarray:
    # cell centre c lies at union.x1 + (2c+1) * width / (2 size); compare in
    # scaled units so integer-valued boxes are tested exactly
    k = np.arange(size, dtype=np.float64) * 2 + 1
    two_s = 2.0 * size
    xs = k * union.width
    ys = k * union.height
    in_x = (two_s * (box.x1 - union.x1) <= xs) & (xs <= two_s * (box.x2 - union.x1))
    in_y = (two_s * (box.y1 - union.y1) <= ys) & (ys <= two_s * (box.y2 - union.y1))
    return (in_y[:, None] & in_x[None, :]).astype(np.uint8)


def spatial_mask(subject: BoundingBox, obj: BoundingBox, size: int = MASK_SIZE) -> np.ndarray:
    """Two-channel binary mask of both boxes inside their union box.

    Channel 0 is the subject, channel 1 the object; rows index y. A cell is set
    when its centre lies inside the box (borders inclusive).
    """
    u = union_box(subject, obj)
    return np.stack([_footprint(subject, u, size), _footprint(obj, u, size)])


@dataclass(frozen=True)
class Assignment:
    matches: tuple[tuple[int, int], ...]
    total_cost: float

    def as_dict(self) -> dict[int, int]:
        return dict(self.matches)


def _check_cost(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if np.isnan(cost).any() or np.isneginf(cost).any():
        raise ValueError("cost matrix entries must be finite or FORBIDDEN (+inf)")
    return cost


def _solve_raw(cost: np.ndarray) -> Optional[list[tuple[int, int]]]:
    """Optimal matching of min(R, C) pairs, or None if infeasible."""
    r, c = cost.shape
    if r == 0 or c == 0:
        return []
    if r <= c:
        cols = kernels.lap_solve(cost)
        if cols is None:
            return None
        return [(i, int(j)) for i, j in enumerate(cols)]
    rows = kernels.lap_solve(np.ascontiguousarray(cost.T))
    if rows is None:
        return None
    return sorted((int(i), j) for j, i in enumerate(rows))


def _fsum_at(cost, pairs) -> float:
    return math.fsum(cost[i, j] for i, j in pairs)


def solve_assignment(cost) -> Assignment:
    """Minimum-cost matching of ``min(R, C)`` pairs avoiding FORBIDDEN cells.

    Among optimal matchings the lexicographically smallest sorted match list
    is returned. ``total_cost`` is the left-to-right sum over that list.

    Raises:
        NoFeasibleMatching: forbidden cells rule out every full-size matching.
    """
    cost = _check_cost(cost)
    nr, nc = cost.shape
    best = _solve_raw(cost)
    if best is None:
        raise NoFeasibleMatching(f"no feasible matching for {nr}x{nc} cost matrix")
    if not best:
        return Assignment((), 0.0)
    optimum = _fsum_at(cost, best)
    tol = 1e-12 * max(1.0, abs(optimum))
    need = min(nr, nc)

    # fix pairs greedily in lexicographic order while an optimum still exists
    fixed: list[tuple[int, int]] = []
    free_rows = list(range(nr))
    free_cols = list(range(nc))
    for r in range(nr):
        if len(fixed) == need:
            break
        placed = False
        for c in list(free_cols):
            if not math.isfinite(cost[r, c]):
                continue
            rows = [i for i in free_rows if i != r]
            cols = [j for j in free_cols if j != c]
            sub = cost[np.ix_(rows, cols)]
            rest = _solve_raw(sub)
            if rest is None:
                continue
            pairs = fixed + [(r, c)] + [(rows[i], cols[j]) for i, j in rest]
            if len(pairs) != need:
                continue
            if _fsum_at(cost, pairs) <= optimum + tol:
                fixed.append((r, c))
                placed = True
                break
        # an unplaceable row is unmatched in every remaining optimum
        free_rows.remove(r)
        if placed:
            free_cols.remove(fixed[-1][1])
    if len(fixed) != need:  # pragma: no cover - guards against float pathologies
        fixed = best
    matches = tuple(sorted(fixed))
    total = 0.0
    for i, j in matches:
        total += cost[i, j]
    return Assignment(matches, float(total))


def head_cost(human: BoundingBox, head: BoundingBox, confidence: float,
              w_distance: float = 0.5, w_confidence: float = 0.5) -> float:
    (hx, hy), (kx, ky) = human.center, head.center
    dist = math.hypot(hx - kx, hy - ky) / min(human.width, human.height)
    return w_distance * dist + w_confidence * (1.0 - confidence)


def associate_heads(humans: Sequence[BoundingBox],
                    heads: Sequence[tuple[BoundingBox, float]],
                    ioh_threshold: float = 0.7,
                    w_distance: float = 0.5,
                    w_confidence: float = 0.5) -> list[Optional[int]]:
    """Assign each human at most one head; returns a head index or None per human.

    A head is admissible for a human only when their IoH exceeds
    ``ioh_threshold``. The matching maximises the number of matched humans
    first and then minimises the summed cost.
    """
    for _, conf in heads:
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"head confidence {conf} outside [0, 1]")
    n_h, n_k = len(humans), len(heads)
    if n_h == 0:
        return []
    if n_k == 0:
        return [None] * n_h

    real = np.full((n_h, n_k), FORBIDDEN)
    for i, hb in enumerate(humans):
        for k, (kb, conf) in enumerate(heads):
            if ioh(hb, kb) > ioh_threshold:
                real[i, k] = head_cost(hb, kb, conf, w_distance, w_confidence)
    finite = real[np.isfinite(real)]
    # a "no head" column per human, dearer than any set of real matches
    big = 1.0 + float(np.abs(finite).sum()) if finite.size else 1.0
    dummy = np.full((n_h, n_h), FORBIDDEN)
    np.fill_diagonal(dummy, big)
    result = solve_assignment(np.hstack([real, dummy]))
    out: list[Optional[int]] = [None] * n_h
    for i, j in result.matches:
        if j < n_k:
            out[i] = j
    return out
