"""Annotation schema, sliding windows, epoch sampling and augmentation."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import IntegrityError, SchemaError
from .geometry import BoundingBox
from .vocab import DEFAULT_VOCAB, HUMAN_CLASS, Vocabulary

Pair = tuple[int, int]


@dataclass
class EntityTrack:
    track_id: int
    class_id: int
    boxes: dict[int, BoundingBox]
    score: float = 1.0  # detector confidence; 1.0 for ground truth

    @property
    def is_human(self) -> bool:
        return self.class_id == HUMAN_CLASS

    @property
    def frames(self) -> list[int]:
        return sorted(self.boxes)


@dataclass
class FrameAnnotation:
    t: int
    entities: list[tuple[int, BoundingBox]]
    hoi_labels: list[tuple[int, int, frozenset[int]]]
    gaze_targets: dict[int, tuple[float, float]] = field(default_factory=dict)


@dataclass
class Video:
    video_id: int
    width: float
    height: float
    fps_keyframe: float
    tracks: dict[int, EntityTrack]
    frames: list[FrameAnnotation]

    def __post_init__(self):
        self._by_t = {f.t: f for f in self.frames}
        self._times = [f.t for f in self.frames]
        self._present = {f.t: frozenset(tid for tid, _ in f.entities) for f in self.frames}

    @property
    def times(self) -> list[int]:
        return self._times

    def frame(self, t: int) -> FrameAnnotation:
        return self._by_t[t]

    def present(self, t: int) -> frozenset[int]:
        return self._present.get(t, frozenset())

    def box(self, track_id: int, t: int) -> BoundingBox:
        return self.tracks[track_id].boxes[t]

    def labels(self, t: int) -> dict[Pair, frozenset[int]]:
        f = self._by_t.get(t)
        if f is None:
            return {}
        return {(h, o): preds for h, o, preds in f.hoi_labels}

    def humans_at(self, t: int) -> list[int]:
        return sorted(tid for tid in self.present(t) if self.tracks[tid].is_human)

    def candidate_pairs(self, t: int) -> list[Pair]:
        """Every (human, other entity) pair co-present at ``t``, self-pairs excluded."""
        present = sorted(self.present(t))
        return [(h, o) for h in present if self.tracks[h].is_human for o in present if o != h]

    def copresent(self, pair: Pair, t: int) -> bool:
        p = self._present.get(t, ())
        return pair[0] in p and pair[1] in p


# ---------------------------------------------------------------- loading


def _get(obj, key, types, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field '{key}'")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, types):
        raise SchemaError(f"{where}.{key}: expected {types}, got {type(val).__name__}")
    return val


def _box(raw, where) -> BoundingBox:
    if not isinstance(raw, list) or len(raw) != 4 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise SchemaError(f"{where}: box must be four numbers")
    try:
        return BoundingBox.from_list(raw)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def _parse_video(raw, vocab: Vocabulary, where) -> Video:
    vid = _get(raw, "id", int, where)
    if not 0 <= vid < 2**32:
        raise SchemaError(f"{where}.id: must fit in an unsigned 32-bit integer")
    width = float(_get(raw, "width", (int, float), where))
    height = float(_get(raw, "height", (int, float), where))
    fps = float(raw.get("fps_keyframe", 1.0))

    tracks: dict[int, EntityTrack] = {}
    for k, rt in enumerate(_get(raw, "tracks", list, where)):
        tw = f"{where}.tracks[{k}]"
        tid = _get(rt, "track_id", int, tw)
        cid = _get(rt, "class_id", int, tw)
        if tid in tracks:
            raise IntegrityError(f"{tw}: duplicate track id {tid}")
        if not 0 <= cid < vocab.num_objects:
            raise IntegrityError(f"{tw}: class id {cid} outside vocabulary")
        boxes = {}
        for tkey, rb in _get(rt, "boxes", dict, tw).items():
            try:
                t = int(tkey)
            except ValueError as exc:
                raise SchemaError(f"{tw}.boxes: frame key '{tkey}' is not an integer") from exc
            boxes[t] = _box(rb, f"{tw}.boxes[{tkey}]")
        score = rt.get("score", 1.0)
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0 <= score <= 1:
            raise SchemaError(f"{tw}.score: must be a number in [0, 1]")
        tracks[tid] = EntityTrack(tid, cid, dict(sorted(boxes.items())), float(score))

    raw_frames = _get(raw, "frames", list, where)
    times = [_get(rf, "t", int, f"{where}.frames[{k}]") for k, rf in enumerate(raw_frames)]
    if len(set(times)) != len(times):
        raise IntegrityError(f"{where}: duplicate frame indices")
    time_set = set(times)
    for tr in tracks.values():
        stray = set(tr.boxes) - time_set
        if stray:
            raise IntegrityError(f"{where}: track {tr.track_id} has boxes at frames "
                                 f"{sorted(stray)} missing from 'frames'")

    frames = []
    for k, rf in sorted(enumerate(raw_frames), key=lambda kv: kv[1]["t"]):
        fw = f"{where}.frames[{k}]"
        t = rf["t"]
        entities = [(tid, tr.boxes[t]) for tid, tr in sorted(tracks.items()) if t in tr.boxes]
        present = {tid for tid, _ in entities}
        hois = []
        seen = set()
        for n, rh in enumerate(rf.get("hois", [])):
            hw = f"{fw}.hois[{n}]"
            h = _get(rh, "h", int, hw)
            o = _get(rh, "o", int, hw)
            preds = _get(rh, "predicates", list, hw)
            for pid in (h, o):
                if pid not in present:
                    raise IntegrityError(f"{hw}: track {pid} is not present at frame {t}")
            if not tracks[h].is_human:
                raise IntegrityError(f"{hw}: subject {h} is not a human track")
            if h == o:
                raise IntegrityError(f"{hw}: self-pair")
            if (h, o) in seen:
                raise IntegrityError(f"{hw}: pair ({h}, {o}) labelled twice")
            seen.add((h, o))
            for p in preds:
                if isinstance(p, bool) or not isinstance(p, int):
                    raise SchemaError(f"{hw}.predicates: ids must be integers")
                if not 0 <= p < vocab.num_predicates:
                    raise IntegrityError(f"{hw}: predicate {p} outside vocabulary")
            hois.append((h, o, frozenset(preds)))
        gaze = {}
        for n, rg in enumerate(rf.get("gaze", [])):
            gw = f"{fw}.gaze[{n}]"
            h = _get(rg, "h", int, gw)
            if h not in present or not tracks[h].is_human:
                raise IntegrityError(f"{gw}: gaze subject {h} is not a human present at {t}")
            point = rg.get("point")
            if point is None:
                continue
            if not isinstance(point, list) or len(point) != 2:
                raise SchemaError(f"{gw}.point: expected [x, y] or null")
            gaze[h] = (float(point[0]), float(point[1]))
        frames.append(FrameAnnotation(t, entities, hois, gaze))
    return Video(vid, width, height, fps, tracks, frames)


def parse_annotations(raw, vocab: Vocabulary = DEFAULT_VOCAB) -> list[Video]:
    videos = [_parse_video(rv, vocab, f"videos[{k}]")
              for k, rv in enumerate(_get(raw, "videos", list, "<root>"))]
    ids = [v.video_id for v in videos]
    if len(set(ids)) != len(ids):
        raise IntegrityError("duplicate video ids")
    return videos


def load_annotations(path, vocab: Vocabulary = DEFAULT_VOCAB) -> list[Video]:
    """Load and validate an annotation file.

    Raises:
        SchemaError: a field is missing or has the wrong type.
        IntegrityError: a label, gaze record or box references an absent track
            or frame, or ids are duplicated.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return parse_annotations(raw, vocab)


def video_to_json(video: Video) -> dict:
    tracks = []
    for tid, tr in sorted(video.tracks.items()):
        rec = {"track_id": tid, "class_id": tr.class_id,
               "boxes": {str(t): list(b.as_tuple()) for t, b in sorted(tr.boxes.items())}}
        if tr.score != 1.0:
            rec["score"] = tr.score
        tracks.append(rec)
    frames = []
    for f in video.frames:
        frames.append({
            "t": f.t,
            "hois": [{"h": h, "o": o, "predicates": sorted(p)} for h, o, p in f.hoi_labels],
            "gaze": [{"h": h, "point": list(pt)} for h, pt in sorted(f.gaze_targets.items())],
        })
    return {"id": video.video_id, "width": video.width, "height": video.height,
            "fps_keyframe": video.fps_keyframe, "tracks": tracks, "frames": frames}


def dump_annotations(videos: Iterable[Video], path) -> None:
    doc = {"videos": [video_to_json(v) for v in videos]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------- windows


@dataclass(eq=False)
class WindowSample:
    video_id: int
    human_id: int
    object_id: int
    frames: tuple[int, ...]
    anchor: int
    label_frame: int
    target: np.ndarray
    label_present: bool
    human_boxes: tuple[BoundingBox, ...]
    object_boxes: tuple[BoundingBox, ...]
    frame_width: float
    flipped: bool = False

    @property
    def pair(self) -> Pair:
        return (self.human_id, self.object_id)

    @property
    def key(self):
        return (self.video_id, self.anchor, self.human_id, self.object_id)


def _window_frames(video: Video, pair: Pair, idx: int, length: int) -> tuple[list[int], int]:
    """Frame times for the window ending at keyframe ``idx`` and the number of
    slots that hold a genuine co-present observation."""
    times = video.times
    slots: list[Optional[int]] = []
    for s in range(idx - length + 1, idx + 1):
        slots.append(times[s] if s >= 0 and video.copresent(pair, times[s]) else None)
    observed = sum(s is not None for s in slots)
    # gaps repeat the previous observation; leading gaps repeat the earliest one
    last = None
    for k, s in enumerate(slots):
        if s is None:
            slots[k] = last
        else:
            last = s
    first = next(s for s in slots if s is not None)
    return [first if s is None else s for s in slots], observed


def build_windows(video: Video, length: int = 6, tau_a: int = 0,
                  full_history_only: bool = False,
                  num_predicates: int = DEFAULT_VOCAB.num_predicates) -> list[WindowSample]:
    """Pair-wise sliding windows for detection (``tau_a == 0``) or anticipation.

    One window per candidate pair at every anchor keyframe whose label frame
    ``tau_a`` keyframes later exists.
    """
    if length < 1:
        raise ValueError("window length must be >= 1")
    if tau_a < 0:
        raise ValueError("tau_a must be >= 0")
    times = video.times
    out = []
    for idx, t in enumerate(times):
        if idx + tau_a >= len(times):
            break
        label_t = times[idx + tau_a]
        labels = video.labels(label_t)
        for pair in video.candidate_pairs(t):
            frames, observed = _window_frames(video, pair, idx, length)
            if full_history_only and observed < length:
                continue
            target = np.zeros(num_predicates, dtype=np.uint8)
            for p in labels.get(pair, ()):
                target[p] = 1
            h, o = pair
            out.append(WindowSample(
                video_id=video.video_id, human_id=h, object_id=o,
                frames=tuple(frames), anchor=t, label_frame=label_t, target=target,
                label_present=video.copresent(pair, label_t),
                human_boxes=tuple(video.box(h, f) for f in frames),
                object_boxes=tuple(video.box(o, f) for f in frames),
                frame_width=video.width,
            ))
    return out


def sample_epoch(windows_by_video: Mapping[int, Sequence[WindowSample]], batch_size: int,
                 seed: int) -> list[list[WindowSample]]:
    """Shuffle videos and group them ``batch_size`` at a time.

    Every video with at least one window lands in exactly one batch and a
    batch never holds two videos' worth of the same id.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = sorted(vid for vid, ws in windows_by_video.items() if len(ws))
    order = np.random.default_rng(seed).permutation(len(ids))
    batches = []
    for start in range(0, len(ids), batch_size):
        chosen = [ids[k] for k in order[start:start + batch_size]]
        batches.append([w for vid in chosen for w in windows_by_video[vid]])
    return batches


def horizontal_flip(sample: WindowSample, frame_width: Optional[float] = None) -> WindowSample:
    """Mirror every box of the window; labels are untouched.

    Masks and gaze maps are derived from the ``flipped`` flag when features
    are assembled, so they always agree with the mirrored boxes.
    """
    w = sample.frame_width if frame_width is None else frame_width
    return replace(
        sample,
        human_boxes=tuple(b.flip(w) for b in sample.human_boxes),
        object_boxes=tuple(b.flip(w) for b in sample.object_boxes),
        flipped=not sample.flipped,
        frame_width=w,
    )


# ---------------------------------------------------------------- statistics


@dataclass
class ClassStatistics:
    predicate_counts: np.ndarray
    triplet_counts: Counter

    def rare_split(self, threshold: int = 25) -> tuple[set, set]:
        """(rare, non-rare) triplet categories at the given instance threshold."""
        rare = {k for k, n in self.triplet_counts.items() if n < threshold}
        return rare, set(self.triplet_counts) - rare


def class_statistics(videos: Sequence[Video],
                     num_predicates: int = DEFAULT_VOCAB.num_predicates) -> ClassStatistics:
    """Ground-truth label counts per predicate and per (object class, predicate)."""
    if not videos:
        raise ValueError("class_statistics needs a non-empty split")
    counts = np.zeros(num_predicates, dtype=np.int64)
    triplets: Counter = Counter()
    for v in videos:
        for f in v.frames:
            for h, o, preds in f.hoi_labels:
                cls = v.tracks[o].class_id
                for p in preds:
                    counts[p] += 1
                    triplets[(cls, p)] += 1
    return ClassStatistics(counts, triplets)


def split_videos(videos: Sequence[Video], val_fraction: float, seed: int):
    """Deterministic (train, val) partition of a video list."""
    n_val = int(math.floor(len(videos) * val_fraction))
    order = np.random.default_rng(seed).permutation(len(videos))
    val_idx = set(order[:n_val].tolist())
    train = [v for k, v in enumerate(videos) if k not in val_idx]
    val = [v for k, v in enumerate(videos) if k in val_idx]
    return train, val
