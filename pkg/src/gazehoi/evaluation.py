"""Triplet mAP, person-wise top-k metrics and the evaluation protocol.

Ground truth is organised per anchor frame: every pair co-present at the
anchor carries the predicates annotated at the label frame (the anchor
itself for detection, ``tau_a`` keyframes later for anticipation).
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .autodiff import no_grad
from .data import Video, build_windows
from .errors import SchemaError
from .geometry import BoundingBox, iou

IOU_THRESHOLD = 0.5
RARE_THRESHOLD = 25


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class PredictedTriplet:
    video_id: int
    frame: int
    human_box: BoundingBox
    object_box: BoundingBox
    object_class: int
    predicate: int
    confidence: float
    human_track: Optional[int] = None
    object_track: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> dict:
        return {"video": self.video_id, "frame": self.frame,
                "human_box": list(self.human_box.as_tuple()),
                "object_box": list(self.object_box.as_tuple()),
                "object_class": self.object_class, "predicate": self.predicate,
                "confidence": self.confidence, "human_track": self.human_track,
                "object_track": self.object_track}

    @classmethod
    def from_json(cls, d: dict) -> "PredictedTriplet":
        try:
            return cls(int(d["video"]), int(d["frame"]), BoundingBox.from_list(d["human_box"]),
                       BoundingBox.from_list(d["object_box"]), int(d["object_class"]),
                       int(d["predicate"]), float(d["confidence"]),
                       d.get("human_track"), d.get("object_track"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed prediction record: {exc}") from exc


@dataclass(frozen=True)
class GTTriplet:
    video_id: int
    frame: int
    human_box: BoundingBox
    object_box: BoundingBox
    object_class: int
    predicate: int
    human_id: int = -1
    object_id: int = -1


@dataclass
class GTPair:
    human_id: int
    object_id: int
    human_box: BoundingBox
    object_box: BoundingBox
    object_class: int
    predicates: frozenset
    future_present: bool = True


@dataclass
class EvalFrame:
    """Ground truth attached to one anchor frame."""
    video_id: int
    t: int
    label_frame: int
    pairs: list[GTPair]
    humans: dict[int, BoundingBox]
    humans_future: set

    @property
    def key(self) -> tuple[int, int]:
        return (self.video_id, self.t)

    def triplets(self) -> list[GTTriplet]:
        return [GTTriplet(self.video_id, self.t, p.human_box, p.object_box, p.object_class, q,
                          p.human_id, p.object_id)
                for p in self.pairs for q in sorted(p.predicates)]


def build_eval_frames(videos: Iterable[Video], tau_a: int = 0) -> list[EvalFrame]:
    """Anchor frames with a valid label frame, in video/time order."""
    out = []
    for v in sorted(videos, key=lambda v: v.video_id):
        times = v.times
        for idx, t in enumerate(times):
            if idx + tau_a >= len(times):
                break
            lt = times[idx + tau_a]
            labels = v.labels(lt)
            pairs = []
            for h, o in v.candidate_pairs(t):
                pairs.append(GTPair(h, o, v.box(h, t), v.box(o, t), v.tracks[o].class_id,
                                    labels.get((h, o), frozenset()),
                                    v.copresent((h, o), lt)))
            humans = {h: v.box(h, t) for h in v.humans_at(t)}
            out.append(EvalFrame(v.video_id, t, lt, pairs, humans,
                                 {h for h in humans if h in v.present(lt)}))
    return out


def read_predictions(path) -> list[PredictedTriplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            if line.strip():
                try:
                    out.append(PredictedTriplet.from_json(json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"{path}:{n + 1}: {exc}") from exc
    return out


def write_predictions(preds: Iterable[PredictedTriplet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- matching / AP


def match_triplet(pred: PredictedTriplet, gt: GTTriplet, thr: float = IOU_THRESHOLD) -> bool:
    """True positive test: both IoUs strictly above ``thr``, same class and predicate."""
    return (pred.video_id == gt.video_id and pred.frame == gt.frame
            and pred.object_class == gt.object_class and pred.predicate == gt.predicate
            and iou(pred.human_box, gt.human_box) > thr
            and iou(pred.object_box, gt.object_box) > thr)


def rank_key(p: PredictedTriplet):
    return (-p.confidence, p.video_id, p.frame, p.human_box.as_tuple(), p.object_box.as_tuple())


def tp_flags(preds: Sequence[PredictedTriplet], gts: Sequence[GTTriplet],
             thr: float = IOU_THRESHOLD) -> np.ndarray:
    """Greedy true-positive flags for ``preds`` in the given (ranked) order."""
    by_frame = defaultdict(list)
    for g in gts:
        by_frame[(g.video_id, g.frame)].append(g)
    order = sorted(by_frame)
    lo_of, hi_of, flat = {}, {}, []
    for key in order:
        lo_of[key] = len(flat)
        flat.extend(by_frame[key])
        hi_of[key] = len(flat)
    gt_h = np.array([g.human_box.as_tuple() for g in flat]).reshape(-1, 4)
    gt_o = np.array([g.object_box.as_tuple() for g in flat]).reshape(-1, 4)
    keys = [(p.video_id, p.frame) for p in preds]
    gt_lo = np.array([lo_of.get(k, 0) for k in keys], dtype=np.int64)
    gt_hi = np.array([hi_of.get(k, 0) for k in keys], dtype=np.int64)
    pred_h = np.array([p.human_box.as_tuple() for p in preds]).reshape(-1, 4)
    pred_o = np.array([p.object_box.as_tuple() for p in preds]).reshape(-1, 4)
    return np.asarray(kernels.match_ranked(pred_h, pred_o, gt_lo, gt_hi, gt_h, gt_o, thr))


def average_precision(preds: Sequence[PredictedTriplet], gts: Sequence[GTTriplet],
                      thr: float = IOU_THRESHOLD, extra_fn: int = 0) -> float:
    """All-point interpolated AP for one triplet category.

    Predictions are ranked by confidence with ties broken by (frame, human
    box, object box). ``extra_fn`` adds unmatched ground truth that has no
    row in ``gts``. Returns NaN when there is no ground truth at all.
    """
    ranked = sorted(preds, key=rank_key)
    n_gt = len(gts) + extra_fn
    if n_gt == 0:
        return math.nan
    return float(kernels.all_point_ap(tp_flags(ranked, gts, thr), n_gt))


@dataclass
class MAPResult:
    full: Optional[float]
    nonrare: Optional[float]
    rare: Optional[float]
    per_category: dict
    rare_categories: set
    nonrare_categories: set


def _mean(vals) -> Optional[float]:
    vals = list(vals)
    return float(np.mean(vals)) if vals else None


def mean_ap(preds: Sequence[PredictedTriplet], gts: Sequence[GTTriplet],
            rare_threshold: int = RARE_THRESHOLD, thr: float = IOU_THRESHOLD,
            counts: Optional[dict] = None) -> MAPResult:
    """mAP over the ground-truth category universe with a rare split.

    ``counts`` overrides the instance counts used for the rare split (by
    default the number of ground-truth rows per category).
    """
    gt_by_cat = defaultdict(list)
    for g in gts:
        gt_by_cat[(g.object_class, g.predicate)].append(g)
    pred_by_cat = defaultdict(list)
    for p in preds:
        cat = (p.object_class, p.predicate)
        if cat in gt_by_cat:
            pred_by_cat[cat].append(p)
    counts = counts or {c: len(v) for c, v in gt_by_cat.items()}
    per_cat = {c: average_precision(pred_by_cat[c], gt_by_cat[c], thr) for c in sorted(gt_by_cat)}
    rare = {c for c in per_cat if counts[c] < rare_threshold}
    nonrare = set(per_cat) - rare
    return MAPResult(_mean(per_cat.values()), _mean(per_cat[c] for c in sorted(nonrare)),
                     _mean(per_cat[c] for c in sorted(rare)), per_cat, rare, nonrare)


# ---------------------------------------------------------------- person-wise


def personwise_scores(y: set, z_scored, k: int = 5, threshold: float = 0.3):
    """(rec, prec, acc, f1) for one human, or None when Y and Z are both empty.

    ``z_scored`` is an iterable of (identity, confidence); the top ``k``
    distinct identities with confidence above ``threshold`` form Z.
    """
    best = {}
    for ident, conf in z_scored:
        if conf > threshold and conf > best.get(ident, -1.0):
            best[ident] = conf
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], repr(kv[0])))
    z = {ident for ident, _ in ranked[:k]}
    y = set(y)
    if not y and not z:
        return None
    inter = len(y & z)
    rec = inter / len(y) if y else 0.0
    prec = inter / len(z) if z else 0.0
    acc = inter / len(y | z)
    f1 = 2 * inter / (len(y) + len(z))
    return rec, prec, acc, f1


def assign_pairs(det_pairs: Sequence[tuple], gt_pairs: Sequence[GTPair],
                 thr: float = IOU_THRESHOLD) -> dict:
    """Greedy detection-to-GT pair assignment by descending IoU product.

    ``det_pairs`` holds (human_box, object_box, object_class); returns a
    map from detection index to GT pair index.
    """
    cands = []
    for i, (hb, ob, cls) in enumerate(det_pairs):
        for j, g in enumerate(gt_pairs):
            if g.object_class != cls:
                continue
            ih = iou(hb, g.human_box)
            if ih <= thr:
                continue
            io = iou(ob, g.object_box)
            if io <= thr:
                continue
            cands.append((-(ih * io), i, j))
    cands.sort()
    used_d, used_g, out = set(), set(), {}
    for _, i, j in cands:
        if i not in used_d and j not in used_g:
            out[i] = j
            used_d.add(i)
            used_g.add(j)
    return out


@dataclass
class PersonwiseResult:
    recall: float
    precision: float
    accuracy: float
    f1: float
    humans: int
    per_human: list = field(default_factory=list)


def _frame_person_samples(frame: EvalFrame, preds: Sequence[PredictedTriplet],
                          humans: set, k: int, threshold: float):
    det_keys, det_index, det_preds = [], {}, defaultdict(list)
    for p in preds:
        key = (p.human_box.as_tuple(), p.object_box.as_tuple(), p.object_class,
               p.human_track, p.object_track)
        if key not in det_index:
            det_index[key] = len(det_keys)
            det_keys.append(key)
        det_preds[det_index[key]].append(p)
    det_pairs = [(BoundingBox(*k[0]), BoundingBox(*k[1]), k[2]) for k in det_keys]
    assigned = assign_pairs(det_pairs, frame.pairs)

    owner = {}
    for i, (hb, ob, cls) in enumerate(det_pairs):
        if i in assigned:
            g = frame.pairs[assigned[i]]
            owner[i] = (g.human_id, g.object_id)
            continue
        best, best_iou = None, IOU_THRESHOLD
        for h, box in sorted(frame.humans.items()):
            v = iou(hb, box)
            if v > best_iou:
                best, best_iou = h, v
        if best is not None:
            owner[i] = (best, ("det", ob.as_tuple(), cls))

    z_by_human = defaultdict(list)
    for i, (h, obj) in owner.items():
        for p in det_preds[i]:
            z_by_human[h].append(((obj, p.predicate), p.confidence))
    y_by_human = defaultdict(set)
    for g in frame.pairs:
        for q in g.predicates:
            y_by_human[g.human_id].add((g.object_id, q))

    out = []
    for h in sorted(humans):
        s = personwise_scores(y_by_human[h], z_by_human[h], k, threshold)
        if s is not None:
            out.append(((frame.video_id, frame.t, h), s))
    return out


def group_predictions(preds: Iterable[PredictedTriplet]) -> dict:
    out = defaultdict(list)
    for p in preds:
        out[(p.video_id, p.frame)].append(p)
    return out


def personwise_metrics(frames: Sequence[EvalFrame], preds: Sequence[PredictedTriplet],
                       k: int = 5, threshold: float = 0.3, future_only: bool = False,
                       average: str = "human") -> PersonwiseResult:
    """Person-wise multi-label top-k metrics.

    ``future_only`` drops humans absent at the label frame. ``average``
    selects an unweighted mean over humans or a per-frame mean first.
    """
    grouped = group_predictions(preds)
    samples, by_frame = [], defaultdict(list)
    for fr in frames:
        humans = fr.humans_future if future_only else set(fr.humans)
        for key, s in _frame_person_samples(fr, grouped.get(fr.key, []), humans, k, threshold):
            samples.append((key, s))
            by_frame[fr.key].append(s)
    if not samples:
        return PersonwiseResult(0.0, 0.0, 0.0, 0.0, 0, [])
    if average == "frame":
        arr = np.array([np.mean(v, axis=0) for v in by_frame.values()])
    elif average == "human":
        arr = np.array([s for _, s in samples])
    else:
        raise ValueError(f"unknown averaging {average!r}")
    rec, prec, acc, f1 = arr.mean(axis=0)
    return PersonwiseResult(float(rec), float(prec), float(acc), float(f1), len(samples), samples)


# ---------------------------------------------------------------- protocol rules


@dataclass
class AnticipationFiltered:
    predictions: list
    dropped_predictions: int
    humans: dict
    excluded_humans: int


def anticipation_filter(preds: Sequence[PredictedTriplet], frames: Sequence[EvalFrame],
                        thr: float = IOU_THRESHOLD) -> AnticipationFiltered:
    """Drop predictions on pairs that vanish by the label frame and list the
    humans still present there.

    A prediction is tied to the best-overlapping GT pair at the anchor (both
    IoUs above ``thr``, same class); if that pair is absent at the label
    frame the prediction is dropped. Unmatched predictions are kept.
    """
    by_key = {fr.key: fr for fr in frames}
    kept, dropped = [], 0
    for p in preds:
        fr = by_key.get((p.video_id, p.frame))
        gone = False
        if fr is not None:
            best, best_ov = None, -1.0
            for g in fr.pairs:
                if g.object_class != p.object_class:
                    continue
                ih, io = iou(p.human_box, g.human_box), iou(p.object_box, g.object_box)
                if ih > thr and io > thr and min(ih, io) > best_ov:
                    best, best_ov = g, min(ih, io)
            gone = best is not None and not best.future_present
        if gone:
            dropped += 1
        else:
            kept.append(p)
    humans = {fr.key: set(fr.humans_future) for fr in frames}
    excluded = sum(len(fr.humans) - len(fr.humans_future) for fr in frames)
    return AnticipationFiltered(kept, dropped, humans, excluded)


@dataclass
class DetectionAccounting:
    empty_frames: list
    fn_by_category: dict
    zero_prediction_humans: int

    @property
    def total_fn(self) -> int:
        return sum(self.fn_by_category.values())


def detection_mode_accounting(frames: Sequence[EvalFrame],
                              preds: Sequence[PredictedTriplet]) -> DetectionAccounting:
    """Ground truth of frames without any detection, counted as misses."""
    have = {(p.video_id, p.frame) for p in preds}
    empty, fn, humans = [], defaultdict(int), 0
    for fr in frames:
        if fr.key in have:
            continue
        empty.append(fr.key)
        for g in fr.triplets():
            fn[(g.object_class, g.predicate)] += 1
        humans += len(fr.humans)
    return DetectionAccounting(empty, dict(fn), humans)


def threshold_sweep(frames: Sequence[EvalFrame], preds: Sequence[PredictedTriplet],
                    thresholds: Sequence[float], k: int = 5, future_only: bool = False) -> list[dict]:
    rows = []
    for thr in thresholds:
        if not 0 < thr < 1:
            raise ValueError("thresholds must lie in (0, 1)")
        r = personwise_metrics(frames, preds, k, thr, future_only)
        rows.append({"threshold": float(thr), "recall": r.recall, "precision": r.precision,
                     "accuracy": r.accuracy, "f1": r.f1})
    return rows


def default_thresholds() -> list[float]:
    return [round(0.05 * i, 2) for i in range(1, 20)]


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["threshold", "recall", "precision", "accuracy", "f1"])
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    map_full: Optional[float]
    map_nonrare: Optional[float]
    map_rare: Optional[float]
    personwise: dict
    counts: dict
    mode: str
    tau_a: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def summary(self) -> dict:
        return {"map_full": self.map_full, "map_nonrare": self.map_nonrare,
                "map_rare": self.map_rare,
                **{f"pw_{k}": v for k, v in self.personwise.items() if k not in ("k", "threshold")}}

    def validate(self) -> None:
        import jsonschema
        schema = json.loads((resources.files("gazehoi") / "schemas" /
                             "metrics_report.schema.json").read_text(encoding="utf-8"))
        try:
            jsonschema.validate(self.to_json(), schema)
        except jsonschema.ValidationError as exc:
            raise SchemaError(f"report does not match schema: {exc.message}") from exc

    def dump(self, path) -> None:
        self.validate()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(frames: Sequence[EvalFrame], preds: Sequence[PredictedTriplet], tau_a: int = 0,
             mode: str = "oracle", k: int = 5, threshold: float = 0.3,
             average: str = "human", config: Optional[dict] = None) -> MetricsReport:
    """Full protocol: anticipation exclusions, mode accounting, mAP and person-wise."""
    if mode not in ("oracle", "detection"):
        raise ValueError("mode must be 'oracle' or 'detection'")
    dropped = excluded = 0
    if tau_a > 0:
        filt = anticipation_filter(preds, frames)
        preds, dropped, excluded = filt.predictions, filt.dropped_predictions, filt.excluded_humans
    acct = detection_mode_accounting(frames, preds)
    if mode == "oracle":
        # frames are scored only where the model produced output
        scored = [fr for fr in frames if fr.key not in set(acct.empty_frames)]
    else:
        scored = list(frames)
    gts = [g for fr in scored for g in fr.triplets()]
    m = mean_ap(preds, gts)
    pw = personwise_metrics(scored, preds, k, threshold, future_only=tau_a > 0, average=average)
    counts = {"frames": len(scored), "humans": pw.humans, "categories": len(m.per_category),
              "rare_categories": len(m.rare_categories),
              "nonrare_categories": len(m.nonrare_categories),
              "gt_triplets": len(gts), "predictions": len(preds),
              "empty_frames": len(acct.empty_frames),
              "dropped_predictions": dropped, "excluded_humans": excluded}
    return MetricsReport(m.full, m.nonrare, m.rare,
                         {"k": k, "threshold": threshold, "recall": pw.recall,
                          "precision": pw.precision, "accuracy": pw.accuracy, "f1": pw.f1},
                         counts, mode, tau_a, config or {})


# ---------------------------------------------------------------- model bridge


def predict_triplets(model, videos: Sequence[Video], frames, tau_a: int = 0,
                     mode: str = "oracle", batch_videos: int = 4) -> list[PredictedTriplet]:
    """Run the model over every window and emit one triplet per predicate.

    In detection mode confidences are multiplied by both track scores.
    """
    cfg = model.config
    out = []
    vids = sorted(videos, key=lambda v: v.video_id)
    for start in range(0, len(vids), batch_videos):
        chunk = vids[start:start + batch_videos]
        windows = [w for v in chunk for w in build_windows(v, cfg.window, tau_a,
                                                           num_predicates=cfg.num_outputs)]
        if not windows:
            continue
        with no_grad():
            z = model.forward(windows, frames).z.data
        lookup = {v.video_id: v for v in chunk}
        for w, row in zip(windows, z):
            v = lookup[w.video_id]
            scale = 1.0
            if mode == "detection":
                scale = v.tracks[w.human_id].score * v.tracks[w.object_id].score
            hb, ob = v.box(w.human_id, w.anchor), v.box(w.object_id, w.anchor)
            cls = v.tracks[w.object_id].class_id
            for p, conf in enumerate(row):
                out.append(PredictedTriplet(w.video_id, w.anchor, hb, ob, cls, p,
                                            float(min(1.0, max(0.0, conf * scale))),
                                            w.human_id, w.object_id))
    return out


def evaluate_model(model, videos: Sequence[Video], frames, tau_a: int = 0, mode: str = "oracle",
                   k: int = 5, threshold: float = 0.3, detections: Optional[Sequence[Video]] = None,
                   det_frames=None, config: Optional[dict] = None) -> MetricsReport:
    """Predict on ``videos`` (or on ``detections`` in detection mode) and score."""
    if mode == "detection" and detections is not None:
        preds = predict_triplets(model, detections, det_frames, tau_a, mode)
    else:
        preds = predict_triplets(model, videos, frames, tau_a, mode)
    return evaluate(build_eval_frames(videos, tau_a), preds, tau_a, mode, k, threshold,
                    config=config)
