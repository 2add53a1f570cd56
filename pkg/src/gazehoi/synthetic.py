"""Scripted synthetic scenes where gaze at one keyframe predicts the next action.

Each human owns a few objects placed at class-specific positions around it.
At every keyframe the human looks at one of its objects; at the following
keyframe it performs that object's scripted action on it. Labels per
(human, owned object) pair are:

* one spatial predicate derived from the boxes,
* ``watch`` on the object looked at in the same keyframe,
* the scripted action on the object looked at one keyframe earlier.

Relation features carry a fixed direction for every visible action (all
annotated action predicates except ``watch``), so the current action is
readable from appearance while the upcoming one is only readable from gaze.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import EntityTrack, FrameAnnotation, Video, dump_annotations
from .errors import SchemaError
from .features import (
    KIND_GAZE, KIND_HUMAN, KIND_OBJECT, KIND_RELATION, KIND_SEMANTIC, FeatureStoreWriter,
    SemanticTable, SyntheticFeatures, predicate_direction, synth_relation,
)
from .geometry import BoundingBox, intersection_area
from .vocab import DEFAULT_VOCAB, HUMAN_CLASS, Vocabulary

DEFAULT_ACTIONS = {"cup": "hold", "bottle": "grab", "laptop": "use", "ball": "kick",
                   "cellphone": "hold", "dish": "touch"}

# object slots relative to the owning human's box, as (dx, dy) of the object
# centre in units of the human box width/height from the human centre
SLOTS = ((-1.1, 0.1), (1.1, 0.1), (-1.0, -0.4), (1.0, -0.4), (0.0, 0.2), (0.0, -0.6))


@dataclass
class ScenarioSpec:
    videos: int = 20
    frames: int = 8
    humans: int = 1
    objects: int = 3
    actions: dict = field(default_factory=lambda: dict(DEFAULT_ACTIONS))
    gaze_follow: float = 1.0
    width: float = 640.0
    height: float = 480.0
    visual_dim: int = 2048
    semantic_dim: int = 200
    gaze_size: int = 64
    perturbation: float = 0.1
    relation_strength: float = 1.0
    detection_drop: float = 0.2
    detection_jitter: float = 0.04
    seed: int = 0

    def validate(self, vocab: Vocabulary = DEFAULT_VOCAB) -> None:
        if min(self.videos, self.frames, self.humans, self.objects) < 1:
            raise SchemaError("videos, frames, humans and objects must be positive")
        if self.objects > len(self.actions):
            raise SchemaError("more objects per human than scripted object classes")
        if self.objects > len(SLOTS):
            raise SchemaError(f"at most {len(SLOTS)} objects per human")
        for cls, act in self.actions.items():
            if cls not in vocab.objects or vocab.object_id(cls) == HUMAN_CLASS:
                raise SchemaError(f"unknown object class {cls!r}")
            if act not in vocab.action or act == "watch":
                raise SchemaError(f"unknown or reserved action {act!r}")
        if not 0 <= self.gaze_follow <= 1 or not 0 <= self.detection_drop < 1:
            raise SchemaError("probabilities must lie in [0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise SchemaError(f"unknown scenario keys {unknown}")
        spec = cls(**raw)
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path) -> "ScenarioSpec":
        text = Path(path).read_text(encoding="utf-8")
        try:
            if str(path).endswith(".json"):
                raw = json.loads(text)
            else:
                import tomli
                raw = tomli.loads(text)
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scenario:
    videos: list[Video]
    spec: ScenarioSpec
    predicate_counts: np.ndarray  # tallied while scripting, independent of the loaders


def spatial_predicate(human: BoundingBox, obj: BoundingBox) -> str:
    """Geometry-derived spatial relation of an object to a human."""
    if intersection_area(human, obj) > 0:
        return "in_front_of"
    if obj.center[1] < human.center[1] - 0.25 * human.height:
        return "above"
    return "next_to"


def _clip_box(cx, cy, w, h, width, height) -> BoundingBox:
    x1 = min(max(cx - w / 2, 0.0), width - w)
    y1 = min(max(cy - h / 2, 0.0), height - h)
    return BoundingBox(round(x1, 2), round(y1, 2), round(x1 + w, 2), round(y1 + h, 2))


def generate(spec: ScenarioSpec, vocab: Vocabulary = DEFAULT_VOCAB) -> Scenario:
    """Build the annotated videos for a scenario; deterministic in ``spec.seed``."""
    spec.validate(vocab)
    counts = np.zeros(vocab.num_predicates, dtype=np.int64)
    classes = sorted(spec.actions)
    slot_of = {c: k % len(SLOTS) for k, c in enumerate(classes)}
    watch = vocab.predicate_id("watch")
    videos = []
    for vi in range(spec.videos):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 100, vi]))
        hw, hh = spec.width / (2.5 * spec.humans + 3.5), spec.height * 0.55
        tracks: dict[int, EntityTrack] = {}
        owned: dict[int, list[int]] = {}
        next_id = 1
        humans = []
        for hi in range(spec.humans):
            cx = spec.width * (hi + 1) / (spec.humans + 1)
            tracks[next_id] = EntityTrack(next_id, HUMAN_CLASS, {})
            humans.append((next_id, cx))
            owned[next_id] = []
            next_id += 1
        obj_class = {}
        for hid, _ in humans:
            picks = rng.choice(len(classes), size=spec.objects, replace=False)
            for k in sorted(picks.tolist()):
                cls = classes[k]
                tracks[next_id] = EntityTrack(next_id, vocab.object_id(cls), {})
                obj_class[next_id] = cls
                owned[hid].append(next_id)
                next_id += 1

        frames = []
        prev_gaze: dict[int, int] = {}
        for t in range(spec.frames):
            entities = []
            for hid, cx in humans:
                dx, dy = rng.uniform(-4, 4, size=2)
                hb = _clip_box(cx + dx, spec.height * 0.55 + dy, hw, hh, spec.width, spec.height)
                tracks[hid].boxes[t] = hb
                for oid in owned[hid]:
                    sx, sy = SLOTS[slot_of[obj_class[oid]]]
                    jx, jy = rng.uniform(-3, 3, size=2)
                    side = 0.22 * hw + 20
                    tracks[oid].boxes[t] = _clip_box(hb.center[0] + sx * hw + jx,
                                                     hb.center[1] + sy * hh + jy,
                                                     side, side, spec.width, spec.height)
            for tid in sorted(tracks):
                entities.append((tid, tracks[tid].boxes[t]))
            hois, gaze = [], {}
            for hid, _ in humans:
                objs = owned[hid]
                look = objs[int(rng.integers(len(objs)))]
                acted = prev_gaze.get(hid)
                if acted is not None and rng.random() >= spec.gaze_follow:
                    acted = objs[int(rng.integers(len(objs)))]
                hb = tracks[hid].boxes[t]
                for oid in objs:
                    ob = tracks[oid].boxes[t]
                    preds = {vocab.predicate_id(spatial_predicate(hb, ob))}
                    if oid == look:
                        preds.add(watch)
                    if oid == acted:
                        preds.add(vocab.predicate_id(spec.actions[obj_class[oid]]))
                    for p in preds:
                        counts[p] += 1
                    hois.append((hid, oid, frozenset(preds)))
                gaze[hid] = tracks[look].boxes[t].center
                prev_gaze[hid] = look
            frames.append(FrameAnnotation(t, entities, hois, gaze))
        videos.append(Video(vi, spec.width, spec.height, 1.0, tracks, frames))
    return Scenario(videos, spec, counts)


class ScriptedFeatures(SyntheticFeatures):
    """Synthetic features whose relation vectors show the ongoing actions.

    ``scene`` maps video ids to the annotated videos used to look up what is
    happening; it lets detector-produced tracks (same ids, no labels) reuse
    the scene's appearance.
    """

    def __init__(self, seed: int = 0, visual_dim: int = 2048,
                 semantic: Optional[SemanticTable] = None, perturbation: float = 0.1,
                 gaze_size: int = 64, gaze_sigma: float = 3.0, strength: float = 1.0,
                 scene: Optional[Sequence[Video]] = None, vocab: Vocabulary = DEFAULT_VOCAB):
        super().__init__(seed, visual_dim, semantic, perturbation, gaze_size, gaze_sigma)
        self.strength = strength
        self.scene = {v.video_id: v for v in scene} if scene is not None else None
        n_spatial = len(vocab.spatial)
        self.hidden = set(range(n_spatial)) | {vocab.predicate_id("watch")}

    @classmethod
    def for_spec(cls, spec: ScenarioSpec, scene: Optional[Sequence[Video]] = None):
        return cls(spec.seed, spec.visual_dim,
                   SemanticTable(dim=spec.semantic_dim, seed=spec.seed), spec.perturbation,
                   spec.gaze_size, strength=spec.relation_strength, scene=scene)

    def relation(self, video, t, h, o):
        base = synth_relation(h, o, t, self.seed, self.visual_dim, self.perturbation)
        ref = self.scene.get(video.video_id, video) if self.scene is not None else video
        for p in sorted(ref.labels(t).get((h, o), ())):
            if p not in self.hidden:
                base = base + self.strength * predicate_direction(p, self.seed, self.visual_dim)
        return base

    def gaze(self, video, t, h):
        ref = self.scene.get(video.video_id, video) if self.scene is not None else video
        return super().gaze(ref, t, h)


def write_store(videos: Sequence[Video], source, path, num_classes: int = 78) -> int:
    """Write every feature the model can request for ``videos``; returns records."""
    dims = (source.visual_dim, source.visual_dim, source.visual_dim, source.table.dim,
            source.gaze_size ** 2)
    with FeatureStoreWriter(path, dims) as w:
        for c in range(num_classes):
            w.add(0, 0, KIND_SEMANTIC, c, 0, source.semantic(c))
        for v in videos:
            for t in v.times:
                present = sorted(v.present(t))
                for tid in present:
                    if v.tracks[tid].is_human:
                        w.add(v.video_id, t, KIND_HUMAN, tid, 0, source.human(v, t, tid))
                        w.add(v.video_id, t, KIND_GAZE, tid, 0, source.gaze(v, t, tid))
                    w.add(v.video_id, t, KIND_OBJECT, tid, 0, source.object(v, t, tid))
                for h, o in v.candidate_pairs(t):
                    w.add(v.video_id, t, KIND_RELATION, h, o, source.relation(v, t, h, o))
    return w.count


def simulate_detections(videos: Sequence[Video], seed: int = 0, drop: float = 0.2,
                        jitter: float = 0.04) -> list[Video]:
    """A stand-in detector: jittered boxes, per-track scores and missed frames.

    A dropped keyframe keeps its slot but lists no entities, so every ground
    truth triplet there becomes a false negative in detection mode.
    """
    out = []
    for v in videos:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 200, v.video_id]))
        dropped = {t for t in v.times if rng.random() < drop}
        tracks = {}
        for tid, tr in sorted(v.tracks.items()):
            boxes = {}
            for t, b in tr.boxes.items():
                if t in dropped:
                    continue
                d = rng.uniform(-jitter, jitter, size=4) * np.array([b.width, b.height] * 2)
                x1, y1 = max(0.0, b.x1 + d[0]), max(0.0, b.y1 + d[1])
                x2, y2 = min(v.width, b.x2 + d[2]), min(v.height, b.y2 + d[3])
                boxes[t] = BoundingBox(round(x1, 2), round(y1, 2), round(x2, 2), round(y2, 2))
            score = 1.0 if tr.is_human else round(float(rng.uniform(0.6, 1.0)), 3)
            tracks[tid] = EntityTrack(tid, tr.class_id, boxes, score)
        frames = []
        for f in v.frames:
            ents = [(tid, tracks[tid].boxes[f.t]) for tid in sorted(tracks)
                    if f.t in tracks[tid].boxes]
            gaze = {} if f.t in dropped else dict(f.gaze_targets)
            frames.append(FrameAnnotation(f.t, ents, [], gaze))
        out.append(Video(v.video_id, v.width, v.height, v.fps_keyframe, tracks, frames))
    return out


def write_dataset(spec: ScenarioSpec, out_dir, vocab: Vocabulary = DEFAULT_VOCAB) -> dict:
    """Generate a scenario and write annotations, detections, vocabulary,
    features and the effective spec under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = generate(spec, vocab)
    paths = {"annotations": out / "annotations.json", "detections": out / "detections.json",
             "vocab": out / "vocab.json", "features": out / "features.hoif",
             "scenario": out / "scenario.json"}
    dump_annotations(sc.videos, paths["annotations"])
    dump_annotations(simulate_detections(sc.videos, spec.seed, spec.detection_drop,
                                         spec.detection_jitter), paths["detections"])
    paths["vocab"].write_text(json.dumps(vocab.to_json(), indent=2) + "\n", encoding="utf-8")
    write_store(sc.videos, ScriptedFeatures.for_spec(spec), paths["features"],
                vocab.num_objects)
    paths["scenario"].write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n",
                                 encoding="utf-8")
    return paths
