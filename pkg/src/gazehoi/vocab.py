"""Object and predicate vocabularies."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import SchemaError

HUMAN_CLASS = 0

SPATIAL_PREDICATES = (
    "away", "towards", "above", "next_to", "behind", "in_front_of", "inside", "beneath",
)

ACTION_PREDICATES = (
    "watch", "hold", "touch", "lean_on", "ride", "push", "pull", "lift", "carry", "grab",
    "release", "throw", "kick", "hit", "hug", "kiss", "bite", "lick", "smell", "caress",
    "knock", "pat", "point_to", "squeeze", "press", "wave", "chase", "get_on", "get_off",
    "hold_hand_of", "shake_hand_with", "wave_hand_to", "speak_to", "shout_at", "feed",
    "open", "close", "use", "cut", "clean", "drive", "play",
)

OBJECT_CLASSES = (
    "person", "aircraft", "antelope", "baby_seat", "baby_walker", "backpack", "ball", "bat",
    "bear", "bench", "bicycle", "bird", "bottle", "bread", "bus", "cake", "camel", "camera",
    "car", "cat", "cattle", "cellphone", "chair", "chicken", "crab", "crocodile", "cup",
    "dish", "dog", "duck", "electric_fan", "elephant", "faucet", "fish", "frisbee", "fruits",
    "guitar", "hamster", "handbag", "horse", "kangaroo", "laptop", "leopard", "lion",
    "microwave", "motorcycle", "oven", "panda", "penguin", "piano", "pig", "rabbit", "racket",
    "refrigerator", "scooter", "screen", "sheep", "sink", "skateboard", "ski", "snake",
    "snowboard", "squirrel", "stingray", "stool", "stop_sign", "suitcase", "surfboard",
    "table", "tiger", "toilet", "toy", "traffic_light", "train", "turtle", "vegetables",
    "watercraft", "kite",
)


@dataclass(frozen=True)
class Vocabulary:
    objects: tuple[str, ...] = OBJECT_CLASSES
    spatial: tuple[str, ...] = SPATIAL_PREDICATES
    action: tuple[str, ...] = ACTION_PREDICATES

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_predicates(self) -> int:
        return len(self.spatial) + len(self.action)

    @property
    def predicates(self) -> tuple[str, ...]:
        return self.spatial + self.action

    def predicate_id(self, name: str) -> int:
        return self.predicates.index(name)

    def object_id(self, name: str) -> int:
        return self.objects.index(name)

    def to_json(self) -> dict:
        return {"objects": list(self.objects),
                "predicates": {"spatial": list(self.spatial), "action": list(self.action)}}


DEFAULT_VOCAB = Vocabulary()


def load_vocabulary(path) -> Vocabulary:
    """Read the sidecar vocabulary JSON."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        objects = raw["objects"]
        spatial = raw["predicates"]["spatial"]
        action = raw["predicates"]["action"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed vocabulary ({exc})") from exc
    for name, seq in (("objects", objects), ("spatial", spatial), ("action", action)):
        if not isinstance(seq, list) or not all(isinstance(s, str) for s in seq):
            raise SchemaError(f"{path}: '{name}' must be a list of strings")
    return Vocabulary(tuple(objects), tuple(spatial), tuple(action))
