"""
Closed vocabularies for event quadruples and scene graphs
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

EVENT_TYPES = [
    "Fighting", "Animals", "Water", "Vandalism", "Accidents", "Robbery",
    "Theft", "Pedestrian", "Fire", "Violations", "Forbidden",
]

SCENES = [
    "School", "Shop", "Underwater", "Street", "Road", "Boat", "Wild",
    "Forest", "Residence", "Bank", "Commercial", "Factory", "Lawn", "Other",
]

SUBJECTS = [
    "people", "man", "woman", "child", "driver", "cyclist", "pedestrian", "thief",
    "robber", "student", "worker", "police", "crowd", "passenger", "shopkeeper",
    "customer", "guard", "swimmer", "diver", "fisherman", "sailor", "hiker",
    "hunter", "farmer", "dog", "cat", "cow", "horse", "bear", "snake", "bird",
    "monkey", "car", "truck", "bus", "motorcycle", "bicycle", "boat", "train", "fire",
]

OBJECTS = [
    "person", "car", "truck", "bus", "motorcycle", "bicycle", "road", "street",
    "building", "door", "window", "shop", "shelf", "goods", "wallet", "bag",
    "phone", "cash", "counter", "fence", "tree", "grass", "water", "river",
    "sea", "boat", "ship", "animal", "dog", "fire", "smoke", "house", "wall",
    "sign", "traffic light", "crosswalk", "machine", "box", "table", "chair",
]

RELATIONS = [
    "near", "on", "in", "holding", "hitting", "chasing", "riding", "taking",
    "pushing", "behind", "under", "against",
]

# Training events per scene; default scene sampling weights.
SCENE_EVENT_COUNTS = {
    "School": 55, "Shop": 107, "Underwater": 78, "Street": 113, "Road": 114,
    "Boat": 115, "Wild": 111, "Forest": 102, "Residence": 117, "Bank": 89,
    "Commercial": 105, "Factory": 82, "Lawn": 104, "Other": 56,
}


def normalize_label(label: str) -> str:
    """Canonical comparison form: lowercase, surrounding whitespace removed."""
    return str(label).strip().lower()


@dataclass(frozen=True)
class Vocabulary:
    """Ordered closed vocabulary with id lookups."""
    name: str
    entries: Tuple[str, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def index(self, label: str) -> int:
        key = normalize_label(label)
        for i, entry in enumerate(self.entries):
            if normalize_label(entry) == key:
                return i
        raise KeyError(f"{label!r} is not in the {self.name} vocabulary")

    def label(self, index: int) -> str:
        if not 0 <= index < len(self.entries):
            raise IndexError(f"{self.name} id {index} outside [0, {len(self.entries)})")
        return self.entries[index]

    def truncated(self, size: int) -> "Vocabulary":
        if not 1 <= size <= len(self.entries):
            raise ValueError(f"{self.name} size must be in [1, {len(self.entries)}], got {size}")
        return Vocabulary(self.name, self.entries[:size])


VOCABULARIES: Dict[str, Vocabulary] = {
    "subject": Vocabulary("subject", tuple(SUBJECTS)),
    "event_type": Vocabulary("event_type", tuple(EVENT_TYPES)),
    "object": Vocabulary("object", tuple(OBJECTS)),
    "scene": Vocabulary("scene", tuple(SCENES)),
    "relation": Vocabulary("relation", tuple(RELATIONS)),
}


def get_vocabulary(name: str, size: Optional[int] = None) -> Vocabulary:
    """Get a vocabulary by name, optionally cut to its first `size` entries"""
    vocabulary = VOCABULARIES[name]
    return vocabulary if size is None else vocabulary.truncated(size)


def get_supported_vocabularies() -> List[str]:
    """Get list of all vocabulary names"""
    return list(VOCABULARIES.keys())
