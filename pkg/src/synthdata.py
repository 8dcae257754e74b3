"""
Deterministic synthetic dataset of multi-scene videos with planted abnormal events.

Every event draws a template (subject, event type, object) from a per-dataset
catalogue and is planted into exactly one local channel (pose, object relation
or background) chosen by the informativeness mix. Global features always carry
the video's scene code, plus a type-agnostic activity code inside events.
"""
import concurrent.futures
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from experts import (
    BOX_FEATURES, JOINT_COUNT, JOINT_FEATURES, LOCAL_EXPERTS,
    ExpertTag, FrameFeatures, ObjectRelationGraph, PoseGraph,
)
from vocabulary import SCENE_EVENT_COUNTS, SCENES, Vocabulary, get_vocabulary

logger = logging.getLogger(__name__)

FPS = 8
FORMAT_NAME = "mvae-synthetic"
FORMAT_VERSION = 1
DEFAULT_MIX = (0.45, 0.25, 0.30)

# The node class every person box uses in relation graphs.
PERSON_CLASS = 0


class DatasetFormatError(ValueError):
    """Malformed dataset or manifest file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InfeasibleConfigError(ValueError):
    """Generator settings that cannot produce a valid video."""


class GeneratorConfig(BaseModel):
    """Settings for generate(); every invariant is checked on construction."""
    seed: int = 0
    videos: int = Field(default=100, ge=0)
    duration_min_s: float = Field(default=40.0, gt=0)
    duration_max_s: float = Field(default=120.0, gt=0)
    events_mean: float = Field(default=1.68, ge=1.0)
    event_min_s: float = Field(default=2.0, gt=0)
    event_max_s: float = Field(default=10.0, gt=0)
    mix: Tuple[float, float, float] = DEFAULT_MIX
    noise: float = Field(default=0.05, ge=0)
    n_subjects: int = Field(default=40, ge=1)
    n_event_types: int = Field(default=11, ge=1)
    n_objects: int = Field(default=40, ge=2)
    n_scenes: int = Field(default=14, ge=1)
    templates_per_type: int = Field(default=2, ge=1)
    max_persons: int = Field(default=2, ge=1)
    d_b: int = Field(default=16, ge=1)
    d_g: int = Field(default=16, ge=1)
    scene_weights: Optional[List[float]] = None
    workers: int = Field(default=4, ge=1)

    @field_validator("mix")
    @classmethod
    def _mix_is_distribution(cls, mix):
        if any(share < 0 for share in mix):
            raise ValueError(f"mix entries must be non-negative, got {list(mix)}")
        if abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"mix must sum to 1, got {sum(mix)}")
        return mix

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.duration_min_s > self.duration_max_s:
            raise ValueError("duration_min_s exceeds duration_max_s")
        if self.event_min_s > self.event_max_s:
            raise ValueError("event_min_s exceeds event_max_s")
        for name, vocab in (("n_subjects", "subject"), ("n_event_types", "event_type"),
                            ("n_objects", "object"), ("n_scenes", "scene")):
            limit = len(get_vocabulary(vocab))
            if getattr(self, name) > limit:
                raise ValueError(f"{name} must be at most {limit}")
        triples = len(get_vocabulary("relation")) * (self.n_objects - 1)
        if triples < self.n_scenes + self.templates_per_type * self.n_event_types:
            raise ValueError(f"only {triples} distinct relation triples for scenes and templates; raise n_objects")
        if self.scene_weights is not None:
            if len(self.scene_weights) != self.n_scenes:
                raise ValueError(f"scene_weights needs {self.n_scenes} entries")
            if any(w < 0 for w in self.scene_weights) or sum(self.scene_weights) <= 0:
                raise ValueError("scene_weights must be non-negative with a positive sum")
        return self

    @property
    def min_video_frames(self) -> int:
        return max(1, round(self.duration_min_s * FPS))

    @property
    def max_video_frames(self) -> int:
        return max(1, round(self.duration_max_s * FPS))

    @property
    def min_event_frames(self) -> int:
        return max(1, round(self.event_min_s * FPS))

    @property
    def max_event_frames(self) -> int:
        return max(1, round(self.event_max_s * FPS))

    def scene_distribution(self) -> np.ndarray:
        if self.scene_weights is not None:
            weights = np.asarray(self.scene_weights, dtype=np.float64)
        else:
            weights = np.array([SCENE_EVENT_COUNTS[s] for s in SCENES[: self.n_scenes]], dtype=np.float64)
        return weights / weights.sum()

    def check_feasible(self, n_frames: Optional[int] = None) -> None:
        shortest = n_frames if n_frames is not None else self.min_video_frames
        if self.min_event_frames > shortest:
            raise InfeasibleConfigError(
                f"events need at least {self.min_event_frames} frames but a video may have only {shortest}"
            )

    def vocabularies(self) -> Dict[str, Vocabulary]:
        return {
            "subject": get_vocabulary("subject", self.n_subjects),
            "event_type": get_vocabulary("event_type", self.n_event_types),
            "object": get_vocabulary("object", self.n_objects),
            "scene": get_vocabulary("scene", self.n_scenes),
        }


class EventQuadruple(BaseModel):
    model_config = {"frozen": True}

    subject: str
    event_type: str
    object: str
    scene: str

    def elements(self) -> Tuple[str, str, str, str]:
        return (self.subject, self.event_type, self.object, self.scene)


class AbnormalEvent(BaseModel):
    start_s: float = Field(ge=0)
    end_s: float
    quadruple: EventQuadruple
    channel: Optional[ExpertTag] = None

    @model_validator(mode="after")
    def _ordered(self):
        if not self.start_s < self.end_s:
            raise ValueError(f"event start {self.start_s} must precede end {self.end_s}")
        return self

    def frame_span(self, fps: int = FPS) -> Tuple[int, int]:
        """Half-open frame range: frame f is inside iff start·fps ≤ f < end·fps."""
        return int(math.ceil(self.start_s * fps - 1e-9)), int(math.ceil(self.end_s * fps - 1e-9))


@dataclass
class SyntheticVideo:
    video_id: str
    scene: str
    poses: PoseGraph
    relations: List[ObjectRelationGraph]
    features: FrameFeatures
    frame_labels: np.ndarray
    events: List[AbnormalEvent] = field(default_factory=list)
    fps: int = FPS

    def __post_init__(self):
        self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64).reshape(-1)
        m = self.n_frames
        if self.poses.n_frames != m or len(self.relations) != m or self.features.n_frames != m:
            raise ValueError(f"video {self.video_id}: per-frame inputs disagree with {m} frame labels")
        expected = np.zeros(m, dtype=np.int64)
        for event in self.events:
            if event.end_s > self.duration_s + 1e-9:
                raise ValueError(f"video {self.video_id}: event ends after {self.duration_s}s")
            start, end = event.frame_span(self.fps)
            expected[start:end] = 1
        if not np.array_equal(expected, self.frame_labels):
            raise ValueError(f"video {self.video_id}: frame labels do not match event windows")

    @property
    def n_frames(self) -> int:
        return int(self.frame_labels.shape[0])

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.fps

    def event_spans(self) -> List[Tuple[int, int]]:
        return [event.frame_span(self.fps) for event in self.events]

    def to_record(self) -> Dict[str, Any]:
        return {
            "id": self.video_id,
            "scene": self.scene,
            "fps": self.fps,
            "labels": self.frame_labels.tolist(),
            "events": [event.model_dump(mode="json") for event in self.events],
            "poses": {"joints": self.poses.joints.tolist(), "frame_index": self.poses.frame_index.tolist()},
            "relations": [
                {"classes": g.classes.tolist(), "boxes": g.boxes.tolist(), "edges": g.edges.tolist()}
                for g in self.relations
            ],
            "background": self.features.background.tolist(),
            "global": self.features.global_features.tolist(),
        }

    @classmethod
    def from_record(cls, record: "VideoRecord") -> "SyntheticVideo":
        n_frames = len(record.labels)
        joints = np.asarray(record.poses.joints, dtype=np.float64).reshape(-1, JOINT_COUNT, JOINT_FEATURES)
        return cls(
            video_id=record.id,
            scene=record.scene,
            poses=PoseGraph(joints=joints, frame_index=record.poses.frame_index, n_frames=n_frames),
            relations=[
                ObjectRelationGraph(classes=g.classes, boxes=np.asarray(g.boxes).reshape(-1, BOX_FEATURES), edges=np.asarray(g.edges).reshape(-1, 3))
                for g in record.relations
            ],
            features=FrameFeatures(background=np.asarray(record.background), global_features=np.asarray(record.global_)),
            frame_labels=record.labels,
            events=list(record.events),
            fps=record.fps,
        )


class _PoseRecord(BaseModel):
    joints: List[List[List[float]]]
    frame_index: List[int]


class _RelationRecord(BaseModel):
    classes: List[int]
    boxes: List[List[float]]
    edges: List[List[int]]


class VideoRecord(BaseModel):
    """One dataset line."""
    id: str
    scene: str
    fps: int
    labels: List[int]
    events: List[AbnormalEvent]
    poses: _PoseRecord
    relations: List[_RelationRecord]
    background: List[List[float]]
    global_: List[List[float]] = Field(alias="global")


class DatasetHeader(BaseModel):
    format: str
    version: int
    videos: int = Field(ge=0)
    config: Optional[GeneratorConfig] = None


@dataclass
class Dataset:
    videos: List[SyntheticVideo]
    config: Optional[GeneratorConfig] = None

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        by_id = {video.video_id: video for video in self.videos}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DatasetFormatError(f"split names video ids missing from the dataset: {missing[:5]}")
        return Dataset([by_id[i] for i in ids], self.config)


# ---------------------------------------------------------------------------
# Catalogue
# ---------------------------------------------------------------------------

@dataclass
class EventTemplate:
    subject: int
    event_type: int
    object: int
    motif: np.ndarray            # (17, 2) joint coordinates
    relation: Tuple[int, int, int]  # subject node class, relation id, object node class
    boxes: np.ndarray            # (2, 4)
    background: np.ndarray       # (d_b,)


@dataclass
class Catalogue:
    """Signatures shared by every video of one dataset."""
    templates: List[EventTemplate]
    scene_codes: np.ndarray       # (n_scenes, d_g)
    activity_code: np.ndarray     # (d_g,)
    normal_motifs: np.ndarray     # (n_scenes, 17, 2)
    normal_relations: List[Tuple[int, int, int]]
    normal_boxes: np.ndarray      # (n_scenes, 2, 4)
    normal_background: np.ndarray  # (n_scenes, d_b)


def _random_boxes(rng: np.random.Generator, count: int) -> np.ndarray:
    corners = rng.uniform(0.2, 0.45, size=(count, 2))
    sizes = rng.uniform(0.1, 0.3, size=(count, 2))
    return np.concatenate([corners, corners + sizes], axis=1)


def _random_motif(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.1, 0.9, size=(JOINT_COUNT, 2))


def build_catalogue(config: GeneratorConfig, rng: np.random.Generator) -> Catalogue:
    n_relations = len(get_vocabulary("relation"))
    used_triples = set()

    def fresh_triple() -> Tuple[int, int, int]:
        while True:
            triple = (PERSON_CLASS, int(rng.integers(n_relations)), int(rng.integers(1, config.n_objects)))
            if triple not in used_triples:
                used_triples.add(triple)
                return triple

    normal_relations = [fresh_triple() for _ in range(config.n_scenes)]
    templates = []
    for k in range(config.templates_per_type * config.n_event_types):
        templates.append(EventTemplate(
            subject=int(rng.integers(config.n_subjects)),
            event_type=k % config.n_event_types,
            object=int(rng.integers(config.n_objects)),
            motif=_random_motif(rng),
            relation=fresh_triple(),
            boxes=_random_boxes(rng, 2),
            background=rng.uniform(-1.0, 1.0, size=config.d_b),
        ))
    return Catalogue(
        templates=templates,
        scene_codes=rng.uniform(-1.0, 1.0, size=(config.n_scenes, config.d_g)),
        activity_code=rng.uniform(-1.0, 1.0, size=config.d_g),
        normal_motifs=np.stack([_random_motif(rng) for _ in range(config.n_scenes)]),
        normal_relations=normal_relations,
        normal_boxes=np.stack([_random_boxes(rng, 2) for _ in range(config.n_scenes)]),
        normal_background=rng.uniform(-1.0, 1.0, size=(config.n_scenes, config.d_b)),
    )


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _place_events(rng: np.random.Generator, config: GeneratorConfig, n_frames: int, video_id: str) -> List[Tuple[int, int]]:
    """Non-overlapping half-open frame spans separated by at least one normal frame."""
    count = 1 + int(rng.poisson(config.events_mean - 1.0))
    lengths = list(rng.integers(config.min_event_frames, config.max_event_frames + 1, size=count))
    lengths = [min(int(n), n_frames) for n in lengths]
    while len(lengths) > 1 and sum(lengths) + len(lengths) - 1 > n_frames:
        lengths.pop()
    if len(lengths) < count:
        logger.warning(f"{video_id}: only {len(lengths)} of {count} events fit in {n_frames} frames")
    free = n_frames - sum(lengths) - (len(lengths) - 1)
    offsets = np.sort(rng.integers(0, free + 1, size=len(lengths)))
    spans = []
    cursor = 0
    for i, length in enumerate(lengths):
        start = cursor + int(offsets[i]) - (int(offsets[i - 1]) if i else 0)
        spans.append((start, start + length))
        cursor = start + length + 1
    return spans


def _jitter_boxes(rng: np.random.Generator, boxes: np.ndarray, noise: float) -> np.ndarray:
    if noise == 0:
        return boxes.copy()
    shift = rng.normal(0.0, noise, size=(boxes.shape[0], 2))
    low = -boxes[:, :2]
    high = 1.0 - boxes[:, 2:]
    shift = np.clip(shift, low, high)
    return boxes + np.concatenate([shift, shift], axis=1)


def _pose_frame(rng: np.random.Generator, motif: np.ndarray, persons: int, noise: float) -> np.ndarray:
    frame = np.ones((persons, JOINT_COUNT, JOINT_FEATURES))
    frame[:, :, :2] = motif
    if noise:
        frame = frame + rng.normal(0.0, noise, size=frame.shape)
    return np.clip(frame, 0.0, 1.0)


def _relation_frame(
    rng: np.random.Generator, triple: Tuple[int, int, int], boxes: np.ndarray, distractor: int, noise: float
) -> ObjectRelationGraph:
    subject_class, relation, object_class = triple
    all_boxes = np.concatenate([boxes, _random_boxes(rng, 1)], axis=0)
    return ObjectRelationGraph(
        classes=np.array([subject_class, object_class, distractor]),
        boxes=_jitter_boxes(rng, all_boxes, noise),
        edges=np.array([[0, relation, 1]]),
    )


def generate_video(
    index: int,
    seed: np.random.SeedSequence,
    config: GeneratorConfig,
    catalogue: Catalogue,
    n_frames: Optional[int] = None,
) -> SyntheticVideo:
    """Build one video from its own derived seed; n_frames overrides the sampled length."""
    rng = np.random.default_rng(seed)
    video_id = f"v{index:05d}"
    vocab = config.vocabularies()
    if n_frames is None:
        n_frames = int(rng.integers(config.min_video_frames, config.max_video_frames + 1))
    config.check_feasible(n_frames)

    scene = int(rng.choice(config.n_scenes, p=config.scene_distribution()))
    persons = int(rng.integers(1, config.max_persons + 1))
    spans = _place_events(rng, config, n_frames, video_id)
    templates = [catalogue.templates[int(rng.integers(len(catalogue.templates)))] for _ in spans]
    channels = [LOCAL_EXPERTS[int(rng.choice(len(LOCAL_EXPERTS), p=config.mix))] for _ in spans]

    active: List[Optional[int]] = [None] * n_frames
    for k, (start, end) in enumerate(spans):
        for f in range(start, end):
            active[f] = k

    pose_frames, relations = [], []
    background = np.zeros((n_frames, config.d_b))
    global_features = np.zeros((n_frames, config.d_g))
    distractor = int(rng.integers(1, config.n_objects))
    for f in range(n_frames):
        k = active[f]
        template = templates[k] if k is not None else None
        channel = channels[k] if k is not None else None

        motif = template.motif if channel == ExpertTag.AE else catalogue.normal_motifs[scene]
        pose_frames.append(_pose_frame(rng, motif, persons, config.noise))

        if channel == ExpertTag.ORE:
            triple, boxes = template.relation, template.boxes
        else:
            triple, boxes = catalogue.normal_relations[scene], catalogue.normal_boxes[scene]
        relations.append(_relation_frame(rng, triple, boxes, distractor, config.noise))

        code = template.background if channel == ExpertTag.BE else catalogue.normal_background[scene]
        background[f] = code + (rng.normal(0.0, config.noise, size=config.d_b) if config.noise else 0.0)

        global_features[f] = catalogue.scene_codes[scene]
        if k is not None:
            global_features[f] += catalogue.activity_code
        if config.noise:
            global_features[f] += rng.normal(0.0, config.noise, size=config.d_g)

    labels = np.zeros(n_frames, dtype=np.int64)
    events = []
    scene_label = vocab["scene"].label(scene)
    for (start, end), template, channel in zip(spans, templates, channels):
        labels[start:end] = 1
        events.append(AbnormalEvent(
            start_s=start / FPS,
            end_s=end / FPS,
            quadruple=EventQuadruple(
                subject=vocab["subject"].label(template.subject),
                event_type=vocab["event_type"].label(template.event_type),
                object=vocab["object"].label(template.object),
                scene=scene_label,
            ),
            channel=channel,
        ))

    return SyntheticVideo(
        video_id=video_id,
        scene=scene_label,
        poses=PoseGraph.from_frames(pose_frames),
        relations=relations,
        features=FrameFeatures(background=background, global_features=global_features),
        frame_labels=labels,
        events=events,
    )


def _seed_streams(seed: int, videos: int) -> Tuple[np.random.SeedSequence, List[np.random.SeedSequence]]:
    catalogue_seed, video_seed = np.random.SeedSequence(seed).spawn(2)
    return catalogue_seed, video_seed.spawn(videos)


def generate_with_catalogue(config: GeneratorConfig, n_frames: Optional[int] = None) -> Tuple[Dataset, Catalogue]:
    config.check_feasible(n_frames)
    catalogue_seed, video_seeds = _seed_streams(config.seed, config.videos)
    catalogue = build_catalogue(config, np.random.default_rng(catalogue_seed))

    def build(index: int) -> SyntheticVideo:
        return generate_video(index, video_seeds[index], config, catalogue, n_frames)

    with concurrent.futures.ThreadPoolExecutor(max_workers=config.workers) as executor:
        videos = list(executor.map(build, range(config.videos)))
    dataset = Dataset(videos, config)
    stats = summarize(dataset)
    logger.info(f"generated {stats['videos']} videos, {stats['events']} events (mean {stats['events_mean']:.3f})")
    return dataset, catalogue


def generate(config: GeneratorConfig, n_frames: Optional[int] = None) -> Dataset:
    """Deterministic in config.seed; worker count never changes the output."""
    return generate_with_catalogue(config, n_frames)[0]


def summarize(dataset: Dataset) -> Dict[str, Any]:
    events = [event for video in dataset for event in video.events]
    channels = {tag.value: 0 for tag in LOCAL_EXPERTS}
    for event in events:
        if event.channel is not None:
            channels[event.channel.value] += 1
    scenes: Dict[str, int] = {}
    for video in dataset:
        scenes[video.scene] = scenes.get(video.scene, 0) + 1
    return {
        "videos": len(dataset),
        "events": len(events),
        "events_mean": len(events) / len(dataset) if len(dataset) else 0.0,
        "channel_share": {k: (v / len(events) if events else 0.0) for k, v in channels.items()},
        "scenes": scenes,
        "frames": int(sum(video.n_frames for video in dataset)),
    }


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _canonical(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _dataset_lines(dataset: Dataset) -> List[str]:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "videos": len(dataset),
        "config": dataset.config.model_dump(mode="json", exclude={"workers"}) if dataset.config is not None else None,
    }
    return [_canonical(header)] + [_canonical(video.to_record()) for video in dataset]


def write_dataset(dataset: Dataset, path: Path) -> str:
    """Write header plus one video per line; returns the content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = _dataset_lines(dataset)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return _hash_lines(lines)


def _hash_lines(lines: Sequence[str]) -> str:
    digest = hashlib.sha256()
    for line in lines:
        digest.update(line.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def dataset_hash(dataset: Dataset) -> str:
    return _hash_lines(_dataset_lines(dataset))


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_dataset(path: Path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines:
        raise DatasetFormatError("missing header", line=1)
    try:
        header = DatasetHeader.model_validate_json(lines[0])
    except ValidationError as e:
        raise DatasetFormatError(f"invalid header: {e.errors()[0]['msg']}", line=1) from e
    if header.format != FORMAT_NAME:
        raise DatasetFormatError(f"unexpected format {header.format!r}", line=1)
    if header.version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {header.version}, expected {FORMAT_VERSION}", line=1)

    videos = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = VideoRecord.model_validate_json(line)
            videos.append(SyntheticVideo.from_record(record))
        except ValidationError as e:
            error = e.errors()[0]
            where = ".".join(str(part) for part in error["loc"])
            raise DatasetFormatError(f"{where}: {error['msg']}", line=number) from e
        except ValueError as e:
            raise DatasetFormatError(str(e), line=number) from e
    if len(videos) != header.videos:
        raise DatasetFormatError(f"header announces {header.videos} videos, found {len(videos)}", line=1)
    return Dataset(videos, header.config)


# ---------------------------------------------------------------------------
# Split manifest
# ---------------------------------------------------------------------------

class SplitManifest(BaseModel):
    seed: int
    inference_fraction: float
    train: List[str]
    inference: List[str]


def split_dataset(dataset: Dataset, inference_fraction: float = 0.2, seed: int = 0) -> SplitManifest:
    """Scene-stratified train/inference split."""
    if not 0.0 <= inference_fraction < 1.0:
        raise ValueError(f"inference_fraction must be in [0, 1), got {inference_fraction}")
    rng = np.random.default_rng(seed)
    by_scene: Dict[str, List[str]] = {}
    for video in dataset:
        by_scene.setdefault(video.scene, []).append(video.video_id)
    held_out = set()
    for scene in sorted(by_scene):
        ids = sorted(by_scene[scene])
        order = rng.permutation(len(ids))
        take = int(round(len(ids) * inference_fraction))
        held_out.update(ids[i] for i in order[:take])
    ordered = [video.video_id for video in dataset]
    return SplitManifest(
        seed=seed,
        inference_fraction=inference_fraction,
        train=[i for i in ordered if i not in held_out],
        inference=[i for i in ordered if i in held_out],
    )


def write_splits(manifest: SplitManifest, path: Path) -> None:
    Path(path).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_splits(path: Path) -> SplitManifest:
    try:
        return SplitManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DatasetFormatError(f"invalid split manifest: {e.errors()[0]['msg']}") from e
