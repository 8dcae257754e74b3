"""
Spatial experts: action, object-relation, background and global.

Each expert maps one video's per-frame structured inputs to an
ExpertOutput of shape (frames x d). Graph inputs are plain numpy arrays;
only the learned parts run through numkernel so they are differentiable.
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

import numkernel as nk
from numkernel import ParamSet, Tensor
from vocabulary import OBJECTS

JOINT_COUNT = 17
JOINT_FEATURES = 3  # x, y, confidence
BOX_FEATURES = 4

# 17-keypoint human skeleton (nose, eyes, ears, shoulders, elbows, wrists,
# hips, knees, ankles), zero-based.
SKELETON_EDGES: Tuple[Tuple[int, int], ...] = (
    (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
    (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),
    (5, 11), (6, 12), (11, 12),
    (11, 13), (13, 15), (12, 14), (14, 16),
    (1, 2),
)


class ExpertInputError(ValueError):
    """Structured expert input violates its contract."""


class ExpertTag(str, Enum):
    AE = "AE"
    ORE = "ORE"
    BE = "BE"
    GE = "GE"


EXPERT_ORDER: Tuple[ExpertTag, ...] = (ExpertTag.AE, ExpertTag.ORE, ExpertTag.BE, ExpertTag.GE)
LOCAL_EXPERTS: Tuple[ExpertTag, ...] = (ExpertTag.AE, ExpertTag.ORE, ExpertTag.BE)

# Parameter block prefix per expert.
EXPERT_BLOCKS = {ExpertTag.AE: "ae", ExpertTag.ORE: "ore", ExpertTag.BE: "be", ExpertTag.GE: "ge"}


def skeleton_adjacency(self_loops: bool = False) -> np.ndarray:
    adjacency = np.zeros((JOINT_COUNT, JOINT_COUNT), dtype=bool)
    for a, b in SKELETON_EDGES:
        adjacency[a, b] = adjacency[b, a] = True
    if self_loops:
        np.fill_diagonal(adjacency, True)
    return adjacency


@dataclass
class PoseGraph:
    """
    Skeletons of every person in every frame of one video.

    joints holds (persons, 17, 3) rows of normalised x, y and confidence;
    frame_index maps each person row to its frame.
    """
    joints: np.ndarray
    frame_index: np.ndarray
    n_frames: int

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, JOINT_COUNT, JOINT_FEATURES)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64).reshape(-1)
        if self.joints.shape[0] != self.frame_index.shape[0]:
            raise ExpertInputError("every person needs exactly one frame index")
        if self.frame_index.size and (self.frame_index.min() < 0 or self.frame_index.max() >= self.n_frames):
            raise ExpertInputError(f"person frame index outside [0, {self.n_frames})")
        if np.any(self.joints < 0.0) or np.any(self.joints > 1.0):
            raise ExpertInputError("joint coordinates and confidences must lie in [0, 1]")

    @classmethod
    def from_frames(cls, frames: Sequence[np.ndarray]) -> "PoseGraph":
        """Build from one (persons, 17, 3) array per frame."""
        blocks = [np.asarray(f, dtype=np.float64).reshape(-1, JOINT_COUNT, JOINT_FEATURES) for f in frames]
        joints = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, JOINT_COUNT, JOINT_FEATURES))
        index = np.concatenate([np.full(len(b), i, dtype=np.int64) for i, b in enumerate(blocks)]) if blocks else np.zeros(0, dtype=np.int64)
        return cls(joints=joints, frame_index=index, n_frames=len(blocks))

    def frame(self, i: int) -> np.ndarray:
        return self.joints[self.frame_index == i]

    def persons_per_frame(self) -> np.ndarray:
        return np.bincount(self.frame_index, minlength=self.n_frames)


@dataclass
class ObjectRelationGraph:
    """
    Scene graph of one frame.

    classes: (k,) object-vocabulary ids; boxes: (k, 4) normalised x1, y1, x2, y2;
    edges: (e, 3) rows of (subject node, relation id, object node).
    """
    classes: np.ndarray
    boxes: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, BOX_FEATURES)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        k = self.classes.shape[0]
        if self.boxes.shape[0] != k:
            raise ExpertInputError("one box per node is required")
        if np.any(self.boxes[:, 0] >= self.boxes[:, 2]) or np.any(self.boxes[:, 1] >= self.boxes[:, 3]):
            raise ExpertInputError("boxes need x1 < x2 and y1 < y2")
        if self.edges.size:
            ends = self.edges[:, [0, 2]]
            if ends.min() < 0 or ends.max() >= k:
                raise ExpertInputError("edge endpoint does not index an existing node")
            if np.any(self.edges[:, 0] == self.edges[:, 2]):
                raise ExpertInputError("self-relations are not allowed")

    @property
    def n_nodes(self) -> int:
        return int(self.classes.shape[0])

    def related_nodes(self) -> np.ndarray:
        """Nodes taking part in at least one relation, ascending."""
        if not self.edges.size:
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.edges[:, [0, 2]])

    def propagation_matrix(self, literal_degree: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """
        Masked, normalised adjacency over the related nodes.

        Returns (kept node ids, matrix). The default is D^-1/2 Ã D^-1/2;
        literal_degree gives D^1/2 Ã D^1/2.
        """
        kept = self.related_nodes()
        position = {int(node): i for i, node in enumerate(kept)}
        adjacency = np.eye(len(kept))
        for subject, _, obj in self.edges:
            p, q = position[int(subject)], position[int(obj)]
            adjacency[p, q] = adjacency[q, p] = 1.0
        degree = adjacency.sum(axis=1)
        scale = np.sqrt(degree) if literal_degree else 1.0 / np.sqrt(degree)
        return kept, scale[:, None] * adjacency * scale[None, :]


@dataclass
class FrameFeatures:
    """Provider vectors per frame: background (M, d_b) and global (M, d_g)."""
    background: Optional[np.ndarray]
    global_features: Optional[np.ndarray]

    def __post_init__(self):
        if self.background is not None:
            self.background = np.asarray(self.background, dtype=np.float64)
        if self.global_features is not None:
            self.global_features = np.asarray(self.global_features, dtype=np.float64)
        if self.background is not None and self.global_features is not None:
            if self.background.shape[0] != self.global_features.shape[0]:
                raise ExpertInputError("background and global features cover different frame counts")

    @property
    def n_frames(self) -> int:
        source = self.background if self.background is not None else self.global_features
        return 0 if source is None else int(source.shape[0])


@dataclass
class ExpertOutput:
    tag: ExpertTag
    matrix: Tensor

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class ModelDims:
    """Sizes shared by experts and heads."""
    d: int = 32
    d_b: int = 16
    d_g: int = 16
    n_node_classes: int = len(OBJECTS)
    gtn_layers: int = 2
    n_subjects: int = 40
    n_event_types: int = 11
    n_objects: int = 40
    n_scenes: int = 14


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform in [-1/√fan_in, +1/√fan_in]."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_expert_params(params: ParamSet, dims: ModelDims, rng: np.random.Generator) -> None:
    d = dims.d
    params.add("ae.embed", uniform_init(rng, (JOINT_FEATURES, d), JOINT_FEATURES))
    params.add("ae.W_a", uniform_init(rng, (d, d), d))
    params.add("ae.W_k", uniform_init(rng, (2 * d, d), 2 * d))
    params.add("ae.video", uniform_init(rng, (dims.d_g, d), dims.d_g))
    params.add("ae.query", uniform_init(rng, (d, d), d))
    params.add("ae.key", uniform_init(rng, (d, d), d))
    params.add("ae.value", uniform_init(rng, (d, d), d))

    params.add("ore.class_embed", uniform_init(rng, (dims.n_node_classes, d), d))
    params.add("ore.box_embed", uniform_init(rng, (BOX_FEATURES, d), BOX_FEATURES))
    for layer in range(dims.gtn_layers):
        params.add(f"ore.layer{layer}", uniform_init(rng, (d, d), d))

    params.add("be.proj", uniform_init(rng, (dims.d_b, d), dims.d_b))

    params.add("ge.W1", uniform_init(rng, (dims.d_g, d), dims.d_g))
    params.add("ge.b1", np.zeros(d))
    params.add("ge.W2", uniform_init(rng, (d, d), d))
    params.add("ge.b2", np.zeros(d))


def graph_attention(
    nodes: Tensor,
    adjacency: np.ndarray,
    W_a: Tensor,
    W_k: Tensor,
    self_loops: bool = True,
    return_weights: bool = False,
):
    """
    One graph-attention update over (..., n, d) node features.

    α_kj = softmax over N(k) of (W_a h_k)·(W_a h_j)/√d, ĥ_k = Σ α_kj h_j,
    h_k' = ReLU(W_k [ĥ_k, h_k]). Row-vector convention: W h is h @ W.
    """
    adjacency = np.asarray(adjacency, dtype=bool)
    n = nodes.shape[-2]
    if adjacency.shape != (n, n):
        raise ExpertInputError(f"adjacency {list(adjacency.shape)} does not match {n} nodes")
    if not np.array_equal(adjacency, adjacency.T):
        raise ExpertInputError("adjacency must be symmetric")
    mask = adjacency | np.eye(n, dtype=bool) if self_loops else adjacency
    if not np.all(mask.any(axis=1)):
        raise ExpertInputError("a node has an empty neighbourhood and self-loops are disabled")

    projected = nk.matmul(nodes, W_a)
    scores = nk.mul(nk.matmul(projected, nk.transpose(projected)), 1.0 / math.sqrt(W_a.shape[-1]))
    weights = nk.masked_softmax(scores, mask, axis=-1)
    aggregated = nk.matmul(weights, nodes)
    updated = nk.relu(nk.matmul(nk.concat([aggregated, nodes], axis=-1), W_k))
    if return_weights:
        return updated, weights.data
    return updated


def video_tokens(frames: FrameFeatures, params: ParamSet) -> Tensor:
    """Per-frame video tokens T_v: linear map of the global provider vector."""
    if frames.global_features is None:
        raise ExpertInputError("video tokens need global frame features")
    return nk.matmul(Tensor(frames.global_features), params["ae.video"])


def person_pooling(poses: PoseGraph) -> np.ndarray:
    """(frames x persons) matrix averaging the persons of each frame; empty frames stay zero."""
    counts = poses.persons_per_frame()
    pooling = np.zeros((poses.n_frames, poses.joints.shape[0]))
    for person, frame in enumerate(poses.frame_index):
        pooling[frame, person] = 1.0 / counts[frame]
    return pooling


def action_expert_forward(poses: PoseGraph, tokens: Tensor, params: ParamSet) -> ExpertOutput:
    """
    Skeleton graph attention, joint and person mean-pooling, then unscaled
    cross-attention with queries from the video tokens.
    """
    if tokens.shape[0] != poses.n_frames:
        raise ExpertInputError(
            f"pose frames ({poses.n_frames}) and video token frames ({tokens.shape[0]}) differ"
        )
    d = params["ae.query"].shape[0]
    if poses.joints.shape[0] == 0:
        action = nk.zeros((poses.n_frames, d))
    else:
        embedded = nk.matmul(Tensor(poses.joints), params["ae.embed"])
        joints = graph_attention(embedded, skeleton_adjacency(), params["ae.W_a"], params["ae.W_k"])
        persons = nk.mean(joints, axis=1)
        action = nk.matmul(Tensor(person_pooling(poses)), persons)

    query = nk.matmul(tokens, params["ae.query"])
    key = nk.matmul(action, params["ae.key"])
    value = nk.matmul(action, params["ae.value"])
    return ExpertOutput(ExpertTag.AE, nk.attention(query, key, value, scaled=False))


def _relation_batch(graphs: Sequence[ObjectRelationGraph], literal_degree: bool):
    """Pad the masked graphs of all frames to a common node count."""
    kept = [graph.propagation_matrix(literal_degree) for graph in graphs]
    width = max([len(nodes) for nodes, _ in kept] + [0])
    frames = len(graphs)
    classes = np.zeros((frames, width), dtype=np.int64)
    boxes = np.zeros((frames, width, BOX_FEATURES))
    propagation = np.zeros((frames, width, width))
    pooling = np.zeros((frames, 1, width))
    for f, (graph, (nodes, matrix)) in enumerate(zip(graphs, kept)):
        k = len(nodes)
        if k == 0:
            continue
        classes[f, :k] = graph.classes[nodes]
        boxes[f, :k] = graph.boxes[nodes]
        propagation[f, :k, :k] = matrix
        pooling[f, 0, :k] = 1.0 / k
    return width, classes, boxes, propagation, pooling


def mask_gtn_forward(
    graphs: Sequence[ObjectRelationGraph],
    params: ParamSet,
    layers: Optional[int] = None,
    literal_degree: bool = False,
    activation: str = "relu",
) -> ExpertOutput:
    """
    Masked graph propagation H ← σ(Â H W) over each frame's relation graph,
    mean-pooled over surviving nodes.
    """
    available = len([name for name in params.names("ore") if name.startswith("ore.layer")])
    layers = available if layers is None else layers
    if layers < 1:
        raise ExpertInputError("at least one propagation layer is required")
    if layers > available:
        raise ExpertInputError(f"{layers} layers requested but only {available} are parameterised")
    if activation not in ("relu", "linear"):
        raise ExpertInputError(f"unknown activation {activation!r}")

    d = params["ore.class_embed"].shape[1]
    width, classes, boxes, propagation, pooling = _relation_batch(graphs, literal_degree)
    if width == 0:
        return ExpertOutput(ExpertTag.ORE, nk.zeros((len(graphs), d)))

    hidden = nk.add(
        nk.take(params["ore.class_embed"], classes),
        nk.matmul(Tensor(boxes), params["ore.box_embed"]),
    )
    adjacency = Tensor(propagation)
    for layer in range(layers):
        hidden = nk.matmul(adjacency, nk.matmul(hidden, params[f"ore.layer{layer}"]))
        if activation == "relu":
            hidden = nk.relu(hidden)
    pooled = nk.matmul(Tensor(pooling), hidden)
    return ExpertOutput(ExpertTag.ORE, nk.reshape(pooled, (len(graphs), d)))


def background_expert_forward(frames: FrameFeatures, params: ParamSet) -> ExpertOutput:
    if frames.background is None:
        raise ExpertInputError("background features are missing")
    projection = params["be.proj"]
    if frames.background.ndim != 2 or frames.background.shape[1] != projection.shape[0]:
        raise ExpertInputError(
            f"background width {list(frames.background.shape)} does not match projection {list(projection.shape)}"
        )
    return ExpertOutput(ExpertTag.BE, nk.matmul(Tensor(frames.background), projection))


def global_expert_forward(frames: FrameFeatures, params: ParamSet) -> ExpertOutput:
    if frames.global_features is None:
        raise ExpertInputError("global features are missing")
    if frames.global_features.ndim != 2 or frames.global_features.shape[1] != params["ge.W1"].shape[0]:
        raise ExpertInputError(
            f"global width {list(frames.global_features.shape)} does not match FFN input {list(params['ge.W1'].shape)}"
        )
    hidden = nk.relu(nk.add(nk.matmul(Tensor(frames.global_features), params["ge.W1"]), params["ge.b1"]))
    return ExpertOutput(ExpertTag.GE, nk.add(nk.matmul(hidden, params["ge.W2"]), params["ge.b2"]))
