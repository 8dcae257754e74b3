"""
Training objective: gated spatial balancing loss, the task-loss surrogate
and their weighted combination.

The task loss stands in for a language model's next-token loss: four
classification heads (subject, event type, object, scene) read the fused
output pooled over each event's frames, and a binary head scores every
frame as abnormal or normal.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

import numkernel as nk
from experts import EXPERT_ORDER, LOCAL_EXPERTS, ExpertTag, ModelDims
from fusion import FusedOutput, GateWeights
from numkernel import NonFiniteError, ParamSet, ShapeError, Tensor

DEFAULT_ALPHA = 0.4

# head name, ModelDims attribute holding its class count
CLASS_HEADS: Tuple[Tuple[str, str], ...] = (
    ("subject", "n_subjects"),
    ("event_type", "n_event_types"),
    ("object", "n_objects"),
    ("scene", "n_scenes"),
)


@dataclass
class LossBreakdown:
    l_task: float
    l_gate: float
    alpha: float
    total: float
    objective: Optional[Tensor] = field(default=None, repr=False, compare=False)


@dataclass
class TaskTargets:
    """
    Supervision for one video.

    spans are half-open frame ranges [start, end) of the gold events; the
    four id arrays hold one class id per event.
    """
    subject_ids: np.ndarray
    event_type_ids: np.ndarray
    object_ids: np.ndarray
    scene_ids: np.ndarray
    spans: List[Tuple[int, int]]
    frame_labels: np.ndarray

    def __post_init__(self):
        self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64).reshape(-1)
        for name in ("subject_ids", "event_type_ids", "object_ids", "scene_ids"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
            if len(getattr(self, name)) != len(self.spans):
                raise ShapeError(f"{name} needs one id per event span")
        if not set(np.unique(self.frame_labels)) <= {0, 1}:
            raise ValueError("frame labels must be 0 or 1")
        for start, end in self.spans:
            if not 0 <= start < end <= len(self.frame_labels):
                raise ValueError(f"event span [{start}, {end}) outside {len(self.frame_labels)} frames")

    @property
    def n_frames(self) -> int:
        return int(self.frame_labels.shape[0])

    def ids(self, head: str) -> np.ndarray:
        return getattr(self, f"{head}_ids")

    def validate(self, dims: ModelDims) -> None:
        for head, size_attr in CLASS_HEADS:
            ids = self.ids(head)
            size = getattr(dims, size_attr)
            if ids.size and (ids.min() < 0 or ids.max() >= size):
                raise ValueError(f"{head} id outside vocabulary of {size} classes")


def init_head_params(params: ParamSet, dims: ModelDims, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(dims.d)
    for head, size_attr in CLASS_HEADS:
        size = getattr(dims, size_attr)
        params.add(f"head.{head}.W", rng.uniform(-bound, bound, size=(dims.d, size)))
        params.add(f"head.{head}.b", np.zeros(size))
    params.add("head.frame.W", rng.uniform(-bound, bound, size=(dims.d, 1)))
    params.add("head.frame.b", np.zeros(1))


def gsb_loss(g: GateWeights, n_local: int = len(LOCAL_EXPERTS)) -> Tensor:
    """(1/n_local)·Σ_local −log g_i − log g_global."""
    if n_local != len(LOCAL_EXPERTS):
        raise ValueError(f"the gate has {len(LOCAL_EXPERTS)} local experts, got n_local={n_local}")
    if np.any(g.values.data <= 0):
        raise NonFiniteError("gate weights must be strictly positive; the balancing loss is unbounded")
    global_index = EXPERT_ORDER.index(ExpertTag.GE)
    local = nk.take(g.values, np.arange(n_local))
    local_term = nk.mul(nk.sum(nk.log(local)), -1.0 / n_local)
    global_term = nk.mul(nk.log(nk.take(g.values, np.array([global_index]))), -1.0)
    return nk.add(local_term, nk.reshape(global_term, ()))


def span_pooling(spans: Sequence[Tuple[int, int]], n_frames: int) -> np.ndarray:
    """(events x frames) matrix averaging the frames of each span."""
    pooling = np.zeros((len(spans), n_frames))
    for row, (start, end) in enumerate(spans):
        pooling[row, start:end] = 1.0 / (end - start)
    return pooling


def head_logits(pooled: Tensor, params: ParamSet, head: str) -> Tensor:
    return nk.add(nk.matmul(pooled, params[f"head.{head}.W"]), params[f"head.{head}.b"])


def frame_logits(fused: Union[FusedOutput, Tensor], params: ParamSet) -> Tensor:
    matrix = fused.matrix if isinstance(fused, FusedOutput) else fused
    logits = nk.add(nk.matmul(matrix, params["head.frame.W"]), params["head.frame.b"])
    return nk.reshape(logits, (matrix.shape[0],))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (n x K) logits against n integer targets."""
    one_hot = np.zeros(logits.shape)
    one_hot[np.arange(len(targets)), targets] = 1.0
    picked = nk.sum(nk.mul(nk.log_softmax(logits, axis=-1), one_hot))
    return nk.mul(picked, -1.0 / len(targets))


def binary_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of softplus(z) − y·z, the logistic loss written without overflow."""
    labels = np.asarray(labels, dtype=np.float64)
    return nk.mean(nk.sub(nk.softplus(logits), nk.mul(logits, labels)))


def task_loss(O: FusedOutput, targets: TaskTargets, params: ParamSet, dims: Optional[ModelDims] = None) -> Tensor:
    """
    Mean of the four class-head cross-entropies and the frame-head binary
    cross-entropy. A video without events contributes the frame term alone.
    """
    if dims is not None:
        targets.validate(dims)
    if O.matrix.shape[0] != targets.n_frames:
        raise ShapeError(f"fused output covers {O.matrix.shape[0]} frames, targets {targets.n_frames}")
    terms = []
    if targets.spans:
        pooled = nk.matmul(Tensor(span_pooling(targets.spans, targets.n_frames)), O.matrix)
        for head, _ in CLASS_HEADS:
            logits = head_logits(pooled, params, head)
            ids = targets.ids(head)
            if ids.max() >= logits.shape[1] or ids.min() < 0:
                raise ValueError(f"{head} id outside vocabulary of {logits.shape[1]} classes")
            terms.append(cross_entropy(logits, ids))
    terms.append(binary_cross_entropy(frame_logits(O, params), targets.frame_labels))
    total = terms[0]
    for term in terms[1:]:
        total = nk.add(total, term)
    return nk.mul(total, 1.0 / len(terms))


def total_loss(l_task: Union[Tensor, float], l_gate: Union[Tensor, float], alpha: float = DEFAULT_ALPHA) -> LossBreakdown:
    """total = l_task + alpha·l_gate."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    objective = nk.add(l_task, nk.mul(l_gate, alpha))
    return LossBreakdown(
        l_task=float(nk.as_tensor(l_task).item()),
        l_gate=float(nk.as_tensor(l_gate).item()),
        alpha=float(alpha),
        total=objective.item(),
        objective=objective,
    )
