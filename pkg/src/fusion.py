"""
Expert gate and gated, layer-normalised fusion of the four expert outputs.
"""
from dataclasses import dataclass
from typing import Sequence

import numpy as np

import numkernel as nk
from experts import EXPERT_ORDER, ExpertOutput, ExpertTag
from numkernel import ParamSet, ShapeError, Tensor


@dataclass
class GateWeights:
    """Probability vector over experts, ordered AE, ORE, BE, GE."""
    values: Tensor

    def __post_init__(self):
        if self.values.shape != (len(EXPERT_ORDER),):
            raise ShapeError(f"gate weights need shape [{len(EXPERT_ORDER)}], got {list(self.values.shape)}")

    def as_array(self) -> np.ndarray:
        return self.values.data.copy()

    def weight(self, tag: ExpertTag) -> float:
        return float(self.values.data[EXPERT_ORDER.index(tag)])

    @property
    def global_weight(self) -> float:
        return self.weight(ExpertTag.GE)


@dataclass
class FusedOutput:
    matrix: Tensor
    gate: GateWeights


def init_fusion_params(params: ParamSet, d: int, rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(d)
    params.add("gate.W_g", rng.uniform(-bound, bound, size=(len(EXPERT_ORDER), d)))
    params.add("norm.gamma", np.ones(d))
    params.add("norm.beta", np.zeros(d))


def _check_experts(experts: Sequence[ExpertOutput]) -> None:
    tags = tuple(expert.tag for expert in experts)
    if tags != EXPERT_ORDER:
        raise ShapeError(f"experts must arrive in order {[t.value for t in EXPERT_ORDER]}, got {[t.value for t in tags]}")
    shapes = {expert.matrix.shape for expert in experts}
    if len(shapes) != 1:
        raise ShapeError(f"expert outputs disagree in shape: {sorted(list(s) for s in shapes)}")


def expert_sum(experts: Sequence[ExpertOutput]) -> Tensor:
    """Σ S_i, always accumulated AE → ORE → BE → GE."""
    _check_experts(experts)
    total = experts[0].matrix
    for expert in experts[1:]:
        total = nk.add(total, expert.matrix)
    return total


def gate(experts: Sequence[ExpertOutput], W_g: Tensor) -> GateWeights:
    """g = softmax(W_g · mean over frames of Σ S_i); one gate per video."""
    pooled = nk.mean(expert_sum(experts), axis=0)
    if W_g.shape != (len(EXPERT_ORDER), pooled.shape[0]):
        raise ShapeError(f"W_g {list(W_g.shape)} does not fit pooled width {pooled.shape[0]}")
    logits = nk.matmul(W_g, nk.reshape(pooled, (pooled.shape[0], 1)))
    return GateWeights(nk.softmax(nk.reshape(logits, (len(EXPERT_ORDER),)), axis=0))


def uniform_gate() -> GateWeights:
    """Fixed equal weights, used when the gate is ablated."""
    return GateWeights(Tensor(np.full(len(EXPERT_ORDER), 1.0 / len(EXPERT_ORDER))))


def fuse(experts: Sequence[ExpertOutput], g: GateWeights, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> FusedOutput:
    """O = LayerNorm(Σ g_i · S_i), normalised per frame row."""
    _check_experts(experts)
    mixed = None
    for i, expert in enumerate(experts):
        term = nk.mul(nk.take(g.values, np.array([i])), expert.matrix)
        mixed = term if mixed is None else nk.add(mixed, term)
    return FusedOutput(nk.layer_norm(mixed, gamma, beta, eps), g)
