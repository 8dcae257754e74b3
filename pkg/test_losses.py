import math

import numpy as np
import pytest

import numkernel as nk
from conftest import gradient_errors
from experts import ModelDims
from fusion import FusedOutput, GateWeights, uniform_gate
from losses import (
    TaskTargets, binary_cross_entropy, cross_entropy, frame_logits, gsb_loss, init_head_params, span_pooling, task_loss,
    total_loss,
)
from numkernel import NonFiniteError, ParamSet, ShapeError, Tape, Tensor


def _gate(values) -> GateWeights:
    return GateWeights(Tensor(np.asarray(values, dtype=np.float64)))


def test_uniform_gate_balancing_loss_is_two_log_four():
    assert gsb_loss(uniform_gate()).item() == pytest.approx(2 * math.log(4), abs=1e-10)


def test_balancing_loss_minimiser_by_gradient_descent():
    params = ParamSet()
    params.add("logits", np.array([0.7, -0.3, 0.1, -1.2]))
    for _ in range(3000):
        params.zero_grad()
        with Tape() as tape:
            loss = gsb_loss(GateWeights(nk.softmax(params["logits"], axis=0)))
        nk.backward(loss, tape, params)
        params["logits"].data[...] -= 0.5 * params.grad("logits")
    final = nk.softmax(params["logits"], axis=0).data
    np.testing.assert_allclose(final, [1 / 6, 1 / 6, 1 / 6, 1 / 2], atol=1e-3)
    assert gsb_loss(_gate(final)).item() == pytest.approx(math.log(12), abs=1e-4)


def test_balancing_loss_diverges_towards_the_simplex_edge():
    previous = -math.inf
    for eps in [0.2, 0.1, 0.01, 1e-4, 1e-8]:
        value = gsb_loss(_gate([eps, (1 - eps) / 3, (1 - eps) / 3, (1 - eps) / 3])).item()
        assert value > previous
        previous = value
    assert previous > 7.5
    with pytest.raises(NonFiniteError):
        gsb_loss(_gate([0.0, 0.5, 0.25, 0.25]))


def test_balancing_loss_weighs_the_global_expert_fully():
    a = gsb_loss(_gate([0.1, 0.2, 0.3, 0.4])).item()
    expected = -(math.log(0.1) + math.log(0.2) + math.log(0.3)) / 3 - math.log(0.4)
    assert a == pytest.approx(expected)
    with pytest.raises(ValueError):
        gsb_loss(_gate([0.25] * 4), n_local=2)


def test_total_loss_combines_terms():
    breakdown = total_loss(Tensor(1.5), Tensor(2.0), alpha=0.4)
    assert breakdown.total == pytest.approx(2.3)
    assert breakdown.l_task == 1.5 and breakdown.l_gate == 2.0
    assert total_loss(1.5, 2.0, alpha=0.0).total == 1.5
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, alpha=-0.1)


def test_binary_cross_entropy_matches_logistic_loss():
    logits = np.array([-3.0, 0.0, 2.5, 40.0])
    labels = np.array([0, 1, 1, 0])
    expected = np.mean(np.log1p(np.exp(-np.where(labels == 1, logits, -logits))))
    assert binary_cross_entropy(Tensor(logits), labels).item() == pytest.approx(expected)


def test_span_pooling_averages_each_span():
    pooling = span_pooling([(0, 2), (3, 6)], 6)
    np.testing.assert_allclose(pooling[0], [0.5, 0.5, 0, 0, 0, 0])
    np.testing.assert_allclose(pooling[1], [0, 0, 0, 1 / 3, 1 / 3, 1 / 3])


def test_targets_validation():
    with pytest.raises(ShapeError):
        TaskTargets([0], [0, 1], [0], [0], [(0, 2)], [1, 1, 0])
    with pytest.raises(ValueError):
        TaskTargets([0], [0], [0], [0], [(2, 5)], [0, 0, 1, 1])
    targets = TaskTargets([5], [0], [0], [0], [(0, 2)], [1, 1, 0])
    with pytest.raises(ValueError):
        targets.validate(ModelDims(n_subjects=3))


def _head_setup(rng, d=4, frames=6):
    dims = ModelDims(d=d, n_subjects=3, n_event_types=2, n_objects=3, n_scenes=2)
    params = ParamSet()
    init_head_params(params, dims, rng)
    params.add("O", rng.normal(size=(frames, d)))
    return dims, params


def test_task_loss_without_events_is_the_frame_term(rng):
    dims, params = _head_setup(rng)
    targets = TaskTargets([], [], [], [], [], np.zeros(6, dtype=int))
    fused = FusedOutput(params["O"], uniform_gate())
    expected = binary_cross_entropy(frame_logits(fused, params), np.zeros(6)).item()
    assert task_loss(fused, targets, params, dims).item() == pytest.approx(expected)


def test_task_loss_gradient(rng):
    dims, params = _head_setup(rng)
    targets = TaskTargets([2, 0], [1, 0], [0, 2], [1, 1], [(0, 2), (3, 6)], [1, 1, 0, 1, 1, 1])

    def loss():
        return task_loss(FusedOutput(params["O"], uniform_gate()), targets, params, dims)

    assert max(gradient_errors(loss, params).values()) < 1e-6


def test_zero_logits_cost_log_k_per_head(rng):
    dims, params = _head_setup(rng)
    for name in params.names("head"):
        params[name].data[...] = 0.0
    fused = FusedOutput(params["O"], uniform_gate())
    targets = TaskTargets([2], [1], [0], [1], [(1, 4)], [0, 1, 1, 1, 0, 0])
    expected = (math.log(3) + math.log(2) + math.log(3) + math.log(2) + math.log(2)) / 5
    assert task_loss(fused, targets, params, dims).item() == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_of_zero_logits_is_log_k():
    value = cross_entropy(nk.zeros((3, 7)), np.array([0, 4, 6])).item()
    assert value == pytest.approx(math.log(7), rel=1e-12)
