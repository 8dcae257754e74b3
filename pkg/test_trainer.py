import numpy as np
import pytest
from pydantic import ValidationError

from conftest import TINY_GENERATOR
from config import ConfigFileError
from experts import ExpertTag
from metrics import evaluate, match_events
from model import GSMModel, ModelFormatError
from numkernel import NonFiniteError, ParamSet
from synthdata import GeneratorConfig, generate
from trainer import (
    AdamW, GateRecord, GateTrace, TrainConfig, TrainingDivergedError, UnknownBlockError, build_model, gradcheck,
    local_spread, steps_to_threshold, train,
)


def _small_train(**overrides) -> TrainConfig:
    return TrainConfig(**{"d": 8, "epochs": 2, "batch_size": 3, "log_every": 1, "seed": 4, **overrides})


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_config_file_overrides_and_errors(tmp_path):
    path = tmp_path / "train.conf"
    path.write_text("# desk run\nd = 8\nalpha = 0.2\ndisable_gate = true\n")
    config = TrainConfig.from_file(path, epochs=3, alpha=None)
    assert (config.d, config.alpha, config.epochs, config.disable_gate) == (8, 0.2, 3, True)

    path.write_text("d = 8\nepochs = 2\nbogus = 1\n")
    with pytest.raises(ConfigFileError) as caught:
        TrainConfig.from_file(path)
    assert caught.value.line == 3

    path.write_text("d = eight\n")
    with pytest.raises(ValidationError):
        TrainConfig.from_file(path)


def test_ablation_switches():
    config = TrainConfig()
    assert config.with_ablation("ore").disabled_experts == [ExpertTag.ORE]
    assert config.with_ablation("sir").effective_alpha == 0.0
    assert config.with_ablation("eg").disable_gate
    assert config.effective_alpha == pytest.approx(0.4)
    with pytest.raises(ValueError):
        config.with_ablation("xyz")
    with pytest.raises(ValidationError):
        TrainConfig(disable_ae=True, disable_ore=True, disable_be=True, disable_ge=True)
    with pytest.raises(ValidationError):
        TrainConfig(schedule="linear")


# ---------------------------------------------------------------------------
# Optimizer, trace and helpers
# ---------------------------------------------------------------------------

def test_adamw_decays_matrices_only_and_skips_frozen():
    params = ParamSet()
    params.add("w", np.ones((2, 2)))
    params.add("b", np.ones(2))
    params.add("f", np.ones((2, 2)), trainable=False)
    params.zero_grad()
    AdamW(params, TrainConfig(learning_rate=0.1, weight_decay=0.01)).step()
    np.testing.assert_allclose(params["w"].data, np.full((2, 2), 0.999))
    np.testing.assert_array_equal(params["b"].data, np.ones(2))
    np.testing.assert_array_equal(params["f"].data, np.ones((2, 2)))


def test_adamw_moves_against_the_gradient():
    params = ParamSet()
    params.add("b", np.zeros(3))
    params.zero_grad()
    params.grad("b")[...] = [1.0, -2.0, 0.0]
    AdamW(params, TrainConfig(learning_rate=0.01)).step()
    np.testing.assert_allclose(params["b"].data, [-0.01, 0.01, 0.0], atol=1e-6)


def test_learning_rate_schedules():
    params = ParamSet()
    params.add("b", np.zeros(1))
    warm = AdamW(params, TrainConfig(learning_rate=0.1, warmup_steps=4))
    assert warm.learning_rate(2) == pytest.approx(0.05)
    assert warm.learning_rate(9) == pytest.approx(0.1)
    cosine = AdamW(params, TrainConfig(learning_rate=0.1, schedule="cosine"), total_steps=10)
    assert cosine.learning_rate(5) == pytest.approx(0.05)
    assert cosine.learning_rate(10) == pytest.approx(0.0, abs=1e-12)


def test_gate_trace_file_round_trip(tmp_path):
    trace = GateTrace([
        GateRecord(1, np.array([0.1, 0.2, 0.3, 0.4]), 2.5, 3.0, 3.7),
        GateRecord(11, np.array([1 / 6, 1 / 6, 1 / 6, 1 / 2]), 1.25, 2.4849066497880004, 2.2439626599152),
    ])
    trace.write(tmp_path / "trace.tsv")
    loaded = GateTrace.read(tmp_path / "trace.tsv")
    assert loaded.to_text() == trace.to_text()
    np.testing.assert_array_equal(loaded.gates(), trace.gates())
    (tmp_path / "other.tsv").write_text("a\tb\n")
    with pytest.raises(ModelFormatError):
        GateTrace.read(tmp_path / "other.tsv")
    header = trace.to_text().splitlines()[0]
    (tmp_path / "short.tsv").write_text(header + "\n1\t0.25\t0.25\n")
    with pytest.raises(ModelFormatError, match="line 2"):
        GateTrace.read(tmp_path / "short.tsv")
    (tmp_path / "words.tsv").write_text(header + "\n1\ta\tb\tc\td\t1\t2\t3\n")
    with pytest.raises(ModelFormatError, match="line 2"):
        GateTrace.read(tmp_path / "words.tsv")


def test_local_spread_ignores_the_global_weight():
    assert local_spread(np.array([0.1, 0.3, 0.2, 0.4])) == pytest.approx(0.2)
    assert local_spread(np.array([1 / 6, 1 / 6, 1 / 6, 1 / 2])) == pytest.approx(0.0)


def test_steps_to_threshold():
    losses = [3.0, 2.0, 1.0, 0.5, 0.4]
    assert steps_to_threshold(losses, 1.0, window=1) == 3
    assert steps_to_threshold(losses, 1.0, window=2) == 4
    assert steps_to_threshold(losses, 0.1) is None
    with pytest.raises(ValueError):
        steps_to_threshold(losses, 1.0, window=0)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_training_is_deterministic(tiny_dataset):
    config = _small_train()
    first = train(config, tiny_dataset)
    second = train(config, tiny_dataset)
    assert first.steps == second.steps == 4
    assert len(first.trace) == 4
    assert first.trace.to_text() == second.trace.to_text()
    for name, array in first.model.params.state_dict().items():
        np.testing.assert_array_equal(second.model.params[name].data, array)
    assert len(first.epoch_losses) == 2 and all(np.isfinite(first.epoch_losses))


def test_training_changes_trainable_parameters(tiny_dataset, tiny_dims):
    config = _small_train()
    initial = build_model(config, tiny_dims).params.state_dict()
    trained = train(config, tiny_dataset).model.params
    assert not np.array_equal(trained["gate.W_g"].data, initial["gate.W_g"])
    assert not np.array_equal(trained["ae.W_a"].data, initial["ae.W_a"])


def test_trace_follows_log_every(tiny_dataset):
    result = train(_small_train(epochs=3, log_every=2), tiny_dataset)
    assert [r.step for r in result.trace.records] == [1, 3, 5]
    for record in result.trace.records:
        assert record.gate.sum() == pytest.approx(1.0)
        assert record.total == pytest.approx(record.l_task + 0.4 * record.l_gate)


def test_ablated_blocks_never_move(tiny_dataset, tiny_dims):
    config = _small_train(disable_ore=True, disable_gate=True)
    initial = build_model(config, tiny_dims).params.state_dict()
    result = train(config, tiny_dataset)
    for name in result.model.params.names("ore") + ["gate.W_g"]:
        np.testing.assert_array_equal(result.model.params[name].data, initial[name])
    np.testing.assert_allclose(result.trace.gates(), np.full((len(result.trace), 4), 0.25))


def test_without_balancing_the_total_is_the_task_loss(tiny_dataset):
    result = train(_small_train(disable_sir=True), tiny_dataset)
    for record in result.trace.records:
        assert record.total == pytest.approx(record.l_task)
        assert record.l_gate > 0


def test_warm_start_through_config(tiny_dataset, tiny_dims, tmp_path):
    source = GSMModel(tiny_dims, seed=99)
    path = source.save(tmp_path / "source.npz")
    model = build_model(_small_train(init_from=str(path)), tiny_dims)
    np.testing.assert_array_equal(model.params["be.proj"].data, source.params["be.proj"].data)


def test_divergence_is_reported_with_its_step(tiny_dataset, monkeypatch):
    def explode(self, video, alpha=0.4, objective="total"):
        raise NonFiniteError("log of zero")

    monkeypatch.setattr(GSMModel, "loss_and_forward", explode)
    with pytest.raises(TrainingDivergedError) as caught:
        train(_small_train(), tiny_dataset)
    assert caught.value.step == 1


def test_zero_epochs_leave_the_initialisation(tiny_dataset, tiny_dims):
    config = _small_train(epochs=0)
    result = train(config, tiny_dataset)
    assert result.steps == 0
    assert len(result.trace) == 0 and result.task_losses == [] and result.epoch_losses == []
    for name, array in build_model(config, tiny_dims).params.state_dict().items():
        np.testing.assert_array_equal(result.model.params[name].data, array)


def test_empty_dataset_is_rejected(tiny_dataset):
    with pytest.raises(ValueError):
        train(_small_train(), tiny_dataset.subset([]))


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_passes_for_every_block(seed):
    report = gradcheck(TrainConfig(d=8, seed=seed))
    assert report.passed, report.errors
    assert set(report.errors) == {"ae", "ore", "be", "ge", "gate", "norm", "head"}


@pytest.mark.parametrize("objective", ["task", "gate"])
def test_gradcheck_on_single_objectives(objective):
    assert gradcheck(TrainConfig(d=8), objective=objective).passed


def test_gradcheck_catches_a_corrupted_block():
    report = gradcheck(TrainConfig(d=8), corrupt_block="gate")
    assert report.failed == ["gate"]


def test_gradcheck_rejects_unknown_blocks():
    with pytest.raises(UnknownBlockError, match="nope"):
        gradcheck(TrainConfig(d=8), corrupt_block="nope")


def test_gradcheck_skips_frozen_blocks():
    report = gradcheck(TrainConfig(d=8, disable_ore=True))
    assert "ore" not in report.errors
    assert report.passed


# ---------------------------------------------------------------------------
# Desk-scale experiments
# ---------------------------------------------------------------------------

def _type_accuracy(model, dataset) -> float:
    hits = total = 0
    for video in dataset:
        prediction = model.predict(video)
        match = match_events(prediction.events, video.events)
        for p, g, overlap in match.pairs:
            if overlap >= 0.5 and prediction.events[p].quadruple.event_type == video.events[g].quadruple.event_type:
                hits += 1
        total += len(video.events)
    return hits / total


@pytest.mark.slow
def test_balancing_narrows_the_local_gate_spread():
    generator = GeneratorConfig(**{
        **TINY_GENERATOR, "videos": 24, "duration_min_s": 3.0, "duration_max_s": 6.0, "mix": (0.45, 0.25, 0.30),
    })
    dataset = generate(generator)
    spreads = {0.4: [], 0.0: []}
    for seed in range(5):
        for alpha in spreads:
            config = TrainConfig(d=16, epochs=4, batch_size=4, learning_rate=1e-2, log_every=1, seed=seed, alpha=alpha)
            spreads[alpha].append(local_spread(train(config, dataset).trace.records[-1].gate))
    assert all(a < b for a, b in zip(spreads[0.4], spreads[0.0]))
    assert np.mean(spreads[0.4]) <= 0.75 * np.mean(spreads[0.0])


@pytest.mark.slow
def test_noise_free_data_is_learnable_and_needs_the_informative_expert():
    base = {
        **TINY_GENERATOR, "n_subjects": 40, "n_event_types": 11, "n_objects": 40, "n_scenes": 14,
        "templates_per_type": 2, "d_b": 16, "d_g": 16, "noise": 0.0, "duration_min_s": 4.0, "duration_max_s": 8.0,
        "event_min_s": 1.0, "event_max_s": 2.0,
    }
    train_set = generate(GeneratorConfig(**{**base, "videos": 200, "seed": 21}))
    eval_set = generate(GeneratorConfig(**{**base, "videos": 50, "seed": 22}))
    config = TrainConfig(d=32, epochs=10, batch_size=8, learning_rate=3e-3, log_every=50)
    report = evaluate(train(config, train_set).model.predict_dataset(eval_set), eval_set)
    assert report.quadruple >= 0.9
    assert report.map_mean >= 0.9

    pose_only = {**base, "mix": (1.0, 0.0, 0.0)}
    pose_train = generate(GeneratorConfig(**{**pose_only, "videos": 200, "seed": 23}))
    pose_eval = generate(GeneratorConfig(**{**pose_only, "videos": 100, "seed": 24}))
    ablated = train(config.with_ablation("ae"), pose_train).model
    assert _type_accuracy(ablated, pose_eval) <= 1 / 11 + 0.05


@pytest.mark.slow
def test_full_model_converges_first():
    generator = GeneratorConfig(**{**TINY_GENERATOR, "videos": 24, "duration_min_s": 3.0, "duration_max_s": 6.0})
    dataset = generate(generator)
    wins = 0
    for seed in range(5):
        base = TrainConfig(d=16, epochs=6, batch_size=4, learning_rate=1e-2, seed=seed, log_every=100)
        full = train(base, dataset).task_losses
        threshold = 0.6 * full[0]
        steps = {"full": steps_to_threshold(full, threshold)}
        for name in ("eg", "sir"):
            steps[name] = steps_to_threshold(train(base.with_ablation(name), dataset).task_losses, threshold)
        reached = {k: v if v is not None else np.inf for k, v in steps.items()}
        if reached["full"] < min(reached["eg"], reached["sir"]):
            wins += 1
    assert wins >= 4


@pytest.mark.slow
def test_heavy_balancing_drives_the_gate_to_its_minimiser():
    generator = GeneratorConfig(**{**TINY_GENERATOR, "videos": 24, "duration_min_s": 3.0, "duration_max_s": 6.0})
    dataset = generate(generator)
    config = TrainConfig(d=16, epochs=15, batch_size=4, learning_rate=1e-2, log_every=1, seed=0, alpha=10.0)
    final = train(config, dataset).trace.records[-1].gate
    np.testing.assert_allclose(final, [1 / 6, 1 / 6, 1 / 6, 1 / 2], atol=0.05)
