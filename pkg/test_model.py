from dataclasses import replace

import numpy as np
import pytest

from experts import EXPERT_ORDER, ExpertTag
from model import MODEL_FORMAT_VERSION, GSMModel, ModelFormatError, decode_spans, head_vocabularies, targets_for
from synthdata import DatasetFormatError


def test_decode_spans_drops_short_runs():
    probabilities = np.array([0.1, 0.6, 0.7, 0.2, 0.9, 0.8, 0.9, 0.3, 0.95])
    assert decode_spans(probabilities) == [(1, 3), (4, 7)]
    assert decode_spans(probabilities, min_frames=1) == [(1, 3), (4, 7), (8, 9)]
    assert decode_spans(probabilities, threshold=0.85, min_frames=1) == [(4, 5), (6, 7), (8, 9)]
    assert decode_spans(np.zeros(5)) == []


def test_targets_follow_the_gold_events(tiny_dataset, tiny_dims):
    vocab = head_vocabularies(tiny_dims)
    for video in tiny_dataset:
        targets = targets_for(video, tiny_dims)
        assert targets.spans == video.event_spans()
        np.testing.assert_array_equal(targets.frame_labels, video.frame_labels)
        for event, type_id in zip(video.events, targets.event_type_ids):
            assert vocab["event_type"].label(int(type_id)) == event.quadruple.event_type


def test_forward_shapes_and_gate(tiny_dataset, tiny_dims):
    model = GSMModel(tiny_dims, seed=3)
    video = tiny_dataset.videos[0]
    result = model.forward(video)
    assert [e.tag for e in result.experts] == list(EXPERT_ORDER)
    assert result.fused.matrix.shape == (video.n_frames, tiny_dims.d)
    gate = result.gate.as_array()
    assert gate.shape == (4,)
    assert gate.sum() == pytest.approx(1.0)
    assert model.frame_probabilities(video, result).shape == (video.n_frames,)


def test_disabled_experts_emit_zeros_and_freeze(tiny_dataset, tiny_dims):
    model = GSMModel(tiny_dims, disabled=[ExpertTag.ORE, ExpertTag.BE], seed=3)
    outputs = model.expert_outputs(tiny_dataset.videos[0])
    assert not outputs[1].matrix.data.any() and not outputs[2].matrix.data.any()
    assert outputs[0].matrix.data.any()
    assert not any(name.startswith(("ore.", "be.")) for name in model.params.trainable_names())
    with pytest.raises(ValueError):
        GSMModel(tiny_dims, disabled=EXPERT_ORDER)


def test_uniform_gate_fixes_the_weights(tiny_dataset, tiny_dims):
    model = GSMModel(tiny_dims, uniform_gate=True)
    np.testing.assert_allclose(model.forward(tiny_dataset.videos[1]).gate.as_array(), [0.25] * 4)
    assert "gate.W_g" not in model.params.trainable_names()


def test_loss_objectives(tiny_dataset, tiny_dims):
    model = GSMModel(tiny_dims, seed=5)
    video = tiny_dataset.videos[0]
    total = model.loss(video, alpha=0.4)
    task = model.loss(video, objective="task")
    gate = model.loss(video, objective="gate")
    assert total.total == pytest.approx(task.l_task + 0.4 * gate.l_gate)
    assert task.total == pytest.approx(task.l_task)
    assert gate.total == pytest.approx(gate.l_gate)
    with pytest.raises(ValueError):
        model.loss(video, objective="both")


def test_predictions_are_well_formed(tiny_dataset, tiny_dims):
    model = GSMModel(tiny_dims, seed=2)
    for video, prediction in zip(tiny_dataset, model.predict_dataset(tiny_dataset, threshold=0.3, min_event_frames=1)):
        assert prediction.video_id == video.video_id
        assert len(prediction.frame_labels) == video.n_frames
        assert len(prediction.frame_scores) == video.n_frames
        starts = [e.start_s for e in prediction.events]
        assert starts == sorted(starts)
        for event in prediction.events:
            assert 0.0 <= event.confidence <= 1.0
            assert event.end_s <= video.duration_s + 1e-9
            assert event.quadruple.scene in head_vocabularies(tiny_dims)["scene"].entries


def test_save_and_load_round_trip(tiny_dataset, tiny_dims, tmp_path):
    model = GSMModel(tiny_dims, disabled=[ExpertTag.BE], literal_degree=True, seed=11)
    path = model.save(tmp_path / "model.npz")
    loaded = GSMModel.load(path)
    assert loaded.metadata() == model.metadata()
    for name, array in model.params.state_dict().items():
        np.testing.assert_array_equal(loaded.params[name].data, array)
    video = tiny_dataset.videos[2]
    np.testing.assert_array_equal(model.frame_probabilities(video), loaded.frame_probabilities(video))


def test_warm_start_copies_only_expert_blocks(tiny_dims, tmp_path):
    source = GSMModel(tiny_dims, seed=1)
    path = source.save(tmp_path / "source.npz")
    target = GSMModel(tiny_dims, seed=2)
    fresh = target.params.state_dict()
    loaded = target.warm_start(path)
    assert loaded and all(name.split(".", 1)[0] in ("ae", "ore", "be", "ge") for name in loaded)
    for name in target.params:
        if name.split(".", 1)[0] in ("ae", "ore", "be", "ge"):
            np.testing.assert_array_equal(target.params[name].data, source.params[name].data)
        else:
            np.testing.assert_array_equal(target.params[name].data, fresh[name])


def test_gate_profile_counts_every_event(tiny_dataset, tiny_dims):
    profile = GSMModel(tiny_dims, uniform_gate=True).gate_profile(tiny_dataset)
    assert sum(row["events"] for row in profile.values()) == sum(len(v.events) for v in tiny_dataset)
    for row in profile.values():
        assert [row[tag.value] for tag in EXPERT_ORDER] == pytest.approx([0.25] * 4)


def test_unreadable_model_files(tiny_dims, tmp_path):
    garbage = tmp_path / "garbage.npz"
    garbage.write_bytes(b"\x00\x01 not an archive")
    with pytest.raises(ModelFormatError):
        GSMModel.load(garbage)
    future = tmp_path / "future.npz"
    np.savez(future, __format_version__=np.array(MODEL_FORMAT_VERSION + 1))
    with pytest.raises(ModelFormatError, match="version"):
        GSMModel.load(future)
    with pytest.raises(ModelFormatError):
        GSMModel(tiny_dims).warm_start(future)


def test_labels_outside_the_model_vocabulary_are_format_errors(tiny_dataset, tiny_dims):
    video = next(v for v in tiny_dataset if v.events)
    event = video.events[0]
    stray = event.model_copy(update={"quadruple": event.quadruple.model_copy(update={"scene": "Moon"})})
    relabelled = replace(video, events=[stray] + video.events[1:])
    with pytest.raises(DatasetFormatError, match="Moon"):
        targets_for(relabelled, tiny_dims)
