import json

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import TINY_GENERATOR
from experts import ExpertTag
from synthdata import (
    FPS, DatasetFormatError, GeneratorConfig, InfeasibleConfigError, dataset_hash, file_hash,
    generate, generate_with_catalogue, read_dataset, read_splits, split_dataset, summarize,
    write_dataset, write_splits,
)


def test_generation_is_deterministic_and_worker_independent(tiny_config):
    first = generate(tiny_config)
    second = generate(tiny_config.model_copy(update={"workers": 1}))
    assert dataset_hash(first) == dataset_hash(second)
    other = generate(tiny_config.model_copy(update={"seed": tiny_config.seed + 1}))
    assert dataset_hash(first) != dataset_hash(other)


def test_every_video_is_consistent(tiny_dataset, tiny_config):
    assert len(tiny_dataset) == tiny_config.videos
    for video in tiny_dataset:
        assert tiny_config.min_video_frames <= video.n_frames <= tiny_config.max_video_frames
        assert video.poses.n_frames == video.n_frames
        assert len(video.relations) == video.n_frames
        assert video.features.background.shape == (video.n_frames, tiny_config.d_b)
        assert video.features.global_features.shape == (video.n_frames, tiny_config.d_g)
        assert video.events, "every synthetic video carries at least one abnormal event"
        spans = video.event_spans()
        for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
            assert e0 < s1
        for event in video.events:
            assert event.quadruple.scene == video.scene
            assert event.channel in (ExpertTag.AE, ExpertTag.ORE, ExpertTag.BE)
            start, end = event.frame_span()
            assert video.frame_labels[start:end].all()
        assert video.frame_labels.sum() == sum(e - s for s, e in spans)


def test_event_times_sit_on_frame_boundaries(tiny_dataset):
    for video in tiny_dataset:
        for event in video.events:
            assert event.start_s * FPS == pytest.approx(round(event.start_s * FPS))
            assert event.end_s <= video.duration_s


def test_single_channel_mix_plants_every_event_in_that_channel():
    config = GeneratorConfig(**{**TINY_GENERATOR, "mix": (0.0, 1.0, 0.0)})
    stats = summarize(generate(config))
    assert stats["channel_share"] == {"AE": 0.0, "ORE": 1.0, "BE": 0.0}


def test_pose_only_mix_is_decodable_from_poses_alone():
    config = GeneratorConfig(**{**TINY_GENERATOR, "videos": 20, "mix": (1.0, 0.0, 0.0), "noise": 0.0})
    dataset, catalogue = generate_with_catalogue(config)
    motifs = {t.event_type: t.motif for t in catalogue.templates}
    types = config.vocabularies()["event_type"]
    background_codes = set()
    for video in dataset:
        for event in video.events:
            start, end = event.frame_span()
            joints = video.poses.frame(start)[0, :, :2]
            decoded = min(motifs, key=lambda k: np.abs(motifs[k] - joints).sum())
            assert types.label(decoded) == event.quadruple.event_type
            background_codes.add(tuple(np.round(video.features.background[start], 6)))
    # backgrounds inside events only carry the scene code
    assert len(background_codes) <= config.n_scenes


@pytest.mark.slow
def test_events_mean_is_close_to_the_target():
    config = GeneratorConfig(**{**TINY_GENERATOR, "videos": 1000, "duration_min_s": 6.0, "duration_max_s": 8.0})
    stats = summarize(generate(config))
    assert stats["events_mean"] == pytest.approx(1.68, abs=0.1)


@pytest.mark.slow
def test_channel_shares_follow_the_mix():
    config = GeneratorConfig(**{**TINY_GENERATOR, "videos": 2500, "duration_min_s": 6.0, "duration_max_s": 8.0})
    stats = summarize(generate(config))
    assert stats["events"] >= 1000
    for share, target in zip(stats["channel_share"].values(), config.mix):
        assert share == pytest.approx(target, abs=0.03)


def test_invalid_configs_are_rejected():
    with pytest.raises(ValidationError):
        GeneratorConfig(mix=(0.5, 0.5, 0.5))
    with pytest.raises(ValidationError):
        GeneratorConfig(mix=(1.2, -0.2, 0.0))
    with pytest.raises(ValidationError):
        GeneratorConfig(events_mean=0.5)
    with pytest.raises(ValidationError):
        GeneratorConfig(duration_min_s=10, duration_max_s=5)
    with pytest.raises(ValidationError):
        GeneratorConfig(n_event_types=12)
    with pytest.raises(ValidationError):
        GeneratorConfig(n_scenes=3, scene_weights=[1.0, 2.0])


def test_infeasible_event_length_is_reported():
    config = GeneratorConfig(**{**TINY_GENERATOR, "event_min_s": 3.0, "event_max_s": 3.0})
    with pytest.raises(InfeasibleConfigError):
        generate(config)
    with pytest.raises(InfeasibleConfigError):
        generate(GeneratorConfig(**TINY_GENERATOR), n_frames=2)


def test_fixed_frame_count(tiny_config):
    dataset = generate(tiny_config, n_frames=12)
    assert {video.n_frames for video in dataset} == {12}


def test_dataset_file_round_trip(tiny_dataset, tmp_path):
    path = tmp_path / "dataset.jsonl"
    digest = write_dataset(tiny_dataset, path)
    assert digest == file_hash(path)
    loaded = read_dataset(path)
    assert dataset_hash(loaded) == digest
    assert loaded.config == tiny_dataset.config.model_copy(update={"workers": loaded.config.workers})
    for a, b in zip(tiny_dataset, loaded):
        assert a.video_id == b.video_id
        np.testing.assert_array_equal(a.frame_labels, b.frame_labels)
        np.testing.assert_array_equal(a.poses.joints, b.poses.joints)
        np.testing.assert_array_equal(a.features.global_features, b.features.global_features)
        assert a.events == b.events


def test_read_dataset_reports_line_numbers(tiny_dataset, tmp_path):
    path = tmp_path / "dataset.jsonl"
    write_dataset(tiny_dataset, path)
    lines = path.read_text().splitlines()
    record = json.loads(lines[2])
    record["labels"] = record["labels"][:-1]
    lines[2] = json.dumps(record)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError) as caught:
        read_dataset(path)
    assert caught.value.line == 3


def test_read_dataset_checks_header(tiny_dataset, tmp_path):
    path = tmp_path / "dataset.jsonl"
    write_dataset(tiny_dataset, path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["version"] = 99
    path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(DatasetFormatError) as caught:
        read_dataset(path)
    assert caught.value.line == 1
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DatasetFormatError):
        read_dataset(path)


def test_split_manifest_is_disjoint_and_stratified(tmp_path):
    dataset = generate(GeneratorConfig(**{**TINY_GENERATOR, "videos": 40}))
    manifest = split_dataset(dataset, inference_fraction=0.25, seed=3)
    assert not set(manifest.train) & set(manifest.inference)
    assert sorted(manifest.train + manifest.inference) == sorted(v.video_id for v in dataset)
    scenes = {v.video_id: v.scene for v in dataset}
    for scene in set(scenes.values()):
        members = [i for i, s in scenes.items() if s == scene]
        held = [i for i in manifest.inference if scenes[i] == scene]
        assert len(held) == int(round(len(members) * 0.25))
    write_splits(manifest, tmp_path / "splits.json")
    assert read_splits(tmp_path / "splits.json") == manifest
    assert len(dataset.subset(manifest.inference)) == len(manifest.inference)
    with pytest.raises(DatasetFormatError):
        dataset.subset(["nope"])
