"""
Shared fixtures: small generator configs, tiny datasets and micro model sizes.
"""
import numpy as np
import pytest

import numkernel as nk
from model import dims_for
from numkernel import ParamSet, Tape
from synthdata import GeneratorConfig, generate

TINY_GENERATOR = dict(
    seed=7,
    videos=6,
    duration_min_s=2.0,
    duration_max_s=4.0,
    event_min_s=0.5,
    event_max_s=1.0,
    n_subjects=6,
    n_event_types=4,
    n_objects=6,
    n_scenes=3,
    templates_per_type=1,
    d_b=4,
    d_g=4,
    workers=2,
)


@pytest.fixture
def tiny_config():
    return GeneratorConfig(**TINY_GENERATOR)


@pytest.fixture
def tiny_dataset(tiny_config):
    return generate(tiny_config)


@pytest.fixture
def tiny_dims(tiny_config):
    return dims_for(tiny_config, d=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradient_errors(loss_fn, params: ParamSet, h: float = 1e-5):
    """Relative error per parameter between backward() and central differences."""
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    nk.backward(loss, tape, params)
    numeric = nk.finite_diff_grad(lambda _: loss_fn().item(), params, h=h, names=params.trainable_names())
    return {name: nk.relative_error(params.grad(name), numeric[name]) for name in numeric}
