import numpy as np
import pytest

from tsdlab.models import TaskSpec, TrainConfig, gen_task


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def planted_spec():
    def _make(seed: int = 0, **overrides) -> TaskSpec:
        values = dict(
            n=16, m=32, plant_count=4, plant_region="lower",
            coeff_low=0.8, coeff_high=1.2, noise_std=0.01,
            n_train=512, n_val=256, seed=seed,
        )
        values.update(overrides)
        return TaskSpec(**values)
    return _make


@pytest.fixture
def small_task(planted_spec):
    return gen_task(planted_spec(seed=3, n_train=128, n_val=64))


@pytest.fixture
def sgd_config():
    def _make(**overrides) -> TrainConfig:
        values = dict(lr=0.3, steps=200, batch=32, optimizer="sgd", t_prelaunch=50, s_dash=4, record_every=50)
        values.update(overrides)
        return TrainConfig(**values)
    return _make
