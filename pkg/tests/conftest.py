"""Shared fixtures: a small, fast synthetic dataset and its split."""

import numpy as np
import pytest

from wimuse import SynthConfig, split_dataset, synth_dataset

# P=64 keeps the deeper single-task trunk viable (P/16 = 4 >= 3 for the
# classifier conv) while staying fast on CPU.
TINY = SynthConfig(
    num_gestures=3, num_locations=2, num_users=2, samples_per_combo=4,
    L=1, S=8, P=64, noise_sigma=0.02, seed=11,
)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_ds(tiny_cfg):
    return synth_dataset(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_split(tiny_ds):
    return split_dataset(tiny_ds, 0.75, seed=5)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
