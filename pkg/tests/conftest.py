"""Pytest configuration and fixtures"""
import numpy as np
import pytest

from onnkit.models import LayerSpec, PaddingMode, TrainConfig
from onnkit.network import init


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator so every test draws the same data"""
    return np.random.default_rng(1234)


@pytest.fixture
def small_specs():
    """1x3x3x1 NoZeroPad net with a down-sample-2 and an up-sample-2 hidden layer"""
    return [
        LayerSpec(neuron_count=3, sampling=-2, padding=PaddingMode.NO_ZERO_PAD),
        LayerSpec(neuron_count=3, sampling=2, padding=PaddingMode.NO_ZERO_PAD),
        LayerSpec(neuron_count=1, sampling=1, padding=PaddingMode.NO_ZERO_PAD),
    ]


@pytest.fixture
def small_model(small_specs):
    """CNN-equivalent (set 0) model on 10x10 inputs"""
    return init(small_specs, seed=7, input_shape=(10, 10))


@pytest.fixture
def tiny_dataset(rng):
    """Two 8x8 SamePad-sized items with targets in (-0.5, 0.5)"""
    return [
        (rng.uniform(-1.0, 1.0, size=(1, 8, 8)), rng.uniform(-0.5, 0.5, size=(1, 8, 8)))
        for _ in range(2)
    ]


@pytest.fixture
def short_config() -> TrainConfig:
    """Few-iteration BP config for smoke tests"""
    return TrainConfig(iter_max=5, epsilon0=0.05, seed=3)
