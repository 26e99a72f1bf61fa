import numpy as np
import pytest

from diffnet.data import SceneParams, generate_scene
from diffnet.model import ModelConfig, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    """Tiny config used wherever the architecture, not capacity, matters."""
    return init_model(ModelConfig(in_channels=3, base_width=4), seed=7)


@pytest.fixture
def small_scene():
    params = SceneParams(channels=3, size=(64, 64), burn_fraction_target=0.15)
    return generate_scene(params, seed=5)
