import numpy as np
import pytest

from app.models import MPANetConfig, SyntheticSceneConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return MPANetConfig(input_size=(16, 16), stages=2, channels=[4, 8], heads=2, patch_scales=[1, 2, 4])


@pytest.fixture
def small_scene():
    return SyntheticSceneConfig(size=(32, 32), target_count=(1, 2), seed=3)
