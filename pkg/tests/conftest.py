"""Shared fixtures: small model configs and synthetic scenes."""

import numpy as np
import pytest

from catf.model import ModelConfig
from catf.scene import GenConfig, generate_scene


@pytest.fixture
def tiny_cfg():
    """A model small enough for exhaustive finite-difference checks."""
    return ModelConfig(D=8, L=1, h=2, d_k=4, d_v=4, d_ff=16, p=4, K=3,
                       m=4, H=6, dropout=0.0, raster_px=16,
                       raster_resolution=6.0, conv_channels=(4, 8))


@pytest.fixture
def straight_scene():
    return generate_scene(GenConfig(template="straight"), seed=7)


@pytest.fixture
def fork_scene():
    return generate_scene(GenConfig(template="fork"), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
