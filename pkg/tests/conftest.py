import logging

import numpy as np
import pytest
from scipy import ndimage  # type: ignore
from skimage.color import hsv2rgb  # type: ignore

from core import LevelConfig, RasterImage, RegistrationConfig


def make_texture(seed=0, size=128, sigma=2.0):
    """Smooth random texture with blob-like structure, normalized to [0, 1]."""
    rng = np.random.default_rng(seed)
    data = ndimage.gaussian_filter(rng.random((size, size)), sigma)
    data = (data - data.min()) / (data.max() - data.min())
    return RasterImage(data)


def colorize(gray):
    """RGB image whose hue channel is 0.8 x the gray values (full saturation and value)."""
    hsv = np.stack([gray.data * 0.8, np.ones_like(gray.data), np.ones_like(gray.data)], axis=-1)
    return RasterImage.from_array(hsv2rgb(hsv))


@pytest.fixture
def logger():
    return logging.getLogger('mmreg.tests')


@pytest.fixture
def texture():
    return make_texture(seed=7, size=128)


@pytest.fixture
def fast_config():
    return RegistrationConfig(
        angles=(0.0, 90.0, 180.0, 270.0),
        resolutions=(128,),
        ransac_iterations=500,
        deformable_resolution=128,
        levels=(
            LevelConfig(iterations=5, step_size=0.05, mi_window=32, mi_stride=16, downsample=2),
            LevelConfig(iterations=5, step_size=0.05, mi_window=32, mi_stride=16, downsample=1),
        ),
    )
