import numpy as np
import pytest

from clfq.raster import ForegroundMask, GrayRaster


def make_grating(width, height, period, angle_deg=0.0, amplitude=100.0, square=False, phase=0.0):
    """Sinusoidal or square grating; ridges run perpendicular to angle_deg."""
    ys, xs = np.mgrid[0:height, 0:width]
    a = np.deg2rad(angle_deg)
    u = xs * np.cos(a) + ys * np.sin(a) + phase
    if square:
        wave = np.where((u % period) < period / 2.0, -1.0, 1.0)
    else:
        wave = np.sin(2 * np.pi * u / period)
    return GrayRaster(np.clip(127.5 + amplitude * wave, 0, 255).astype(np.uint8))


def full_mask(img: GrayRaster) -> ForegroundMask:
    return ForegroundMask(np.ones((img.height, img.width), dtype=bool))


@pytest.fixture
def grating256():
    return make_grating(256, 256, 8)


@pytest.fixture
def mask256(grating256):
    return full_mask(grating256)
