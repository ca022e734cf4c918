import math

import numpy as np
import pytest

from mardeam.iodata import ENERGY_GRID, FanGeometry, ImageGrid, SpectrumTable
from mardeam.physics import default_model


def fan(n_views=60, n_channels=48, fov=20.0, radius=200.0, **kw):
    return FanGeometry(n_views, n_channels, radius, radius, 2 * math.asin(fov / radius), **kw)


def parallel(n_views=60, n_channels=48, fov=20.0, radius=200.0, **kw):
    return FanGeometry(n_views, n_channels, radius, radius, 2 * math.asin(fov / radius), mode="parallel", **kw)


def line_spectrum(energy, counts=1e5):
    c = np.zeros(ENERGY_GRID.size)
    c[int(energy - ENERGY_GRID[0])] = counts
    return SpectrumTable(ENERGY_GRID, c, f"{energy} keV")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_grid():
    return ImageGrid.zeros(16, 16, 2.0)


@pytest.fixture(scope="session")
def small_model():
    """Dual-energy model on a 16x16, 2 mm grid with 40 views x 40 channels."""
    return default_model(fan(40, 40, fov=23.0), counts=1e5)


@pytest.fixture(scope="session")
def desk():
    """The 128x128 / 180 view / 256 channel rod-phantom setup used by the acceptance tests."""
    grid = ImageGrid.zeros(128, 128, 2.0)
    geom = FanGeometry(180, 256, 500.0, 500.0, 2 * math.asin(135.0 / 500.0))
    return grid, default_model(geom, counts=1e5)
