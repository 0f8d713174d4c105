import numpy as np
import pytest

from geoflow.grid import Grid, MetricField


def band_limited(grid, rng, band=2, shape=()):
    """Real random field with Fourier support in |k_j| <= band."""
    spec_shape = grid.rfft_wavevectors.shape[:-1] + shape
    spec = rng.standard_normal(spec_shape) + 1j * rng.standard_normal(spec_shape)
    keep = np.all(np.abs(grid.rfft_wavevectors) <= band, axis=-1)
    spec *= keep.reshape(keep.shape + (1,) * len(shape))
    f = np.fft.irfftn(spec, s=grid.shape, axes=grid.axes)
    return f / np.abs(f).max()


def random_metric(grid, rng, amp=0.1, band=2):
    w = band_limited(grid, rng, band, (grid.n, grid.n))
    w = 0.5 * (w + np.swapaxes(w, -1, -2))
    return MetricField(grid, np.eye(grid.n) + amp * w / np.abs(w).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid3():
    return Grid(3, 16)


@pytest.fixture
def grid3_small():
    return Grid(3, 8)
