import numpy as np
import pytest

from voxcomplete.completion import NetConfig


@pytest.fixture
def tiny_net():
    """7-level architecture with minimal widths, for fast structural tests."""
    return NetConfig(encoder_filters=[(3, 3)] * 7, decoder_filters=[(3, 3)] * 6)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_surface_cloud(seed=0, n=400, extent=3.0):
    """A bumpy sheet plus a box-ish blob; enough structure for net tests."""
    r = np.random.default_rng(seed)
    xy = r.uniform(0, extent, size=(n, 2))
    z = 0.25 * np.sin(2 * xy[:, 0]) + 0.15 * np.cos(3 * xy[:, 1])
    return np.column_stack([xy, z])
