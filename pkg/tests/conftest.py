import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def interior_coords(rng, n_points, extents, dtype=np.float64):
    """Sampling coords away from voxel boundaries and borders.

    Trilinear interpolation is only C0 across lattice planes, so finite
    differences need points whose fractional part stays in [0.1, 0.9].
    """
    d, h, w = extents
    cols = []
    for n in (d, h, w):
        idx = rng.integers(0, n - 1, size=n_points)
        frac = rng.uniform(0.1, 0.9, size=n_points)
        cols.append((idx + frac) / (n - 1))
    return np.stack(cols, axis=1).astype(dtype)
