import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def jittered_plane(n_side: int, spacing: float = 0.02, seed: int = 0, jitter: float = 0.2):
    """Points near a regular grid on z = 0."""
    r = np.random.default_rng(seed)
    g = np.arange(n_side) * spacing
    x, y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], axis=1)
    pts[:, :2] += r.uniform(-jitter, jitter, (len(pts), 2)) * spacing
    return pts
