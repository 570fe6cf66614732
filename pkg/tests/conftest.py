import numpy as np
import pytest


def random_unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def perturb_direction(rng, u, angle):
    """Rotate a unit vector by the given angle toward a random tangent."""
    t = rng.standard_normal(u.shape[0])
    t -= (t @ u) * u
    t /= np.linalg.norm(t)
    return np.cos(angle) * u + np.sin(angle) * t


@pytest.fixture
def rng():
    return np.random.default_rng(0)
