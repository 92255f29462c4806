"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from rfsplat.geometry import ViewPose
from rfsplat.scene import GaussianCloud, SceneBounds, init_uniform


@pytest.fixture
def origin_pose():
    return ViewPose(np.zeros(3))


def make_cloud(n, seed, spread=4.0, scale=0.3, mlp_scale=0.3,
               min_height=0.3, max_height=3.0):
    """Random cloud with bounded coefficients, placed above the horizon and
    away from the receiver so renders stay O(1) in magnitude."""
    rng = np.random.default_rng(seed)
    bounds = SceneBounds([-spread, min_height, -spread],
                         [spread, max_height, spread])
    cloud = init_uniform(bounds, n, seed=seed, init_scale=scale)
    cloud.mlp_weights *= mlp_scale
    cloud.raw_opacities[:] = rng.normal(0.0, 1.0, (n, 1))
    cloud.rotations += rng.normal(0.0, 0.3, (n, 4))
    cloud.log_scales += rng.normal(0.0, 0.4, (n, 3))
    return cloud


def central_diff(f, x, step=1e-6):
    """Dense central finite-difference gradient of scalar f at 1-D x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy(); xp[i] += step
        xm = x.copy(); xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g
