"""Shared fixtures: small grids, phantom models and random dense systems."""

from lskkf.fields import Grid
from lskkf.model import NoiseConfig, SystemModel, assemble_system, linear_system, make_rng, phantom_config

import numpy as np
import pytest


@pytest.fixture
def grid_2d() -> Grid:
    return Grid((6, 5), (0.0025, 0.0025))


@pytest.fixture
def small_model() -> SystemModel:
    """12×12 two-material phantom with the default noise settings."""
    return assemble_system(phantom_config((12, 12)), noise=NoiseConfig())


@pytest.fixture
def random_system():
    """Factory for stable random dense systems: returns (model, dense matrices dict)."""

    def build(n_x: int, n_y: int, seed: int = 0, n_u: int = 2, q_scale: float = 0.3) -> tuple[SystemModel, dict]:
        rng = make_rng(seed)
        A = rng.standard_normal((n_x, n_x))
        A *= 0.9 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
        B = rng.standard_normal((n_x, n_u))
        C = np.eye(n_x)[np.sort(rng.choice(n_x, size=n_y, replace=False))]
        L_Q = q_scale * (np.eye(n_x) + 0.2 * rng.standard_normal((n_x, n_x)) / np.sqrt(n_x))
        r_diag = rng.uniform(0.5, 2.0, size=n_y)
        model = linear_system(A, B, C, L_Q, r_diag)
        return model, {"A": A, "B": B, "C": C, "L_Q": L_Q, "Q": L_Q @ L_Q.T, "R": np.diag(r_diag), "r": r_diag}

    return build
