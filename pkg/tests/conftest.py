from __future__ import annotations

import numpy as np
import pytest

from dynqte.panel import PanelDataset, alternating_design
from dynqte.simulation import default_null_generator, generate

_ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"ACCEPTANCE criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    _ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def linear_panel(theta, state_coef, n=12, seed=0, TI=1, noise=0.0):
    """Panel generated from fixed coefficient paths.

    ``theta`` (m, d + 2) and ``state_coef`` (m - 1, d, d + 2); outcomes and
    states get ``noise``-scaled normal errors (zero gives an exact fit).
    """
    rng = np.random.default_rng(seed)
    m, p = theta.shape
    d = p - 2
    A = np.stack([alternating_design(m, TI, 1 if i % 2 == 0 else 0) for i in range(n)])
    S = np.empty((n, m, d))
    S[:, 0] = rng.normal(5.0, 1.0, size=(n, d))
    for t in range(m - 1):
        Z = np.concatenate([np.ones((n, 1)), S[:, t], A[:, t, None]], axis=1)
        S[:, t + 1] = Z @ state_coef[t].T + noise * rng.normal(0.0, 1.0, size=(n, d))
    Z = np.concatenate([np.ones((n, m, 1)), S, A[..., None]], axis=2)
    Y = np.einsum("ntp,tp->nt", Z, theta) + noise * rng.normal(size=(n, m))
    return PanelDataset(Y, S, A)


def random_paths(m, d, seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=(m, d + 2))
    sc = np.zeros((m - 1, d, d + 2))
    sc[:, :, 0] = rng.normal(2.0, 0.5, size=(m - 1, d))
    sc[:, :, 1 : d + 1] = 0.4 * np.eye(d) + 0.05 * rng.normal(size=(m - 1, d, d))
    sc[:, :, -1] = rng.normal(size=(m - 1, d))
    return theta, sc


@pytest.fixture(scope="session")
def null_generator():
    return default_null_generator()


@pytest.fixture(scope="session")
def small_panel(null_generator):
    return generate(null_generator, 20, 1, 11)


def monotone_generator(seed, m=None, d=None):
    """Random generator satisfying the monotonicity premises with positive states."""
    from scipy import stats

    from dynqte.simulation import GeneratorSpec

    rng = np.random.default_rng(seed)
    m = m or int(rng.integers(3, 9))
    d = d or int(rng.integers(1, 3))
    grid = np.linspace(0.01, 0.99, 99)
    theta = np.empty((m, grid.size, d + 2))
    theta[:, :, 0] = rng.normal(3.0, 1.0, (m, 1)) + rng.uniform(0.5, 2.0, (m, 1)) * stats.norm.ppf(grid)
    theta[:, :, 1:] = rng.normal(0.5, 0.3, (m, 1, d + 1)) + rng.uniform(0.1, 1.0, (m, 1, d + 1)) * grid[None, :, None]
    Phi = rng.uniform(0.0, 0.6 / d, (m - 1, d, d))
    return GeneratorSpec(
        tau_grid=grid,
        theta=theta,
        phi0=rng.uniform(1.0, 4.0, (m - 1, d)),
        Phi=Phi,
        Gamma=rng.uniform(0.0, 2.0, (m - 1, d)),
        s1_mean=np.full(d, 10.0),
        s1_sd=np.full(d, 0.5),
        state_scale=np.full(d, 0.3),
        monotone_flag=True,
    )


def hand_generator():
    """Monotone generator whose rank-0.5 section is the three-interval hand example."""
    from dynqte.simulation import GeneratorSpec

    grid = np.linspace(0.01, 0.99, 99)
    m, d = 3, 1
    theta = np.empty((m, grid.size, 3))
    theta[:, :, 0] = 2.0 + 3.0 * (grid - 0.5)
    theta[:, :, 1] = 1.0 + 0.2 * (grid - 0.5)
    theta[:, :, 2] = 0.5 * (grid - 0.5)
    return GeneratorSpec(
        tau_grid=grid,
        theta=theta,
        phi0=np.full((2, 1), 2.0),
        Phi=np.array([[[0.5]], [[0.5]]]),
        Gamma=np.ones((2, 1)),
        s1_mean=np.array([10.0]),
        s1_sd=np.array([0.5]),
        state_scale=np.array([0.3]),
        monotone_flag=True,
    )
