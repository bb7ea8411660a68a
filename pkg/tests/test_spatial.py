from __future__ import annotations

import numpy as np
import pytest

from conftest import random_paths
from dynqte.errors import DataValidationError, SingularDesignError
from dynqte.kernels import KernelSpec
from dynqte.panel import SpatioPanelDataset, alternating_design
from dynqte.simulation import default_null_generator, generate_spatial
from dynqte.spatial import (
    SpatialQuantileCoeffPath,
    SpatialStateCoeffPath,
    cqde_st,
    cqie_st,
    cqte_st,
    estimate_st,
    fit_raw_st,
    fit_smoothed_st,
)
from dynqte.vcdp import QuantileCoeffPath, StateCoeffPath, cqte_closed_form

RING = ((1, 3), (0, 2), (1, 3), (2, 0))
RING_COORDS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def spatial_panel(seed=0, n=30, m=6, gamma2=0.4, Gamma2=0.3, zero_noise=False):
    gen = default_null_generator(m, 1)
    return gen, generate_spatial(
        gen, n, RING_COORDS, RING, 1, seed, gamma2=gamma2, Gamma2=Gamma2, U=0.5 if zero_noise else None,
        zero_noise=zero_noise,
    )


def test_single_region_rejected():
    with pytest.raises(DataValidationError):
        SpatioPanelDataset(np.zeros((3, 2, 1)), np.zeros((3, 2, 1, 1)), np.zeros((3, 2, 1), dtype=int), ((),),
                           np.zeros((1, 2)))


def test_complementary_neighbor_actions_are_collinear():
    # region 1 always takes the opposite action, so Abar = 1 - A in region 0
    rng = np.random.default_rng(0)
    n, m = 12, 4
    A0 = np.stack([alternating_design(m, 1, i % 2) for i in range(n)])
    A = np.stack([A0, 1 - A0], axis=2)
    data = SpatioPanelDataset(
        rng.normal(size=(n, m, 2)), rng.normal(size=(n, m, 2, 1)), A, ((1,), (0,)), np.array([[0.0, 0.0], [1.0, 0.0]])
    )
    with pytest.raises(SingularDesignError) as err:
        fit_raw_st(data, 0.5)
    assert err.value.index == (0, 0)


def test_zero_noise_exact_recovery():
    gen, data = spatial_panel(seed=1, zero_noise=True)
    q, s = fit_raw_st(data, 0.5)
    theta = gen.theta_at(np.array([0.5]))[0]  # (m, d + 2)
    for k in range(data.r):
        np.testing.assert_allclose(q.coef[:, k, :-1], theta, atol=1e-6)
        np.testing.assert_allclose(q.gamma2[:, k], 0.4, atol=1e-6)
        np.testing.assert_allclose(s.phi0[:, k], gen.phi0, atol=1e-6)
        np.testing.assert_allclose(s.Phi[:, k], gen.Phi, atol=1e-6)
        np.testing.assert_allclose(s.Gamma1[:, k], gen.Gamma, atol=1e-6)
        np.testing.assert_allclose(s.Gamma2[:, k], 0.3, atol=1e-6)


def test_point_mass_weights_are_identity():
    _, data = spatial_panel(seed=2)
    q, s = fit_raw_st(data, 0.5)
    spec = KernelSpec(h=0.5 / data.m, h_st=0.5)
    qs, ss = fit_smoothed_st(q, s, spec, data.coords)
    np.testing.assert_array_equal(qs.coef, q.coef)
    np.testing.assert_array_equal(ss.coef, s.coef)
    assert qs.stage == "fully-smoothed"


def test_spatially_constant_coefficients_unchanged_by_space_step():
    rng = np.random.default_rng(3)
    m, r, d = 5, 4, 1
    qcoef = np.repeat(rng.normal(size=(m, 1, d + 3)), r, axis=1)
    scoef = np.repeat(rng.normal(size=(m - 1, 1, d, d + 3)), r, axis=1)
    time_only = KernelSpec(h=0.4, h_st=1e-3)
    both = KernelSpec(h=0.4, h_st=5.0)
    q1, s1 = fit_smoothed_st(SpatialQuantileCoeffPath(0.5, qcoef), SpatialStateCoeffPath(scoef), time_only, RING_COORDS)
    q2, s2 = fit_smoothed_st(SpatialQuantileCoeffPath(0.5, qcoef), SpatialStateCoeffPath(scoef), both, RING_COORDS)
    np.testing.assert_allclose(q2.coef, q1.coef, atol=1e-14)
    np.testing.assert_allclose(s2.coef, s1.coef, atol=1e-14)


def test_time_then_space_hand_fixture():
    # m = 2, window m h = 2: weights (4/7, 3/7) in time; coords one unit apart
    # with h_st = 2 give the same weights in space
    raw = np.array([[1.0, 2.0], [3.0, 4.0]])  # (t, region)
    qcoef = np.zeros((2, 2, 4))
    qcoef[:, :, 2] = raw
    scoef = np.zeros((1, 2, 1, 4))
    coords = np.array([[0.0, 0.0], [1.0, 0.0]])
    q, _ = fit_smoothed_st(SpatialQuantileCoeffPath(0.5, qcoef), SpatialStateCoeffPath(scoef), KernelSpec(h=1.0, h_st=2.0), coords)
    expected = np.array([[112.0, 119.0], [126.0, 133.0]]) / 49.0
    np.testing.assert_allclose(q.gamma1, expected, atol=1e-14)


def test_hand_fixture_m2_r2():
    # columns: (beta0, beta, gamma1, gamma2)
    qcoef = np.array(
        [
            [[0.0, 0.5, 1.0, 0.25], [0.0, -1.0, 2.0, 0.0]],
            [[0.0, 2.0, 0.5, 0.5], [0.0, 3.0, -1.0, 1.0]],
        ]
    )
    # columns: (phi0, Phi, Gamma1, Gamma2)
    scoef = np.array([[[[1.0, 0.7, 0.5, 1.5]], [[0.0, 0.2, -0.5, 0.25]]]])
    q, s = SpatialQuantileCoeffPath(0.5, qcoef), SpatialStateCoeffPath(scoef)
    de = (1.0 + 0.25) + (2.0 + 0.0) + (0.5 + 0.5) + (-1.0 + 1.0)
    ie = 2.0 * (0.5 + 1.5) + 3.0 * (-0.5 + 0.25)
    assert cqde_st(q) == pytest.approx(de, abs=1e-15)
    assert cqie_st(q, s) == pytest.approx(ie, abs=1e-15)
    assert cqte_st(q, s) == cqde_st(q) + cqie_st(q, s)

    # naive loop oracle: per region, treat-all minus control-all trajectories
    total = 0.0
    for k in range(2):
        y = {}
        for a in (0, 1):
            state = 0.0
            path = 0.0
            for t in range(2):
                if t > 0:
                    st = scoef[t - 1, k, 0]
                    state = st[0] + st[1] * state + (st[2] + st[3]) * a
                c = qcoef[t, k]
                path += c[0] + c[1] * state + (c[2] + c[3]) * a
            y[a] = path
        total += y[1] - y[0]
    assert cqte_st(q, s) == pytest.approx(total, abs=1e-14)


def test_no_state_effect_gives_zero_indirect_effect():
    rng = np.random.default_rng(5)
    qcoef = rng.normal(size=(4, 3, 4))
    scoef = rng.normal(size=(3, 3, 1, 4))
    scoef[..., -2:] = 0.0
    q, s = SpatialQuantileCoeffPath(0.5, qcoef), SpatialStateCoeffPath(scoef)
    assert cqie_st(q, s) == 0.0
    assert cqte_st(q, s) == pytest.approx(qcoef[..., -2].sum() + qcoef[..., -1].sum(), abs=1e-13)


@pytest.mark.parametrize("r", [2, 3, 5])
def test_identical_regions_scale_the_temporal_effect(r):
    theta, sc = random_paths(6, 2, seed=r)
    qt, stp = QuantileCoeffPath(0.5, theta), StateCoeffPath(sc)
    # split the treatment coefficients between own and neighbor terms
    qcoef = np.repeat(np.concatenate([theta[:, :-1], 0.25 * theta[:, -1:], 0.75 * theta[:, -1:]], axis=1)[:, None], r, axis=1)
    scoef = np.repeat(np.concatenate([sc[..., :-1], 0.5 * sc[..., -1:], 0.5 * sc[..., -1:]], axis=2)[:, None], r, axis=1)
    got = cqte_st(SpatialQuantileCoeffPath(0.5, qcoef), SpatialStateCoeffPath(scoef))
    assert got == pytest.approx(r * cqte_closed_form(qt, stp), rel=1e-12, abs=1e-12)


def test_region_permutation_equivariance():
    _, data = spatial_panel(seed=6, n=40)
    base = estimate_st(data, 0.5)
    for perm in ([2, 0, 3, 1], [3, 2, 1, 0]):
        other = estimate_st(data.permute_regions(perm), 0.5)
        assert abs(other.cqte - base.cqte) < 1e-10
        np.testing.assert_allclose(other.qpath.coef, base.qpath.coef[:, perm], atol=1e-10)


def test_estimate_decomposition_and_diagnostics():
    _, data = spatial_panel(seed=7, n=40)
    rep = estimate_st(data, 0.5)
    assert rep.cqte == rep.cqde + rep.cqie
    assert rep.diagnostics["r"] == 4
    assert rep.diagnostics["h_st"] > 0
