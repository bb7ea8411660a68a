from __future__ import annotations

import numpy as np
import pytest

from conftest import random_paths
from dynqte.bootstrap import (
    BootstrapConfig,
    _decide,
    generate_pseudo,
    resample_residuals,
    run_test,
    run_test_st,
)
from dynqte.kernels import KernelSpec
from dynqte.panel import PanelDataset
from dynqte.simulation import default_null_generator, generate, generate_spatial, inject_effect
from dynqte.vcdp import QuantileCoeffPath, ResidualSet, StateCoeffPath, fit_raw, fit_smoothed, residuals

FAST = BootstrapConfig(B=100, seed=7)


def residual_fixture(n=6, m=5, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return ResidualSet(rng.normal(size=(n, m)), rng.normal(size=(n, m - 1, d)))


@pytest.mark.parametrize("mode", ["within_day_time_iid", "whole_day_process"])
def test_resampling_is_seeded(mode):
    res = residual_fixture()
    a = resample_residuals(res, mode, np.random.default_rng(3))
    b = resample_residuals(res, mode, np.random.default_rng(3))
    np.testing.assert_array_equal(a.e, b.e)
    np.testing.assert_array_equal(a.E, b.E)


@pytest.mark.parametrize("paired", [False, True])
def test_within_day_support_preserved(paired):
    res = residual_fixture()
    out = resample_residuals(res, "within_day_time_iid", np.random.default_rng(1), paired=paired)
    for i in range(res.e.shape[0]):
        assert set(out.e[i]) <= set(res.e[i])
        source = {tuple(v) for v in res.E[i]}
        # state error vectors stay intact across coordinates
        assert all(tuple(v) in source for v in out.E[i])


def test_paired_mode_couples_interval_draws():
    n, m = 4, 6
    e = np.tile(np.arange(m, dtype=float), (n, 1))
    E = np.tile(np.arange(1, m, dtype=float)[:, None], (n, 1, 1))
    # E[:, t] is the state error entering interval t + 1, labeled t + 1 here
    out = resample_residuals(ResidualSet(e, E), "within_day_time_iid", np.random.default_rng(2), paired=True)
    np.testing.assert_array_equal(out.e[:, 1:], out.E[..., 0])


def test_whole_day_keeps_trajectories_intact():
    res = residual_fixture(n=8)
    out = resample_residuals(res, "whole_day_process", np.random.default_rng(4))
    rows = {tuple(r) for r in res.e}
    for i in range(8):
        assert tuple(out.e[i]) in rows
        j = next(k for k in range(8) if np.array_equal(res.e[k], out.e[i]))
        np.testing.assert_array_equal(out.E[i], res.E[j])


def test_whole_day_single_trajectory_is_identity():
    res = residual_fixture(n=1)
    out = resample_residuals(res, "whole_day_process", np.random.default_rng(0))
    np.testing.assert_array_equal(out.e, res.e)
    np.testing.assert_array_equal(out.E, res.E)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        resample_residuals(residual_fixture(), "blocks", np.random.default_rng(0))


def hand_panel():
    theta, sc = random_paths(6, 2, seed=21)
    rng = np.random.default_rng(22)
    n = 15
    A = rng.integers(0, 2, size=(n, 6))
    A[0], A[1] = 0, 1
    S = rng.normal(5.0, 1.0, size=(n, 6, 2))
    return PanelDataset(rng.normal(size=(n, 6)), S, A), QuantileCoeffPath(0.5, theta), StateCoeffPath(sc)


def test_zero_residuals_give_the_deterministic_skeleton():
    data, q, s = hand_panel()
    zero = ResidualSet(np.zeros((data.n, data.m)), np.zeros((data.n, data.m - 1, data.d)))
    pseudo = generate_pseudo(data, q, s, zero)
    np.testing.assert_array_equal(pseudo.actions, data.actions)
    np.testing.assert_array_equal(pseudo.states[:, 0], data.states[:, 0])
    q2, s2 = fit_raw(pseudo, 0.5)
    np.testing.assert_allclose(q2.coef, q.coef, atol=1e-6)
    np.testing.assert_allclose(s2.coef, s.coef, atol=1e-8)


def test_single_step_recursion_by_hand():
    rng = np.random.default_rng(5)
    n = 4
    data = PanelDataset(rng.normal(size=(n, 2)), rng.normal(size=(n, 2, 1)), np.array([[0, 1], [1, 0], [1, 1], [0, 0]]))
    q = QuantileCoeffPath(0.5, np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]]))
    s = StateCoeffPath(np.array([[[0.5, 0.8, 2.0]]]))
    res = ResidualSet(rng.normal(size=(n, 2)), rng.normal(size=(n, 1, 1)))
    pseudo = generate_pseudo(data, q, s, res)
    S1 = data.states[:, 0, 0]
    A = data.actions
    S2 = 0.5 + 0.8 * S1 + 2.0 * A[:, 0] + res.E[:, 0, 0]
    np.testing.assert_allclose(pseudo.states[:, 1, 0], S2, atol=1e-14)
    np.testing.assert_allclose(pseudo.outcomes[:, 0], 1.0 + 2.0 * S1 + 3.0 * A[:, 0] + res.e[:, 0], atol=1e-14)
    np.testing.assert_allclose(pseudo.outcomes[:, 1], -1.0 + 0.5 * S2 + 4.0 * A[:, 1] + res.e[:, 1], atol=1e-14)


def test_residual_roundtrip_reproduces_data():
    # observed residuals fed back through the smoothed model return the observed outcomes
    data = generate(default_null_generator(8, 1), 20, 1, 3)
    q, s = fit_smoothed(*fit_raw(data, 0.5), KernelSpec().resolve(data.n))
    pseudo = generate_pseudo(data, q, s, residuals(data, q, s))
    np.testing.assert_allclose(pseudo.outcomes, data.outcomes, atol=1e-10)
    np.testing.assert_allclose(pseudo.states, data.states, atol=1e-10)


def test_degenerate_draws():
    crit, p, reject = _decide(0.3, np.zeros(199), 0.05, "empirical_quantile")
    assert crit == 0.0 and reject
    assert p == pytest.approx(1.0 / 200.0)
    crit, p, reject = _decide(0.0, np.zeros(199), 0.05, "empirical_quantile")
    assert not reject and p == 1.0


def test_decision_rule_matches_critical_value():
    rng = np.random.default_rng(6)
    draws = rng.normal(size=300)
    for T in (-1.0, 0.5, 1.6, 1.7, 3.0):
        crit, p, reject = _decide(T, draws, 0.05, "empirical_quantile")
        assert crit == pytest.approx(np.quantile(draws, 0.95))
        assert reject == (T > crit)
        assert 1.0 / 301.0 <= p <= 1.0


@pytest.fixture(scope="module")
def null_panel():
    return generate(default_null_generator(8, 1), 20, 1, 5)


def test_run_test_is_deterministic(null_panel):
    a = run_test(null_panel, 0.5, config=FAST)
    b = run_test(null_panel, 0.5, config=FAST)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.p_value == b.p_value and a.statistic == b.statistic
    c = run_test(null_panel, 0.5, config=BootstrapConfig(B=100, seed=8))
    assert not np.array_equal(a.draws, c.draws)


def test_threads_do_not_change_results(null_panel):
    cfg = BootstrapConfig(B=120, seed=9)
    one = run_test(null_panel, 0.5, config=cfg)
    many = run_test(null_panel, 0.5, config=BootstrapConfig(B=120, seed=9, threads=3))
    np.testing.assert_array_equal(one.draws, many.draws)
    assert one.to_dict() == many.to_dict()


def test_result_contract(null_panel):
    res = run_test(null_panel, 0.5, "cqie", config=FAST)
    assert res.draws.shape == (100,)
    assert 1.0 / 101.0 <= res.p_value <= 1.0
    assert res.reject == (res.statistic > res.critical_value)
    assert res.critical_value == pytest.approx(np.quantile(res.draws, 0.95))
    d = res.to_dict(include_draws=False)
    assert d["estimand"] == "CQIE" and "draws" not in d
    assert d["config"]["resample_mode"] == "within_day_time_iid"


def test_whole_day_and_paired_modes_run(null_panel):
    for cfg in (
        BootstrapConfig(B=100, seed=1, resample_mode="whole_day_process"),
        BootstrapConfig(B=100, seed=1, paired=True),
    ):
        res = run_test(null_panel, 0.5, config=cfg)
        assert np.all(np.isfinite(res.draws))


def test_normal_approx_only_for_direct_effect(null_panel):
    cfg = BootstrapConfig(B=100, seed=2, pvalue_mode="normal_approx")
    res = run_test(null_panel, 0.5, "cqde", config=cfg)
    sd = np.std(res.draws, ddof=1)
    from scipy.stats import norm

    assert res.p_value == pytest.approx(norm.sf(res.statistic / sd))
    for est in ("cqte", "cqie"):
        with pytest.raises(ValueError):
            run_test(null_panel, 0.5, est, config=cfg)


def test_config_validation(null_panel):
    with pytest.raises(ValueError):
        BootstrapConfig(alpha=0.5)
    with pytest.raises(ValueError):
        BootstrapConfig(resample_mode="blocks")
    with pytest.raises(ValueError):
        BootstrapConfig(seed=-1)
    with pytest.raises(ValueError):
        run_test(null_panel, 0.5, config=BootstrapConfig(B=50))
    with pytest.raises(ValueError):
        run_test(null_panel, 0.5, "ate", config=FAST)


def test_statistic_increases_with_injected_effect():
    null = default_null_generator(8, 1)
    means = []
    for delta in (0.0, 0.05, 0.1):
        gen = inject_effect(null, delta)
        from dynqte.vcdp import estimate

        T = [estimate(generate(gen, 30, 1, 300 + k), 0.5).cqte for k in range(100)]
        means.append(np.mean(T))
    assert means[0] < means[1] < means[2]


def test_strong_signal_is_detected():
    gen = inject_effect(default_null_generator(8, 1), 0.2)
    res = run_test(generate(gen, 30, 1, 4), 0.5, config=FAST)
    assert res.reject and res.p_value == pytest.approx(1.0 / 101.0)


RING = ((1, 2), (0, 2), (0, 1))
COORDS = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])


def test_spatial_test_is_deterministic():
    data = generate_spatial(default_null_generator(6, 1), 20, COORDS, RING, 1, 3)
    a = run_test_st(data, 0.5, config=FAST)
    b = run_test_st(data, 0.5, config=BootstrapConfig(B=100, seed=7, threads=2))
    np.testing.assert_array_equal(a.draws, b.draws)
    assert a.spatial and "h_st" in a.to_dict()
    with pytest.raises(TypeError):
        run_test(data, 0.5, config=FAST)
    with pytest.raises(TypeError):
        run_test_st(generate(default_null_generator(6, 1), 20, 1, 3), 0.5, config=FAST)


def test_spatial_p_value_falls_with_signal_in_one_region():
    gen = default_null_generator(6, 1)
    grid = (0.0, 1.0, 2.0)
    pvals = np.zeros((len(grid), 100))
    for run in range(100):
        base = generate_spatial(gen, 20, COORDS, RING, 1, 1000 + run)
        for g, delta in enumerate(grid):
            Y = base.outcomes.copy()
            Y[:, :, 0] += delta * base.actions[:, :, 0]
            data = type(base)(Y, base.states, base.actions, base.neighbors, base.coords)
            pvals[g, run] = run_test_st(data, 0.5, config=BootstrapConfig(B=100, seed=run)).p_value
    means = pvals.mean(axis=1)
    assert means[0] > means[1] > means[2]
