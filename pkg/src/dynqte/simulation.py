"""Synthetic switchback experiments, effect injection and Monte Carlo oracles.

A generator describes the outcome coefficients as functions of a day-level
rank variable ``U ~ Uniform(0, 1)``, tabulated on a grid of ranks and
interpolated linearly in between (extrapolated linearly at the ends).  All
intervals of a day share one ``U``.  States follow the linear transition
model with additive noise.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .bootstrap import BootstrapConfig, run_test
from .errors import NumericalError
from .kernels import KernelSpec, smooth_path
from .panel import PanelDataset, SpatioPanelDataset, adjacency_matrix, alternating_design, neighbor_mean
from .vcdp import (
    QuantileCoeffPath,
    StateCoeffPath,
    cqde,
    cqie,
    fit_quantile_cells,
    fit_state_cells,
)

__all__ = [
    "GeneratorSpec",
    "SimulationConfig",
    "OracleResult",
    "CellResult",
    "default_null_generator",
    "generator_from_fit",
    "null_summaries",
    "inject_effect",
    "generate",
    "generate_spatial",
    "mc_cqte_oracle",
    "run_cell",
    "cell_generator",
    "draw_trajectory",
    "counterfactual_states",
    "run_rejection_study",
    "STUDY_COLUMNS",
]

STUDY_COLUMNS = ("tau", "TI", "n", "delta", "reject_rate", "se", "runs", "failures")


def _interp_rows(grid, values, u):
    """Piecewise-linear interpolation along axis 0 of ``values`` at points ``u``.

    Linear extrapolation outside the grid; a single-point grid is constant.
    """
    grid = np.asarray(grid, dtype=float)
    u = np.asarray(u, dtype=float)
    if grid.size == 1:
        return np.broadcast_to(values[0], u.shape + values.shape[1:]).copy()
    k = np.clip(np.searchsorted(grid, u, side="right") - 1, 0, grid.size - 2)
    w = (u - grid[k]) / (grid[k + 1] - grid[k])
    w = w.reshape(w.shape + (1,) * (values.ndim - 1))
    return values[k] * (1.0 - w) + values[k + 1] * w


@dataclass(frozen=True)
class GeneratorSpec:
    """Data-generating process for temporal switchback panels.

    Attributes
    ----------
    tau_grid : ndarray, shape (G,)
        Strictly increasing ranks in (0, 1).
    theta : ndarray, shape (m, G, d + 2)
        Outcome coefficients ``(beta0, beta, gamma)`` at each interval and rank.
    phi0, Phi, Gamma : ndarray
        State model, shapes (m - 1, d), (m - 1, d, d), (m - 1, d).
    s1_mean, s1_sd : ndarray, shape (d,)
        Normal initial state distribution (parametric source).
    state_scale : ndarray, shape (d,)
        Scale of the state noise.
    state_df : float or None
        Degrees of freedom of Student-t state noise; ``None`` for normal.
    error_source : {"parametric", "resample_from_fit"}
        ``resample_from_fit`` draws initial states and whole-day residual
        processes from the pools below and ignores the rank variable.
    monotone_flag : bool
        Declares that outcome coefficients increase in the rank and the
        state coefficients are nonnegative; checked on construction.
    """

    tau_grid: np.ndarray
    theta: np.ndarray
    phi0: np.ndarray
    Phi: np.ndarray
    Gamma: np.ndarray
    s1_mean: np.ndarray
    s1_sd: np.ndarray
    state_scale: np.ndarray
    state_df: float | None = None
    error_source: str = "parametric"
    monotone_flag: bool = False
    e_pool: np.ndarray | None = field(default=None, repr=False)
    E_pool: np.ndarray | None = field(default=None, repr=False)
    s1_pool: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        grid = np.asarray(self.tau_grid, dtype=float)
        if grid.ndim != 1 or grid.size < 1 or np.any(np.diff(grid) <= 0):
            raise ValueError("tau_grid must be a strictly increasing 1-d array")
        if np.any((grid <= 0) | (grid >= 1)):
            raise ValueError("tau_grid must lie in (0, 1)")
        theta = np.asarray(self.theta, dtype=float)
        m, G, p = theta.shape
        d = p - 2
        if G != grid.size or d < 1:
            raise ValueError(f"theta shape {theta.shape} does not match the grid")
        shapes = {"phi0": (m - 1, d), "Phi": (m - 1, d, d), "Gamma": (m - 1, d)}
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} must have shape {shape}, got {np.shape(getattr(self, name))}")
        if self.error_source not in ("parametric", "resample_from_fit"):
            raise ValueError(f"unknown error source {self.error_source!r}")
        if self.error_source == "resample_from_fit":
            if self.e_pool is None or self.E_pool is None or self.s1_pool is None:
                raise ValueError("resample_from_fit needs e_pool, E_pool and s1_pool")
        if self.state_df is not None and not self.state_df > 0:
            raise ValueError("state_df must be positive")
        object.__setattr__(self, "tau_grid", grid)
        object.__setattr__(self, "theta", theta)
        if self.monotone_flag and not self.satisfies_monotonicity():
            raise ValueError(
                "monotone_flag is set but outcome coefficients are not strictly increasing "
                "in the rank or some state coefficients are negative"
            )

    @property
    def m(self) -> int:
        return self.theta.shape[0]

    @property
    def d(self) -> int:
        return self.theta.shape[2] - 2

    def satisfies_monotonicity(self) -> bool:
        if self.tau_grid.size < 2:
            return False
        increasing = np.all(np.diff(self.theta, axis=1) > 0)
        nonneg = all(np.all(np.asarray(a) >= 0) for a in (self.phi0, self.Phi, self.Gamma))
        return bool(increasing and nonneg)

    def theta_at(self, u) -> np.ndarray:
        """Outcome coefficients at ranks ``u``; shape ``u.shape + (m, d + 2)``."""
        vals = np.moveaxis(self.theta, 1, 0)  # (G, m, p)
        return _interp_rows(self.tau_grid, vals, u)

    def paths(self, tau: float):
        """True coefficient paths at rank ``tau``."""
        q = QuantileCoeffPath(tau, self.theta_at(tau), "true")
        s = np.concatenate([self.phi0[..., None], self.Phi, self.Gamma[..., None]], axis=2)
        return q, StateCoeffPath(s, "true")

    def true_estimands(self, tau: float) -> dict:
        q, s = self.paths(tau)
        de, ie = cqde(q), cqie(q, s)
        return {"cqte": de + ie, "cqde": de, "cqie": ie}

    def replace(self, **changes) -> GeneratorSpec:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SimulationConfig:
    """One cell of a rejection-rate study."""

    delta: float = 0.0
    TI: int = 1
    n: int = 40
    m: int = 24
    d: int = 2
    tau: float = 0.5
    B: int = 200
    alpha: float = 0.05
    resample_mode: str = "within_day_time_iid"
    estimand: str = "cqte"
    runs: int = 500
    seed: int = 0
    noise: str = "normal"
    kernel: str = "epanechnikov"
    h: float | None = None

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        if self.runs < 100:
            raise ValueError(f"runs must be at least 100 for a rejection rate, got {self.runs}")
        if self.B < 100:
            raise ValueError(f"B must be at least 100, got {self.B}")
        if self.noise not in ("normal", "t3"):
            raise ValueError(f"noise must be 'normal' or 't3', got {self.noise!r}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.TI < 1 or self.TI > self.m:
            raise ValueError(f"TI must lie in [1, m], got {self.TI}")


# ---------------------------------------------------------------------------
# generators


def default_null_generator(
    m: int = 24,
    d: int = 2,
    noise: str = "normal",
    sigma: float = 2.0,
    noise_scale: float = 4.0,
    grid_size: int = 99,
) -> GeneratorSpec:
    """Parametric null generator with no treatment effect.

    States hover around positive levels (10 for the first coordinate,
    decreasing for later ones) with mild cross-dependence.  The outcome
    intercept is ``b0(t) + sigma * Phi^-1(U)`` with a daily cycle ``b0(t)``,
    and state slopes increase gently in ``U``.
    """
    grid = np.linspace(0.01, 0.99, grid_size)
    t = np.arange(m)
    b0 = 5.0 + 2.0 * np.sin(2.0 * np.pi * t / m)
    theta = np.zeros((m, grid_size, d + 2))
    theta[:, :, 0] = b0[:, None] + sigma * stats.norm.ppf(grid)[None, :]
    slope = 0.5 / (1.0 + np.arange(d)) ** 0.5
    theta[:, :, 1 : d + 1] = slope[None, None, :] + 0.05 * (grid[None, :, None] - 0.5)
    level = 10.0 * 0.8 ** np.arange(d)
    Phi = np.full((d, d), 0.05) + np.diag(0.5 - 0.1 * np.arange(d) - 0.05)
    phi0 = (np.eye(d) - Phi) @ level
    scale = noise_scale * 0.8 ** np.arange(d)
    return GeneratorSpec(
        tau_grid=grid,
        theta=theta,
        phi0=np.tile(phi0, (m - 1, 1)),
        Phi=np.tile(Phi, (m - 1, 1, 1)),
        Gamma=np.zeros((m - 1, d)),
        s1_mean=level,
        s1_sd=np.ones(d),
        state_scale=scale,
        state_df=3.0 if noise == "t3" else None,
    )


def generator_from_fit(dataset: PanelDataset, tau: float, spec: KernelSpec | None = None) -> GeneratorSpec:
    """Null generator fitted to a panel, resampling its residual processes.

    Both models are fitted without the action term and kernel-smoothed;
    simulated days draw an initial state and a whole-day residual process
    from the panel, independently and with replacement.
    """
    spec = (spec or KernelSpec()).resolve(dataset.n)
    Z = dataset.design()[None, :, :, :-1]
    q, sing, conv = fit_quantile_cells(Z, dataset.outcomes[None], tau)
    s, ssing = fit_state_cells(Z[:, :, :-1], dataset.states[None, :, 1:])
    if sing.any() or ssing.any() or not conv.all():
        raise NumericalError("null model fit failed on the source panel")
    m, d = dataset.m, dataset.d
    q = smooth_path(q[0], spec, horizon=m, axis=0)
    s = smooth_path(s[0], spec, horizon=m, axis=0)
    e = dataset.outcomes - np.einsum("ntp,tp->nt", Z[0], q)
    E = dataset.states[:, 1:] - np.einsum("ntp,tdp->ntd", Z[0, :, :-1], s)
    theta = np.concatenate([q, np.zeros((m, 1))], axis=1)[:, None, :]
    return GeneratorSpec(
        tau_grid=np.array([tau]),
        theta=theta,
        phi0=s[:, :, 0],
        Phi=s[:, :, 1:],
        Gamma=np.zeros((m - 1, d)),
        s1_mean=dataset.states[:, 0].mean(axis=0),
        s1_sd=dataset.states[:, 0].std(axis=0),
        state_scale=np.ones(d),
        error_source="resample_from_fit",
        e_pool=e,
        E_pool=E,
        s1_pool=dataset.states[:, 0].copy(),
    )


def _state_noise(gen, rng, shape):
    if gen.state_df is None:
        z = rng.standard_normal(shape)
    else:
        z = rng.standard_t(gen.state_df, shape)
    return z * gen.state_scale


def generate(gen: GeneratorSpec, n: int, TI: int = 1, seed=None, *, U=None, zero_noise: bool = False) -> PanelDataset:
    """Simulate ``n`` days.

    Day ``i`` starts with the treatment when ``i`` is even and alternates
    every ``TI`` intervals.  ``U`` fixes the rank variable of every day and
    ``zero_noise`` switches off the state noise (initial states still
    vary across days so the designs keep full rank); both are for
    exact-recovery checks.
    """
    rng = np.random.default_rng(seed)
    m, d = gen.m, gen.d
    A = np.stack([alternating_design(m, TI, 1 if i % 2 == 0 else 0) for i in range(n)])
    S = np.empty((n, m, d))
    if gen.error_source == "resample_from_fit":
        n0 = gen.e_pool.shape[0]
        s_idx = rng.integers(0, n0, size=n)
        e_idx = rng.integers(0, n0, size=n)
        S[:, 0] = gen.s1_pool[s_idx]
        E = gen.E_pool[e_idx]
        e = gen.e_pool[e_idx]
        if zero_noise:
            E = np.zeros_like(E)
            e = np.zeros_like(e)
    else:
        u = rng.random(n) if U is None else np.broadcast_to(np.asarray(U, dtype=float), (n,))
        S[:, 0] = gen.s1_mean + gen.s1_sd * rng.standard_normal((n, d))
        E = np.zeros((n, m - 1, d)) if zero_noise else _state_noise(gen, rng, (n, m - 1, d))
    for t in range(m - 1):
        S[:, t + 1] = gen.phi0[t] + S[:, t] @ gen.Phi[t].T + A[:, t, None] * gen.Gamma[t] + E[:, t]
    Z = np.concatenate([np.ones((n, m, 1)), S, A[..., None]], axis=2)
    if gen.error_source == "resample_from_fit":
        Y = np.einsum("ntp,tp->nt", Z, gen.theta[:, 0]) + e
    else:
        Y = np.einsum("ntp,ntp->nt", Z, gen.theta_at(u))
    return PanelDataset(Y, S, A)


def generate_spatial(
    gen: GeneratorSpec,
    n: int,
    coords,
    neighbors,
    TI: int = 1,
    seed=None,
    *,
    gamma2=0.0,
    Gamma2=0.0,
    U=None,
    zero_noise: bool = False,
) -> SpatioPanelDataset:
    """Simulate ``n`` days over regions that share the generator ``gen``.

    Every (day, region) pair gets its own rank, initial state, noise path
    and random starting action, so own and neighbor actions are not
    collinear.  ``gamma2`` (scalar or per interval) and ``Gamma2`` (scalar,
    per coordinate, or ``(m - 1, d)``) scale the neighbor-average action in
    the outcome and state equations.
    """
    if gen.error_source != "parametric":
        raise ValueError("spatial simulation needs a parametric generator")
    rng = np.random.default_rng(seed)
    m, d = gen.m, gen.d
    coords = np.asarray(coords, dtype=float)
    r = coords.shape[0]
    adj = adjacency_matrix(tuple(tuple(x) for x in neighbors), r)
    starts = rng.integers(0, 2, size=(n, r))
    A = np.stack(
        [np.stack([alternating_design(m, TI, int(starts[i, k])) for k in range(r)], axis=1) for i in range(n)]
    )
    Abar = neighbor_mean(A, adj)
    g2 = np.broadcast_to(np.asarray(gamma2, dtype=float), (m,))
    G2 = np.broadcast_to(np.asarray(Gamma2, dtype=float), (m - 1, d))
    u = rng.random((n, r)) if U is None else np.broadcast_to(np.asarray(U, dtype=float), (n, r))
    S = np.empty((n, m, r, d))
    S[:, 0] = gen.s1_mean + gen.s1_sd * rng.standard_normal((n, r, d))
    E = np.zeros((n, m - 1, r, d)) if zero_noise else _state_noise(gen, rng, (n, m - 1, r, d))
    for t in range(m - 1):
        S[:, t + 1] = (
            gen.phi0[t]
            + S[:, t] @ gen.Phi[t].T
            + A[:, t, :, None] * gen.Gamma[t]
            + Abar[:, t, :, None] * G2[t]
            + E[:, t]
        )
    Z = np.concatenate([np.ones((n, m, r, 1)), S, A[..., None]], axis=3)
    theta = np.moveaxis(gen.theta_at(u), 2, 1)  # (n, m, r, p)
    Y = np.einsum("ntkp,ntkp->ntk", Z, theta) + g2[None, :, None] * Abar
    return SpatioPanelDataset(Y, S, A, tuple(tuple(x) for x in neighbors), coords)


def null_summaries(gen: GeneratorSpec, n_days: int = 20_000, TI: int = 1, seed: int = 12345):
    """Per-interval rank quantiles of the outcome and state means under ``gen``.

    Returns ``(Q, ES)`` with ``Q[t, g]`` the ``tau_grid[g]`` quantile of
    ``Y_t`` and ``ES[t]`` the mean of ``S_t``.
    """
    data = generate(gen, n_days, TI, seed)
    Q = np.quantile(data.outcomes, gen.tau_grid, axis=0).T
    return Q, data.states.mean(axis=0)


def inject_effect(gen: GeneratorSpec, delta: float, summaries=None) -> GeneratorSpec:
    """Add a treatment effect proportional to outcome quantiles and state means.

    ``gamma(t, u) = delta * Q_u(Y_t)`` on the rank grid and
    ``Gamma(t) = delta * E(S_t)`` for the ``m - 1`` transitions.  With
    ``delta == 0`` the generator is returned unchanged.
    """
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")
    if delta == 0:
        return gen
    Q, ES = summaries if summaries is not None else null_summaries(gen)
    Q = np.asarray(Q, dtype=float)
    ES = np.asarray(ES, dtype=float)
    if Q.shape != (gen.m, gen.tau_grid.size) or ES.shape != (gen.m, gen.d):
        raise ValueError("summaries do not match the generator's shape")
    theta = gen.theta.copy()
    theta[:, :, -1] = delta * Q
    Gamma = delta * ES[: gen.m - 1]
    out = gen.replace(theta=theta, Gamma=Gamma, monotone_flag=False)
    if gen.error_source == "parametric" and out.satisfies_monotonicity():
        out = out.replace(monotone_flag=True)
    return out


# ---------------------------------------------------------------------------
# Monte Carlo oracle


@dataclass(frozen=True)
class OracleResult:
    value: float
    se: float
    draws: int

    def agrees_with(self, target: float, k: float = 3.0) -> bool:
        """``|value - target|`` within ``k`` standard errors plus rounding slack."""
        slack = 1e-9 * (1.0 + abs(target))
        return abs(self.value - target) <= k * self.se + slack


def draw_trajectory(gen: GeneratorSpec, seed=None):
    """Initial state and state-noise path ``(S1, E)`` for one day."""
    rng = np.random.default_rng(seed)
    S1 = gen.s1_mean + gen.s1_sd * rng.standard_normal(gen.d)
    E = _state_noise(gen, rng, (gen.m - 1, gen.d))
    return S1, E


def counterfactual_states(gen: GeneratorSpec, S1, E, action: int) -> np.ndarray:
    """State path (m, d) under a constant action and a fixed noise path."""
    S = np.empty((gen.m, gen.d))
    S[0] = S1
    for t in range(gen.m - 1):
        S[t + 1] = gen.phi0[t] + gen.Phi[t] @ S[t] + action * gen.Gamma[t] + E[t]
    return S


def mc_cqte_oracle(
    gen: GeneratorSpec,
    tau: float,
    draws: int = 1_000_000,
    seed=None,
    trajectory=None,
    batches: int = 20,
) -> OracleResult:
    """Brute-force quantile effect of always-treat versus never-treat.

    Holds one initial state and noise path fixed, draws the day's rank
    ``U`` ``draws`` times, and returns the difference of the empirical
    ``tau``-quantiles of the cumulative outcomes under the two policies.
    The standard error comes from ``batches`` batch means.
    """
    if not gen.monotone_flag:
        raise ValueError("the oracle needs a generator with monotone_flag set")
    if gen.error_source != "parametric":
        raise ValueError("the oracle needs a parametric generator")
    if draws < 100_000:
        raise ValueError(f"draws must be at least 1e5, got {draws}")
    if draws % batches:
        raise ValueError("draws must be a multiple of batches")
    rng = np.random.default_rng(seed)
    if trajectory is None:
        trajectory = draw_trajectory(gen, rng)
    S1, E = trajectory
    totals = []
    for a in (1, 0):
        S = counterfactual_states(gen, S1, E, a)
        Z = np.concatenate([np.ones((gen.m, 1)), S, np.full((gen.m, 1), float(a))], axis=1)
        # the cumulative outcome is linear in theta, so it interpolates like theta does
        totals.append(np.einsum("tp,tgp->g", Z, gen.theta))
    u = rng.random(draws)
    y1 = _interp_rows(gen.tau_grid, totals[0], u)
    y0 = _interp_rows(gen.tau_grid, totals[1], u)
    value = float(np.quantile(y1, tau) - np.quantile(y0, tau))
    b1 = np.quantile(y1.reshape(batches, -1), tau, axis=1)
    b0 = np.quantile(y0.reshape(batches, -1), tau, axis=1)
    se = float(np.std(b1 - b0, ddof=1) / math.sqrt(batches))
    return OracleResult(value, se, draws)


# ---------------------------------------------------------------------------
# rejection-rate studies


@dataclass
class CellResult:
    config: SimulationConfig
    reject_rate: float
    se: float
    runs: int
    failures: int
    aborted: bool
    p_values: np.ndarray
    statistics: np.ndarray

    def row(self) -> dict:
        c = self.config
        return {
            "tau": c.tau,
            "TI": c.TI,
            "n": c.n,
            "delta": c.delta,
            "reject_rate": self.reject_rate,
            "se": self.se,
            "runs": self.runs,
            "failures": self.failures,
        }


def _run_seeds(seed: int, run: int):
    ss = np.random.SeedSequence([int(seed), int(run)])
    data_ss, boot_ss = ss.spawn(2)
    return data_ss, int(boot_ss.generate_state(1, np.uint64)[0])


def cell_generator(config: SimulationConfig, null=None, summaries=None) -> GeneratorSpec:
    null = null or default_null_generator(config.m, config.d, config.noise)
    return inject_effect(null, config.delta, summaries if config.delta > 0 else None)


def run_cell(config: SimulationConfig, gen: GeneratorSpec | None = None, threads: int | None = None,
             progress=None) -> CellResult:
    """Monte Carlo rejection rate of one configuration.

    Every run ``j`` draws its data and bootstrap streams from
    ``(seed, j)``, so cells that differ only in ``delta`` share their
    random numbers.
    """
    gen = gen or cell_generator(config)
    spec = KernelSpec(config.kernel, config.h)
    rejects, pvals, stats_ = [], [], []
    failures = 0
    limit = max(1, math.floor(0.01 * config.runs))
    for run in range(config.runs):
        data_ss, boot_seed = _run_seeds(config.seed, run)
        data = generate(gen, config.n, config.TI, np.random.default_rng(data_ss))
        boot = BootstrapConfig(
            B=config.B, resample_mode=config.resample_mode, alpha=config.alpha,
            seed=boot_seed, threads=threads,
        )
        try:
            res = run_test(data, config.tau, config.estimand, spec, boot)
        except NumericalError:
            failures += 1
            if failures > limit:
                return CellResult(config, float("nan"), float("nan"), run + 1, failures, True,
                                  np.array(pvals), np.array(stats_))
            continue
        rejects.append(res.reject)
        pvals.append(res.p_value)
        stats_.append(res.statistic)
        if progress is not None:
            progress(run)
    done = len(rejects)
    rate = float(np.mean(rejects)) if done else float("nan")
    se = math.sqrt(rate * (1.0 - rate) / done) if done else float("nan")
    return CellResult(config, rate, se, config.runs, failures, False, np.array(pvals), np.array(stats_))


def run_rejection_study(configs, threads: int | None = None) -> list[CellResult]:
    """Rejection rates for a grid of configurations.

    Generators are built once per ``(m, d, noise)`` combination, and the
    effect summaries are computed from the null generator.
    """
    cache = {}
    results = []
    for cfg in configs:
        key = (cfg.m, cfg.d, cfg.noise)
        if key not in cache:
            null = default_null_generator(cfg.m, cfg.d, cfg.noise)
            cache[key] = (null, null_summaries(null))
        null, summ = cache[key]
        gen = inject_effect(null, cfg.delta, summ)
        results.append(run_cell(cfg, gen, threads))
    return results
