"""Residual bootstrap tests for CQTE, CQDE and CQIE.

The null distribution of a plug-in statistic ``T`` is approximated by
``T^b - T`` over ``B`` pseudo panels.  Each pseudo panel keeps the observed
actions and initial states, resamples the fitted residual processes, rolls
the smoothed state model forward, and is refitted with the same bandwidths.

Replications are processed in fixed blocks of consecutive indices so that
the solvers can work on many sub-problems at once.  Each replication draws
from its own stream seeded by ``(seed, b, attempt)``; the block layout does
not depend on the thread count, so results are bit-identical for any
``threads``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm
from threadpoolctl import threadpool_limits

from .errors import BootstrapAbort
from .kernels import KernelSpec, smooth_path
from .panel import PanelDataset, SpatioPanelDataset
from .spatial import (
    fit_raw_st,
    fit_smoothed_st,
    residuals_st,
    smooth_st_arrays,
    st_estimands_from_arrays,
)
from .vcdp import (
    ResidualSet,
    estimands_from_arrays,
    fit_quantile_cells,
    fit_raw,
    fit_smoothed,
    fit_state_cells,
    residuals,
)

__all__ = [
    "BootstrapConfig",
    "TestResult",
    "RESAMPLE_MODES",
    "PVALUE_MODES",
    "ESTIMANDS",
    "resample_residuals",
    "generate_pseudo",
    "run_test",
    "run_test_st",
    "default_threads",
]

RESAMPLE_MODES = ("within_day_time_iid", "whole_day_process")
PVALUE_MODES = ("empirical_quantile", "normal_approx")
ESTIMANDS = ("cqte", "cqde", "cqie")
_ESTIMAND_INDEX = {"cqte": 0, "cqde": 1, "cqie": 2}
BLOCK_SIZE = 50
MAX_RETRIES = 5


def default_threads() -> int:
    """Thread count from ``DYNQTE_THREADS``, else 1."""
    value = os.environ.get("DYNQTE_THREADS", "").strip()
    if not value:
        return 1
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"DYNQTE_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ValueError(f"DYNQTE_THREADS must be a positive integer, got {value!r}")
    return n


@dataclass(frozen=True)
class BootstrapConfig:
    """Bootstrap settings.

    ``paired`` couples the outcome residual and the state error of the same
    interval in within-day resampling.  ``threads`` only affects speed.
    """

    B: int = 500
    resample_mode: str = "within_day_time_iid"
    alpha: float = 0.05
    seed: int = 0
    pvalue_mode: str = "empirical_quantile"
    paired: bool = False
    threads: int | None = None

    def __post_init__(self):
        if int(self.B) != self.B or self.B < 1:
            raise ValueError(f"B must be a positive integer, got {self.B}")
        if self.resample_mode not in RESAMPLE_MODES:
            raise ValueError(f"resample_mode must be one of {RESAMPLE_MODES}, got {self.resample_mode!r}")
        if self.pvalue_mode not in PVALUE_MODES:
            raise ValueError(f"pvalue_mode must be one of {PVALUE_MODES}, got {self.pvalue_mode!r}")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if int(self.seed) != self.seed or self.seed < 0 or self.seed >= 2**64:
            raise ValueError(f"seed must be an integer in [0, 2**64), got {self.seed}")
        if self.threads is not None and self.threads < 1:
            raise ValueError(f"threads must be positive, got {self.threads}")

    def echo(self) -> dict:
        out = asdict(self)
        out.pop("threads")
        return out


@dataclass
class TestResult:
    estimand: str
    tau: float
    statistic: float
    draws: np.ndarray
    critical_value: float
    p_value: float
    reject: bool
    config: dict
    spatial: bool = False
    retries: int = 0
    extra: dict = field(default_factory=dict)

    # keep pytest from collecting this class
    __test__ = False

    def to_dict(self, include_draws: bool = True) -> dict:
        out = {
            "estimand": self.estimand.upper(),
            "tau": self.tau,
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "p_value": self.p_value,
            "reject": self.reject,
            "spatial": self.spatial,
            "retries": self.retries,
            "config": self.config,
        }
        out.update(self.extra)
        if include_draws:
            out["draws"] = [float(v) for v in self.draws]
        return out


# ---------------------------------------------------------------------------
# resampling


def _draw_indices(rng, n, m, mode, paired):
    """Source (day, time) indices for resampled residuals of one replication.

    Returns ``(day_e, time_e, day_E, time_E)`` with shapes (n, m) and
    (n, m - 1).
    """
    if mode == "whole_day_process":
        src = rng.integers(0, n, size=n)
        day_e = np.broadcast_to(src[:, None], (n, m))
        day_E = np.broadcast_to(src[:, None], (n, m - 1))
        return day_e, np.broadcast_to(np.arange(m), (n, m)), day_E, np.broadcast_to(np.arange(m - 1), (n, m - 1))
    day_e = np.broadcast_to(np.arange(n)[:, None], (n, m))
    day_E = np.broadcast_to(np.arange(n)[:, None], (n, m - 1))
    if paired:
        # slots 1..m-1 draw a common interval j for e(j) and the state error at j
        first = rng.integers(0, m, size=(n, 1))
        rest = rng.integers(1, m, size=(n, m - 1))
        return day_e, np.concatenate([first, rest], axis=1), day_E, rest - 1
    time_e = rng.integers(0, m, size=(n, m))
    time_E = rng.integers(0, m - 1, size=(n, m - 1))
    return day_e, time_e, day_E, time_E


def resample_residuals(res: ResidualSet, mode: str, rng, paired: bool = False) -> ResidualSet:
    """Resample residual processes.

    ``within_day_time_iid`` redraws interval indices with replacement inside
    each day (state error vectors stay intact across coordinates and, for
    spatial data, across regions); ``whole_day_process`` redraws whole days.
    """
    if mode not in RESAMPLE_MODES:
        raise ValueError(f"unknown resample mode {mode!r}")
    n, m = res.e.shape[:2]
    de, te, dE, tE = _draw_indices(rng, n, m, mode, paired)
    return ResidualSet(res.e[de, te], res.E[dE, tE])


def _rng(seed, b, attempt):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(b), int(attempt)]))


# ---------------------------------------------------------------------------
# pseudo panels


def _design(S, A, Abar=None):
    ones = np.ones(S.shape[:-1] + (1,))
    parts = [ones, S, np.broadcast_to(A[..., None], S.shape[:-1] + (1,))]
    if Abar is not None:
        parts.append(np.broadcast_to(Abar[..., None], S.shape[:-1] + (1,)))
    return np.concatenate(parts, axis=-1)


def _roll_forward(S1, A, Abar, qcoef, scoef, e, E):
    """Pseudo states and outcomes for a batch of replications.

    S1 (n, [r,] d); A, Abar (n, m[, r]); qcoef (m, [r,] p);
    scoef (m - 1, [r,] d, p); e (B, n, m[, r]); E (B, n, m - 1[, r], d).
    """
    B = e.shape[0]
    m = A.shape[1]
    S = np.empty(e.shape + (S1.shape[-1],))
    S[:, :, 0] = S1
    for t in range(m - 1):
        Zt = _design(S[:, :, t], A[:, t], None if Abar is None else Abar[:, t])
        S[:, :, t + 1] = np.einsum("...dp,...p->...d", scoef[t], Zt) + E[:, :, t]
    Z = _design(S, np.broadcast_to(A, (B,) + A.shape), None if Abar is None else np.broadcast_to(Abar, (B,) + Abar.shape))
    # qcoef (m, [r,] p) broadcasts against the trailing axes of Z
    Y = np.einsum("...p,...p->...", Z, qcoef) + e
    return Y, S, Z


def generate_pseudo(dataset, qpath, spath, resampled: ResidualSet):
    """One pseudo panel from smoothed paths and resampled residuals.

    The initial state of each day is the observed one and actions are
    copied from ``dataset``.
    """
    spatial = isinstance(dataset, SpatioPanelDataset)
    Abar = dataset.neighbor_mean() if spatial else None
    Y, S, _ = _roll_forward(
        dataset.states[:, 0],
        dataset.actions.astype(float),
        Abar,
        qpath.coef,
        spath.coef,
        resampled.e[None],
        resampled.E[None],
    )
    if spatial:
        return SpatioPanelDataset(
            Y[0], S[0], dataset.actions, dataset.neighbors, dataset.coords,
            dataset.day_labels, dataset.time_labels, dataset.region_labels,
        )
    return PanelDataset(Y[0], S[0], dataset.actions, dataset.day_labels, dataset.time_labels)


# ---------------------------------------------------------------------------
# batched refits


class _Pipeline:
    """Fit-smooth-estimate for a batch of pseudo panels sharing one design."""

    def __init__(self, dataset, tau, spec):
        self.tau = tau
        self.spec = spec
        self.spatial = isinstance(dataset, SpatioPanelDataset)
        self.dataset = dataset
        self.n, self.m = dataset.n, dataset.m
        self.d = dataset.d
        self.A = dataset.actions.astype(float)
        self.Abar = dataset.neighbor_mean() if self.spatial else None
        if self.spatial:
            self.r = dataset.r
            q, s = fit_raw_st(dataset, tau)
            self.q, self.s = fit_smoothed_st(q, s, spec, dataset.coords)
            self.res = residuals_st(dataset, self.q, self.s)
        else:
            q, s = fit_raw(dataset, tau)
            self.q, self.s = fit_smoothed(q, s, spec)
            self.res = residuals(dataset, self.q, self.s)
        self.statistics = self.estimands(self.q.coef[None], self.s.coef[None])[:, 0]

    def estimands(self, qcoef, scoef):
        if self.spatial:
            return np.stack(st_estimands_from_arrays(qcoef, scoef))
        gamma = qcoef[..., -1]
        beta = qcoef[..., 1:-1]
        Phi = scoef[..., 1:-1]
        Gamma = scoef[..., -1]
        return np.stack(estimands_from_arrays(gamma, beta, Phi, Gamma))

    def replicate(self, e, E):
        """Statistics (3, B) and a success mask (B,) for resampled residuals."""
        B, n, m = e.shape[:3]
        Y, S, Z = _roll_forward(
            self.dataset.states[:, 0], self.A, self.Abar, self.q.coef, self.s.coef, e, E
        )
        p = Z.shape[-1]
        d = self.d
        C = m * (self.r if self.spatial else 1)
        Cs = (m - 1) * (self.r if self.spatial else 1)
        qc, sing, conv = fit_quantile_cells(Z.reshape(B, n, C, p), Y.reshape(B, n, C), self.tau)
        sc, ssing = fit_state_cells(Z[:, :, :-1].reshape(B, n, Cs, p), S[:, :, 1:].reshape(B, n, Cs, d))
        ok = ~sing.any(axis=1) & conv.all(axis=1) & ~ssing.any(axis=1)
        ok &= np.isfinite(qc).reshape(B, -1).all(axis=1) & np.isfinite(sc).reshape(B, -1).all(axis=1)
        qc = np.where(ok[:, None, None], qc, 0.0)
        sc = np.where(ok[:, None, None, None], sc, 0.0)
        if self.spatial:
            r = self.r
            qs, ss = smooth_st_arrays(
                qc.reshape(B, m, r, p), sc.reshape(B, m - 1, r, d, p), self.spec, self.dataset.coords, m
            )
        else:
            qs = smooth_path(qc, self.spec, horizon=m, axis=1)
            ss = smooth_path(sc, self.spec, horizon=m, axis=1)
        return self.estimands(qs, ss), ok


def _resample_block(res, mode, paired, seed, bs, attempts):
    n, m = res.e.shape[:2]
    es, Es = [], []
    for b, att in zip(bs, attempts):
        de, te, dE, tE = _draw_indices(_rng(seed, b, att), n, m, mode, paired)
        es.append(res.e[de, te])
        Es.append(res.E[dE, tE])
    return np.stack(es), np.stack(Es)


def _run_block(pipe, config, bs):
    """Bootstrap statistics for replication indices ``bs``; retries failures."""
    bs = np.asarray(bs)
    attempts = np.zeros(bs.size, dtype=int)
    out = np.empty((3, bs.size))
    todo = np.arange(bs.size)
    retries = 0
    while todo.size:
        e, E = _resample_block(pipe.res, config.resample_mode, config.paired, config.seed, bs[todo], attempts[todo])
        stats, ok = pipe.replicate(e, E)
        out[:, todo[ok]] = stats[:, ok]
        failed = todo[~ok]
        if failed.size:
            attempts[failed] += 1
            retries += failed.size
            worst = failed[np.argmax(attempts[failed])]
            if attempts[worst] > MAX_RETRIES:
                raise BootstrapAbort(
                    f"bootstrap replication {int(bs[worst])} failed to refit after "
                    f"{MAX_RETRIES} retries",
                    replication=int(bs[worst]),
                    attempts=int(attempts[worst]),
                )
        todo = failed
    return out, retries


def _bootstrap(pipe, config):
    B = config.B
    blocks = [np.arange(s, min(s + BLOCK_SIZE, B)) for s in range(0, B, BLOCK_SIZE)]
    threads = config.threads or default_threads()
    # single-threaded BLAS inside workers keeps every block's arithmetic identical
    with threadpool_limits(limits=1):
        if threads == 1 or len(blocks) == 1:
            results = [_run_block(pipe, config, bs) for bs in blocks]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda bs: _run_block(pipe, config, bs), blocks))
    stats = np.concatenate([r[0] for r in results], axis=1)
    return stats, sum(r[1] for r in results)


def _decide(T, draws, alpha, mode):
    B = draws.size
    if mode == "normal_approx":
        sd = float(np.std(draws, ddof=1)) if B > 1 else 0.0
        if sd > 0:
            p = float(norm.sf(T / sd))
        else:
            p = 0.0 if T > 0 else 1.0
        crit = float(norm.ppf(1.0 - alpha) * sd)
        return crit, p, bool(T > crit)
    crit = float(np.quantile(draws, 1.0 - alpha))
    p = (1.0 + np.count_nonzero(draws >= T)) / (B + 1.0)
    return crit, float(p), bool(T > crit)


def _test(dataset, tau, estimand, spec, config, spatial):
    estimand = estimand.lower()
    if estimand not in ESTIMANDS:
        raise ValueError(f"estimand must be one of {ESTIMANDS}, got {estimand!r}")
    if config.pvalue_mode == "normal_approx" and estimand != "cqde":
        raise ValueError("normal_approx p-values are only available for CQDE")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if config.B < 100:
        raise ValueError(f"tests need B >= 100 bootstrap replications, got {config.B}")
    spec = (spec or KernelSpec()).resolve(dataset.n, dataset.coords if spatial else None)
    pipe = _Pipeline(dataset, tau, spec)
    stats, retries = _bootstrap(pipe, config)
    k = _ESTIMAND_INDEX[estimand]
    T = float(pipe.statistics[k])
    draws = stats[k] - T
    crit, p, reject = _decide(T, draws, config.alpha, config.pvalue_mode)
    extra = {"kernel": spec.kernel, "h": spec.h}
    if spatial:
        extra["h_st"] = spec.h_st
    return TestResult(
        estimand, tau, T, draws, crit, p, reject, config.echo(), spatial, retries, extra
    )


def run_test(dataset: PanelDataset, tau: float, estimand: str = "cqte",
             spec: KernelSpec | None = None, config: BootstrapConfig | None = None) -> TestResult:
    """One-sided bootstrap test of ``H0: effect <= 0`` against ``effect > 0``."""
    if isinstance(dataset, SpatioPanelDataset):
        raise TypeError("use run_test_st for spatiotemporal panels")
    return _test(dataset, tau, estimand, spec, config or BootstrapConfig(), False)


def run_test_st(dataset: SpatioPanelDataset, tau: float, estimand: str = "cqte",
                spec: KernelSpec | None = None, config: BootstrapConfig | None = None) -> TestResult:
    """Spatiotemporal version of :func:`run_test`.

    Interval draws are shared by all regions, so each cross-section of
    residuals is resampled intact.
    """
    if not isinstance(dataset, SpatioPanelDataset):
        raise TypeError("run_test_st needs a SpatioPanelDataset")
    return _test(dataset, tau, estimand, spec, config or BootstrapConfig(), True)
