"""Temporal varying-coefficient decision process: fitting and estimands.

Outcome model, at each interval ``t``::

    Q_tau(Y_t | Z_t) = beta0(t, tau) + S_t' beta(t, tau) + A_t gamma(t, tau)

State model, for ``t < m``::

    S_{t+1} = phi0(t) + Phi(t) S_t + A_t Gamma(t) + E(t + 1)

Both are fitted per interval and then kernel-smoothed over time.  The
always-treat versus never-treat quantile effect of the day's cumulative
outcome is::

    cqte = sum_t gamma(t) + sum_{t>=2} beta(t)' sum_{k<t} Phi(t-1)...Phi(k+1) Gamma(k)

where the first sum is the direct effect (cqde) and the second the
carryover effect (cqie).  Python indices are 0-based throughout: position
``t`` of a state path holds the transition from interval ``t`` to ``t + 1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, SingularDesignError
from .kernels import KernelSpec, smooth_path
from .panel import PanelDataset
from .solvers import ols_fit_batch, qr_fit_batch

__all__ = [
    "QuantileCoeffPath",
    "StateCoeffPath",
    "ResidualSet",
    "EstimandReport",
    "fit_raw",
    "fit_smoothed",
    "residuals",
    "cqde",
    "cqie",
    "cqte_closed_form",
    "estimate",
    "quantile_crossing",
    "TAU_EPS",
]

TAU_EPS = 0.05


@dataclass(frozen=True)
class QuantileCoeffPath:
    """Outcome coefficients ``(beta0, beta, gamma)`` per interval, shape (m, d + 2)."""

    tau: float
    coef: np.ndarray
    stage: str = "raw"

    @property
    def m(self) -> int:
        return self.coef.shape[0]

    @property
    def beta0(self) -> np.ndarray:
        return self.coef[:, 0]

    @property
    def beta(self) -> np.ndarray:
        return self.coef[:, 1:-1]

    @property
    def gamma(self) -> np.ndarray:
        return self.coef[:, -1]


@dataclass(frozen=True)
class StateCoeffPath:
    """State-transition coefficients ``[phi0, Phi, Gamma]``, shape (m - 1, d, d + 2)."""

    coef: np.ndarray
    stage: str = "raw"

    @property
    def phi0(self) -> np.ndarray:
        return self.coef[:, :, 0]

    @property
    def Phi(self) -> np.ndarray:
        return self.coef[:, :, 1:-1]

    @property
    def Gamma(self) -> np.ndarray:
        return self.coef[:, :, -1]


@dataclass(frozen=True)
class ResidualSet:
    """Outcome residuals ``e`` (n, m[, r]) and state errors ``E`` (n, m - 1[, r], d).

    ``E[:, t]`` is the error of the state at interval ``t + 1``.
    """

    e: np.ndarray
    E: np.ndarray


@dataclass
class EstimandReport:
    tau: float
    cqte: float
    cqde: float
    cqie: float
    qpath: object = None
    spath: object = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "cqte": self.cqte,
            "cqde": self.cqde,
            "cqie": self.cqie,
            "diagnostics": self.diagnostics,
        }


# ---------------------------------------------------------------------------
# batched fitting kernels shared with the spatial model and the bootstrap


def fit_quantile_cells(X, Y, tau):
    """Quantile fits for every cell of a panel.

    ``X`` has shape (B, n, C, p) and ``Y`` (B, n, C), where the cell axis
    ``C`` enumerates intervals (or interval-region pairs).  Returns
    ``coef`` (B, C, p), ``singular`` (B, C) and ``converged`` (B, C).
    """
    B, n, C, p = X.shape
    Xk = np.ascontiguousarray(np.swapaxes(X, 1, 2)).reshape(B * C, n, p)
    yk = np.ascontiguousarray(np.swapaxes(Y, 1, 2)).reshape(B * C, n)
    fit = qr_fit_batch(Xk, yk, tau)
    return (
        fit.coef.reshape(B, C, p),
        fit.singular.reshape(B, C),
        fit.converged.reshape(B, C),
    )


def fit_state_cells(X, S_next):
    """Least-squares state fits per cell.

    ``X`` (B, n, C, p), ``S_next`` (B, n, C, d) → ``coef`` (B, C, d, p),
    ``singular`` (B, C).
    """
    B, n, C, p = X.shape
    d = S_next.shape[-1]
    Xk = np.ascontiguousarray(np.swapaxes(X, 1, 2)).reshape(B * C, n, p)
    Yk = np.ascontiguousarray(np.swapaxes(S_next, 1, 2)).reshape(B * C, n, d)
    coef, singular = ols_fit_batch(Xk, Yk)
    return coef.reshape(B, C, d, p), singular.reshape(B, C)


def _carryover(beta, Phi, Gamma):
    """Carryover term, batched over leading axes.

    beta (..., m, d), Phi (..., m-1, d, d), Gamma (..., m-1, d).  The running
    vector ``carry`` after step ``t`` equals
    ``sum_{k<t} Phi(t-1)...Phi(k+1) Gamma(k)``.
    """
    m = beta.shape[-2]
    total = np.zeros(beta.shape[:-2])
    if m < 2:
        return total
    carry = Gamma[..., 0, :]
    total = total + np.einsum("...d,...d->...", beta[..., 1, :], carry)
    for t in range(2, m):
        carry = np.einsum("...ij,...j->...i", Phi[..., t - 1, :, :], carry) + Gamma[..., t - 1, :]
        total = total + np.einsum("...d,...d->...", beta[..., t, :], carry)
    return total


def estimands_from_arrays(gamma, beta, Phi, Gamma):
    """``(cqte, cqde, cqie)`` with ``cqte`` formed as ``cqde + cqie``."""
    de = np.sum(gamma, axis=-1)
    ie = _carryover(beta, Phi, Gamma)
    return de + ie, de, ie


# ---------------------------------------------------------------------------
# public operations


def _check_positivity(actions, label):
    a = np.asarray(actions)
    both = (a.min(axis=0) == 0) & (a.max(axis=0) == 1)
    if not both.all():
        bad = np.argwhere(~both)[0]
        idx = tuple(int(v) for v in bad) if bad.size > 1 else int(bad[0])
        raise SingularDesignError(
            f"action is constant across days at {label} {idx}; the design is singular",
            index=idx,
        )


def _raise_failures(singular, converged, label, shape):
    if singular.any():
        idx = np.unravel_index(int(np.flatnonzero(singular)[0]), shape)
        idx = tuple(int(v) for v in idx) if len(idx) > 1 else int(idx[0])
        raise SingularDesignError(f"rank-deficient design at {label} {idx}", index=idx)
    if not converged.all():
        idx = np.unravel_index(int(np.flatnonzero(~converged)[0]), shape)
        idx = tuple(int(v) for v in idx) if len(idx) > 1 else int(idx[0])
        raise ConvergenceError(f"quantile fit did not converge at {label} {idx}", index=idx)


def fit_raw(dataset: PanelDataset, tau: float) -> tuple[QuantileCoeffPath, StateCoeffPath]:
    """Per-interval quantile and least-squares fits."""
    _check_positivity(dataset.actions, "interval")
    Z = dataset.design()[None]
    q, sing, conv = fit_quantile_cells(Z, dataset.outcomes[None], tau)
    _raise_failures(sing[0], conv[0], "interval", (dataset.m,))
    s, ssing = fit_state_cells(Z[:, :, :-1], dataset.states[None, :, 1:])
    _raise_failures(ssing[0], np.ones_like(ssing[0]), "interval", (dataset.m - 1,))
    return QuantileCoeffPath(tau, q[0], "raw"), StateCoeffPath(s[0], "raw")


def fit_smoothed(qpath: QuantileCoeffPath, spath: StateCoeffPath, spec: KernelSpec):
    """Kernel-smooth both paths over time with a resolved ``spec``.

    The state path has ``m - 1`` points and is smoothed over those points
    with the same window ``m * h`` as the outcome path.
    """
    m = qpath.m
    q = smooth_path(qpath.coef, spec, horizon=m, axis=0)
    s = smooth_path(spath.coef, spec, horizon=m, axis=0)
    return QuantileCoeffPath(qpath.tau, q, "smoothed"), StateCoeffPath(s, "smoothed")


def residuals(dataset: PanelDataset, qpath: QuantileCoeffPath, spath: StateCoeffPath) -> ResidualSet:
    """Outcome residuals and state errors implied by the given paths."""
    Z = dataset.design()
    e = dataset.outcomes - np.einsum("ntp,tp->nt", Z, qpath.coef)
    E = dataset.states[:, 1:] - np.einsum("ntp,tdp->ntd", Z[:, :-1], spath.coef)
    return ResidualSet(e, E)


def cqde(qpath: QuantileCoeffPath) -> float:
    """Direct effect: the sum of treatment coefficients over the day."""
    return float(np.sum(qpath.gamma))


def cqie(qpath: QuantileCoeffPath, spath: StateCoeffPath) -> float:
    """Carryover effect of earlier treatments through the state."""
    return float(_carryover(qpath.beta, spath.Phi, spath.Gamma))


def cqte_closed_form(qpath: QuantileCoeffPath, spath: StateCoeffPath) -> float:
    """Total quantile treatment effect, ``cqde + cqie``."""
    return cqde(qpath) + cqie(qpath, spath)


def _condition_numbers(X):
    sv = np.linalg.svd(X, compute_uv=False)
    return sv[..., 0] / sv[..., -1]


def estimate(
    dataset: PanelDataset,
    tau: float,
    spec: KernelSpec | None = None,
    tau_eps: float = TAU_EPS,
) -> EstimandReport:
    """Two-step fit followed by the plug-in estimands.

    ``spec`` bandwidths left as ``None`` are replaced by their defaults.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if not tau_eps <= tau <= 1.0 - tau_eps:
        warnings.warn(
            f"tau={tau} lies outside [{tau_eps}, {1 - tau_eps}]; estimates may be unstable",
            stacklevel=2,
        )
    spec = (spec or KernelSpec()).resolve(dataset.n)
    raw_q, raw_s = fit_raw(dataset, tau)
    q, s = fit_smoothed(raw_q, raw_s, spec)
    de = cqde(q)
    ie = cqie(q, s)
    Z = np.swapaxes(dataset.design(), 0, 1)
    diag = {
        "n": dataset.n,
        "m": dataset.m,
        "d": dataset.d,
        "kernel": spec.kernel,
        "h": spec.h,
        "condition_numbers": _condition_numbers(Z).tolist(),
    }
    return EstimandReport(tau, de + ie, de, ie, q, s, diag)


def quantile_crossing(dataset: PanelDataset, taus, spec: KernelSpec | None = None) -> dict:
    """Fraction of design rows whose smoothed fitted quantiles cross across ``taus``."""
    taus = sorted(float(t) for t in taus)
    spec = (spec or KernelSpec()).resolve(dataset.n)
    Z = dataset.design()
    fitted = []
    for tau in taus:
        q, s = fit_smoothed(*fit_raw(dataset, tau), spec)
        fitted.append(np.einsum("ntp,tp->nt", Z, q.coef))
    fitted = np.stack(fitted)
    crossed = np.any(np.diff(fitted, axis=0) < 0, axis=0)
    return {"taus": taus, "crossing_rate": float(crossed.mean()), "per_interval": crossed.mean(axis=0).tolist()}
