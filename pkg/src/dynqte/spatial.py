"""Spatiotemporal extension with neighbor mean-field treatment terms.

Each region ``k`` gets its own outcome and state models with design
``(1, S, A, Abar)``, where ``Abar`` is the average action of the region's
neighbors.  Raw per-(interval, region) fits are smoothed over time within
each region, then over space across regions.  Region-level estimands
reuse the temporal recursion with ``gamma1 + gamma2`` and
``Gamma1 + Gamma2`` and are summed over regions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .kernels import KernelSpec, smooth_path, spatial_weight_matrix
from .panel import SpatioPanelDataset
from .vcdp import (
    TAU_EPS,
    EstimandReport,
    ResidualSet,
    _check_positivity,
    _condition_numbers,
    _raise_failures,
    estimands_from_arrays,
    fit_quantile_cells,
    fit_state_cells,
)

__all__ = [
    "SpatialQuantileCoeffPath",
    "SpatialStateCoeffPath",
    "fit_raw_st",
    "fit_smoothed_st",
    "residuals_st",
    "cqte_st",
    "cqde_st",
    "cqie_st",
    "estimate_st",
]


@dataclass(frozen=True)
class SpatialQuantileCoeffPath:
    """Coefficients ``(beta0, beta, gamma1, gamma2)``, shape (m, r, d + 3)."""

    tau: float
    coef: np.ndarray
    stage: str = "raw"

    @property
    def beta0(self):
        return self.coef[..., 0]

    @property
    def beta(self):
        return self.coef[..., 1:-2]

    @property
    def gamma1(self):
        return self.coef[..., -2]

    @property
    def gamma2(self):
        return self.coef[..., -1]


@dataclass(frozen=True)
class SpatialStateCoeffPath:
    """Coefficients ``[phi0, Phi, Gamma1, Gamma2]``, shape (m - 1, r, d, d + 3)."""

    coef: np.ndarray
    stage: str = "raw"

    @property
    def phi0(self):
        return self.coef[..., 0]

    @property
    def Phi(self):
        return self.coef[..., 1:-2]

    @property
    def Gamma1(self):
        return self.coef[..., -2]

    @property
    def Gamma2(self):
        return self.coef[..., -1]


def _cells(Z):
    """(B, n, m, r, p) → (B, n, m * r, p)."""
    B, n, m, r, p = Z.shape
    return Z.reshape(B, n, m * r, p)


def fit_raw_st(dataset: SpatioPanelDataset, tau: float):
    """Per-(interval, region) quantile and least-squares fits."""
    _check_positivity(dataset.actions, "(interval, region)")
    n, m, r, d = dataset.states.shape
    Z = dataset.design()[None]
    q, sing, conv = fit_quantile_cells(_cells(Z), dataset.outcomes[None].reshape(1, n, m * r), tau)
    _raise_failures(sing[0], conv[0], "(interval, region)", (m, r))
    Sn = dataset.states[None, :, 1:].reshape(1, n, (m - 1) * r, d)
    s, ssing = fit_state_cells(_cells(Z[:, :, :-1]), Sn)
    _raise_failures(ssing[0], np.ones_like(ssing[0]), "(interval, region)", (m - 1, r))
    return (
        SpatialQuantileCoeffPath(tau, q[0].reshape(m, r, d + 3), "raw"),
        SpatialStateCoeffPath(s[0].reshape(m - 1, r, d, d + 3), "raw"),
    )


def smooth_st_arrays(qcoef, scoef, spec: KernelSpec, coords, m: int):
    """Time-then-space smoothing of raw coefficient arrays.

    ``qcoef`` (..., m, r, p) and ``scoef`` (..., m - 1, r, d, p); the time
    axis is the first non-batch axis.
    """
    W_sp = spatial_weight_matrix(coords, spec)
    qa = qcoef.ndim - 3
    sa = scoef.ndim - 4
    q = smooth_path(qcoef, spec, horizon=m, axis=qa)
    s = smooth_path(scoef, spec, horizon=m, axis=sa)
    q = np.einsum("kl,...lp->...kp", W_sp, q)
    s = np.einsum("kl,...ldp->...kdp", W_sp, s)
    return q, s


def fit_smoothed_st(qpath, spath, spec: KernelSpec, coords):
    """Smooth within each region over time, then across regions."""
    m = qpath.coef.shape[0]
    q, s = smooth_st_arrays(qpath.coef, spath.coef, spec, coords, m)
    return (
        SpatialQuantileCoeffPath(qpath.tau, q, "fully-smoothed"),
        SpatialStateCoeffPath(s, "fully-smoothed"),
    )


def residuals_st(dataset: SpatioPanelDataset, qpath, spath) -> ResidualSet:
    Z = dataset.design()
    e = dataset.outcomes - np.einsum("ntkp,tkp->ntk", Z, qpath.coef)
    E = dataset.states[:, 1:] - np.einsum("ntkp,tkdp->ntkd", Z[:, :-1], spath.coef)
    return ResidualSet(e, E)


def st_estimands_from_arrays(qcoef, scoef):
    """``(cqte, cqde, cqie)`` summed over regions, batched over leading axes.

    qcoef (..., m, r, p), scoef (..., m - 1, r, d, p).
    """
    gamma = qcoef[..., -2] + qcoef[..., -1]  # (..., m, r)
    beta = qcoef[..., 1:-2]  # (..., m, r, d)
    Phi = scoef[..., 1:-2]  # (..., m-1, r, d, d)
    Gamma = scoef[..., -2] + scoef[..., -1]  # (..., m-1, r, d)
    # move region ahead of time so the temporal recursion runs per region
    gamma = np.moveaxis(gamma, -1, -2)
    beta = np.moveaxis(beta, -2, -3)
    Phi = np.moveaxis(Phi, -3, -4)
    Gamma = np.moveaxis(Gamma, -2, -3)
    _, de, ie = estimands_from_arrays(gamma, beta, Phi, Gamma)
    de = de.sum(axis=-1)
    ie = ie.sum(axis=-1)
    return de + ie, de, ie


def cqde_st(qpath) -> float:
    return float(np.sum(qpath.gamma1) + np.sum(qpath.gamma2))


def cqie_st(qpath, spath) -> float:
    return float(st_estimands_from_arrays(qpath.coef, spath.coef)[2])


def cqte_st(qpath, spath) -> float:
    return cqde_st(qpath) + cqie_st(qpath, spath)


def estimate_st(
    dataset: SpatioPanelDataset,
    tau: float,
    spec: KernelSpec | None = None,
    tau_eps: float = TAU_EPS,
) -> EstimandReport:
    """Two-step spatiotemporal fit followed by region-summed estimands."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if not tau_eps <= tau <= 1.0 - tau_eps:
        warnings.warn(
            f"tau={tau} lies outside [{tau_eps}, {1 - tau_eps}]; estimates may be unstable",
            stacklevel=2,
        )
    spec = (spec or KernelSpec()).resolve(dataset.n, dataset.coords)
    raw_q, raw_s = fit_raw_st(dataset, tau)
    q, s = fit_smoothed_st(raw_q, raw_s, spec, dataset.coords)
    de = cqde_st(q)
    ie = cqie_st(q, s)
    Z = np.moveaxis(dataset.design(), 0, 2)  # (m, r, n, p)
    diag = {
        "n": dataset.n,
        "m": dataset.m,
        "r": dataset.r,
        "d": dataset.d,
        "kernel": spec.kernel,
        "h": spec.h,
        "h_st": spec.h_st,
        "condition_numbers": _condition_numbers(Z).tolist(),
    }
    return EstimandReport(tau, de + ie, de, ie, q, s, diag)
