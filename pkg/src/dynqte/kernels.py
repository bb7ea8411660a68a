"""Kernel weights and second-step smoothing of coefficient paths."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import NumericalError

__all__ = [
    "KERNELS",
    "KernelSpec",
    "default_bandwidth",
    "default_spatial_bandwidth",
    "kernel",
    "temporal_weights",
    "temporal_weight_matrix",
    "smooth_path",
    "smooth_at",
    "spatial_weights",
    "spatial_weight_matrix",
]


def _epanechnikov(u):
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def _triangular(u):
    return np.where(np.abs(u) <= 1.0, 1.0 - np.abs(u), 0.0)


def _quartic(u):
    return np.where(np.abs(u) <= 1.0, 0.9375 * (1.0 - u * u) ** 2, 0.0)


# symmetric densities on [-1, 1], Lipschitz
KERNELS = {
    "epanechnikov": _epanechnikov,
    "triangular": _triangular,
    "quartic": _quartic,
}


def kernel(name: str):
    try:
        return KERNELS[name]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}") from None


def default_bandwidth(n: int) -> float:
    """Temporal bandwidth ``0.9 * n**-0.26`` (a fraction of the horizon)."""
    return 0.9 * float(n) ** -0.26


def default_spatial_bandwidth(coords) -> float:
    """Spatial bandwidth ``0.9 * range * r**-0.26`` in coordinate units.

    ``range`` is the larger of the longitude and latitude spans; when all
    regions share one location it falls back to 1.
    """
    coords = np.asarray(coords, dtype=float)
    span = float(np.max(coords.max(axis=0) - coords.min(axis=0)))
    if span <= 0.0:
        span = 1.0
    return 0.9 * span * coords.shape[0] ** -0.26


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice and bandwidths.

    ``h`` is dimensionless (the temporal window covers ``m * h``
    intervals); ``h_st`` is in coordinate units.  ``None`` means "use the
    sample-size default" and is resolved by :meth:`resolve`.
    """

    kernel: str = "epanechnikov"
    h: float | None = None
    h_st: float | None = None

    def __post_init__(self):
        kernel(self.kernel)
        if self.h is not None and not self.h > 0:
            raise ValueError(f"bandwidth h must be positive, got {self.h}")
        if self.h_st is not None and not self.h_st > 0:
            raise ValueError(f"spatial bandwidth h_st must be positive, got {self.h_st}")

    def resolve(self, n: int, coords=None) -> KernelSpec:
        h = self.h if self.h is not None else default_bandwidth(n)
        h_st = self.h_st
        if h_st is None and coords is not None:
            h_st = default_spatial_bandwidth(coords)
        return KernelSpec(self.kernel, h, h_st)


def _normalize(raw, what):
    total = raw.sum(axis=-1, keepdims=True)
    if np.any(total <= 0.0) or not np.all(np.isfinite(total)):
        raise NumericalError(f"{what} weights have a vanishing normalizer")
    return raw / total


def temporal_weights(t: float, m: int, spec: KernelSpec, scale: float | None = None) -> np.ndarray:
    """Weights ``K((j - t) / (m h))`` over grid points ``j = 0..m-1``, normalized.

    ``t`` may be off-grid.  ``scale`` overrides the window ``m * h``; it is
    used for paths shorter than the horizon.
    """
    if spec.h is None:
        raise ValueError("KernelSpec.h is unresolved; call spec.resolve(n) first")
    K = kernel(spec.kernel)
    width = m * spec.h if scale is None else scale
    j = np.arange(m, dtype=float)
    return _normalize(K((j - t) / width), "temporal")


@lru_cache(maxsize=256)
def _weight_matrix(m: int, name: str, width: float) -> np.ndarray:
    K = kernel(name)
    j = np.arange(m, dtype=float)
    W = _normalize(K((j[None, :] - j[:, None]) / width), "temporal")
    W.setflags(write=False)
    return W


def temporal_weight_matrix(m: int, spec: KernelSpec, scale: float | None = None) -> np.ndarray:
    """Row ``t`` holds :func:`temporal_weights` at ``t``; shape (m, m)."""
    if spec.h is None:
        raise ValueError("KernelSpec.h is unresolved; call spec.resolve(n) first")
    width = m * spec.h if scale is None else scale
    return _weight_matrix(int(m), spec.kernel, float(width))


def smooth_path(raw, spec: KernelSpec, horizon: int | None = None, axis: int = 0) -> np.ndarray:
    """Kernel-smooth a coefficient path along ``axis``.

    Parameters
    ----------
    raw : array
        Raw coefficients with the time axis at ``axis``.
    spec : KernelSpec
        Resolved kernel settings.
    horizon : int, optional
        Number of intervals ``m`` defining the window ``m * h``; defaults
        to the path length.  State paths have ``m - 1`` points but share
        the outcome path's window.
    """
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw path contains non-finite entries")
    L = raw.shape[axis]
    m = L if horizon is None else horizon
    W = temporal_weight_matrix(L, spec, scale=m * spec.h)
    moved = np.moveaxis(raw, axis, -1)
    out = moved @ W.T
    return np.moveaxis(out, -1, axis)


def smooth_at(raw, t: float, spec: KernelSpec, horizon: int | None = None) -> np.ndarray:
    """Smoothed coefficients at a real-valued time ``t`` (axis 0 is time)."""
    raw = np.asarray(raw, dtype=float)
    L = raw.shape[0]
    m = L if horizon is None else horizon
    w = temporal_weights(t, L, spec, scale=m * spec.h)
    return np.tensordot(w, raw, axes=(0, 0))


def spatial_weights(region: int, coords, spec: KernelSpec) -> np.ndarray:
    """Product-kernel weights of every region around ``region``, normalized."""
    return spatial_weight_matrix(coords, spec)[region]


def spatial_weight_matrix(coords, spec: KernelSpec) -> np.ndarray:
    """Row ``k`` holds the weights of all regions around region ``k``; shape (r, r)."""
    if spec.h_st is None:
        raise ValueError("KernelSpec.h_st is unresolved; call spec.resolve(n, coords) first")
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2 or not np.all(np.isfinite(coords)):
        raise ValueError("coords must be a finite (r, 2) array")
    K = kernel(spec.kernel)
    du = (coords[None, :, 0] - coords[:, None, 0]) / spec.h_st
    dv = (coords[None, :, 1] - coords[:, None, 1]) / spec.h_st
    return _normalize(K(du) * K(dv), "spatial")
