"""Check-loss quantile regression and least squares, batched over sub-problems.

Every fitting stage in the package reduces to many small, independent
regressions (one per time point, region, and bootstrap replication), so the
solvers here operate on stacks of problems ``X[K, N, p]`` at once.  Quantile
regression is solved as a linear program with a primal-dual Frisch-Newton
interior point method, then moved to an optimal vertex by exact basis
exchange so that every returned fit carries an optimality certificate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, SingularDesignError

__all__ = [
    "RegressionProblem",
    "BatchQuantileFit",
    "check_loss",
    "qr_objective",
    "qr_fit",
    "qr_fit_batch",
    "ols_fit",
    "ols_fit_batch",
    "RANK_TOL",
]

RANK_TOL = 1e-10
GAP_TOL = 1e-9
# interior point stops here; vertex crossover and the certificate take over
_COARSE_TOL = 1e-5
_CERT_EPS = 1e-9
# smallest acceptable singular value ratio of a starting basis
_BASIS_COND = 1e-8
# residual size treated as zero on standardized data
_EXACT_FIT = 1e-11
MAX_ITER = 10_000
_STEP = 0.9995


@dataclass(frozen=True)
class RegressionProblem:
    """A single regression: rows of ``X`` are design vectors.

    ``tau`` is only used in quantile mode.
    """

    X: np.ndarray
    y: np.ndarray
    tau: float = 0.5

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        if y.shape != (X.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
        if X.shape[0] < X.shape[1]:
            raise ValueError(f"need N >= p, got N={X.shape[0]}, p={X.shape[1]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("X and y must be finite")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)


def check_loss(residual, tau: float):
    """Check function rho_tau(r) = r * (tau - 1{r < 0}).

    Works elementwise on arrays.
    """
    r = np.asarray(residual, dtype=float)
    out = np.where(r >= 0, tau * r, (tau - 1.0) * r)
    return out if out.ndim else float(out)


def qr_objective(X, y, beta, tau: float) -> float:
    """Summed check loss of ``y - X @ beta``."""
    X = np.asarray(X, dtype=float)
    return float(np.sum(check_loss(np.asarray(y, dtype=float) - X @ beta, tau)))


# ---------------------------------------------------------------------------
# standardization


def _standardize(X, y, center_y: bool = True):
    """Center/scale columns of each problem in the stack.

    Returns the standardized arrays plus the pieces needed to map
    coefficients back: ``beta = coef_scale * beta_s`` and, for the constant
    column, an additive offset.
    """
    K, N, p = X.shape
    xmin = X.min(axis=1)
    xmax = X.max(axis=1)
    const = xmax == xmin
    const_val = X[:, 0, :]
    # a usable intercept column: constant and nonzero
    icol = const & (const_val != 0)
    has_icpt = icol.any(axis=1)
    icpt_idx = np.argmax(icol, axis=1)

    mean = X.mean(axis=1)
    center = np.where(has_icpt[:, None] & ~const, mean, 0.0)
    dev = X - center[:, None, :]
    scale = np.sqrt(np.mean(dev * dev, axis=1))
    scale = np.where(const, np.abs(const_val), scale)
    scale = np.where(scale > 0, scale, 1.0)
    Xs = dev / scale[:, None, :]

    if center_y:
        ycenter = np.where(has_icpt, np.median(y, axis=1), 0.0)
    else:
        ycenter = np.zeros(K)
    ydev = y - ycenter[:, None]
    yscale = np.sqrt(np.mean(ydev * ydev, axis=1))
    yscale = np.where(yscale > 0, yscale, 1.0)
    ys = ydev / yscale[:, None]
    icpt_val = const_val[np.arange(K), icpt_idx]
    return Xs, ys, (center, scale, ycenter, yscale, has_icpt, icpt_idx, icpt_val)


def _destandardize(beta_s, info):
    center, scale, ycenter, yscale, has_icpt, icpt_idx, icpt_val = info
    beta = beta_s * yscale[:, None] / scale
    # centering terms move into the coefficient of the constant column
    rows = np.flatnonzero(has_icpt)
    if rows.size:
        offset = ycenter[rows] - np.einsum("kp,kp->k", beta[rows], center[rows])
        beta[rows, icpt_idx[rows]] += offset / icpt_val[rows]
    return beta


def _rank_deficient(Xs):
    sv = np.linalg.svd(Xs, compute_uv=False)
    return sv[:, -1] < RANK_TOL * sv[:, 0]


# ---------------------------------------------------------------------------
# quantile regression


@dataclass(frozen=True)
class BatchQuantileFit:
    """Result of :func:`qr_fit_batch`.

    ``coef`` has shape ``(K, p)``; failed problems have NaN rows.
    """

    coef: np.ndarray
    converged: np.ndarray
    singular: np.ndarray
    gap: np.ndarray
    iterations: np.ndarray
    objective: np.ndarray
    last_iterate: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.converged & ~self.singular


def _solve(M, rhs):
    """Batched ``M x = rhs`` falling back to a pseudo-inverse on singular blocks."""
    try:
        return np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.einsum("kij,kj->ki", np.linalg.pinv(M), rhs)


def _step_bound(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return ratio.min(axis=-1)


def _frisch_newton(Xs, ys, tau, tol, max_iter):
    """Primal-dual interior point for the dual LP of quantile regression.

    Dual problem: max y'a subject to X'a = (1 - tau) X'1, 0 <= a <= 1,
    written as min c'x with c = -y.  The Lagrange multiplier of the
    equality constraint is -beta.
    """
    K, N, p = Xs.shape
    A = np.swapaxes(Xs, 1, 2)  # (K, p, N)
    c = -ys
    x = np.full((K, N), 1.0 - tau)
    b = np.einsum("kpn,kn->kp", A, x)
    s = 1.0 - x
    dual = _solve(A @ Xs, np.einsum("kpn,kn->kp", A, c))
    r = c - np.einsum("kpn,kp->kn", A, dual)
    r = r + 0.001 * (r == 0)
    z = np.maximum(r, 0.0)
    w = z - r
    gap = np.einsum("kn,kn->k", c, x) - np.einsum("kp,kp->k", b, dual) + w.sum(axis=1)

    active = gap > tol
    iters = np.zeros(K, dtype=int)
    it = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        while active.any() and it < max_iter:
            it += 1
            _fn_step(A, Xs, c, b, x, s, z, w, dual, gap, active, iters, it, tol)
    converged = (gap <= tol) & np.isfinite(gap)
    return -dual, converged, gap, iters


def _fn_step(A, Xs, c, b, x, s, z, w, dual, gap, active, iters, it, tol):
    """One predictor-corrector iteration on the active problems, in place."""
    N = x.shape[1]
    idx = np.flatnonzero(active)
    Ai, Xi = A[idx], Xs[idx]
    xi, si, zi, wi, yi = x[idx], s[idx], z[idx], w[idx], dual[idx]

    q = 1.0 / (zi / xi + wi / si)
    ri = zi - wi
    AQ = Ai * q[:, None, :]
    M = AQ @ Xi
    dy = _solve(M, np.einsum("kpn,kn->kp", AQ, ri))
    dx = q * (np.einsum("kpn,kp->kn", Ai, dy) - ri)
    ds = -dx
    dz = -zi * (dx / xi + 1.0)
    dw = -wi * (ds / si + 1.0)

    fp = np.minimum(_step_bound(xi, dx), _step_bound(si, ds))
    fd = np.minimum(_step_bound(wi, dw), _step_bound(zi, dz))
    fp = np.minimum(_STEP * fp, 1.0)
    fd = np.minimum(_STEP * fd, 1.0)

    corr = np.minimum(fp, fd) < 1.0
    if corr.any():
        # Mehrotra corrector with centering, only where the affine step is cut short
        cx = corr[:, None]
        mu = np.einsum("kn,kn->k", zi, xi) + np.einsum("kn,kn->k", wi, si)
        g = np.einsum(
            "kn,kn->k", zi + fd[:, None] * dz, xi + fp[:, None] * dx
        ) + np.einsum("kn,kn->k", wi + fd[:, None] * dw, si + fp[:, None] * ds)
        mu = mu * (g / mu) ** 3 / (2.0 * N)
        mu_ = mu[:, None]
        dxdz = dx * dz
        dsdw = ds * dw
        xi_term = (mu_ - dxdz) / xi - (mu_ - dsdw) / si
        rhs = np.einsum("kpn,kn->kp", AQ, ri - xi_term)
        dy2 = _solve(M, rhs)
        dx2 = q * (np.einsum("kpn,kp->kn", Ai, dy2) - ri + xi_term)
        ds2 = -dx2
        dz2 = (mu_ - dxdz) / xi - zi - zi * dx2 / xi
        dw2 = (mu_ - dsdw) / si - wi - wi * ds2 / si
        fp2 = np.minimum(_step_bound(xi, dx2), _step_bound(si, ds2))
        fd2 = np.minimum(_step_bound(wi, dw2), _step_bound(zi, dz2))
        fp2 = np.minimum(_STEP * fp2, 1.0)
        fd2 = np.minimum(_STEP * fd2, 1.0)
        dy = np.where(cx, dy2, dy)
        dx = np.where(cx, dx2, dx)
        ds = np.where(cx, ds2, ds)
        dz = np.where(cx, dz2, dz)
        dw = np.where(cx, dw2, dw)
        fp = np.where(corr, fp2, fp)
        fd = np.where(corr, fd2, fd)

    xi = xi + fp[:, None] * dx
    si = si + fp[:, None] * ds
    yi = yi + fd[:, None] * dy
    wi = wi + fd[:, None] * dw
    zi = zi + fd[:, None] * dz
    x[idx], s[idx], z[idx], w[idx], dual[idx] = xi, si, zi, wi, yi
    gi = (
        np.einsum("kn,kn->k", c[idx], xi)
        - np.einsum("kp,kp->k", b[idx], yi)
        + wi.sum(axis=1)
    )
    gap[idx] = gi
    iters[idx] = it
    active[idx] = (gi > tol) & np.isfinite(gi)


def _initial_basis(Xs, res):
    """Indices of ``p`` well-conditioned rows, preferring small residuals."""
    K, N, p = Xs.shape
    basis = np.argpartition(np.abs(res), p - 1, axis=1)[:, :p]
    Xh = np.take_along_axis(Xs, basis[:, :, None], axis=1)
    sv = np.linalg.svd(Xh, compute_uv=False)
    for k in np.flatnonzero(sv[:, -1] <= _BASIS_COND * sv[:, 0]):
        chosen: list[int] = []
        for i in np.argsort(np.abs(res[k]), kind="stable"):
            s = np.linalg.svd(Xs[k, chosen + [i]], compute_uv=False)
            if s[-1] > _BASIS_COND * s[0]:
                chosen.append(int(i))
                if len(chosen) == p:
                    break
        if len(chosen) < p:
            # near-duplicate rows can defeat the greedy pass
            chosen = list(scipy.linalg.qr(Xs[k].T, pivoting=True, mode="r")[1][:p])
        basis[k] = chosen
    return basis


def _crossover(Xs, ys, beta, tau, max_pivots):
    """Exact simplex phase started from the vertex nearest an interior solution.

    At a vertex with basis ``h`` the basic dual values are
    ``d_h = -X_h'^{-1} sum_{i not in h} psi_tau(r_i) x_i``; the vertex is
    optimal iff every ``d_j`` lies in ``[tau - 1, tau]``.  Otherwise the
    most violating basic row leaves the basis and the objective is
    minimized along the resulting edge, which is a one-dimensional
    weighted-median problem over the residual sign changes.

    Returns ``(beta, certified, pivots)``.
    """
    K, N, p = Xs.shape
    res = ys - np.einsum("knp,kp->kn", Xs, beta)
    basis = _initial_basis(Xs, res)
    certified = np.zeros(K, dtype=bool)
    pivots = np.zeros(K, dtype=int)
    out = np.empty((K, p))
    active = np.arange(K)
    rows = np.arange(K)

    for _ in range(max_pivots + 1):
        if active.size == 0:
            break
        Xa, ya, ba = Xs[active], ys[active], basis[active]
        ka = active.size
        Xh = np.take_along_axis(Xa, ba[:, :, None], axis=1)
        yh = np.take_along_axis(ya, ba, axis=1)
        bv = _solve(Xh, yh)
        r = ya - np.einsum("knp,kp->kn", Xa, bv)
        np.put_along_axis(r, ba, 0.0, axis=1)
        nonbasic = np.ones((ka, N), dtype=bool)
        np.put_along_axis(nonbasic, ba, False, axis=1)
        psi = np.where(r < 0, tau - 1.0, tau) * nonbasic
        g = np.einsum("kn,knp->kp", psi, Xa)
        XhT = np.swapaxes(Xh, 1, 2)
        d = -_solve(XhT, g)
        viol = np.maximum((tau - 1.0) - d, d - tau)
        j = np.argmax(viol, axis=1)
        vmax = viol[rows[:ka], j]
        # an exact fit has zero loss and is optimal whatever the residual signs say
        exact = np.all(np.abs(r) <= _EXACT_FIT, axis=1)
        done = ~(vmax > _CERT_EPS) | exact
        out[active] = bv
        certified[active[done]] = True

        go = np.flatnonzero(~done)
        if go.size == 0:
            active = active[:0]
            break
        Xa, ba, r, d, j = Xa[go], ba[go], r[go], d[go], j[go]
        Xh = Xh[go]
        nonbasic = nonbasic[go]
        kg = go.size
        dj = d[rows[:kg], j]
        sigma = np.where(dj < tau - 1.0, 1.0, -1.0)
        slope0 = np.where(sigma > 0, dj + 1.0 - tau, tau - dj)
        e = np.zeros((kg, p))
        e[rows[:kg], j] = sigma
        v = _solve(Xh, e)
        a = np.einsum("knp,kp->kn", Xa, v)
        # residual i changes sign along the edge at t = r_i / a_i
        crosses = nonbasic & ((r * a > 0) | ((r == 0) & (a > 0)))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_break = np.where(crosses, r / a, np.inf)
        order = np.argsort(t_break, axis=1, kind="stable")
        inc = np.take_along_axis(np.where(crosses, np.abs(a), 0.0), order, axis=1)
        cum = slope0[:, None] + np.cumsum(inc, axis=1)
        reach = cum >= 0
        pos = np.argmax(reach, axis=1)
        bounded = reach[rows[:kg], pos]
        enter = order[rows[:kg], pos]
        newb = ba.copy()
        newb[rows[:kg], j] = enter
        basis[active[go]] = np.where(bounded[:, None], newb, ba)
        pivots[active[go]] += 1
        # an unbounded edge cannot occur for a full-rank design; stop those
        active = active[go][bounded]

    return out, certified, pivots


def qr_fit_batch(
    X,
    y,
    tau: float,
    *,
    tol: float = GAP_TOL,
    max_iter: int = MAX_ITER,
) -> BatchQuantileFit:
    """Fit ``K`` independent quantile regressions at level ``tau``.

    Parameters
    ----------
    X : array, shape (K, N, p)
    y : array, shape (K, N)
    tau : float in (0, 1)
    tol : float
        Duality-gap target of the interior point phase on standardized data.
    max_iter : int
        Shared cap on interior point iterations and crossover pivots.

    Returns
    -------
    BatchQuantileFit
        Rank-deficient problems are flagged in ``singular``.  A problem is
        ``converged`` once its final vertex passes the optimality
        certificate (reported gap 0).  Neither failure raises here; see
        :func:`qr_fit` for the raising variant.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 3 or y.shape != X.shape[:2]:
        raise ValueError(f"expected X (K, N, p) and y (K, N), got {X.shape}, {y.shape}")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    K, N, p = X.shape
    if N < p:
        raise ValueError(f"need N >= p, got N={N}, p={p}")

    Xs, ys, info = _standardize(X, y)
    singular = _rank_deficient(Xs)
    # keep singular problems out of the iterations
    Xs_run = np.where(singular[:, None, None], np.eye(N, p), Xs)
    beta_s, _, gap, iters = _frisch_newton(Xs_run, ys, tau, max(tol, _COARSE_TOL), max_iter)
    beta_s = np.where(np.isfinite(beta_s), beta_s, 0.0)
    beta_s, certified, _ = _crossover(Xs_run, ys, beta_s, tau, max_iter)
    obj_s = check_loss(ys - np.einsum("knp,kp->kn", Xs_run, beta_s), tau).sum(axis=1)

    beta = _destandardize(beta_s, info)
    converged = certified & ~singular
    bad = ~converged
    return BatchQuantileFit(
        coef=np.where(bad[:, None], np.nan, beta),
        converged=converged,
        singular=singular,
        gap=np.where(converged, 0.0, np.where(singular, np.nan, gap)),
        iterations=iters,
        objective=np.where(bad, np.nan, obj_s * info[3]),
        last_iterate=beta,
    )


def qr_fit(problem: RegressionProblem, **kwargs) -> np.ndarray:
    """Minimize sum_i rho_tau(y_i - x_i' beta) for a single problem.

    Raises
    ------
    SingularDesignError
        If the smallest singular value of the standardized design is below
        ``1e-10`` times the largest.
    ConvergenceError
        If no certified optimum is reached within the iteration cap; the
        exception carries the last iterate.
    """
    fit = qr_fit_batch(problem.X[None], problem.y[None], problem.tau, **kwargs)
    if fit.singular[0]:
        raise SingularDesignError("design matrix is rank deficient")
    if not fit.converged[0]:
        raise ConvergenceError(
            "quantile regression did not reach a certified optimum",
            iterate=fit.last_iterate[0],
            gap=float(fit.gap[0]),
        )
    return fit.coef[0]


# ---------------------------------------------------------------------------
# least squares


def ols_fit_batch(X, Y):
    """Least squares for a stack of problems with matrix responses.

    Parameters
    ----------
    X : array, shape (K, N, p)
    Y : array, shape (K, N, q)

    Returns
    -------
    coef : array, shape (K, q, p)
        ``coef[k, v]`` solves the least-squares problem for response column v.
    singular : bool array, shape (K,)
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 3 or Y.ndim != 3 or Y.shape[:2] != X.shape[:2]:
        raise ValueError(f"expected X (K, N, p) and Y (K, N, q), got {X.shape}, {Y.shape}")
    K, N, p = X.shape
    if N < p:
        raise ValueError(f"need N >= p, got N={N}, p={p}")
    scale = np.sqrt(np.mean(X * X, axis=1))
    scale = np.where(scale > 0, scale, 1.0)
    Xs = X / scale[:, None, :]
    U, sv, Vt = np.linalg.svd(Xs, full_matrices=False)
    singular = sv[:, -1] < RANK_TOL * sv[:, 0]
    inv = np.where(singular[:, None], 0.0, 1.0 / np.where(sv > 0, sv, 1.0))
    # beta_s = V diag(1/s) U' Y, reduced elementwise over a trailing axis so
    # each response column is computed by the same operations as a lone fit
    UtY = (np.swapaxes(U, 1, 2)[:, :, None, :] * np.swapaxes(Y, 1, 2)[:, None, :, :]).sum(axis=-1)
    W = inv[:, :, None] * UtY  # (K, p, q)
    coef = (np.swapaxes(W, 1, 2)[:, :, None, :] * Vt.swapaxes(1, 2)[:, None, :, :]).sum(axis=-1)
    coef = coef / scale[:, None, :]
    coef = np.where(singular[:, None, None], np.nan, coef)
    return coef, singular


def ols_fit(X, Y) -> np.ndarray:
    """Least squares fit of each column of ``Y`` on ``X``.

    Returns the ``(q, p)`` coefficient matrix; a 1-d ``Y`` is treated as a
    single column.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < X.shape[1]:
        raise ValueError(f"need N >= p, got N={X.shape[0]}, p={X.shape[1]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("X and Y must be finite")
    coef, singular = ols_fit_batch(X[None], Y[None])
    if singular[0]:
        raise SingularDesignError("design matrix is rank deficient")
    return coef[0]
