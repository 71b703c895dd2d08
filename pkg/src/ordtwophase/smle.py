"""Sieve maximum likelihood for two-phase proportional-odds data.

The conditional exposure distribution given the phase-1 covariate ``Z1`` is
approximated by discrete masses on the distinct phase-2 exposure values,
mixed over a B-spline basis in ``Z1``:

    H(x_v | z1) = sum_l B_l(z1) p[v, l],   p[:, l] a probability vector.

``em_fit`` maximizes the observed-data log-likelihood jointly in
``(theta, p)``; ``profile_covariance`` derives standard errors from the
curvature of the profile likelihood in ``theta``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DataError, DegenerateSupportError, NonPositiveDefiniteError
from .ordinal import (
    FitResult,
    NewtonConfig,
    covariance_from_hessian,
    empirical_cutpoints,
    newton_maximize,
)


@dataclass
class SieveConfig:
    df: int = 20
    degree: int = 1
    em_tol: float = 1e-6
    em_max_iter: int = 10000  # EM map evaluations
    h_scale: float = 1.0
    z1_column: int = 0
    profile_tol: float = None  # defaults to em_tol
    profile_max_iter: int = 5000
    profile_accelerate: bool = True
    em_accelerate: bool = True
    em_backtrack: int = 5
    hessian: str = "richardson"  # or "symmetric", "forward"

    def __post_init__(self):
        if self.df < 1 or self.degree < 0 or self.em_tol <= 0:
            raise ValueError("need df >= 1, degree >= 0 and em_tol > 0")
        if self.hessian not in ("richardson", "symmetric", "forward"):
            raise ValueError("hessian must be 'richardson', 'symmetric' or 'forward'")


# ---------------------------------------------------------------------------
# B-spline basis


def spline_knots(z1, df, degree):
    """Full knot vector: boundary knots at min/max, interior ones at quantiles."""
    z1 = np.asarray(z1, float)
    if df <= degree:
        raise ValueError(f"df ({df}) must exceed degree ({degree})")
    lo, hi = float(z1.min()), float(z1.max())
    if not hi > lo:
        raise DataError("cannot build a spline basis on a constant covariate")
    n_inner = df - degree - 1
    inner = np.quantile(z1, np.arange(1, n_inner + 1) / (n_inner + 1)) if n_inner else np.empty(0)
    return np.concatenate((np.full(degree + 1, lo), inner, np.full(degree + 1, hi)))


def banded_basis(z1, knots, degree):
    """Nonzero B-spline values via the Cox-de Boor triangle.

    Returns ``(first, vals)``: row ``i`` has ``vals[i, r]`` in column
    ``first[i] + r``. Spans are right-closed, ``t_i < z <= t_{i+1}``, with
    the lowest span also holding the left boundary.
    """
    z = np.asarray(z1, float)
    t = np.asarray(knots, float)
    n_basis = t.size - degree - 1
    lo, hi = t[degree], t[n_basis]
    if np.any(z < lo) or np.any(z > hi):
        raise DataError("values outside the basis boundary knots")
    span = np.searchsorted(t, z, side="left") - 1
    span = np.clip(span, degree, n_basis - 1)
    n = z.size
    N = np.zeros((n, degree + 1))
    N[:, 0] = 1.0
    left = np.zeros((n, degree + 1))
    right = np.zeros((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = z - t[span + 1 - j]
        right[:, j] = t[span + j] - z
        saved = np.zeros(n)
        for r in range(j):
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    return span - degree, N


def bspline_basis(z1, df, degree):
    """Dense ``N x df`` B-spline design with quantile interior knots; rows sum to 1."""
    knots = spline_knots(z1, df, degree)
    first, vals = banded_basis(z1, knots, degree)
    B = np.zeros((len(first), df))
    for r in range(degree + 1):
        B[np.arange(len(first)), first + r] = vals[:, r]
    return B


# ---------------------------------------------------------------------------
# EM machinery


@dataclass
class SieveState:
    support: np.ndarray
    p: np.ndarray
    basis: np.ndarray
    knots: np.ndarray = None
    trace: list = field(default_factory=list)


class _SieveProblem:
    """Arrays and likelihood pieces for one cohort, shared by EM and profiling."""

    def __init__(self, cohort, config):
        if cohort.n_selected == 0:
            raise DataError("no phase-2 subjects")
        self.k = cohort.k
        self.km1 = cohort.k - 1
        z1 = cohort.z[:, config.z1_column]
        self.knots = spline_knots(z1, config.df, config.degree)
        first, vals = banded_basis(z1, self.knots, config.degree)
        self.n_basis = config.df
        sel = cohort.s
        self.support, vidx = np.unique(cohort.x[sel], return_inverse=True)
        self.d = self.support.size
        if self.d < 2:
            raise DataError("need at least two distinct phase-2 exposure values")
        self.y_sel = cohort.y[sel] - 1
        self.X_sel = np.column_stack((cohort.x[sel], cohort.z[sel]))
        self.y_un = np.ascontiguousarray(cohort.y[~sel] - 1, dtype=np.int64)
        self.Z_un = np.ascontiguousarray(cohort.z[~sel])
        self.un_ids = cohort.ids[~sel]
        self.b_first = np.ascontiguousarray(first[~sel], dtype=np.int64)
        self.b_vals = np.ascontiguousarray(vals[~sel])
        self.n_un = self.y_un.size
        # sum_i S_i I(X_i = x_v) B_l(Z1_i): fixed phase-2 counts
        C = np.zeros((self.d, self.n_basis))
        for r in range(config.degree + 1):
            np.add.at(C, (vidx, first[sel] + r), vals[sel, r])
        self.C_sel = C
        self.basis_dense = np.zeros((len(first), self.n_basis))
        for r in range(config.degree + 1):
            self.basis_dense[np.arange(len(first)), first + r] = vals[:, r]

    def initial_p(self):
        col = self.C_sel.sum(0)
        p = np.empty_like(self.C_sel)
        ok = col > 0
        p[:, ok] = self.C_sel[:, ok] / col[ok]
        p[:, ~ok] = 1.0 / self.d
        return p

    def sel_term_p(self, p):
        mask = self.C_sel > 0
        with np.errstate(divide="ignore"):
            return float(np.sum(self.C_sel[mask] * np.log(p[mask])))

    def sel_po(self, theta, order):
        return kernels.po_derivs(theta[: self.km1], theta[self.km1:], self.y_sel, self.X_sel, None, order)

    def probs(self, theta):
        if self.n_un == 0:
            return np.zeros((0, self.d))
        return kernels.grid_probs(theta[: self.km1], theta[self.km1:], self.y_un, self.support, self.Z_un)

    def estep(self, P, p, want_q=True):
        if self.n_un == 0:
            return 0.0, np.zeros((0, self.d)), np.zeros_like(p)
        try:
            return kernels.sieve_estep(P, self.b_first, self.b_vals, p, want_q)
        except DegenerateSupportError as exc:
            sid = self.un_ids[exc.index] if exc.index is not None else None
            raise DegenerateSupportError(
                f"E-step denominator is zero for subject id {sid}", index=sid
            ) from None

    def update_p(self, p, A):
        num = self.C_sel + p * A
        col = num.sum(0)
        out = p.copy()
        ok = col > 0
        out[:, ok] = num[:, ok] / col[ok]
        # renormalization guard
        out[:, ok] /= out[:, ok].sum(0)
        return out

    def theta_objective(self, Q):
        km1 = self.km1

        def objective(theta, order):
            ll, g, H = self.sel_po(theta, order)
            if self.n_un == 0 or not np.isfinite(ll):
                return ll, g, H
            ll2, g2, H2 = kernels.grid_po_derivs(
                theta[:km1], theta[km1:], self.y_un, self.support, self.Z_un, Q, order
            )
            if not np.isfinite(ll2):
                return ll2, None, None
            return (
                ll + ll2,
                None if g is None else g + g2,
                None if H is None else H + H2,
            )

        return objective

    def loglik(self, theta, p, P=None):
        """Observed-data log-likelihood at ``(theta, p)``."""
        P = self.probs(theta) if P is None else P
        ll_u, _, _ = self.estep(P, p, want_q=False)
        return self.sel_po(theta, 0)[0] + self.sel_term_p(p) + ll_u

    def profile(self, theta, p0, tol, max_iter, accelerate=True):
        """max over p of the log-likelihood with theta held fixed (EM in p only).

        With ``accelerate`` the p-iterations use SQUAREM extrapolation; a step
        is kept only if it is a valid mass matrix that does not lower the
        likelihood, otherwise the plain double EM step is taken.
        """
        P = self.probs(theta)
        const = self.sel_po(theta, 0)[0]

        def step(p):
            ll_u, _, A = self.estep(P, p, want_q=False)
            return const + self.sel_term_p(p) + ll_u, self.update_p(p, A)

        p = p0.copy()
        ll, p1 = step(p)
        prev = -np.inf
        it = 1
        while it < max_iter:
            if abs(ll - prev) < tol:
                return ll, p, it
            prev = ll
            ll1, p2 = step(p1)
            it += 1
            if not accelerate:
                p, ll, p1 = p1, ll1, p2
                continue
            r = p1 - p
            v = p2 - 2.0 * p1 + p
            nv = np.sqrt((v * v).sum())
            a = min(-np.sqrt((r * r).sum()) / nv, -1.0) if nv > 0 else -1.0
            cand = p - 2.0 * a * r + a * a * v
            if np.all(cand >= 0):
                cand /= cand.sum(0)
                llc, pc = step(cand)
                it += 1
                if llc >= ll1:
                    p, ll, p1 = cand, llc, pc
                    continue
            ll, p3 = step(p2)
            it += 1
            p, p1 = p2, p3
        return ll, p, max_iter


def em_fit(cohort, config=None, controls=None, start=None):
    """Fit ``theta`` and the sieve masses by EM.

    With ``config.em_accelerate`` the EM map is extrapolated by SQUAREM. The
    extrapolated point is kept only if it is a valid (ordered cutpoints,
    non-negative masses) point whose likelihood is at least that after one
    plain EM step. Failing candidates are pulled back toward the plain double
    step up to ``em_backtrack`` times before falling back to it, so the traced
    log-likelihood never decreases. ``em_max_iter`` bounds the number of EM
    map evaluations.

    Returns ``(FitResult, SieveState)``; the covariance in the FitResult is
    left as NaN, see :func:`profile_covariance`.
    """
    cfg = config or SieveConfig()
    ctl = controls or NewtonConfig()
    prob = _SieveProblem(cohort, cfg)
    km1 = prob.km1
    nb = prob.X_sel.shape[1]
    if start is None:
        alpha0 = empirical_cutpoints(np.concatenate((prob.y_sel, prob.y_un)), prob.k)
        if not np.all(np.isfinite(alpha0)):
            raise DataError("every outcome level must be observed")
        theta = np.concatenate((alpha0, np.zeros(nb)))
    else:
        theta = np.asarray(start, float).copy()
    p = prob.initial_p()

    def step(theta, p):
        """Observed log-likelihood at (theta, p) and one EM update from there."""
        P = prob.probs(theta)
        ll_u, Q, A = prob.estep(P, p, want_q=True)
        ll = prob.sel_po(theta, 0)[0] + prob.sel_term_p(p) + ll_u
        new_theta = newton_maximize(prob.theta_objective(Q), theta, km1, ctl)[0]
        return ll, new_theta, prob.update_p(p, A)

    def valid(theta, p):
        return np.all(p >= 0) and np.all(np.diff(theta[:km1]) > 0) and np.all(np.isfinite(theta))

    trace = []
    converged = False
    change = np.nan
    ll, t1, p1 = step(theta, p)
    evals = 1
    prev = -np.inf
    while True:
        trace.append((evals - 1, ll, change))
        if abs(ll - prev) < cfg.em_tol:
            converged = True
            break
        if evals >= cfg.em_max_iter:
            break
        prev = ll
        ll1, t2, p2 = step(t1, p1)
        evals += 1
        old_theta, old_p = theta, p
        if cfg.em_accelerate:
            rt, rp = t1 - theta, p1 - p
            vt, vp = t2 - 2.0 * t1 + theta, p2 - 2.0 * p1 + p
            nv = np.sqrt((vt * vt).sum() + (vp * vp).sum())
            a = min(-np.sqrt((rt * rt).sum() + (rp * rp).sum()) / nv, -1.0) if nv > 0 else -1.0
            accepted = False
            for _ in range(cfg.em_backtrack + 1):
                ct = theta - 2.0 * a * rt + a * a * vt
                cp = p - 2.0 * a * rp + a * a * vp
                if valid(ct, cp):
                    cp = cp / cp.sum(0)
                    try:
                        llc, tc, pc = step(ct, cp)
                        evals += 1
                        accepted = llc >= ll1
                    except DegenerateSupportError:
                        pass
                if accepted or a >= -1.0:
                    break
                a = 0.5 * (a - 1.0)  # back off toward the plain double step
            if accepted:
                theta, p, ll, t1, p1 = ct, cp, llc, tc, pc
            else:
                ll, t3, p3 = step(t2, p2)
                evals += 1
                theta, p, t1, p1 = t2, p2, t3, p3
        else:
            theta, p, ll, t1, p1 = t1, p1, ll1, t2, p2
        change = max(np.max(np.abs(theta - old_theta)), np.max(np.abs(p - old_p)))
    fit = FitResult(
        theta, np.full((theta.size, theta.size), np.nan), converged, evals, ll, prob.k,
        message="" if converged else "EM did not converge",
    )
    state = SieveState(prob.support, p, prob.basis_dense, prob.knots, trace)
    return fit, state


def _forward_hessian(pl, theta, h):
    dim = theta.size
    E = np.eye(dim) * h
    base = pl(theta)
    single = np.array([pl(theta + E[v]) for v in range(dim)])
    H = np.empty((dim, dim))
    for v in range(dim):
        for l_ in range(v, dim):
            H[v, l_] = H[l_, v] = (pl(theta + (E[v] + E[l_])) - single[v] - single[l_] + base) / h**2
    return H


def profile_covariance(theta_hat, cohort, config=None, state=None, return_hessian=False):
    """Covariance from a finite-difference Hessian of the profile likelihood.

    Each profile evaluation re-runs the EM in ``p`` only. It starts from
    ``state.p`` moved along the linear prediction given by the one-coordinate
    moves already solved, shrunk if needed to keep every mass positive. The step is ``h_scale / sqrt(N)``. The forward scheme uses
    the points ``theta + h e_v + h e_l``; the symmetric scheme averages it
    with its mirror image at ``theta - h e_v - h e_l``, which cancels the
    first-order bias. The default combines symmetric Hessians at ``h`` and
    ``h / 2`` as ``(4 H(h/2) - H(h)) / 3`` to remove the ``h^2`` term as well.
    """
    cfg = config or SieveConfig()
    prob = _SieveProblem(cohort, cfg)
    theta_hat = np.asarray(theta_hat, float)
    p0 = prob.initial_p() if state is None else state.p
    tol = cfg.profile_tol if cfg.profile_tol is not None else cfg.em_tol
    h = cfg.h_scale / np.sqrt(len(cohort))

    cache = {}
    moves = {}

    def start(delta):
        # linear prediction of the profile maximizer from the one-coordinate moves
        shift = np.zeros_like(p0)
        for v in np.flatnonzero(delta):
            known = [s for (u, s) in moves if u == v and s * delta[v] > 0]
            if not known:
                return p0
            s = min(known, key=lambda s: abs(s - delta[v]))
            shift += (moves[(v, s)] - p0) * (delta[v] / s)
        neg = shift < 0
        if not np.any(neg):
            return p0 + shift
        lam = min(1.0, 0.9 * np.min(p0[neg] / -shift[neg]))
        return p0 + lam * shift

    def pl(theta):
        key = theta.tobytes()
        if key not in cache:
            delta = theta - theta_hat
            ll, p, _ = prob.profile(theta, start(delta), tol, cfg.profile_max_iter, cfg.profile_accelerate)
            cache[key] = ll
            nz = np.flatnonzero(delta)
            if nz.size == 1:
                moves[(nz[0], delta[nz[0]])] = p
        return cache[key]

    def symmetric(step):
        return 0.5 * (_forward_hessian(pl, theta_hat, step) + _forward_hessian(pl, theta_hat, -step))

    if cfg.hessian == "forward":
        H = _forward_hessian(pl, theta_hat, h)
    elif cfg.hessian == "symmetric":
        H = symmetric(h)
    else:
        H = (4.0 * symmetric(h / 2) - symmetric(h)) / 3.0
    try:
        cov = covariance_from_hessian(H, "profile information")
    except NonPositiveDefiniteError as exc:
        raise NonPositiveDefiniteError(
            f"{exc}; eigenvalues {np.array2string(exc.eigenvalues, precision=4)}", exc.eigenvalues
        ) from None
    return (cov, H) if return_hessian else cov


def fit_smle(cohort, config=None, controls=None):
    """EM fit followed by profile-likelihood covariance."""
    cfg = config or SieveConfig()
    fit, state = em_fit(cohort, cfg, controls)
    if fit.converged:
        fit.cov = profile_covariance(fit.params, cohort, cfg, state)
    return fit, state
