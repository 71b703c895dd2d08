"""Ascertainment-corrected maximum likelihood (ACML) for phase-2 complete cases.

Each selected subject contributes

    log P(y_i | x_i, z_i) - log AC_i,    AC_i = sum_j pi(j, g_i) P(Y = j | x_i, z_i),

where ``pi(j, g)`` is the design's inclusion probability for outcome level
``j`` in stratum ``g``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import DataError, UnsupportedDesignError
from .ordinal import (
    FitResult,
    NewtonConfig,
    cell_probabilities,
    covariance_from_hessian,
    empirical_cutpoints,
    newton_maximize,
    _safe_inverse,
)


@dataclass
class InclusionProbabilityMap:
    """``table[j-1, g-1]`` is P(S = 1 | Y = j, stratum g); strata are 1-based."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, float)
        if t.ndim == 1:
            t = t[:, None]
        if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
            raise DataError("inclusion probabilities must lie in [0, 1]")
        self.table = t

    @property
    def k(self):
        return self.table.shape[0]

    @property
    def n_strata(self):
        return self.table.shape[1]

    @classmethod
    def constant(cls, k, pi, n_strata=1):
        return cls(np.full((k, n_strata), float(pi)))

    def lookup(self, j, g=1):
        return float(self.table[j - 1, g - 1])

    def row(self, g=1):
        if not 1 <= g <= self.n_strata:
            raise DataError(f"no inclusion probabilities for stratum {g}")
        return self.table[:, g - 1]

    def rows(self, strata):
        strata = np.asarray(strata, np.intp)
        if np.any(strata < 1) or np.any(strata > self.n_strata):
            bad = strata[(strata < 1) | (strata > self.n_strata)][0]
            raise DataError(f"no inclusion probabilities for stratum {bad}")
        return self.table[:, strata - 1].T


def ac_term(params, x, z, pmap, g=1):
    """Selection mass ``sum_j pi(j, g) P(Y = j | x, z)``."""
    pi = pmap.row(g)
    probs = cell_probabilities(params, x, z)
    if probs.shape[-1] != pi.size:
        raise DataError("inclusion map does not cover every outcome level")
    return float(probs @ pi) if np.ndim(probs) == 1 else probs @ pi


def log_ac_derivs(alpha, beta, X, pi_rows, order=2):
    """sum_i log AC_i with gradient and Hessian in ``(alpha, beta)``."""
    alpha = np.asarray(alpha, float)
    X = np.asarray(X, float)
    km1 = alpha.size
    eta = X @ np.asarray(beta, float)
    F = expit(alpha[None, :] + eta[:, None])
    c = pi_rows[:, :-1] - pi_rows[:, 1:]  # pi_j - pi_{j+1}
    ac = pi_rows[:, -1] + (c * F).sum(1)
    with np.errstate(divide="ignore"):
        ll = float(np.log(ac).sum())
    if order < 1:
        return ll, None, None
    f = F * expit(-(alpha[None, :] + eta[:, None]))
    cf = c * f
    a = cf / ac[:, None]  # d log AC / d alpha_j
    b = a.sum(1)  # d log AC / d eta
    grad = np.concatenate((a.sum(0), X.T @ b))
    if order < 2:
        return ll, grad, None
    e = cf * (1.0 - 2.0 * F) / ac[:, None]
    dim = km1 + X.shape[1]
    H = np.zeros((dim, dim))
    H[:km1, :km1] = np.diag(e.sum(0)) - a.T @ a
    cross = X.T @ (e - a * b[:, None])
    H[:km1, km1:] = cross.T
    H[km1:, :km1] = cross
    H[km1:, km1:] = (X * (e.sum(1) - b * b)[:, None]).T @ X
    return ll, grad, H


def acml_objective(y0, X, pi_rows):
    """Corrected log-likelihood as a kernel-style ``objective(theta, order)``."""
    km1 = pi_rows.shape[1] - 1

    def objective(theta, order):
        alpha, beta = theta[:km1], theta[km1:]
        ll, g, H = kernels.po_derivs(alpha, beta, y0, X, None, order)
        if not np.isfinite(ll):
            return ll, None, None
        lc, gc, Hc = log_ac_derivs(alpha, beta, X, pi_rows, order)
        if not np.isfinite(lc):
            return -np.inf, None, None
        return ll - lc, None if g is None else g - gc, None if H is None else H - Hc

    return objective


def _phase2_arrays(cohort, pmap):
    data = cohort.selected() if not np.all(cohort.s) else cohort
    if len(data) == 0:
        raise DataError("no phase-2 subjects")
    if np.any(np.isnan(data.x)):
        raise DataError("phase-2 subjects must have the exposure measured")
    if pmap.k != cohort.k:
        raise DataError("inclusion map does not cover every outcome level")
    strata = np.where(data.stratum < 1, 1, data.stratum) if pmap.n_strata == 1 else data.stratum
    pi_rows = pmap.rows(strata)
    return data, data.y - 1, data.design(), pi_rows


def fit_acml(phase2, pmap, config=None):
    """Newton-Raphson ACML fit; covariance is the inverse observed information."""
    data, y0, X, pi_rows = _phase2_arrays(phase2, pmap)
    k = data.k
    km1 = k - 1
    counts = np.bincount(y0, minlength=k)
    if np.any(counts == 0):
        missing = [int(j) + 1 for j in np.flatnonzero(counts == 0)]
        dim = km1 + X.shape[1]
        return FitResult(
            np.concatenate((np.linspace(-1, 1, km1), np.zeros(X.shape[1]))),
            np.full((dim, dim), np.nan), False, 0, -np.inf, k,
            message=f"outcome level(s) {missing} not observed in phase 2",
        )
    start = np.concatenate((empirical_cutpoints(y0, k), np.zeros(X.shape[1])))
    objective = acml_objective(y0, X, pi_rows)
    theta, ll, grad, hess, conv, it = newton_maximize(objective, start, km1, config or NewtonConfig())
    if conv:
        cov = covariance_from_hessian(hess)
        msg = ""
    else:
        cov = _safe_inverse(hess)
        msg = "Newton-Raphson did not converge"
    return FitResult(theta, cov, conv, it, ll, k, message=msg, extra={"score": grad})


def require_pmap(selection):
    """Inclusion map of a selection, refusing designs without closed-form probabilities."""
    if selection.kind == "RDS" or selection.pmap is None:
        raise UnsupportedDesignError(
            f"{selection.kind} selection has no closed-form inclusion probabilities; "
            "ACML needs an SRS, ODS or CSODS design"
        )
    return selection.pmap


def pmap_from_records(y, stratum, pi, k):
    """Rebuild a design's map from per-subject ``(y, stratum, pi)`` records.

    Cells with no subjects get ``pi = 1``, the value the samplers assign to
    empty strata.
    """
    y = np.asarray(y, np.intp)
    stratum = np.asarray(stratum, np.intp)
    pi = np.asarray(pi, float)
    if np.any(np.isnan(pi)) or np.any(stratum < 1):
        raise UnsupportedDesignError("records carry no inclusion probabilities (RDS or unknown design)")
    t = int(stratum.max())
    table = np.ones((k, t))
    seen = np.zeros((k, t), bool)
    for j, g, p in zip(y - 1, stratum - 1, pi):
        if seen[j, g] and table[j, g] != p:
            raise DataError(f"conflicting inclusion probabilities in cell ({j + 1}, {g + 1})")
        table[j, g] = p
        seen[j, g] = True
    return InclusionProbabilityMap(table)
