"""Proportional-odds model: probabilities, likelihood, score and ML fitting.

The cumulative-logit model is

    logit P(Y <= j | x, z) = alpha_j + beta_x * x + beta_z . z,   j = 1..k-1

and every fitter in the package works on the stacked vector
``theta = (alpha_1, ..., alpha_{k-1}, beta_x, beta_z...)``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _expit
from scipy.special import logit

from . import kernels
from .errors import DataError, InvalidParameterError, NonPositiveDefiniteError


def expit(t):
    """Inverse logit ``1 / (1 + exp(-t))`` without overflow for large ``|t|``."""
    out = _expit(t)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PoParams:
    alphas: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alphas, float))
        b = np.atleast_1d(np.asarray(self.beta, float))
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "beta", b)
        if a.size < 1:
            raise InvalidParameterError("need at least one cutpoint (k >= 2)")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidParameterError("parameters must be finite")
        if np.any(np.diff(a) <= 0):
            raise InvalidParameterError(f"cutpoints must be strictly increasing, got {a}")

    @property
    def k(self):
        return self.alphas.size + 1

    @property
    def theta(self):
        return np.concatenate((self.alphas, self.beta))

    @classmethod
    def from_theta(cls, theta, k):
        theta = np.asarray(theta, float)
        return cls(theta[: k - 1], theta[k - 1:])


@dataclass
class FitResult:
    """Point estimates plus covariance and convergence diagnostics.

    ``params`` is the stacked ``theta`` vector; ``k`` is the number of
    outcome levels, so the first ``k - 1`` entries are cutpoints.
    """

    params: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    k: int
    names: list = None
    message: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, float)
        self.cov = np.asarray(self.cov, float)
        if self.names is None:
            self.names = param_names(self.k, self.params.size - (self.k - 1))

    @property
    def se(self):
        with np.errstate(invalid="ignore"):
            return np.sqrt(np.diag(self.cov))

    @property
    def alphas(self):
        return self.params[: self.k - 1]

    @property
    def beta(self):
        return self.params[self.k - 1:]

    @property
    def po_params(self):
        return PoParams(self.alphas, self.beta)


def param_names(k, n_beta):
    names = [f"alpha{j}" for j in range(1, k)]
    if n_beta >= 1:
        names.append("beta_x")
    names += [f"beta_z{j}" for j in range(1, n_beta)]
    return names


@dataclass
class Cohort:
    """Phase-1 cohort with the phase-2 exposure where measured.

    ``y`` holds levels ``1..k``; ``x`` is NaN where the exposure is
    unmeasured; ``pi`` is NaN where no inclusion probability is defined and
    ``stratum`` is -1 where no stratum was assigned.
    """

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray = None
    s: np.ndarray = None
    pi: np.ndarray = None
    stratum: np.ndarray = None
    k: int = None
    ids: np.ndarray = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        n = self.y.size
        self.z = np.asarray(self.z, float).reshape(n, -1)
        self.x = np.full(n, np.nan) if self.x is None else np.asarray(self.x, float).copy()
        self.s = (~np.isnan(self.x)) if self.s is None else np.asarray(self.s, bool).copy()
        self.pi = np.full(n, np.nan) if self.pi is None else np.asarray(self.pi, float).copy()
        self.stratum = (
            np.full(n, -1, np.int64) if self.stratum is None else np.asarray(self.stratum, np.int64).copy()
        )
        self.ids = np.arange(1, n + 1) if self.ids is None else np.asarray(self.ids)
        if self.k is None:
            self.k = int(self.y.max()) if n else 2
        if self.k < 2:
            raise DataError("need k >= 2 outcome levels")
        if n and (self.y.min() < 1 or self.y.max() > self.k):
            raise DataError(f"outcomes must lie in 1..{self.k}")
        for name in ("x", "s", "pi", "stratum", "ids"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"column {name!r} has wrong length")
        if np.any(self.s & np.isnan(self.x)):
            raise DataError("exposure must be present for every selected subject")

    def __len__(self):
        return self.y.size

    @property
    def n_selected(self):
        return int(self.s.sum())

    def subset(self, mask):
        mask = np.asarray(mask)
        return Cohort(
            y=self.y[mask], z=self.z[mask], x=self.x[mask], s=self.s[mask],
            pi=self.pi[mask], stratum=self.stratum[mask], k=self.k, ids=self.ids[mask],
        )

    def complete(self):
        """Rows with the exposure measured."""
        return self.subset(~np.isnan(self.x))

    def selected(self):
        return self.subset(self.s)

    def design(self):
        """Covariate matrix ``[x, z]`` (exposure first)."""
        return np.column_stack((self.x, self.z))


@dataclass
class NewtonConfig:
    tol: float = 1e-8
    gtol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 30


def _check_alphas(alphas):
    alphas = np.asarray(alphas, float)
    if np.any(np.diff(alphas) <= 0):
        raise InvalidParameterError(f"cutpoints must be strictly increasing, got {alphas}")


def cell_probabilities(params, x, z):
    """Outcome distribution ``P(Y = j | x, z)`` for ``j = 1..k``.

    ``x`` may be a scalar or an array; ``z`` then has matching leading shape.
    """
    _check_alphas(params.alphas)
    beta = params.beta
    z = np.asarray(z, float)
    eta = beta[0] * np.asarray(x, float)
    if beta.size > 1:
        eta = eta + z @ beta[1:]
    eta = np.asarray(eta, float)
    cum = _expit(params.alphas + eta[..., None])
    upper = np.concatenate((cum, np.ones(eta.shape + (1,))), axis=-1)
    lower = np.concatenate((np.zeros(eta.shape + (1,)), cum), axis=-1)
    return upper - lower


def _complete_arrays(data):
    if np.any(np.isnan(data.x)):
        raise DataError("log-likelihood needs complete records; exposure missing")
    return data.y - 1, data.design()


def log_likelihood(params, data, weights=None):
    """Sum over subjects of log P(y_i | x_i, z_i); ``-inf`` (with a warning) if any cell is 0."""
    _check_alphas(params.alphas)
    y0, X = _complete_arrays(data)
    ll, _, _ = kernels.po_derivs(params.alphas, params.beta, y0, X, weights, 0)
    if not np.isfinite(ll):
        warnings.warn("log-likelihood is not finite (zero-probability cell)", RuntimeWarning)
        return -np.inf
    return ll


def score(params, data, weights=None):
    _check_alphas(params.alphas)
    y0, X = _complete_arrays(data)
    ll, grad, _ = kernels.po_derivs(params.alphas, params.beta, y0, X, weights, 1)
    if grad is None:
        raise InvalidParameterError("score undefined: log-likelihood is not finite")
    return grad


def observed_information(params, data, weights=None):
    y0, X = _complete_arrays(data)
    _, _, H = kernels.po_derivs(params.alphas, params.beta, y0, X, weights, 2)
    return -H


def empirical_cutpoints(y0, k, weights=None):
    """Logits of the cumulative outcome proportions (the intercept-only MLE)."""
    w = np.ones(len(y0)) if weights is None else np.asarray(weights, float)
    freq = np.bincount(y0, w, minlength=k)[:k]
    cum = np.cumsum(freq)[:-1] / freq.sum()
    with np.errstate(divide="ignore"):
        return logit(cum)


def _ascent_direction(grad, hess):
    info = -hess
    shift = 0.0
    scale = max(1.0, float(np.abs(np.diag(info)).max()))
    for _ in range(60):
        try:
            L = np.linalg.cholesky(info + shift * np.eye(len(grad)))
        except np.linalg.LinAlgError:
            shift = max(2.0 * shift, 1e-10 * scale)
            continue
        tmp = np.linalg.solve(L, grad)
        return np.linalg.solve(L.T, tmp)
    return grad / scale


def newton_maximize(objective, theta0, n_alpha, config=None):
    """Newton-Raphson ascent with step-halving.

    ``objective(theta, order)`` returns ``(ll, grad, hess)`` as the kernels
    do. Steps that break cutpoint ordering, give a non-finite value or
    decrease the objective are halved, up to ``config.max_halvings`` times.

    Returns ``(theta, ll, grad, hess, converged, iterations)``.
    """
    cfg = config or NewtonConfig()
    theta = np.asarray(theta0, float).copy()
    ll, grad, hess = objective(theta, 2)
    if grad is None:
        return theta, ll, grad, hess, False, 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        if np.max(np.abs(grad)) < cfg.gtol:
            converged = True
            it -= 1
            break
        step = _ascent_direction(grad, hess)
        t = 1.0
        accepted = False
        slack = 1e-12 * max(1.0, abs(ll))
        for _ in range(cfg.max_halvings + 1):
            cand = theta + t * step
            if n_alpha < 2 or np.all(np.diff(cand[:n_alpha]) > 0):
                c_ll, c_grad, c_hess = objective(cand, 2)
                if np.isfinite(c_ll) and c_grad is not None and c_ll >= ll - slack:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        delta = np.max(np.abs(cand - theta))
        theta, ll, grad, hess = cand, c_ll, c_grad, c_hess
        if delta < cfg.tol or np.max(np.abs(grad)) < cfg.gtol:
            converged = True
            break
    return theta, ll, grad, hess, converged, it


def covariance_from_hessian(hess, what="information"):
    info = -np.asarray(hess, float)
    info = 0.5 * (info + info.T)
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(info)
        raise NonPositiveDefiniteError(
            f"observed {what} is not positive definite (min eigenvalue {eig.min():.3g})", eig
        ) from None
    cov = np.linalg.inv(info)
    return 0.5 * (cov + cov.T)


def fit_po(y0, X, k, weights=None, config=None, start=None):
    """ML fit of the proportional-odds model on arrays.

    ``y0`` are 0-based levels, ``X`` the covariate matrix (exposure first).
    """
    y0 = np.asarray(y0, np.intp)
    X = np.asarray(X, float).reshape(len(y0), -1)
    if weights is not None:
        weights = np.asarray(weights, float)
    km1 = k - 1
    p = X.shape[1]
    present = np.bincount(y0, weights, minlength=k)[:k] > 0
    if start is None:
        if not present.all():
            missing = [int(j) + 1 for j in np.flatnonzero(~present)]
            theta = np.concatenate((np.linspace(-1, 1, km1), np.zeros(p)))
            return FitResult(
                theta, np.full((km1 + p,) * 2, np.nan), False, 0, -np.inf, k,
                message=f"outcome level(s) {missing} not observed",
            )
        start = np.concatenate((empirical_cutpoints(y0, k, weights), np.zeros(p)))

    def objective(theta, order):
        return kernels.po_derivs(theta[:km1], theta[km1:], y0, X, weights, order)

    theta, ll, grad, hess, conv, it = newton_maximize(objective, start, km1, config)
    if conv:
        cov = covariance_from_hessian(hess)
        msg = ""
    else:
        cov = _safe_inverse(hess)
        msg = "Newton-Raphson did not converge"
    return FitResult(theta, cov, conv, it, ll, k, message=msg,
                     extra={"score": grad})


def _safe_inverse(hess):
    if hess is None:
        return np.full((1, 1), np.nan)
    try:
        cov = np.linalg.inv(-hess)
        return 0.5 * (cov + cov.T)
    except np.linalg.LinAlgError:
        return np.full(hess.shape, np.nan)


def fit_ml(data, config=None, weights=None):
    """Maximum-likelihood PO fit on the complete records of ``data``."""
    if len(data) == 0:
        raise DataError("empty cohort")
    y0, X = _complete_arrays(data)
    if len(y0) <= data.k - 1 + X.shape[1]:
        raise DataError("not enough subjects for the number of parameters")
    return fit_po(y0, X, data.k, weights=weights, config=config)
