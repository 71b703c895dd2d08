"""Multiple imputation of an unmeasured exposure with Rubin pooling.

The imputation distribution factorizes as

    P(x | y, z) ∝ P(y | x, z; delta) * phi(x | z; omega),

with ``delta`` from a design-corrected (ACML) outcome fit and ``omega`` from
an inverse-probability-weighted linear regression of ``x`` on ``z``. The
exposure is drawn from a fixed grid of candidate values.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from . import kernels
from .acml import fit_acml
from .errors import ConvergenceError, DataError, DegenerateSupportError, UnsupportedDesignError
from .ordinal import Cohort, FitResult, NewtonConfig, fit_ml


@dataclass
class ExposureModel:
    """Normal linear model ``x = coef[0] + z @ coef[1:] + sigma * eps``."""

    coef: np.ndarray
    sigma: float
    cov_coef: np.ndarray

    def __post_init__(self):
        self.coef = np.asarray(self.coef, float)
        self.cov_coef = np.asarray(self.cov_coef, float)
        if not self.sigma > 0:
            raise ValueError("residual scale must be positive")

    @property
    def omega(self):
        return np.append(self.coef, self.sigma)

    def mean(self, z):
        z = np.asarray(z, float)
        return self.coef[0] + z @ self.coef[1:]

    def logpdf(self, grid, z):
        """``log phi(grid | z)``; rows follow ``z``, columns follow ``grid``."""
        mu = np.atleast_1d(self.mean(np.atleast_2d(z)))
        return stats.norm.logpdf(np.asarray(grid, float)[None, :], mu[:, None], self.sigma)

    def with_coef(self, coef):
        return ExposureModel(coef, self.sigma, self.cov_coef)


@dataclass
class ImputationConfig:
    grid_size: int = 100
    num_imputations: int = 100
    grid_range: tuple = None  # default: observed phase-2 range
    max_failure_rate: float = 0.10
    max_redraws: int = 100
    keep_completed: bool = False  # store each completed exposure vector in ``extra``
    newton: NewtonConfig = field(default_factory=NewtonConfig)

    def __post_init__(self):
        if self.grid_size < 2 or self.num_imputations < 2:
            raise ValueError("need grid_size >= 2 and num_imputations >= 2")
        if self.grid_range is not None and not self.grid_range[0] < self.grid_range[1]:
            raise ValueError("grid_range must satisfy lo < hi")


def fit_exposure_ipw(phase2, pi):
    """Weighted least squares of ``x`` on ``[1, z]`` with weights ``1 / pi``.

    The coefficient covariance is the sandwich ``B^-1 M B^-1`` with
    ``B = sum w_i d_i d_i'`` and ``M = sum w_i^2 e_i^2 d_i d_i'``. The residual
    scale is the weighted residual variance with an ``n / (n - p)`` correction,
    which reduces to the usual OLS estimate at equal weights.
    """
    data = phase2.selected() if isinstance(phase2, Cohort) and not np.all(phase2.s) else phase2
    x = np.asarray(data.x, float)
    pi = np.asarray(pi, float)
    if pi.shape != x.shape:
        raise DataError("need one inclusion probability per phase-2 subject")
    if np.any(np.isnan(x)):
        raise DataError("exposure missing for a phase-2 subject")
    if np.any(~(pi > 0)) or np.any(pi > 1):
        raise DataError("inclusion probabilities must lie in (0, 1]")
    D = np.column_stack((np.ones(x.size), data.z))
    n, p = D.shape
    if np.linalg.matrix_rank(D) < p or n <= p:
        raise DataError("exposure design matrix is rank deficient")
    w = 1.0 / pi
    bread = (D * w[:, None]).T @ D
    coef = np.linalg.solve(bread, (D * w[:, None]).T @ x)
    e = x - D @ coef
    meat = (D * (w * e)[:, None] ** 2).T @ D
    binv = np.linalg.inv(bread)
    cov = binv @ meat @ binv
    sigma2 = (w * e * e).sum() / w.sum() * n / (n - p)
    return ExposureModel(coef, float(np.sqrt(sigma2)), 0.5 * (cov + cov.T))


def imputation_weight_matrix(alpha, beta, omega, y, z, grid):
    """Row ``i`` holds the normalized weights over ``grid`` for subject ``i``."""
    y = np.asarray(y, np.int64)
    z = np.asarray(z, float).reshape(y.size, -1)
    grid = np.asarray(grid, float)
    with np.errstate(divide="ignore"):
        logp = np.log(kernels.grid_probs(np.asarray(alpha, float), np.asarray(beta, float),
                                         y - 1, grid, z))
    logw = logp + omega.logpdf(grid, z)
    norm = logsumexp(logw, axis=1)
    bad = np.flatnonzero(~np.isfinite(norm))
    if bad.size:
        raise DegenerateSupportError(
            f"all imputation weights vanish for row {int(bad[0])}", index=int(bad[0])
        )
    return np.exp(logw - norm[:, None])


def imputation_weights(delta, omega, y, z, grid):
    """Normalized grid weights for one subject with outcome ``y`` and covariates ``z``."""
    w = imputation_weight_matrix(delta.alphas, delta.beta, omega, [y], np.atleast_2d(z), grid)
    return w[0]


def rubin_pool(estimates, covs, complete_df=None):
    """Rubin's rules.

    Total variance is ``W + (1 + 1/M) B``. Degrees of freedom use the
    Barnard-Rubin small-sample form when ``complete_df`` is given, otherwise
    the large-sample form. The result's ``extra`` holds ``fmi``, ``df``,
    ``within`` and ``between``.
    """
    est = np.asarray([np.atleast_1d(e) for e in estimates], float)
    if est.ndim != 2:
        raise DataError("estimates must be vectors of equal length")
    m, d = est.shape
    if m < 2:
        raise DataError("need at least two imputations")
    cv = [np.atleast_2d(np.asarray(c, float)) for c in covs]
    if len(cv) != m or any(c.shape != (d, d) for c in cv):
        raise DataError("covariances do not conform with the estimates")
    # mean taken as a shift from the first draw so identical inputs pool exactly
    mean = est[0] + (est - est[0]).mean(0)
    within = np.mean(cv, axis=0)
    dev = est - mean
    between = dev.T @ dev / (m - 1)
    total = within + (1.0 + 1.0 / m) * between
    w, b = np.diag(within), np.diag(between)
    t = np.diag(total)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (1.0 + 1.0 / m) * b / w
        lam = np.where(t > 0, (1.0 + 1.0 / m) * b / t, 0.0)
        df_old = np.where(b > 0, (m - 1) / lam ** 2, np.inf)
        if complete_df is not None:
            df_obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lam)
            df = np.where(b > 0, 1.0 / (1.0 / df_old + 1.0 / df_obs), complete_df)
        else:
            df = df_old
        fmi = np.where(b > 0, (r + 2.0 / (df + 3.0)) / (r + 1.0), 0.0)
    extra = {"fmi": fmi, "df": df, "within": within, "between": between, "m": m}
    return FitResult(mean, 0.5 * (total + total.T), True, m, np.nan, 0, names=[""] * d, extra=extra)


def _grid(observed, config):
    lo, hi = config.grid_range if config.grid_range is not None else (observed.min(), observed.max())
    if not hi > lo:
        raise DataError("observed exposure has no spread; cannot build an imputation grid")
    return np.linspace(lo, hi, config.grid_size)


def _draw_valid(rng, mean, cov, km1, tries):
    for _ in range(tries):
        draw = rng.multivariate_normal(mean, cov, method="cholesky")
        if km1 < 2 or np.all(np.diff(draw[:km1]) > 0):
            return draw
    raise ConvergenceError("could not draw ordered cutpoints from the outcome-model posterior")


def _one_imputation(rng, step1, exposure, grid, cohort, miss, km1, config):
    delta = _draw_valid(rng, step1.params, step1.cov, km1, config.max_redraws)
    coef = rng.multivariate_normal(exposure.coef, exposure.cov_coef, method="cholesky")
    x = cohort.x.copy()
    if miss.size:
        W = imputation_weight_matrix(delta[:km1], delta[km1:], exposure.with_coef(coef),
                                     cohort.y[miss], cohort.z[miss], grid)
        cdf = np.cumsum(W, axis=1)
        u = rng.random(miss.size) * cdf[:, -1]
        pick = (cdf < u[:, None]).sum(1)
        x[miss] = grid[np.minimum(pick, grid.size - 1)]
    filled = Cohort(y=cohort.y, z=cohort.z, x=x, k=cohort.k, ids=cohort.ids)
    return fit_ml(filled, config.newton), x


def run_mi(cohort, pmap, config=None, rng=None, selection_kind=None):
    """MI estimate for a phase-2 cohort (``x`` NaN where unmeasured).

    ``pmap`` supplies the inclusion probabilities of the design; phase-2
    ``pi`` values from ``cohort.pi`` weight the exposure model.
    """
    if selection_kind == "RDS" or pmap is None:
        raise UnsupportedDesignError("multiple imputation needs closed-form inclusion probabilities "
                                     "(SRS, ODS or CSODS)")
    cfg = config or ImputationConfig()
    rng = np.random.default_rng() if rng is None else rng
    km1 = cohort.k - 1
    step1 = fit_acml(cohort, pmap, cfg.newton)
    if not step1.converged:
        raise ConvergenceError(f"step-1 ACML fit failed: {step1.message}")
    sel = cohort.s
    exposure = fit_exposure_ipw(cohort.selected(), cohort.pi[sel])
    grid = _grid(cohort.x[sel], cfg)
    miss = np.flatnonzero(~sel)
    streams = rng.spawn(cfg.num_imputations)
    ests, covs, failures, completed = [], [], [], []
    for m, sub in enumerate(streams):
        try:
            fit, x = _one_imputation(sub, step1, exposure, grid, cohort, miss, km1, cfg)
        except (ConvergenceError, DegenerateSupportError, np.linalg.LinAlgError) as exc:
            failures.append((m, str(exc)))
            continue
        if not fit.converged or not np.all(np.isfinite(fit.cov)):
            failures.append((m, fit.message or "non-finite covariance"))
            continue
        ests.append(fit.params)
        covs.append(fit.cov)
        if cfg.keep_completed:
            completed.append(x)
    if len(failures) > cfg.max_failure_rate * cfg.num_imputations:
        detail = "; ".join(f"#{m}: {msg}" for m, msg in failures[:5])
        raise ConvergenceError(
            f"{len(failures)} of {cfg.num_imputations} imputations failed ({detail})"
        )
    if failures:
        warnings.warn(f"{len(failures)} imputation(s) failed and were dropped", RuntimeWarning)
    pooled = rubin_pool(ests, covs, complete_df=len(cohort) - step1.params.size)
    pooled.k = cohort.k
    pooled.names = step1.names
    pooled.extra.update(step1=step1, exposure=exposure, grid=grid, failures=failures)
    if cfg.keep_completed:
        pooled.extra["completed"] = completed
    return pooled
