"""Probability-scale residuals (PSR) for ordinal outcomes.

For an observed level ``y`` and a fitted distribution ``F*`` the residual is
``P(Y* < y) - P(Y* > y)`` with ``Y* ~ F*``: one signed number in [-1, 1] per
subject, regardless of how many cutpoints the model has.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError, InvalidParameterError
from .ordinal import FitResult, NewtonConfig, fit_po


@dataclass(frozen=True)
class FittedDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, float)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or p.size < 2:
            raise InvalidParameterError("need a probability vector with at least 2 levels")
        if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-10:
            raise InvalidParameterError("not a probability vector")


def psr(y, fstar):
    """Residual of level ``y`` (1-based) under ``fstar``."""
    p = fstar.probs if isinstance(fstar, FittedDistribution) else FittedDistribution(fstar).probs
    k = p.size
    if not (1 <= int(y) <= k) or int(y) != y:
        raise DataError(f"outcome {y} outside 1..{k}")
    y = int(y)
    return float(p[: y - 1].sum() - p[y:].sum())


def psr_from_cumulative(y, cum):
    """Vectorized PSR from cumulative probabilities ``cum[i, j] = P(Y* <= j+1)``.

    ``cum`` has ``k - 1`` columns; ``y`` is 1-based.
    """
    y = np.asarray(y, np.intp)
    n = y.size
    full = np.concatenate((np.zeros((n, 1)), cum, np.ones((n, 1))), axis=1)
    below = full[np.arange(n), y - 1]  # P(Y* <= y-1)
    at_or_below = full[np.arange(n), y]  # P(Y* <= y)
    return below - (1.0 - at_or_below)


def fit_working_model(cohort, covariates, config=None):
    """PO fit of ``y`` on the listed ``z`` columns only (no exposure)."""
    covariates = list(covariates)
    Zw = cohort.z[:, covariates] if covariates else np.zeros((len(cohort), 0))
    fit = fit_po(cohort.y - 1, Zw, cohort.k, config=config or NewtonConfig())
    fit.names = [f"alpha{j}" for j in range(1, cohort.k)] + [f"beta_z{c + 1}" for c in covariates]
    fit.extra["covariates"] = covariates
    return fit


def psr_all(fit, data, covariates):
    """Per-subject PSR under a working fit on the given ``z`` columns."""
    covariates = list(covariates)
    if not isinstance(fit, FitResult):
        raise TypeError("fit must be a FitResult")
    declared = fit.extra.get("covariates")
    n_beta = fit.params.size - (fit.k - 1)
    if n_beta != len(covariates) or (declared is not None and list(declared) != covariates):
        raise DataError(
            f"working fit has {n_beta} slopes for covariates {declared}, got {covariates}"
        )
    if fit.k != data.k:
        raise DataError("outcome levels of fit and data differ")
    eta = data.z[:, covariates] @ fit.beta if covariates else np.zeros(len(data))
    cum = expit(fit.alphas[None, :] + eta[:, None])
    return psr_from_cumulative(data.y, cum)
