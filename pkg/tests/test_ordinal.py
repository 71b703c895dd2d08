import warnings

import numpy as np
import pytest
from scipy.optimize import minimize

from ordtwophase.errors import DataError, InvalidParameterError
from ordtwophase.ordinal import (
    Cohort,
    PoParams,
    cell_probabilities,
    fit_ml,
    fit_po,
    log_likelihood,
    observed_information,
    score,
)

from conftest import make_cohort


def test_params_require_increasing_cutpoints():
    with pytest.raises(InvalidParameterError):
        PoParams([0.5, 0.2], [0.0])
    with pytest.raises(InvalidParameterError):
        PoParams([0.0, np.inf], [0.0])


def test_cell_probabilities_intercept_only():
    p = cell_probabilities(PoParams([-np.log(3), 0.0, np.log(3)], [0.0]), 0.0, np.zeros(0))
    np.testing.assert_allclose(p, [0.25, 0.25, 0.25, 0.25], atol=1e-15)


def test_cell_probabilities_broadcast_and_sum():
    rng = np.random.default_rng(0)
    params = PoParams([-1.0, 0.3, 2.0], [0.7, -0.4, 1.1])
    p = cell_probabilities(params, rng.standard_normal(50), rng.standard_normal((50, 2)))
    assert p.shape == (50, 4)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-14)


def test_loglik_minus_inf_warns():
    data = Cohort(y=[2, 1], z=[[0.0], [0.0]], x=[1000.0, -1000.0], k=2)
    with pytest.warns(RuntimeWarning):
        assert log_likelihood(PoParams([0.0], [1.0, 0.0]), data) == -np.inf


def _fd_grad(f, th, h=1e-6):
    return np.array([(f(th + h * e) - f(th - h * e)) / (2 * h) for e in np.eye(th.size)])


def test_score_and_information_match_finite_differences(cohort):
    params = PoParams([0.9, 1.6, 2.1], [0.3, -0.2, 0.1])
    f = lambda t: log_likelihood(PoParams.from_theta(t, 4), cohort)  # noqa: E731
    g = score(params, cohort)
    np.testing.assert_allclose(g, _fd_grad(f, params.theta), rtol=1e-6, atol=1e-5)
    sfun = lambda t: score(PoParams.from_theta(t, 4), cohort)  # noqa: E731
    H = np.array([(sfun(params.theta + 1e-6 * e) - sfun(params.theta - 1e-6 * e)) / 2e-6 for e in np.eye(6)])
    np.testing.assert_allclose(-observed_information(params, cohort), H, rtol=1e-5, atol=1e-4)


def test_fit_ml_matches_generic_optimizer(cohort):
    fit = fit_ml(cohort)
    assert fit.converged
    y0, X = cohort.y - 1, cohort.design()

    def nll(t):
        if np.any(np.diff(t[:3]) <= 0):
            return 1e10
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return -log_likelihood(PoParams.from_theta(t, 4), cohort)

    res = minimize(nll, fit.params + 0.05, method="Nelder-Mead",
                   options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 40000, "maxfev": 40000})
    np.testing.assert_allclose(res.x, fit.params, atol=1e-5)
    assert fit.names == ["alpha1", "alpha2", "alpha3", "beta_x", "beta_z1", "beta_z2"]
    assert np.all(np.linalg.eigvalsh(fit.cov) > 0)


def test_fit_recovers_truth_large_sample():
    data = make_cohort(3, n=40000, beta=(0.5, -1.5, -0.1), alphas=(1.5, 2.4, 2.9))
    fit = fit_ml(data)
    truth = np.array([1.5, 2.4, 2.9, 0.5, -1.5, -0.1])
    assert np.all(np.abs(fit.params - truth) < 4 * fit.se)


def test_fit_po_weights_equal_replication():
    rng = np.random.default_rng(5)
    y0 = rng.integers(0, 3, 200)
    X = rng.standard_normal((200, 1))
    w = rng.integers(1, 4, 200).astype(float)
    a = fit_po(y0, X, 3, weights=w)
    b = fit_po(np.repeat(y0, w.astype(int)), np.repeat(X, w.astype(int), axis=0), 3)
    np.testing.assert_allclose(a.params, b.params, atol=1e-8)


def test_missing_level_reports_nonconvergence():
    fit = fit_po(np.array([0, 0, 2, 2, 0, 2]), np.arange(6.0)[:, None], 4)
    assert not fit.converged
    assert "not observed" in fit.message


def test_fit_ml_rejects_missing_exposure(cohort):
    x = cohort.x.copy()
    x[0] = np.nan
    with pytest.raises(DataError):
        fit_ml(Cohort(y=cohort.y, z=cohort.z, x=x, k=4))
