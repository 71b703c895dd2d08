import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ordtwophase.errors import DataError, InvalidParameterError
from ordtwophase.residuals import FittedDistribution, fit_working_model, psr, psr_all, psr_from_cumulative


def test_psr_hand_values():
    f = [0.1, 0.2, 0.3, 0.4]
    assert psr(1, f) == pytest.approx(-0.9)
    assert psr(2, f) == pytest.approx(0.1 - 0.7)
    assert psr(4, f) == pytest.approx(0.6)
    assert psr(1, [1.0, 0.0]) == 0.0


def test_psr_rejects_bad_inputs():
    with pytest.raises(DataError):
        psr(5, [0.25] * 4)
    with pytest.raises(InvalidParameterError):
        FittedDistribution([0.5, 0.6])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_psr_mean_zero_and_bounded(seed, k):
    p = np.random.default_rng(seed).dirichlet(np.ones(k))
    p = p / p.sum()
    r = np.array([psr(j, p) for j in range(1, k + 1)])
    assert abs(float(r @ p)) < 1e-12
    assert np.all((r >= -1) & (r <= 1))


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(2)
    cum = np.sort(rng.random((30, 3)), axis=1)
    y = rng.integers(1, 5, 30)
    full = np.diff(np.concatenate((np.zeros((30, 1)), cum, np.ones((30, 1))), axis=1), axis=1)
    expected = [psr(int(y[i]), full[i] / full[i].sum()) for i in range(30)]
    np.testing.assert_allclose(psr_from_cumulative(y, cum), expected, atol=1e-12)


def test_working_model_excludes_exposure(cohort):
    fit = fit_working_model(cohort, [0, 1])
    assert fit.converged
    assert fit.names[-2:] == ["beta_z1", "beta_z2"]
    r = psr_all(fit, cohort, [0, 1])
    assert r.shape == (len(cohort),)
    assert np.all(np.abs(r) <= 1)
    # at the MLE the residuals average to (nearly) zero
    assert abs(r.mean()) < 0.02
    with pytest.raises(DataError):
        psr_all(fit, cohort, [0])
