import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ordtwophase.acml import InclusionProbabilityMap, fit_acml
from ordtwophase.designs import SamplingPlan, apply_selection, sample_ods, sample_rds, sample_srs
from ordtwophase.errors import DataError, UnsupportedDesignError
from ordtwophase.imputation import (
    ExposureModel,
    ImputationConfig,
    fit_exposure_ipw,
    imputation_weights,
    rubin_pool,
    run_mi,
)
from ordtwophase.ordinal import Cohort, PoParams, cell_probabilities

from conftest import make_cohort


def test_ipw_equal_weights_is_ols(cohort):
    m = fit_exposure_ipw(cohort, np.full(len(cohort), 0.3))
    D = np.column_stack((np.ones(len(cohort)), cohort.z))
    coef, res, *_ = np.linalg.lstsq(D, cohort.x, rcond=None)
    np.testing.assert_allclose(m.coef, coef, atol=1e-10)
    assert m.sigma == pytest.approx(np.sqrt(res[0] / (len(cohort) - 3)), rel=1e-10)


def test_ipw_null_slope():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((800, 2))
    c = Cohort(y=np.ones(800, int), z=z, x=rng.standard_normal(800), k=2)
    m = fit_exposure_ipw(c, rng.uniform(0.2, 1, 800))
    se = np.sqrt(np.diag(m.cov_coef))
    assert np.all(np.abs(m.coef[1:]) < 3 * se[1:])


def test_ipw_recovers_generator_correlation():
    c = make_cohort(31)
    sel = sample_ods(c, [210, 20, 20, 150], np.random.default_rng(31))
    ph = apply_selection(c, sel).selected()
    m = fit_exposure_ipw(ph, ph.pi)
    assert abs(m.coef[1] - 0.2) < 3 * np.sqrt(m.cov_coef[1, 1])


def test_ipw_rank_deficient():
    c = Cohort(y=np.ones(10, int), z=np.ones((10, 1)), x=np.arange(10.0), k=2)
    with pytest.raises(DataError):
        fit_exposure_ipw(c, np.ones(10))


def test_weights_without_outcome_effect_follow_density():
    grid = np.linspace(-2, 2, 7)
    om = ExposureModel([0.1, 0.5], 0.8, np.eye(2))
    w = imputation_weights(PoParams([-1, 0, 1], [0.0, 0.3]), om, 3, [0.4], grid)
    dens = stats.norm.pdf(grid, 0.1 + 0.5 * 0.4, 0.8)
    np.testing.assert_allclose(w, dens / dens.sum(), atol=1e-14)


def test_weights_flat_prior_limit():
    grid = np.linspace(-1, 1, 5)
    delta = PoParams([-0.5, 0.2, 1.0], [1.3, -0.4])
    om = ExposureModel([0.0, 0.0], 1e6, np.eye(2))
    w = imputation_weights(delta, om, 2, [0.7], grid)
    raw = cell_probabilities(delta, grid, np.full((5, 1), 0.7))[:, 1]
    np.testing.assert_allclose(w, raw / raw.sum(), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_weights_are_probability_vectors(seed):
    rng = np.random.default_rng(seed)
    alphas = np.sort(rng.normal(0, 2, 3))
    if np.any(np.diff(alphas) < 1e-6):
        return
    delta = PoParams(alphas, rng.normal(0, 2, 3))
    om = ExposureModel(rng.normal(0, 1, 3), float(rng.uniform(0.1, 3)), np.eye(3))
    w = imputation_weights(delta, om, int(rng.integers(1, 5)), rng.normal(0, 1, 2), np.linspace(-3, 3, 50))
    assert np.all(w >= 0)
    assert abs(w.sum() - 1) < 1e-12


def test_rubin_hand_values():
    p = rubin_pool([[0.0], [2.0]], [[[1.0]], [[1.0]]])
    assert p.params[0] == pytest.approx(1.0)
    assert p.extra["between"][0, 0] == pytest.approx(2.0)
    assert p.cov[0, 0] == pytest.approx(4.0)


def test_rubin_identical_and_order():
    est = [np.array([0.3, -1.2])] * 5
    cov = [np.diag([0.04, 0.09])] * 5
    p = rubin_pool(est, cov)
    np.testing.assert_array_equal(p.params, est[0])
    np.testing.assert_allclose(p.cov, cov[0], atol=1e-15)
    rng = np.random.default_rng(1)
    est = list(rng.normal(size=(6, 2)))
    cov = [np.diag(rng.uniform(0.1, 1, 2)) for _ in range(6)]
    a = rubin_pool(est, cov, complete_df=100)
    order = rng.permutation(6)
    b = rubin_pool([est[i] for i in order], [cov[i] for i in order], complete_df=100)
    np.testing.assert_allclose(a.params, b.params, atol=1e-14)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-14)
    assert np.all((a.extra["fmi"] > 0) & (a.extra["fmi"] < 1))
    with pytest.raises(DataError):
        rubin_pool(est, cov[:3])


@pytest.fixture(scope="module")
def mi_result():
    c = make_cohort(41)
    sel = sample_ods(c, [210, 20, 20, 150], np.random.default_rng(41))
    ph = apply_selection(c, sel)
    cfg = ImputationConfig(grid_size=60, num_imputations=8, keep_completed=True)
    return ph, run_mi(ph, sel.pmap, cfg, np.random.default_rng(5)), cfg


def test_mi_runs_and_records(mi_result):
    ph, res, cfg = mi_result
    assert res.converged
    grid = res.extra["grid"]
    assert grid[0] == ph.x[ph.s].min() and grid[-1] == ph.x[ph.s].max()
    assert res.names[3] == "beta_x"
    assert np.all(np.isfinite(res.se))
    assert np.all(res.extra["fmi"] >= 0)


def test_imputed_values_on_grid(mi_result):
    ph, res, _ = mi_result
    grid = res.extra["grid"]
    for x in res.extra["completed"]:
        np.testing.assert_array_equal(x[ph.s], ph.x[ph.s])
        assert np.all(np.isin(x[~ph.s], grid))


def test_mi_seed_reproducible(mi_result):
    ph, res, cfg = mi_result
    again = run_mi(ph, InclusionProbabilityMap(
        np.array([ph.pi[(ph.y == j)][0] for j in range(1, 5)])), cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(again.params, res.params)


def test_mi_no_missingness_equals_step_one(cohort):
    sel = sample_srs(cohort, 1.0, np.random.default_rng(0))
    ph = apply_selection(cohort, sel)
    res = run_mi(ph, sel.pmap, ImputationConfig(num_imputations=4), np.random.default_rng(1))
    np.testing.assert_array_equal(res.params, fit_acml(ph, sel.pmap).params)
    assert np.all(res.extra["between"] == 0)


def test_mi_refuses_rds(cohort):
    sel = sample_rds(cohort, SamplingPlan("RDS", prealloc=20, tail_low=160, tail_high=160), np.random.default_rng(0))
    with pytest.raises(UnsupportedDesignError):
        run_mi(apply_selection(cohort, sel), sel.pmap, ImputationConfig(), np.random.default_rng(0), "RDS")
