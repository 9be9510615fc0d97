import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpjump.noise import Brownian, MarkSpace, TimeGrid, sample_ensemble
from smpjump.regression import (DegenerateDesign, FeatureContext, Observables, RegressionBasis,
                                fit_design, predictive_variance)


def _design(n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, n))
    return np.vstack([np.ones(n), x, x[0] * x[1]]), rng


def test_prediction_matches_least_squares():
    d, rng = _design(2000)
    y = 1.0 + 2.0 * d[1] - d[3] + rng.normal(size=2000)
    fit = fit_design(d, y)
    ref, *_ = np.linalg.lstsq(d.T, y, rcond=None)
    assert np.allclose(fit.predict(d), d.T @ ref, atol=1e-6)


def test_multiple_responses_match_single_fits():
    d, rng = _design(500, 1)
    ys = rng.normal(size=(3, 500))
    multi = fit_design(d, ys).predict(d)
    for r in range(3):
        assert np.allclose(multi[r], fit_design(d, ys[r]).predict(d), atol=1e-12)


def test_intercept_only_covariance_is_variance_of_mean():
    rng = np.random.default_rng(2)
    y = rng.normal(size=1000)
    fit = fit_design(np.ones((1, 1000)), y, with_cov=True)
    hc0 = np.sum((y - y.mean()) ** 2) / 1000 ** 2
    assert predictive_variance(fit, np.ones((1, 1000))) == pytest.approx(hc0, rel=1e-10)


def test_hc0_covariance_matches_sandwich_formula():
    d, rng = _design(800, 3)
    y = d[1] + rng.normal(size=800) * (1 + np.abs(d[2]))
    fit = fit_design(d, y, with_cov=True)
    x = d.T
    beta = np.linalg.solve(x.T @ x, x.T @ y)
    e = y - x @ beta
    inv = np.linalg.inv(x.T @ x)
    cov = inv @ (x.T * e ** 2) @ x @ inv
    g = x.mean(axis=0)
    assert predictive_variance(fit, d) == pytest.approx(g @ cov @ g, rel=1e-5)


def test_constant_and_duplicate_rows_are_dropped():
    d, rng = _design(300, 4)
    d2 = np.vstack([d, np.full(300, 5.0), d[1]])
    y = d[1] + rng.normal(size=300)
    fit = fit_design(d2, y)
    assert fit.n_coef == d.shape[0]
    assert np.allclose(fit.predict(d2), fit_design(d, y).predict(d), atol=1e-9)


def test_non_finite_response_rejected():
    d, _ = _design(10)
    with pytest.raises(ValueError):
        fit_design(d, np.full(10, np.nan))


def test_degenerate_design_is_an_error_type():
    assert issubclass(DegenerateDesign, ValueError)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(1, 3))
def test_design_row_count(degree, q):
    from math import comb
    e = sample_ensemble(Brownian(), TimeGrid(1.0, 2), MarkSpace.singleton(), 5, 0)
    extra = tuple((lambda ctx, k, j=j: np.full(ctx.n_paths, float(j + 1))) for j in range(q - 1))
    basis = RegressionBasis(("noise",), degree, extra)
    d = basis.design(FeatureContext(e), 1)
    assert d.shape == (comb(q + degree, degree), 5)
    assert np.all(d[0] == 1.0)


def test_observables_validation():
    with pytest.raises(ValueError):
        Observables(state_lag=-1)
    with pytest.raises(ValueError):
        Observables(marks=(3,)).mark_indices(2)


def test_state_feature_requires_states():
    e = sample_ensemble(Brownian(), TimeGrid(1.0, 2), MarkSpace.singleton(), 5, 0)
    with pytest.raises(ValueError):
        FeatureContext(e).feature("state", 0)
    with pytest.raises(ValueError):
        FeatureContext(e).feature("count", 0)
