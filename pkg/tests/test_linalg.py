import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, special

from bartdr.linalg import (
    RankDeficientError, SeparationError, box_cox, boxcox_inverse, boxcox_transform,
    logistic_fit, ols_fit, reml_spline_fit, ridge_solve,
)
from bartdr.splines import SplineBasisSpec, truncated_power_basis


# --- least squares -----------------------------------------------------------

def test_ols_exact_line():
    x = np.linspace(0, 1, 10)
    fit = ols_fit(np.column_stack([np.ones(10), x]), 2 + 3 * x)
    np.testing.assert_allclose(fit.coef, [2, 3], atol=1e-12)
    assert fit.resid_var == pytest.approx(0, abs=1e-20)


def test_ols_intercept_only_is_mean(gen):
    y = gen.normal(size=30)
    assert ols_fit(np.ones((30, 1)), y).coef[0] == pytest.approx(y.mean())


def test_ols_matches_pseudo_inverse(gen):
    X = gen.normal(size=(20, 3))
    y = gen.normal(size=20)
    np.testing.assert_allclose(ols_fit(X, y).coef, np.linalg.pinv(X) @ y, atol=1e-8)


def test_ols_names_collinear_column(gen):
    x = gen.normal(size=10)
    X = np.column_stack([np.ones(10), x, 2 * x])
    with pytest.raises(RankDeficientError, match="x_double|x|column"):
        ols_fit(X, x, names=["1", "x", "x_double"])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ols_fitted_values_invariant_to_reparameterisation(seed):
    g = np.random.default_rng(seed)
    X = np.column_stack([np.ones(25), g.normal(size=(25, 2))])
    y = g.normal(size=25)
    A = g.normal(size=(3, 3)) + 3 * np.eye(3)
    f1 = X @ ols_fit(X, y).coef
    f2 = (X @ A) @ ols_fit(X @ A, y).coef
    np.testing.assert_allclose(f1, f2, atol=1e-8)


# --- logistic ----------------------------------------------------------------

def test_logistic_intercept_only():
    assert logistic_fit(np.ones((4, 1)), np.array([1, 0, 1, 0])).coef[0] == pytest.approx(0, abs=1e-10)
    fit = logistic_fit(np.ones((4, 1)), np.array([1, 1, 1, 0]))
    assert fit.coef[0] == pytest.approx(math.log(3), abs=1e-8)
    assert fit.converged


def test_logistic_matches_direct_likelihood_maximisation(gen):
    X = np.column_stack([np.ones(200), gen.normal(size=(200, 2))])
    r = (gen.random(200) < special.expit(X @ [0.3, 1.0, -0.7])).astype(float)

    def nll(b):
        eta = X @ b
        return float(np.sum(np.logaddexp(0, eta) - r * eta))

    oracle = optimize.minimize(nll, np.zeros(3), method="BFGS", options={"gtol": 1e-10}).x
    np.testing.assert_allclose(logistic_fit(X, r).coef, oracle, atol=1e-4)


def test_logistic_probabilities_and_score_equation(gen):
    X = np.column_stack([np.ones(300), gen.normal(size=300)])
    r = (gen.random(300) < 0.4).astype(float)
    p = logistic_fit(X, r).predict(X)
    assert np.all((p > 0) & (p < 1))
    assert p.mean() == pytest.approx(r.mean(), abs=1e-8)


def test_logistic_separation_and_single_class():
    x = np.arange(10.0)
    X = np.column_stack([np.ones(10), x])
    with pytest.raises(SeparationError, match="regularised"):
        logistic_fit(X, (x > 4.5).astype(float))
    with pytest.raises(ValueError):
        logistic_fit(X, np.ones(10))


# --- REML penalized spline ---------------------------------------------------

def _basis(z, h=10):
    return truncated_power_basis(z, SplineBasisSpec(1, h))


def test_reml_linear_truth_shrinks_random_part(gen):
    z = np.sort(gen.random(200))
    y = 1 + 2 * z
    fixed, random = _basis(z)
    fit = reml_spline_fit(fixed, random, y)
    assert np.linalg.norm(random @ fit.random_coef) < 1e-3 * np.linalg.norm(y)
    np.testing.assert_allclose(fit.fixed_coef, [1, 2], atol=1e-6)


def test_reml_fixed_penalty_equals_generalised_ridge(gen):
    z = gen.random(100)
    y = np.sin(4 * z) + gen.normal(scale=0.2, size=100)
    fixed, random = _basis(z, 8)
    lam = 0.7
    fit = reml_spline_fit(fixed, random, y, penalty=lam**2)
    C = np.hstack([fixed, random])
    D = np.diag([0.0] * fixed.shape[1] + [1.0] * random.shape[1])
    oracle = np.linalg.solve(C.T @ C + lam**2 * D, C.T @ y)
    np.testing.assert_allclose(fit.coef, oracle, atol=1e-8)
    np.testing.assert_allclose(ridge_solve(fixed, random, y, lam**2), oracle, atol=1e-8)


def test_reml_infinite_penalty_is_ols_on_fixed_part(gen):
    z = gen.random(80)
    y = np.cos(3 * z) + gen.normal(scale=0.1, size=80)
    fixed, random = _basis(z)
    fit = reml_spline_fit(fixed, random, y, penalty=1e12)
    np.testing.assert_allclose(fit.fixed_coef, ols_fit(fixed, y).coef, atol=1e-6)


def test_reml_penalty_per_observation_falls_with_n():
    g = np.random.default_rng(3)
    z = g.random(2000)
    y = np.sin(6 * z) + g.normal(scale=0.3, size=2000)
    small = reml_spline_fit(*_basis(z[:100], 20), y[:100])
    large = reml_spline_fit(*_basis(z, 20), y)
    assert large.penalty / 2000 < small.penalty / 100


def test_reml_rejects_non_finite(gen):
    z = gen.random(30)
    fixed, random = _basis(z, 3)
    y = z.copy()
    y[4] = np.nan
    with pytest.raises(ValueError):
        reml_spline_fit(fixed, random, y)


def test_reml_recovers_smooth_curve(gen):
    z = gen.random(500)
    truth = np.sin(2 * np.pi * z)
    y = truth + gen.normal(scale=0.2, size=500)
    fixed, random = _basis(z, 20)
    fit = reml_spline_fit(fixed, random, y)
    assert np.sqrt(np.mean((fit.predict(fixed, random) - truth) ** 2)) < 0.08
    assert 0.02 < fit.sigma2 < 0.06


# --- Box-Cox -----------------------------------------------------------------

def test_box_cox_lognormal(gen):
    y = np.exp(gen.normal(1.0, 0.5, 10_000))
    fit = box_cox(y)
    assert -0.1 <= fit.lam_hat <= 0.1
    assert fit.lam_tilde == pytest.approx(fit.lam_hat + 1)


def test_box_cox_normal_data(gen):
    y = gen.normal(50, 5, 5000)
    assert 0.7 <= box_cox(y).lam_hat <= 1.3


def test_box_cox_with_design_uses_residuals(gen):
    x = gen.normal(size=3000)
    y = np.exp(1 + 0.8 * x + gen.normal(scale=0.3, size=3000))
    fit = box_cox(y, design=np.column_stack([np.ones_like(x), x]))
    assert -0.1 <= fit.lam_hat <= 0.1


@settings(max_examples=50, deadline=None)
@given(lam=st.floats(-2, 3), seed=st.integers(0, 1000))
def test_box_cox_round_trip(lam, seed):
    y = np.random.default_rng(seed).uniform(0.1, 20, 50)
    np.testing.assert_allclose(boxcox_inverse(boxcox_transform(y, lam), lam), y, rtol=1e-10)


def test_box_cox_rejects_non_positive():
    with pytest.raises(ValueError):
        box_cox(np.array([1.0, 2.0, 0.0]))
    with pytest.raises(ValueError):
        boxcox_transform(np.array([-1.0]), 0.5)
