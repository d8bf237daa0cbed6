import numpy as np
import pytest
from scipy import special

from bartdr.design import Dataset, DataError
from bartdr.estimators import (
    METHODS, ModelSpec, estimate_aipwt, estimate_aipwt_bart, estimate_bart_direct,
    estimate_bartps, estimate_cc, estimate_pspp, estimate_psbpp, fit_pspp, impute_mlr,
    run_method, two_part_boxcox_pipeline, _bart_outcome,
)
from bartdr.rng import RngStream
from bartdr.simulation import gen_linear, regime_designs

from conftest import DESK, QUICK


def _data(y, r, x):
    x = np.asarray(x, float)
    return Dataset(np.asarray(y, float), np.asarray(r), x.reshape(len(y), -1))


def _mar_sample(n, seed, p_obs=None):
    g = RngStream(seed).generator()
    x = g.normal(size=(n, 2))
    y = 1.0 + x[:, 0] - 0.5 * x[:, 1] + g.normal(size=n)
    z = special.expit(0.3 + 0.8 * x[:, 0]) if p_obs is None else np.full(n, p_obs)
    r = (g.random(n) < z).astype(int)
    return Dataset(np.where(r == 1, y, np.nan), r, x), y, z


MAIN = ModelSpec(("1", "x1", "x2"), ("1", "x1", "x2"), bart=QUICK)


# --- complete case and regression imputation ----------------------------------

def test_cc_hand_case():
    assert estimate_cc(_data([1, 2, 3, 4], [1, 1, 0, 0], [0, 0, 0, 0])).mu_hat == 1.5


def test_cc_without_missingness_is_sample_mean():
    y = np.array([3.0, 5.0, 10.0])
    assert estimate_cc(_data(y, [1, 1, 1], [0, 1, 2])).mu_hat == pytest.approx(y.mean())


def test_mlr_exact_line():
    d = _data([1, 2, np.nan, np.nan], [1, 1, 0, 0], [0, 1, 2, 3])
    est = impute_mlr(d, ["1", "x1"])
    np.testing.assert_allclose(est.imputed, [1, 2, 3, 4], atol=1e-12)
    assert est.mu_hat == pytest.approx(2.5, abs=1e-12)


def test_mlr_saturated_model_recovers_completed_mean():
    g = np.random.default_rng(3)
    x = g.normal(size=(50, 1))
    y = 2 - 3 * x[:, 0]
    r = (g.random(50) < 0.6).astype(int)
    est = impute_mlr(_data(np.where(r == 1, y, np.nan), r, x), ["1", "x1"])
    assert est.mu_hat == pytest.approx(y.mean(), abs=1e-10)


def test_empty_design_rejected():
    d, _, _ = _mar_sample(40, 1)
    with pytest.raises(DataError):
        impute_mlr(d, [])


# --- AIPWT ----------------------------------------------------------------------

def test_aipwt_hand_case():
    d = _data([2, 4, np.nan, np.nan], [1, 1, 0, 0], [0, 1, 2, 3])
    est = estimate_aipwt(d, [0.5, 0.8, 0.5, 0.8], [1, 3, 5, 7])
    assert est.mu_hat == 4.8125


def test_aipwt_without_missingness():
    y = np.array([1.0, 4.0, 2.0, 7.0])
    d = _data(y, [1, 1, 1, 1], [0, 1, 2, 3])
    assert estimate_aipwt(d, np.ones(4), np.zeros(4)).mu_hat == pytest.approx(y.mean())
    assert estimate_aipwt(d, np.ones(4), np.arange(4.0)).mu_hat == pytest.approx(y.mean())


def test_aipwt_oracle_mean_model_ignores_propensity():
    d, y, _ = _mar_sample(200, 2)
    g = np.random.default_rng(0)
    for _ in range(3):
        z = g.uniform(0.1, 1.0, 200)
        assert estimate_aipwt(d, z, y).mu_hat == pytest.approx(y.mean(), abs=1e-12)


def test_aipwt_rejects_zero_propensity_on_observed_row():
    d = _data([2, 4, np.nan], [1, 1, 0], [0, 1, 2])
    with pytest.raises(ValueError):
        estimate_aipwt(d, [0.0, 0.5, 0.5], [0, 0, 0])
    with pytest.raises(ValueError):
        estimate_aipwt(d, [0.5, 1.2, 0.5], [0, 0, 0])
    # a floor makes it usable, and a zero on a missing row is harmless
    assert np.isfinite(estimate_aipwt(d, [0.0, 0.5, 0.5], [0, 0, 0], clip=0.1).mu_hat)
    assert np.isfinite(estimate_aipwt(d, [0.5, 0.5, 0.0], [0, 0, 0]).mu_hat)


# --- spline of propensity prediction -------------------------------------------

def test_pspp_constant_score_equals_mlr(caplog):
    d, _, _ = _mar_sample(300, 4)
    est = fit_pspp(d, np.full(300, 0.6), ["1", "x1", "x2"])
    assert est.extra["fallback"]
    assert est.mu_hat == pytest.approx(impute_mlr(d, ["1", "x1", "x2"]).mu_hat, abs=1e-10)


def test_pspp_noise_score_close_to_mlr():
    d, _, _ = _mar_sample(1000, 5)
    z = RngStream(6).generator().uniform(0.2, 0.8, 1000)
    pspp = fit_pspp(d, z, ["1", "x1", "x2"]).mu_hat
    mlr = impute_mlr(d, ["1", "x1", "x2"]).mu_hat
    assert abs(pspp - mlr) < 0.05


def test_pspp_balancing_with_correct_propensity_and_no_covariate_function():
    biases = []
    for rep in range(100):
        s = gen_linear(5000, RngStream(900 + rep))
        z = s.propensity  # true score; f omitted
        biases.append(fit_pspp(s.data, z, None).mu_hat - 10.0)
    print(f"PSPP with true score, f omitted: bias {np.mean(biases):+.4f}")
    assert abs(np.mean(biases)) < 0.08


def test_pspp_uses_logistic_score():
    s = gen_linear(1000, RngStream(7))
    spec = regime_designs("linear", "prop-correct").spec()
    est = estimate_pspp(s.data, spec)
    assert not est.extra["fallback"]
    assert 8.0 < est.mu_hat < 12.0


# --- BART-based estimators --------------------------------------------------------

def test_psbpp_with_flat_propensity_behaves_like_mlr():
    d, _, _ = _mar_sample(1000, 8, p_obs=0.5)
    spec = ModelSpec(("1", "x1", "x2"), ("1", "x1", "x2"), bart=DESK)
    est = estimate_psbpp(d, spec, RngStream(1))
    mlr = impute_mlr(d, spec.mean).mu_hat
    print(f"PSBPP {est.mu_hat:.4f} vs MLR {mlr:.4f}")
    assert abs(est.mu_hat - mlr) < 0.1


def test_bart_direct_constant_outcome():
    d = _data(np.where(np.arange(60) % 3 == 0, np.nan, 4.2), (np.arange(60) % 3 != 0).astype(int),
              np.random.default_rng(1).random((60, 2)))
    est = estimate_bart_direct(d, MAIN, RngStream(2))
    assert est.mu_hat == pytest.approx(4.2, abs=0.01)


def test_bartps_constant_score_matches_bart_direct():
    d, _, _ = _mar_sample(400, 9)
    stream = RngStream(3)
    direct = estimate_bart_direct(d, MAIN, stream).mu_hat
    # the same chain with an uninformative extra column
    x = np.column_stack([d.x, np.full(d.n, 0.5)])
    _, full = _bart_outcome(d, x, MAIN.bart, stream.child(2))
    flat = float(np.mean(np.where(d.observed, d.y, full.mean(axis=0))))
    assert abs(direct - flat) < 0.05
    assert np.isfinite(estimate_bartps(d, MAIN, stream).mu_hat)


def test_aipwt_bart_without_missingness():
    g = np.random.default_rng(2)
    x = g.random((50, 2))
    y = g.normal(size=50)
    d = _data(y, np.ones(50, int), x)
    # a single-class response is rejected by the probit model before any weighting
    with pytest.raises(ValueError):
        estimate_aipwt_bart(d, MAIN, RngStream(1))
    z = np.ones(50)
    assert estimate_aipwt(d, z, g.normal(size=50)).mu_hat == pytest.approx(y.mean())


def test_shared_fit_cache():
    d, _, _ = _mar_sample(200, 10)
    cache = {}
    a = run_method("PSBPP", d, MAIN, RngStream(4), cache)
    n_fits = len(cache)
    b = run_method("AIPWT-BART", d, MAIN, RngStream(4), cache)
    fresh = run_method("AIPWT-BART", d, MAIN, RngStream(4))
    assert n_fits == 1 and len(cache) == 2
    assert b.mu_hat == fresh.mu_hat
    assert a.mu_hat == run_method("psbpp", d, MAIN, RngStream(4)).mu_hat


def test_unknown_method():
    d, _, _ = _mar_sample(40, 1)
    with pytest.raises(ValueError, match="unknown method"):
        run_method("IPW", d, MAIN, RngStream(0))


# --- invariants shared by all methods -----------------------------------------------

@pytest.fixture(scope="module")
def small_linear():
    return gen_linear(300, RngStream(55)).data


@pytest.mark.parametrize("method", METHODS)
def test_location_equivariance(method, small_linear):
    d = small_linear
    spec = regime_designs("linear", "both-wrong").spec(QUICK)
    c = 37.25
    a = run_method(method, d, spec, RngStream(5))
    b = run_method(method, d.with_y(d.y + c), spec, RngStream(5))
    assert b.mu_hat - a.mu_hat == pytest.approx(c, abs=1e-6)


@pytest.mark.parametrize("method", METHODS)
def test_observed_entries_untouched(method, small_linear):
    d = small_linear
    spec = regime_designs("linear", "both-correct").spec(QUICK)
    est = run_method(method, d, spec, RngStream(6))
    if est.imputed is not None:
        obs = d.observed
        assert np.array_equal(est.imputed[obs], d.y[obs])
        assert np.all(np.isfinite(est.imputed))


# --- two-part pipeline --------------------------------------------------------------

def test_pipeline_all_zero_outcomes():
    g = np.random.default_rng(0)
    r = (g.random(80) < 0.7).astype(int)
    d = _data(np.where(r == 1, 0.0, np.nan), r, g.random((80, 2)))
    est = two_part_boxcox_pipeline(d, "PSPP", MAIN, RngStream(1))
    assert est.mu_hat == 0.0
    assert np.all(est.imputed == 0.0)


def test_pipeline_negative_transformed_imputation_becomes_zero():
    # outcomes fall steeply in x1, so a linear fit on the log scale goes
    # negative for the missing rows with large x1
    g = np.random.default_rng(4)
    n = 300
    x = np.column_stack([np.linspace(0, 1, n), g.random(n)])
    y = np.exp(3.0 - 4.0 * x[:, 0]) * np.exp(g.normal(scale=0.05, size=n))
    r = np.where(x[:, 0] > 0.9, 0, 1)
    r[::7] = 0
    d = _data(np.where(r == 1, y, np.nan), r, x)
    spec = ModelSpec(("1", "x1"), ("1", "x1"), bart=QUICK)
    est = two_part_boxcox_pipeline(d, "AIPWT", spec, RngStream(2))
    lam = est.extra["boxcox"].lam_tilde
    t_hat = impute_mlr(d.with_y(np.where(d.observed, est.extra["boxcox"].transform(
        np.where(d.observed, d.y, 1.0)), np.nan)), spec.mean).imputed
    neg = (d.r == 0) & (t_hat < 0)
    assert neg.any(), f"construction should produce negative predictions (lambda {lam:.3f})"
    assert np.all(est.imputed[neg] == 0.0)
    assert np.all(est.imputed[(d.r == 0) & ~neg] > 0.0)
    assert np.array_equal(est.imputed[d.observed], d.y[d.observed])


def test_pipeline_rejects_negative_outcomes_and_unknown_method():
    d = _data([1.0, -2.0, np.nan] * 10, [1, 1, 0] * 10, np.arange(30.0))
    with pytest.raises(DataError):
        two_part_boxcox_pipeline(d, "PSPP", MAIN, RngStream(0))
    with pytest.raises(ValueError):
        two_part_boxcox_pipeline(d, "CC", MAIN, RngStream(0))


@pytest.mark.slow
def test_pipeline_zero_inflated_lognormal_mcar():
    errs = []
    for rep in range(50):
        g = RngStream(700 + rep).generator()
        n = 600
        x = g.normal(size=(n, 2))
        pos = g.random(n) < special.expit(0.5 + x[:, 0])
        y = np.where(pos, np.exp(1.0 + 0.5 * x[:, 1] + g.normal(scale=0.5, size=n)), 0.0)
        r = (g.random(n) < 0.7).astype(int)
        d = Dataset(np.where(r == 1, y, np.nan), r, x)
        spec = ModelSpec(("1", "x1", "x2"), ("1", "x1", "x2"), bart=QUICK)
        est = two_part_boxcox_pipeline(d, "PSPP", spec, RngStream(800 + rep))
        errs.append(est.mu_hat / y.mean() - 1.0)
    errs = np.array(errs)
    print(f"relative error over 50 replicates: mean {errs.mean():+.4f}, "
          f"mean absolute {np.abs(errs).mean():.4f}, max absolute {np.abs(errs).max():.4f}")
    assert np.abs(errs).mean() < 0.10
