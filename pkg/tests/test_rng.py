import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bartdr.rng import (
    RngStream, as_generator, sample_normal, sample_scaled_inv_chisq, sample_truncated_normal,
    sigma_prior_scale,
)


def test_stream_is_reproducible():
    a = RngStream(7, (1, 2)).generator().random(5)
    b = RngStream(7, (1, 2)).generator().random(5)
    assert np.array_equal(a, b)


def test_children_are_distinct():
    s = RngStream(7)
    draws = [s.child(i).generator().random() for i in range(4)] + [s.generator().random()]
    assert len(set(draws)) == 5


def test_int_stream_id_and_bad_seed():
    assert RngStream(1, 3).stream_id == (3,)
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(1, (-2,))


def test_as_generator_accepts_several_types():
    g = np.random.default_rng(0)
    assert as_generator(g) is g
    assert as_generator(5).random() == as_generator(RngStream(5)).random()


def test_normal_degenerate_and_negative_variance(gen):
    assert sample_normal(gen, 0.0, 0.0) == 0.0
    assert np.all(sample_normal(gen, 3.0, 0.0, 4) == 3.0)
    with pytest.raises(ValueError):
        sample_normal(gen, 0.0, -1.0)


def test_normal_second_argument_is_variance(gen):
    x = sample_normal(gen, 0.0, 0.5, 1_000_000)
    assert abs(x.mean()) < 0.005
    assert abs(x.var() - 0.5) < 0.01
    y = sample_normal(gen, 10.8125, 4.0, 1_000_000)
    assert abs(y.mean() - 10.8125) < 0.01


def test_truncated_normal_untruncated_is_standard_normal(gen):
    x = np.array([sample_truncated_normal(gen, 0.0, -math.inf, math.inf) for _ in range(100_000)])
    assert stats.kstest(x, "norm").pvalue > 0.001


def test_truncated_normal_half_normal_mean(gen):
    x = np.array([sample_truncated_normal(gen, 0.0, 0.0, math.inf) for _ in range(1_000_000)])
    assert np.all(x > 0)
    assert abs(x.mean() - math.sqrt(2 / math.pi)) < 0.003


def test_truncated_normal_far_tail_matches_scipy(gen):
    # mean 0 truncated to (5, inf): oracle is scipy's truncnorm
    x = np.array([sample_truncated_normal(gen, 0.0, 5.0, math.inf) for _ in range(20_000)])
    assert np.all(x > 5)
    assert stats.kstest(x, stats.truncnorm(5.0, np.inf).cdf).pvalue > 0.001


def test_truncated_normal_upper_tail_and_two_sided(gen):
    x = np.array([sample_truncated_normal(gen, 3.0, -math.inf, -4.0) for _ in range(5000)])
    assert np.all(x < -4.0)
    y = np.array([sample_truncated_normal(gen, 0.0, -1.0, 2.0) for _ in range(20_000)])
    assert np.all((y > -1) & (y < 2))
    assert stats.kstest(y, stats.truncnorm(-1.0, 2.0).cdf).pvalue > 0.001
    z = np.array([sample_truncated_normal(gen, 0.0, 40.0, 40.001) for _ in range(100)])
    assert np.all((z > 40.0) & (z < 40.001))


def test_truncated_normal_empty_interval(gen):
    with pytest.raises(ValueError):
        sample_truncated_normal(gen, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        sample_truncated_normal(gen, 0.0, 2.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(mu=st.floats(-20, 20), a=st.floats(-30, 30), w=st.floats(1e-3, 10))
def test_truncated_normal_support(mu, a, w):
    g = RngStream(1).generator()
    x = sample_truncated_normal(g, mu, a, a + w)
    assert a <= x <= a + w


def test_scaled_inv_chisq(gen):
    x = sample_scaled_inv_chisq(gen, 10.0, 2.0, 1_000_000)
    assert np.all(x > 0)
    assert abs(x.mean() - 2.5) < 0.02
    for bad in [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)]:
        with pytest.raises(ValueError):
            sample_scaled_inv_chisq(gen, *bad)


def test_sigma_prior_scale_calibration():
    nu, q, sd = 3.0, 0.9, 1.7
    lam = sigma_prior_scale(nu, q, sd)
    # P(sigma < sd) = P(nu*lam/chi2 < sd^2) = P(chi2 > nu*lam/sd^2)
    prob = stats.chi2.sf(nu * lam / sd**2, nu)
    assert prob == pytest.approx(q, abs=1e-10)
    with pytest.raises(ValueError):
        sigma_prior_scale(nu, 1.5, sd)
