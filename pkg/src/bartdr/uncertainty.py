"""Interval estimates: the resample-and-refit bootstrap pooled by Rubin's rules,
and multiple imputation with posterior-mean or posterior-draw propensities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .design import Dataset, DataError
from .estimators import (
    ModelSpec, SplineImputer, bart_propensity, bart_outcome, bartps_outcome,
    logistic_propensity, probit_propensity, run_method, spline_imputer,
)
from .linalg import ols_fit, logistic_fit
from .rng import RngStream

MAX_REDRAWS = 100


@dataclass(frozen=True)
class RubinCombined:
    qbar: float
    within: float
    between: float
    total: float
    df: float
    D: int


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    lower: float
    upper: float
    method: str
    D: int
    length: float = field(init=False)
    combined: RubinCombined | None = None

    def __post_init__(self):
        object.__setattr__(self, "length", self.upper - self.lower)

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def rubin_combine(estimates, within) -> RubinCombined:
    """Pool ``D`` completed-data estimates and their variances.

    ``T = W + (1 + 1/D) B`` with Rubin's degrees of freedom
    ``(D - 1)(1 + W / ((1 + 1/D) B))^2``, infinite when ``B = 0``.
    """
    q = np.asarray(estimates, dtype=float).ravel()
    w = np.broadcast_to(np.asarray(within, dtype=float), q.shape)
    D = q.size
    if D < 2:
        raise ValueError("Rubin's rules need at least two estimates")
    if np.any(w < 0):
        raise ValueError("within-imputation variances must be non-negative")
    qbar = float(q.mean())
    wbar = float(w.mean())
    b = float(q.var(ddof=1))
    inflated = (1.0 + 1.0 / D) * b
    total = wbar + inflated
    df = math.inf if inflated == 0 else (D - 1) * (1.0 + wbar / inflated) ** 2
    return RubinCombined(qbar, wbar, b, total, df, D)


def t_quantile(df: float, level: float = 0.95) -> float:
    p = 0.5 + level / 2
    return float(stats.norm.ppf(p) if math.isinf(df) else stats.t.ppf(p, df))


def rubin_interval(comb: RubinCombined, method: str, level: float = 0.95) -> IntervalEstimate:
    half = t_quantile(comb.df, level) * math.sqrt(comb.total)
    return IntervalEstimate(comb.qbar, comb.qbar - half, comb.qbar + half, method, comb.D, comb)


def completed_variance(est, data: Dataset) -> float:
    """Variance of the estimate as if the completed data were fully observed."""
    if est.imputed is not None:
        return float(np.var(est.imputed, ddof=1) / est.imputed.size)
    if "terms" in est.extra:
        t = est.extra["terms"]
        return float(np.var(t, ddof=1) / t.size)
    yo = data.y[data.observed]
    return float(np.var(yo, ddof=1) / yo.size) if yo.size > 1 else 0.0


# ---------------------------------------------------------------------------
# Bootstrap


def bootstrap_resample(data: Dataset, gen: np.random.Generator) -> Dataset:
    """Rows drawn with replacement; redrawn while no outcome is observed."""
    for _ in range(MAX_REDRAWS):
        rows = gen.integers(0, data.n, data.n)
        if data.r[rows].any():
            return data.take(rows)
    raise DataError(f"{MAX_REDRAWS} bootstrap resamples in a row had no observed outcome")


def bootstrap_grid(data: Dataset, jobs, D: int, rng: RngStream,
                   within: str = "zero") -> dict:
    """Refit several ``(key, method, spec)`` jobs on the same ``D`` resamples.

    Jobs share one fit cache per resample, so a BART fit needed by several
    methods (or by several specs with the same covariates) runs once.
    Returns ``{key: (estimates, within_variances)}``.
    """
    if D < 2:
        raise ValueError("need at least two resamples")
    if within not in ("zero", "completed"):
        raise ValueError("within must be 'zero' or 'completed'")
    jobs = list(jobs)
    est = {k: np.empty(D) for k, _, _ in jobs}
    wv = {k: np.zeros(D) for k, _, _ in jobs}
    for d in range(D):
        stream = rng.child(d)
        boot = bootstrap_resample(data, stream.child(0).generator())
        cache: dict = {}
        for key, method, spec in jobs:
            e = run_method(method, boot, spec, stream.child(1), cache)
            est[key][d] = e.mu_hat
            if within == "completed":
                wv[key][d] = completed_variance(e, boot)
    return {k: (est[k], wv[k]) for k, _, _ in jobs}


def bootstrap_estimates(data: Dataset, methods, spec: ModelSpec, D: int, rng: RngStream,
                        within: str = "zero") -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Refit every method on ``D`` resamples; ``{method: (estimates, within)}``."""
    return bootstrap_grid(data, [(m, m, spec) for m in methods], D, rng, within)


def bootstrap_interval(estimates, within, percentile: bool = False,
                       level: float = 0.95) -> IntervalEstimate:
    comb = rubin_combine(estimates, within)
    if percentile:
        a = (1 - level) / 2
        lo, hi = np.quantile(np.asarray(estimates), [a, 1 - a])
        lo, hi = min(lo, comb.qbar), max(hi, comb.qbar)
        return IntervalEstimate(comb.qbar, float(lo), float(hi), "bootstrap", comb.D, comb)
    return rubin_interval(comb, "bootstrap", level)


def heitjan_bootstrap(data: Dataset, method: str, spec: ModelSpec, D: int, rng: RngStream,
                      within: str = "zero", percentile: bool = False) -> IntervalEstimate:
    """Resample rows, refit the whole estimator, pool the ``D`` estimates by Rubin's rules.

    By default each resample contributes zero within-variance, so the interval
    reflects the between-resample spread only.  ``within="completed"`` adds the
    completed-data variance instead.  ``percentile=True`` returns the empirical
    2.5% and 97.5% quantiles rather than the t interval.
    """
    est, wv = bootstrap_estimates(data, [method], spec, D, rng, within)[method]
    return bootstrap_interval(est, wv, percentile)


# ---------------------------------------------------------------------------
# Multiple imputation

MI_MODES = ("posterior-mean", "posterior-draw")


def _draw_index(d: int, D: int, n_draws: int) -> int:
    """Spread ``D`` imputations evenly over the stored posterior draws."""
    return (d * n_draws) // D


def _ols_imputer(data: Dataset, terms) -> SplineImputer:
    X = data.design(terms)
    obs = data.observed
    fit = ols_fit(X[obs], data.y[obs], names=list(terms))
    cov = np.linalg.pinv(X[obs].T @ X[obs])
    return SplineImputer(X, fit.coef, fit.resid_var, cov, int(obs.sum()) - X.shape[1], True)


def _bart_fill(full: np.ndarray, sigma: float, idx: int, gen) -> np.ndarray:
    return full[idx] + gen.normal(0.0, sigma, full.shape[1])


def mi_completions(data: Dataset, method: str, spec: ModelSpec, D: int, mode: str,
                   rng: RngStream, cache=None):
    """Yield ``D`` completed outcome vectors for an imputation method."""
    if mode not in MI_MODES:
        raise ValueError(f"mode must be one of {MI_MODES}")
    draw = mode == "posterior-draw"
    key = method.upper()
    obs = data.observed
    if key == "CC":
        for _ in range(D):
            yield data.y[obs]
        return
    if key == "MLR":
        imp = _ols_imputer(data, spec.mean)
        for d in range(D):
            yield np.where(obs, data.y, imp.draw(rng.child(10, d).generator()))
        return
    if key in ("PSPP", "PSBPP"):
        if key == "PSBPP":
            post = probit_propensity(data, spec, rng, cache)
            score = lambda d: bart_propensity(  # noqa: E731
                data, spec, rng, _draw_index(d, D, post.n_draws) if draw else "mean", cache)
        else:
            z_mean = logistic_propensity(data, spec.propensity)
            score = lambda d: (_logistic_draw(data, spec, rng.child(11, d))  # noqa: E731
                               if draw else z_mean)
        base = None if draw else spline_imputer(data, score(0), spec.mean, spec.basis)
        for d in range(D):
            imp = base or spline_imputer(data, score(d), spec.mean, spec.basis)
            yield np.where(obs, data.y, imp.draw(rng.child(10, d).generator()))
        return
    if key == "BART":
        post, full = bart_outcome(data, spec, rng, cache)
        sig = post.sigma_trace[-post.n_draws:]
        for d in range(D):
            i = _draw_index(d, D, post.n_draws)
            yield np.where(obs, data.y, _bart_fill(full, sig[i], i, rng.child(10, d).generator()))
        return
    if key == "BARTPS":
        if not draw:
            z = bart_propensity(data, spec, rng, "mean", cache)
            post, full = bartps_outcome(data, spec, z, rng)
            sig = post.sigma_trace[-post.n_draws:]
        pp = probit_propensity(data, spec, rng, cache)
        for d in range(D):
            gen = rng.child(10, d).generator()
            if draw:
                z = bart_propensity(data, spec, rng, _draw_index(d, D, pp.n_draws), cache)
                post, full = bartps_outcome(data, spec, z, rng.child(12, d))
                sig = post.sigma_trace[-post.n_draws:]
                i = post.n_draws - 1
            else:
                i = _draw_index(d, D, post.n_draws)
            yield np.where(obs, data.y, _bart_fill(full, sig[i], i, gen))
        return
    raise ValueError(f"multiple imputation is not available for {method!r}; "
                     "it does not produce imputations (use the bootstrap)")


def _logistic_draw(data: Dataset, spec: ModelSpec, rng: RngStream) -> np.ndarray:
    """Propensities from a logistic fit on a bootstrap resample, an
    approximate posterior draw of the propensity model."""
    X = data.design(spec.propensity)
    gen = rng.generator()
    for _ in range(MAX_REDRAWS):
        rows = gen.integers(0, data.n, data.n)
        rr = data.r[rows]
        if 0 < rr.sum() < rr.size:
            fit = logistic_fit(X[rows], rr)
            return fit.predict(X)
    raise DataError("could not draw a resample with both response classes")


def mi_interval(data: Dataset, method: str, spec: ModelSpec, D: int, mode: str,
                rng: RngStream, cache=None) -> IntervalEstimate:
    """Multiple imputation pooled by Rubin's rules.

    Each of the ``D`` completed datasets gives the completed mean and the
    completed-sample variance over ``n``.  ``mode`` picks whether the
    propensity enters as its posterior mean or as one posterior draw per
    imputation (a bootstrap-refit logistic model for PSPP).
    """
    if D < 2:
        raise ValueError("need at least two imputations")
    est = np.empty(D)
    wv = np.empty(D)
    for d, yc in enumerate(mi_completions(data, method, spec, D, mode, rng, cache)):
        est[d] = yc.mean()
        wv[d] = np.var(yc, ddof=1) / yc.size if yc.size > 1 else 0.0
    return rubin_interval(rubin_combine(est, wv), "mi-" + mode.split("-")[1])
