"""Population-mean estimators for an outcome that is missing at random.

Every estimator takes a :class:`~bartdr.design.Dataset` and returns an
:class:`Estimate`.  Imputation-based estimators fill missing outcomes with
predicted conditional means (no residual noise); noise belongs to the
multiple-imputation layer in :mod:`bartdr.uncertainty`.

BART-based estimators accept an optional ``cache`` dict.  Fits are keyed by
the covariates they use, so a probit propensity fit is computed once and
shared by every method run on the same dataset with the same stream.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bart import BartConfig, BartPosterior, backfit_continuous, backfit_probit, posterior_predict
from .design import Dataset, DataError
from .linalg import MixedModelFit, box_cox, logistic_fit, ols_fit, reml_spline_fit
from .rng import RngStream
from .splines import DegenerateScoreError, SplineBasisSpec, truncated_power_basis

log = logging.getLogger(__name__)

# stream ids for the independent fits inside one estimator call
_S_PROBIT, _S_MEAN, _S_BARTPS, _S_ZERO = 1, 2, 3, 4


@dataclass(frozen=True)
class ModelSpec:
    """Model choices shared by all estimators.

    ``propensity`` and ``mean`` are design-term lists for the logistic
    propensity model and the linear mean model (the latter doubles as the
    covariate function ``f`` in the spline estimators).  BART fits ignore the
    term lists and use the raw covariates named in ``prop_covariates`` /
    ``mean_covariates`` (all columns when ``None``).
    """

    propensity: tuple[str, ...] = ()
    mean: tuple[str, ...] = ()
    prop_covariates: tuple[str, ...] | None = None
    mean_covariates: tuple[str, ...] | None = None
    bart: BartConfig = BartConfig()
    basis: SplineBasisSpec = SplineBasisSpec()
    clip: float | None = None  # optional lower bound on AIPWT propensities; off by default

    def __post_init__(self):
        object.__setattr__(self, "propensity", tuple(self.propensity))
        object.__setattr__(self, "mean", tuple(self.mean))
        for nm in ("prop_covariates", "mean_covariates"):
            v = getattr(self, nm)
            if v is not None:
                object.__setattr__(self, nm, tuple(v))


@dataclass
class Estimate:
    mu_hat: float
    method: str
    imputed: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _complete(data: Dataset, fill: np.ndarray) -> np.ndarray:
    """Observed outcomes where available, ``fill`` elsewhere."""
    return np.where(data.observed, data.y, fill)


def _imputed(data: Dataset, fill, method, **extra) -> Estimate:
    yc = _complete(data, fill)
    return Estimate(float(np.mean(yc)), method, yc, extra)


def _check_terms(terms, what):
    if not terms:
        raise DataError(f"{what} design is empty; give at least an intercept term")


# ---------------------------------------------------------------------------
# Parametric estimators


def estimate_cc(data: Dataset) -> Estimate:
    """Complete-case mean of the observed outcomes."""
    return Estimate(float(np.mean(data.y[data.observed])), "CC")


def impute_mlr(data: Dataset, terms) -> Estimate:
    """Regression imputation: OLS on the observed rows, fitted means for the rest."""
    _check_terms(terms, "mean")
    X = data.design(terms)
    obs = data.observed
    fit = ols_fit(X[obs], data.y[obs], names=list(terms))
    return _imputed(data, fit.predict(X), "MLR", fit=fit)


def estimate_aipwt(data: Dataset, z, mhat, clip: float | None = None) -> Estimate:
    """Augmented inverse-propensity-weighted mean in residual form.

    ``mean(r / z * (y - mhat) + mhat)``.  Propensities are used as given
    unless ``clip`` sets a floor.
    """
    z = np.asarray(z, dtype=float)
    mhat = np.asarray(mhat, dtype=float)
    if z.shape != (data.n,) or mhat.shape != (data.n,):
        raise DataError("z and mhat must have one entry per row")
    if clip is not None:
        z = np.maximum(z, clip)
    obs = data.observed
    if np.any(z[obs] <= 0):
        raise ValueError("propensity is zero for an observed row; the inverse weight is undefined")
    if np.any(z > 1) or np.any(~np.isfinite(z)):
        raise ValueError("propensities must lie in (0, 1]")
    resid = np.zeros(data.n)
    resid[obs] = (data.y[obs] - mhat[obs]) / z[obs]
    terms = resid + mhat
    return Estimate(float(np.mean(terms)), "AIPWT", None, {"z": z, "mhat": mhat, "terms": terms})


def logistic_propensity(data: Dataset, terms) -> np.ndarray:
    _check_terms(terms, "propensity")
    X = data.design(terms)
    fit = logistic_fit(X, data.r)
    return fit.predict(X)


def estimate_aipwt_glm(data: Dataset, spec: ModelSpec) -> Estimate:
    """AIPWT with a logistic propensity model and a linear mean model."""
    z = logistic_propensity(data, spec.propensity)
    mhat = impute_mlr(data, spec.mean).extra["fit"].predict(data.design(spec.mean))
    return estimate_aipwt(data, z, mhat, clip=spec.clip)


# ---------------------------------------------------------------------------
# Penalized spline of propensity prediction


@dataclass
class SplineImputer:
    """A fitted outcome model ``y ~ spline(z) + f(x)`` on the observed rows.

    ``design`` holds the full-sample columns (fixed part first).  When the
    score is degenerate the spline is dropped and ``fit`` is plain OLS.
    """

    design: np.ndarray
    coef: np.ndarray
    sigma2: float
    cov_unscaled: np.ndarray
    dof: int
    fallback: bool
    fit: MixedModelFit | None = None

    def predict(self) -> np.ndarray:
        return self.design @ self.coef

    def draw(self, gen: np.random.Generator) -> np.ndarray:
        """Predictions under one approximate posterior draw of ``(sigma^2, coef)``
        plus fresh residual noise."""
        s2 = self.dof * self.sigma2 / gen.chisquare(self.dof) if self.dof > 0 else self.sigma2
        cov = s2 * self.cov_unscaled
        coef = gen.multivariate_normal(self.coef, 0.5 * (cov + cov.T), method="cholesky")
        mean = self.design @ coef
        return mean + gen.normal(0.0, math.sqrt(s2), mean.shape)


def _f_columns(data: Dataset, f_terms):
    if f_terms is None:
        return np.empty((data.n, 0))
    return data.design([t for t in f_terms if t.strip() != "1"])


def spline_imputer(data: Dataset, z, f_terms=None,
                   basis: SplineBasisSpec = SplineBasisSpec()) -> SplineImputer:
    """Fit the penalized spline of ``z`` plus ``f`` on the observed rows by REML.

    Knots are spread over the range of the observed rows' scores.  The
    spline's intercept replaces any intercept in ``f_terms``.  A score with
    no spread falls back, with a warning, to OLS on ``f`` alone.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (data.n,):
        raise DataError("need one propensity score per row")
    obs = data.observed
    f = _f_columns(data, f_terms)
    yo = data.y[obs]
    try:
        # knots follow the scores of the rows the spline is fitted on
        if basis.knots is None:
            basis = basis.with_knots_for(z[obs])
        spl_fixed, spl_random = truncated_power_basis(z, basis)
    except DegenerateScoreError as exc:
        log.warning("%s; falling back to regression on the covariate function only", exc)
        X = np.hstack([np.ones((data.n, 1)), f])
        names = ["1"] + [t for t in (f_terms or []) if t.strip() != "1"]
        fit = ols_fit(X[obs], yo, names=names)
        cov = np.linalg.pinv(X[obs].T @ X[obs])
        return SplineImputer(X, fit.coef, fit.resid_var, cov, int(obs.sum()) - X.shape[1], True)
    fixed = np.hstack([spl_fixed, f])
    fit = reml_spline_fit(fixed[obs], spl_random[obs], yo)
    design = np.hstack([fixed, spl_random])
    return SplineImputer(design, fit.coef, fit.sigma2, fit.cov_unscaled,
                         int(obs.sum()) - fixed.shape[1], False, fit)


def fit_pspp(data: Dataset, z, f_terms=None, basis: SplineBasisSpec = SplineBasisSpec(),
             method: str = "PSPP") -> Estimate:
    """Impute missing outcomes from a penalized spline in the propensity ``z``
    plus an optional parametric covariate function ``f``."""
    imp = spline_imputer(data, z, f_terms, basis)
    return _imputed(data, imp.predict(), method, z=np.asarray(z, float), fallback=imp.fallback,
                    imputer=imp)


def estimate_pspp(data: Dataset, spec: ModelSpec) -> Estimate:
    """PSPP with a logistic propensity model and ``f`` taken from the mean design."""
    z = logistic_propensity(data, spec.propensity)
    return fit_pspp(data, z, spec.mean, spec.basis)


# ---------------------------------------------------------------------------
# BART-based estimators


def _cols(data: Dataset, names):
    return data.x if names is None else data.columns(names)


def probit_propensity(data: Dataset, spec: ModelSpec, rng: RngStream, cache=None) -> BartPosterior:
    """Probit BART of the response indicator on the propensity covariates."""
    key = ("probit", spec.prop_covariates, spec.bart)
    if cache is not None and key in cache:
        return cache[key]
    post = backfit_probit(_cols(data, spec.prop_covariates), data.r, spec.bart,
                          rng.child(_S_PROBIT))
    if cache is not None:
        cache[key] = post
    return post


def bart_propensity(data: Dataset, spec: ModelSpec, rng: RngStream, mode="mean",
                    cache=None) -> np.ndarray:
    """``Z* = Phi(G(x))``: posterior mean, or one stored draw when ``mode`` is an index."""
    return posterior_predict(probit_propensity(data, spec, rng, cache), None, mode)


def _bart_outcome(data: Dataset, x: np.ndarray, config: BartConfig, rng: RngStream):
    """Continuous BART on the observed rows, tracking the missing rows.

    Returns the posterior and an ``(draws, n)`` array of predictions for all rows.
    """
    obs = data.observed
    post = backfit_continuous(x[obs], data.y[obs], config, rng, x_pred=x[~obs])
    full = np.empty((config.draws, data.n))
    full[:, obs] = post.train_draws
    if (~obs).any():
        full[:, ~obs] = post.pred_draws
    return post, full


def bart_outcome(data: Dataset, spec: ModelSpec, rng: RngStream, cache=None):
    key = ("bart", spec.mean_covariates, spec.bart)
    if cache is not None and key in cache:
        return cache[key]
    res = _bart_outcome(data, _cols(data, spec.mean_covariates), spec.bart, rng.child(_S_MEAN))
    if cache is not None:
        cache[key] = res
    return res


def estimate_psbpp(data: Dataset, spec: ModelSpec, rng: RngStream, mode="mean",
                   cache=None) -> Estimate:
    """PSPP with the BART propensity ``Z*`` in place of the logistic score."""
    z = bart_propensity(data, spec, rng, mode, cache)
    return fit_pspp(data, z, spec.mean, spec.basis, method="PSBPP")


def estimate_aipwt_bart(data: Dataset, spec: ModelSpec, rng: RngStream, cache=None) -> Estimate:
    """AIPWT with both the propensity and the mean model fitted by BART."""
    z = bart_propensity(data, spec, rng, "mean", cache)
    _, full = bart_outcome(data, spec, rng, cache)
    est = estimate_aipwt(data, z, full.mean(axis=0), clip=spec.clip)
    est.method = "AIPWT-BART"
    return est


def estimate_bart_direct(data: Dataset, spec: ModelSpec, rng: RngStream, cache=None) -> Estimate:
    """Impute missing outcomes by the BART posterior mean."""
    post, full = bart_outcome(data, spec, rng, cache)
    return _imputed(data, full.mean(axis=0), "BART", posterior=post, draws=full)


def bartps_outcome(data: Dataset, spec: ModelSpec, z, rng: RngStream):
    """Continuous BART on the mean covariates with ``z`` appended as a column."""
    x = np.column_stack([_cols(data, spec.mean_covariates), z])
    return _bart_outcome(data, x, spec.bart, rng.child(_S_BARTPS))


def estimate_bartps(data: Dataset, spec: ModelSpec, rng: RngStream, mode="mean",
                    cache=None) -> Estimate:
    """BART outcome model with the BART propensity ``Z*`` as an extra covariate."""
    z = bart_propensity(data, spec, rng, mode, cache)
    key = ("bartps", spec.prop_covariates, spec.mean_covariates, spec.bart, mode)
    if cache is not None and key in cache:
        post, full = cache[key]
    else:
        post, full = bartps_outcome(data, spec, z, rng)
        if cache is not None:
            cache[key] = (post, full)
    return _imputed(data, full.mean(axis=0), "BARTps", z=z, posterior=post, draws=full)


# ---------------------------------------------------------------------------
# Registry used by the uncertainty layer, the simulation harness and the CLI


def run_method(name: str, data: Dataset, spec: ModelSpec, rng: RngStream, cache=None) -> Estimate:
    """Dispatch by method tag (case-insensitive)."""
    key = name.upper()
    if key == "CC":
        return estimate_cc(data)
    if key == "MLR":
        return impute_mlr(data, spec.mean)
    if key == "AIPWT":
        return estimate_aipwt_glm(data, spec)
    if key == "PSPP":
        return estimate_pspp(data, spec)
    if key == "PSBPP":
        return estimate_psbpp(data, spec, rng, cache=cache)
    if key in ("AIPWT-BART", "AIPWT_BART"):
        return estimate_aipwt_bart(data, spec, rng, cache=cache)
    if key == "BART":
        return estimate_bart_direct(data, spec, rng, cache=cache)
    if key == "BARTPS":
        return estimate_bartps(data, spec, rng, cache=cache)
    raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


METHODS = ("CC", "MLR", "PSPP", "AIPWT", "PSBPP", "AIPWT-BART", "BART", "BARTps")
BART_METHODS = ("PSBPP", "AIPWT-BART", "BART", "BARTps")


# ---------------------------------------------------------------------------
# Two-part imputation for semicontinuous outcomes


PIPELINE_METHODS = ("PSPP", "AIPWT", "PSBPP", "BARTps")


def two_part_boxcox_pipeline(data: Dataset, method: str, spec: ModelSpec,
                             rng: RngStream) -> Estimate:
    """Impute a non-negative outcome with a point mass at zero.

    1. A probit BART classifier, fitted on observed rows, predicts which
       missing rows are positive; rows with probability below 0.5 get 0.
    2. A Box-Cox exponent is estimated on the observed positive outcomes
       (regressed on the mean covariates) and shifted up by one.
    3. ``method`` imputes the remaining missing rows on the transformed scale.
       AIPWT does not impute, so its mean-model predictions are used.
    4. Negative transformed imputations become 0; the rest are back-transformed.
    """
    tag = next((m for m in PIPELINE_METHODS if m.upper() == method.upper()), None)
    if tag is None:
        raise ValueError(f"pipeline method must be one of {', '.join(PIPELINE_METHODS)}")
    obs = data.observed
    yo = data.y[obs]
    if np.any(yo < 0):
        raise DataError("two-part pipeline needs non-negative outcomes")
    fill = np.zeros(data.n)
    if not np.any(yo > 0):
        return _imputed(data, fill, f"two-part {tag}", positive=np.zeros(data.n, bool))
    xz = _cols(data, spec.mean_covariates)
    pos_obs = yo > 0
    if pos_obs.all():
        p_pos = np.ones(int((~obs).sum()))
    else:
        clf = backfit_probit(xz[obs], pos_obs.astype(float), spec.bart, rng.child(_S_ZERO),
                             x_pred=xz[~obs])
        p_pos = posterior_predict(clf, xz[~obs]) if (~obs).any() else np.empty(0)
    positive = np.zeros(data.n, bool)
    positive[obs] = pos_obs
    miss_idx = np.flatnonzero(~obs)
    positive[miss_idx[p_pos >= 0.5]] = True
    sub = np.flatnonzero(positive)
    if not (~obs[sub]).any():
        return _imputed(data, fill, f"two-part {tag}", positive=positive)
    bc_design = np.column_stack([np.ones(int(pos_obs.sum())), xz[obs][pos_obs]])
    bc = box_cox(yo[pos_obs], design=bc_design)
    y_t = np.full(data.n, np.nan)
    y_t[obs & positive] = bc.transform(data.y[obs & positive])
    part = Dataset(y_t[sub], data.r[sub], data.x[sub], data.names, data.levels)
    if tag == "AIPWT":
        fit = impute_mlr(part, spec.mean).extra["fit"]
        t_hat = fit.predict(part.design(spec.mean))
    else:
        t_hat = run_method(tag, part, spec, rng).imputed
    t_miss = t_hat[part.r == 0]
    vals = np.zeros(t_miss.size)
    ok = t_miss >= 0
    lam = bc.lam_tilde
    t_ok = t_miss[ok]
    if lam < 0:
        # the inverse transform only exists below -1/lam
        bound = -1.0 / lam
        if np.any(t_ok >= bound):
            log.warning("clamping %d transformed imputations to the inverse-transform bound",
                        int(np.sum(t_ok >= bound)))
        t_ok = np.minimum(t_ok, bound * (1.0 - 1e-9))
    vals[ok] = bc.inverse(t_ok)
    fill[sub[part.r == 0]] = vals
    return _imputed(data, fill, f"two-part {tag}", positive=positive, boxcox=bc)
