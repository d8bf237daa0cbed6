"""Benchmark scenarios, misspecification regimes and the replicate loop that
turns estimator output into bias / RMSE / coverage / interval-length tables."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .bart import BartConfig
from .design import Dataset
from .estimators import BART_METHODS, METHODS, ModelSpec, run_method
from .rng import RngStream, sample_normal
from .splines import SplineBasisSpec
from .uncertainty import IntervalEstimate, bootstrap_grid, bootstrap_interval, mi_interval

log = logging.getLogger(__name__)

SCENARIOS = ("linear", "quadratic", "ks")
REGIMES = ("both-correct", "prop-correct", "mean-correct", "both-wrong")
ALL_METHODS = ("BD",) + METHODS
TRUE_MEAN = {"linear": 10.0, "quadratic": 10.0, "ks": 210.0}
MAX_FAILURE_RATE = 0.10


@dataclass(frozen=True)
class ScenarioDraw:
    data: Dataset
    y_full: np.ndarray
    propensity: np.ndarray
    latent: np.ndarray | None = None


def _with_missingness(x, names, y, z, gen, latent=None) -> ScenarioDraw:
    r = (gen.random(y.size) < z).astype(np.int8)
    if not r.any():
        r[int(np.argmax(z))] = 1  # vanishingly rare at the sizes used; keeps the dataset valid
    return ScenarioDraw(Dataset(np.where(r == 1, y, np.nan), r, x, names), y, z, latent)


def _interaction_covariates(n, gen):
    x1 = sample_normal(gen, 0.0, 0.5, n)
    x2 = x1 + sample_normal(gen, 0.25, 0.5, n)
    z = special.expit((0.15 + 0.75 * (x1 + x2) - 2.0 * x1 * x2) / 3.0)
    return x1, x2, z


def gen_linear(n: int, rng) -> ScenarioDraw:
    """Outcome linear in ``x1, x2`` and their product; population mean 10."""
    if n < 10:
        raise ValueError("n must be at least 10")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    x1, x2, z = _interaction_covariates(n, gen)
    y = 10.8125 + 0.75 * (x1 + x2) - 2.0 * x1 * x2 + sample_normal(gen, 0.0, 4.0, n)
    return _with_missingness(np.column_stack([x1, x2]), ("x1", "x2"), y, z, gen)


def gen_quadratic(n: int, rng) -> ScenarioDraw:
    """Same covariates and response model; the outcome has a squared product term."""
    if n < 10:
        raise ValueError("n must be at least 10")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    x1, x2, z = _interaction_covariates(n, gen)
    y = 11.875 + 0.75 * (x1 + x2) - 2.0 * (x1 * x2) ** 2 + sample_normal(gen, 0.0, 4.0, n)
    return _with_missingness(np.column_stack([x1, x2]), ("x1", "x2"), y, z, gen)


def ks_transform(u: np.ndarray) -> np.ndarray:
    """The observed nonlinear transformations of the latent covariates."""
    u1, u2, u3, u4 = u.T
    return np.column_stack([
        np.exp(u1) / 2.0,
        u2 / (1.0 + np.exp(u1)),
        (u1 * u3 / 25.0 + 0.6) ** 3,
        (u2 + u4 + 20.0) ** 2,
    ])


def gen_ks(n: int, rng) -> ScenarioDraw:
    """Latent normals drive response and outcome; analysts see transformed versions.

    The dataset carries both the observed ``x1..x4`` and the latent ``u1..u4``
    so that regimes can choose between them.
    """
    if n < 10:
        raise ValueError("n must be at least 10")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    u = gen.standard_normal((n, 4))
    z = special.expit(-u[:, 0] + 0.5 * u[:, 1] - 0.25 * u[:, 2] - 0.1 * u[:, 3])
    y = 210.0 + 27.4 * u[:, 0] + 13.7 * u[:, 1:].sum(axis=1) + gen.standard_normal(n)
    x = np.hstack([ks_transform(u), u])
    names = ("x1", "x2", "x3", "x4", "u1", "u2", "u3", "u4")
    return _with_missingness(x, names, y, z, gen, latent=u)


GENERATORS = {"linear": gen_linear, "quadratic": gen_quadratic, "ks": gen_ks}


@dataclass(frozen=True)
class Regime:
    tag: str
    propensity: tuple[str, ...]
    mean: tuple[str, ...]
    prop_covariates: tuple[str, ...]
    mean_covariates: tuple[str, ...]

    def spec(self, bart: BartConfig = BartConfig(), basis: SplineBasisSpec = SplineBasisSpec(),
             clip: float | None = None) -> ModelSpec:
        return ModelSpec(self.propensity, self.mean, self.prop_covariates, self.mean_covariates,
                         bart, basis, clip)


def regime_designs(scenario: str, tag: str) -> Regime:
    """Design terms for a (scenario, regime) pair.

    Misspecification drops the interaction term (linear and quadratic
    scenarios) or swaps the latent covariates for their observed
    transformations (KS scenario).  The BART covariates follow the same
    latent-versus-observed choice, so BART fits differ by regime only there.
    """
    if tag not in REGIMES:
        raise ValueError(f"unknown regime {tag!r}; choose from {', '.join(REGIMES)}")
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    prop_ok = tag in ("both-correct", "prop-correct")
    mean_ok = tag in ("both-correct", "mean-correct")
    if scenario == "ks":
        u = ("u1", "u2", "u3", "u4")
        x = ("x1", "x2", "x3", "x4")
        pc = u if prop_ok else x
        mc = u if mean_ok else x
        return Regime(tag, ("1",) + pc, ("1",) + mc, pc, mc)
    main = ("1", "x1", "x2")
    prop = main + ("x1*x2",) if prop_ok else main
    inter = "x1*x2" if scenario == "linear" else "x1^2*x2^2"
    mean = main + (inter,) if mean_ok else main
    return Regime(tag, prop, mean, ("x1", "x2"), ("x1", "x2"))


# ---------------------------------------------------------------------------
# Replicate loop


@dataclass(frozen=True)
class UncertaintySpec:
    mode: str = "bootstrap"  # bootstrap | mi-mean | mi-draw | none
    D: int = 200
    within: str = "zero"
    percentile: bool = False

    def __post_init__(self):
        if self.mode not in ("bootstrap", "mi-mean", "mi-draw", "none"):
            raise ValueError(f"unknown uncertainty mode {self.mode!r}")
        if self.mode != "none" and self.D < 2:
            raise ValueError("need at least two resamples or imputations")


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    regime: str
    method: str
    n: int
    replicates: int
    bias: float
    rmse: float
    coverage: float
    ail: float
    failures: int


@dataclass
class ExperimentResult:
    rows: list[MetricsRow]
    failures: list[dict] = field(default_factory=list)
    invalid: bool = False
    estimates: dict = field(default_factory=dict)  # (regime, method) -> per-replicate points


def _bd_interval(y_full: np.ndarray) -> IntervalEstimate:
    n = y_full.size
    m = float(y_full.mean())
    half = stats.t.ppf(0.975, n - 1) * float(np.std(y_full, ddof=1)) / math.sqrt(n)
    return IntervalEstimate(m, m - half, m + half, "t", 1)


def run_replicate(scenario: str, n: int, rep: int, methods, regimes, unc: UncertaintySpec,
                  master: RngStream, bart: BartConfig, basis: SplineBasisSpec,
                  clip: float | None = None) -> dict:
    """One replicate: generate, fit every (regime, method), attach intervals.

    Returns ``{(regime, method): (point, lower, upper) or error message}``.
    Under multiple imputation the point is the pooled mean of the completed
    datasets; otherwise it is the estimator applied to the generated data.
    Streams depend only on the replicate id, never on the regime, so fits
    that ignore the regime are identical across regimes.
    """
    stream = master.child(rep)
    draw = GENERATORS[scenario](n, stream.child(0))
    data = draw.data
    cache: dict = {}
    out: dict = {}
    specs = {tag: regime_designs(scenario, tag).spec(bart, basis, clip) for tag in regimes}
    points: dict = {}
    for tag in regimes:
        for m in methods:
            if m == "BD":
                ie = _bd_interval(draw.y_full) if unc.mode != "none" else None
                points[(tag, m)] = float(draw.y_full.mean())
                out[(tag, m)] = (points[(tag, m)], ie)
                continue
            try:
                points[(tag, m)] = run_method(m, data, specs[tag], stream.child(1), cache).mu_hat
            except Exception as exc:  # noqa: BLE001 - any estimator failure is logged and skipped
                out[(tag, m)] = f"{type(exc).__name__}: {exc}"
    todo = [(k, k[1], specs[k[0]]) for k in points if k[1] != "BD"]
    if unc.mode == "bootstrap" and todo:
        try:
            boot = bootstrap_grid(data, todo, unc.D, stream.child(2), unc.within)
            for k, _, _ in todo:
                est, wv = boot[k]
                out[k] = (points[k], bootstrap_interval(est, wv, unc.percentile))
        except Exception as exc:  # noqa: BLE001
            # a resample failure voids the intervals of this replicate
            for k, _, _ in todo:
                out[k] = f"bootstrap failed: {type(exc).__name__}: {exc}"
    else:
        mode = {"mi-mean": "posterior-mean", "mi-draw": "posterior-draw"}.get(unc.mode)
        for k, method, spec in todo:
            ie = None
            if mode is not None:
                try:
                    ie = mi_interval(data, method, spec, unc.D, mode, stream.child(3), cache)
                except ValueError as exc:
                    if "not available" not in str(exc):
                        out[k] = f"{type(exc).__name__}: {exc}"
                        continue
            # the multiple-imputation estimate is the pooled mean of the completions
            out[k] = (points[k] if ie is None else ie.point, ie)
    for k, v in list(out.items()):
        if isinstance(v, tuple):
            ie = v[1]
            out[k] = (v[0], math.nan, math.nan) if ie is None else (v[0], ie.lower, ie.upper)
    return out


def _run_one(args):
    return run_replicate(*args)


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("BARTDR_JOBS", "1")))
    except ValueError:
        return 1


def summarize(values: np.ndarray, lowers: np.ndarray, uppers: np.ndarray, truth: float):
    """Bias, RMSE, percent coverage and mean interval length of one cell."""
    if values.size == 0:
        return math.nan, math.nan, math.nan, math.nan
    err = values - truth
    bias = float(err.mean())
    rmse = float(math.sqrt(np.mean(err * err)))
    have = np.isfinite(lowers) & np.isfinite(uppers)
    if have.any():
        cov = float(100.0 * np.mean((lowers[have] <= truth) & (truth <= uppers[have])))
        ail = float(np.mean(uppers[have] - lowers[have]))
    else:
        cov = ail = math.nan
    return bias, rmse, cov, ail


def run_experiment(scenario: str, n: int, replicates: int, methods=ALL_METHODS,
                   regimes=REGIMES, uncertainty: UncertaintySpec = UncertaintySpec(),
                   rng: RngStream = RngStream(0), bart: BartConfig = BartConfig(),
                   basis: SplineBasisSpec = SplineBasisSpec(), jobs: int = 1,
                   clip: float | None = None) -> ExperimentResult:
    """Monte Carlo study of ``methods`` under ``regimes`` for one scenario and size.

    Replicates are independent and may run in parallel; results are reduced in
    replicate order, so the output does not depend on ``jobs``.  Failed cells
    are logged with their replicate id and excluded; a cell with more than 10%
    failures marks the whole run invalid.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if replicates < 2:
        raise ValueError("need at least two replicates")
    methods = [_canonical(m) for m in methods]
    regimes = list(regimes)
    for tag in regimes:
        regime_designs(scenario, tag)
    args = [(scenario, n, rep, methods, regimes, uncertainty, rng, bart, basis, clip)
            for rep in range(replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, args))
    else:
        results = [_run_one(a) for a in args]
    truth = TRUE_MEAN[scenario]
    rows, failures, estimates = [], [], {}
    invalid = False
    for tag in regimes:
        for m in methods:
            vals, lo, hi = [], [], []
            nfail = 0
            for rep, res in enumerate(results):
                v = res[(tag, m)]
                if isinstance(v, str):
                    nfail += 1
                    failures.append({"replicate": rep, "seed": rng.seed,
                                     "stream": list(rng.child(rep).stream_id),
                                     "regime": tag, "method": m, "error": v})
                    continue
                vals.append(v[0])
                lo.append(v[1])
                hi.append(v[2])
            if nfail > MAX_FAILURE_RATE * replicates:
                invalid = True
            vals = np.array(vals)
            estimates[(tag, m)] = vals
            bias, rmse, cov, ail = summarize(vals, np.array(lo), np.array(hi), truth)
            rows.append(MetricsRow(scenario, tag, m, n, int(vals.size), bias, rmse, cov, ail,
                                   nfail))
    for f in failures:
        log.warning("replicate %d (%s, %s) failed: %s", f["replicate"], f["regime"], f["method"],
                    f["error"])
    return ExperimentResult(rows, failures, invalid, estimates)


def _canonical(method: str) -> str:
    for m in ALL_METHODS:
        if m.upper() == method.upper() or (m == "AIPWT-BART" and method.upper() == "AIPWT_BART"):
            return m
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(ALL_METHODS)}")


def is_bart_method(method: str) -> bool:
    return method in BART_METHODS
