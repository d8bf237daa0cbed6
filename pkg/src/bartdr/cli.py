"""``bartdr`` command line: ``simulate``, ``impute`` and ``report``.

Exit codes: 0 success, 1 configuration error, 2 data or I/O error,
3 run invalidated (more than 10% of replicates failed in some cell).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import FORMATS, PRESETS, UNCERTAINTY_MODES, ConfigError, RunConfig, parse_config
from .design import DataError, main_effects
from .estimators import ModelSpec, run_method, two_part_boxcox_pipeline
from .io import emit_results, fmt_float, load_dataset, load_results, render_results
from .rng import RngStream
from .simulation import REGIMES, SCENARIOS, run_experiment
from .uncertainty import heitjan_bootstrap, mi_interval

log = logging.getLogger("bartdr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVALID = 0, 1, 2, 3


def _bart_kv(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        v = json.loads(value)
    except ValueError:
        v = value
    return key.strip(), v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bartdr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON file with run settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--format", choices=FORMATS)
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--uncertainty", choices=UNCERTAINTY_MODES)
        sp.add_argument("--resamples", type=int, help="bootstrap resamples or imputations (D)")
        sp.add_argument("--within", choices=("zero", "completed"))
        sp.add_argument("--percentile", action="store_true", default=None,
                        help="percentile instead of t bootstrap intervals")
        sp.add_argument("--bart", action="append", type=_bart_kv, metavar="KEY=VALUE",
                        help="override a BART setting, e.g. --bart m=50")
        sp.add_argument("--spline-degree", type=int)
        sp.add_argument("--knots", type=int)
        sp.add_argument("--clip", type=float, help="propensity floor for AIPWT (default off)")
        sp.add_argument("--jobs", type=int, help="worker processes (default $BARTDR_JOBS or 1)")

    s = sub.add_parser("simulate", help="Monte Carlo study on a benchmark scenario")
    common(s)
    s.add_argument("--scenario", choices=SCENARIOS)
    s.add_argument("--n", type=int)
    s.add_argument("--replicates", type=int)
    s.add_argument("--methods", help="comma-separated method tags")
    s.add_argument("--regimes", help=f"comma-separated subset of {','.join(REGIMES)}")

    i = sub.add_parser("impute", help="estimate the outcome mean of a CSV dataset")
    common(i)
    i.add_argument("--data")
    i.add_argument("--outcome")
    i.add_argument("--response", help="0/1 column (1 = observed); default: blank outcome cells")
    i.add_argument("--covariates", help="comma-separated covariate columns")
    i.add_argument("--method")
    i.add_argument("--propensity-terms", help="comma-separated design terms, e.g. 1,x1,x1*x2")
    i.add_argument("--mean-terms")
    i.add_argument("--two-part", action="store_true", default=None,
                   help="zero-inflated outcome: classifier + Box-Cox pipeline")
    i.add_argument("--imputed-out", help="write the completed outcome vector here")

    r = sub.add_parser("report", help="re-render a results table")
    r.add_argument("--input")
    r.add_argument("--out")
    r.add_argument("--format", choices=FORMATS)
    r.add_argument("--config")
    return p


def _flags(ns: argparse.Namespace) -> dict:
    skip = {"config", "verbose"}
    out = {k: v for k, v in vars(ns).items() if k not in skip and v is not None}
    if "bart" in out:
        out["bart"] = dict(out["bart"])
    return out


def cmd_simulate(cfg: RunConfig) -> int:
    res = run_experiment(cfg.scenario, cfg.n, cfg.replicates, cfg.methods, cfg.regimes,
                         cfg.uncertainty_spec(), RngStream(cfg.seed), cfg.bart_config(),
                         cfg.basis(), cfg.jobs, cfg.clip)
    emit_results(res.rows, cfg.format, cfg.out)
    if res.failures:
        log.warning("%d failed (replicate, regime, method) cells were excluded",
                    len(res.failures))
    if res.invalid:
        log.error("run invalidated: more than 10%% of replicates failed in at least one cell")
        return EXIT_INVALID
    return EXIT_OK


def cmd_impute(cfg: RunConfig) -> int:
    data = load_dataset(cfg.data, cfg.outcome, cfg.response, cfg.covariates)
    terms = main_effects(data.names)
    spec = ModelSpec(cfg.propensity_terms or terms, cfg.mean_terms or terms,
                     bart=cfg.bart_config(), basis=cfg.basis(), clip=cfg.clip)
    rng = RngStream(cfg.seed)
    if cfg.two_part:
        est = two_part_boxcox_pipeline(data, cfg.method, spec, rng.child(0))
    else:
        est = run_method(cfg.method, data, spec, rng.child(0))
    lower = upper = float("nan")
    if cfg.uncertainty != "none" and not cfg.two_part:
        if cfg.uncertainty == "bootstrap":
            ie = heitjan_bootstrap(data, cfg.method, spec, cfg.resamples, rng.child(1),
                                   cfg.within, cfg.percentile)
        else:
            mode = "posterior-mean" if cfg.uncertainty == "mi-mean" else "posterior-draw"
            ie = mi_interval(data, cfg.method, spec, cfg.resamples, mode, rng.child(1))
        lower, upper = ie.lower, ie.upper
    record = {"method": est.method, "n": data.n, "observed": int(data.r.sum()),
              "mu_hat": est.mu_hat, "lower": lower, "upper": upper,
              "uncertainty": "none" if cfg.two_part else cfg.uncertainty}
    if cfg.format == "json":
        text = json.dumps({k: (None if isinstance(v, float) and np.isnan(v) else
                               float(fmt_float(v)) if isinstance(v, float) else v)
                           for k, v in record.items()}, indent=2) + "\n"
    else:
        keys = list(record)
        vals = [fmt_float(v) if isinstance(v, float) else str(v) for v in record.values()]
        text = ",".join(keys) + "\n" + ",".join(vals) + "\n"
    _write(text, cfg.out)
    if cfg.imputed_out:
        if est.imputed is None:
            log.warning("%s does not produce imputations; nothing written to %s",
                        est.method, cfg.imputed_out)
        else:
            _write("y\n" + "".join(fmt_float(v) + "\n" for v in est.imputed), cfg.imputed_out)
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    rows = load_results(cfg.input)
    fmt = cfg.format if cfg.format else "text"
    _write(render_results(rows, fmt), cfg.out)
    return EXIT_OK


def _write(text: str, path):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO - 10 * min(ns.verbose, 1),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        flags = _flags(ns)
        if ns.command == "report" and "format" not in flags:
            flags["format"] = "text"
        cfg = parse_config(ns.config, flags)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    try:
        if cfg.command == "simulate":
            return cmd_simulate(cfg)
        if cfg.command == "impute":
            return cmd_impute(cfg)
        return cmd_report(cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DataError, OSError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
