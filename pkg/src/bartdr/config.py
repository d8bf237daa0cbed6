"""Run configuration: defaults, presets, a YAML/JSON file and command-line flags,
merged in that order and validated before any computation starts."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .bart import BartConfig
from .simulation import ALL_METHODS, REGIMES, SCENARIOS, UncertaintySpec, _canonical
from .splines import SplineBasisSpec

log = logging.getLogger(__name__)

COMMANDS = ("simulate", "impute", "report")
UNCERTAINTY_MODES = ("bootstrap", "mi-mean", "mi-draw", "none")
FORMATS = ("csv", "json", "text")

PRESETS = {
    "desk": {"bart": {"m": 50, "burn": 100, "draws": 200}, "resamples": 50, "replicates": 100},
    "paper": {"bart": {"m": 200, "burn": 250, "draws": 1000}, "resamples": 200,
              "replicates": 500},
}


class ConfigError(ValueError):
    """Invalid, unknown or missing configuration value."""


@dataclass
class RunConfig:
    command: str = "simulate"
    scenario: str = "linear"
    n: int = 1000
    replicates: int = 500
    methods: list = field(default_factory=lambda: list(ALL_METHODS))
    regimes: list = field(default_factory=lambda: list(REGIMES))
    uncertainty: str = "bootstrap"
    resamples: int = 200
    within: str = "zero"
    percentile: bool = False
    bart: dict = field(default_factory=dict)
    spline_degree: int = 1
    knots: int = 20
    clip: float | None = None
    seed: int = 0
    out: str | None = None
    format: str = "csv"
    jobs: int = 1
    preset: str | None = None
    # impute / report
    data: str | None = None
    outcome: str | None = None
    response: str | None = None
    covariates: list | None = None
    method: str = "PSBPP"
    propensity_terms: list | None = None
    mean_terms: list | None = None
    two_part: bool = False
    imputed_out: str | None = None
    input: str | None = None

    def bart_config(self) -> BartConfig:
        return BartConfig().updated(**self.bart)

    def basis(self) -> SplineBasisSpec:
        return SplineBasisSpec(self.spline_degree, self.knots)

    def uncertainty_spec(self) -> UncertaintySpec:
        return UncertaintySpec(self.uncertainty, self.resamples, self.within, self.percentile)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bart"] = asdict(self.bart_config())
        return d


_TYPES = {
    "command": str, "scenario": str, "n": int, "replicates": int, "methods": list,
    "regimes": list, "uncertainty": str, "resamples": int, "within": str, "percentile": bool,
    "bart": dict, "spline_degree": int, "knots": int, "clip": (float, type(None)), "seed": int,
    "out": (str, type(None)), "format": str, "jobs": int, "preset": (str, type(None)),
    "data": (str, type(None)), "outcome": (str, type(None)), "response": (str, type(None)),
    "covariates": (list, type(None)), "method": str, "propensity_terms": (list, type(None)),
    "mean_terms": (list, type(None)), "two_part": bool, "imputed_out": (str, type(None)),
    "input": (str, type(None)),
}
assert set(_TYPES) == {f.name for f in fields(RunConfig)}


def _coerce(key: str, value):
    want = _TYPES[key]
    wants = want if isinstance(want, tuple) else (want,)
    if isinstance(value, bool) and bool not in wants:
        raise ConfigError(f"{key}: expected {_type_names(wants)}, got a boolean")
    if isinstance(value, int) and not isinstance(value, bool) and float in wants:
        return float(value)
    if list in wants and isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    if not isinstance(value, wants):
        raise ConfigError(f"{key}: expected {_type_names(wants)}, got {type(value).__name__}")
    return value


def _type_names(types):
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def read_config_file(path: str) -> dict:
    """Parse a YAML (or JSON) mapping; syntax errors report the line number."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"malformed config file {path}{where}: "
                          f"{getattr(exc, 'problem', None) or exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must contain a mapping at the top level")
    return {str(k).replace("-", "_"): v for k, v in doc.items()}


def _merge(target: dict, source: dict, origin: str):
    for key, value in source.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        value = _coerce(key, value)
        if key == "bart":
            unknown = set(value) - set(BartConfig.field_names())
            if unknown:
                raise ConfigError(f"unknown BART setting {sorted(unknown)[0]!r} ({origin})")
            merged = dict(target.get("bart", {}))
            merged.update(value)
            value = merged
        elif key in target and target[key] != value and origin == "command line":
            log.info("flag overrides config file: %s = %r (file had %r)", key, value, target[key])
        target[key] = value


def parse_config(file_path: str | None = None, flags: dict | None = None) -> RunConfig:
    """Resolve defaults < preset < config file < flags into a validated :class:`RunConfig`.

    ``flags`` holds only values given explicitly on the command line.
    """
    file_vals = read_config_file(file_path) if file_path else {}
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    preset = flags.get("preset", file_vals.get("preset"))
    resolved: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        _merge(resolved, PRESETS[preset], f"preset {preset}")
    _merge(resolved, file_vals, f"file {file_path}")
    _merge(resolved, flags, "command line")
    if "jobs" not in resolved and os.environ.get("BARTDR_JOBS"):
        try:
            resolved["jobs"] = int(os.environ["BARTDR_JOBS"])
        except ValueError:
            raise ConfigError("BARTDR_JOBS must be an integer") from None
    cfg = RunConfig(**resolved)
    validate(cfg)
    log.info("resolved configuration: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def validate(cfg: RunConfig):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.command in COMMANDS, f"command: must be one of {', '.join(COMMANDS)}")
    need(cfg.scenario in SCENARIOS, f"scenario: must be one of {', '.join(SCENARIOS)}")
    need(cfg.n >= 10, "n: must be at least 10")
    need(cfg.replicates >= 2, "replicates: must be at least 2")
    need(cfg.uncertainty in UNCERTAINTY_MODES,
         f"uncertainty: must be one of {', '.join(UNCERTAINTY_MODES)}")
    need(cfg.resamples >= 2, "resamples: must be at least 2")
    need(cfg.within in ("zero", "completed"), "within: must be 'zero' or 'completed'")
    need(cfg.format in FORMATS, f"format: must be one of {', '.join(FORMATS)}")
    need(cfg.jobs >= 1, "jobs: must be at least 1")
    need(0 <= cfg.seed < 2**64, "seed: must be a non-negative 64-bit integer")
    need(cfg.clip is None or 0 < cfg.clip < 1, "clip: must lie in (0, 1)")
    try:
        cfg.methods = [_canonical(m) for m in cfg.methods]
    except ValueError as exc:
        raise ConfigError(f"methods: {exc}") from None
    for r in cfg.regimes:
        need(r in REGIMES, f"regimes: unknown regime {r!r}")
    try:
        cfg.bart_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bart: {exc}") from None
    try:
        cfg.basis()
    except ValueError as exc:
        raise ConfigError(f"spline_degree/knots: {exc}") from None
    if cfg.command == "impute":
        need(cfg.data is not None, "data: required for the impute command")
        need(cfg.outcome is not None, "outcome: required for the impute command")
        need(cfg.method.upper() in {m.upper() for m in ALL_METHODS if m != "BD"},
             f"method: must be one of {', '.join(m for m in ALL_METHODS if m != 'BD')}")
    if cfg.command == "report":
        need(cfg.input is not None, "input: required for the report command")
