"""Datasets and design matrices built from small product-of-powers term strings.

A term is ``"1"`` (intercept) or covariate names joined by ``*`` with optional
integer powers, e.g. ``"x1"``, ``"x1*x2"`` or ``"x1^2*x2^2"``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

_FACTOR = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*(?:\^\s*(\d+))?\s*$")


class DataError(ValueError):
    """Malformed or inconsistent data handed to an estimator."""


def parse_term(term: str) -> tuple[tuple[str, int], ...]:
    """``"x1^2*x2"`` -> ``(("x1", 2), ("x2", 1))``; the intercept parses to ``()``."""
    term = term.strip()
    if term == "1":
        return ()
    out = []
    for part in term.split("*"):
        m = _FACTOR.match(part)
        if m is None:
            raise ValueError(f"cannot parse design term {term!r}")
        power = int(m.group(2)) if m.group(2) else 1
        if power < 1:
            raise ValueError(f"power must be >= 1 in term {term!r}")
        out.append((m.group(1), power))
    return tuple(out)


@dataclass(frozen=True)
class Dataset:
    """Outcome ``y`` (NaN where missing), response indicator ``r`` (1 = observed)
    and a fully observed covariate matrix ``x`` with column names."""

    y: np.ndarray
    r: np.ndarray
    x: np.ndarray
    names: tuple[str, ...] = ()
    levels: dict = field(default_factory=dict)  # categorical column -> (reference, levels)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        r = np.asarray(self.r).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if not (y.size == r.size == x.shape[0]):
            raise DataError("y, r and x must have the same number of rows")
        if not np.all((r == 0) | (r == 1)):
            raise DataError("response indicator must be 0/1")
        r = r.astype(np.int8)
        if not r.any():
            raise DataError("no observed outcomes")
        if not np.all(np.isfinite(y[r == 1])):
            raise DataError("observed outcomes must be finite")
        if not np.all(np.isfinite(x)):
            raise DataError("covariates must be fully observed and finite")
        names = tuple(self.names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1] or len(set(names)) != len(names):
            raise DataError("need one unique name per covariate column")
        y = y.copy()
        y[r == 0] = np.nan
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def observed(self) -> np.ndarray:
        return self.r == 1

    def columns(self, names) -> np.ndarray:
        """Sub-matrix of the named covariates, in the given order."""
        idx = [self._index(nm) for nm in names]
        return self.x[:, idx]

    def design(self, terms) -> np.ndarray:
        return build_design(self.x, self.names, terms)

    def take(self, rows: np.ndarray) -> "Dataset":
        """Row subset (used for bootstrap resamples); keeps names and levels."""
        return Dataset(self.y[rows], self.r[rows], self.x[rows], self.names, self.levels)

    def with_y(self, y: np.ndarray) -> "Dataset":
        return Dataset(y, self.r, self.x, self.names, self.levels)

    def _index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown covariate {name!r}; have {', '.join(self.names)}") from None


def build_design(x: np.ndarray, names, terms) -> np.ndarray:
    """Evaluate each term on the rows of ``x`` and stack the results as columns."""
    names = list(names)
    cols = []
    for t in terms:
        col = np.ones(x.shape[0])
        for nm, power in parse_term(t):
            if nm not in names:
                raise DataError(f"design term {t!r} references unknown covariate {nm!r}")
            col = col * x[:, names.index(nm)] ** power
        cols.append(col)
    if not cols:
        return np.empty((x.shape[0], 0))
    return np.column_stack(cols)


def main_effects(names) -> list[str]:
    return ["1", *names]
