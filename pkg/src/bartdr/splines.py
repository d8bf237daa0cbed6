"""Truncated power spline bases on a scalar score (usually a response propensity)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEGENERATE_RANGE = 1e-10


class DegenerateScoreError(ValueError):
    """The score has (numerically) no spread, so no interior knots exist."""


@dataclass(frozen=True)
class SplineBasisSpec:
    degree: int = 1
    n_knots: int = 20
    knots: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 1 <= self.degree <= 3:
            raise ValueError(f"spline degree must be 1, 2 or 3, got {self.degree}")
        if self.n_knots < 1:
            raise ValueError("need at least one knot")
        if self.knots is not None:
            k = np.asarray(self.knots, dtype=float)
            if k.size != self.n_knots:
                raise ValueError("knot vector length differs from n_knots")
            if np.any(np.diff(k) <= 0):
                raise ValueError("knots must be strictly increasing")

    def with_knots_for(self, z: np.ndarray) -> "SplineBasisSpec":
        return SplineBasisSpec(self.degree, self.n_knots, tuple(equally_spaced_knots(z, self.n_knots)))


def equally_spaced_knots(z: np.ndarray, n_knots: int) -> np.ndarray:
    """``n_knots`` knots spaced evenly strictly inside the range of ``z``."""
    z = np.asarray(z, dtype=float)
    if n_knots < 1:
        raise ValueError("need at least one knot")
    lo, hi = float(np.min(z)), float(np.max(z))
    if hi - lo < DEGENERATE_RANGE:
        raise DegenerateScoreError(f"score range {hi - lo:.3g} is degenerate; no interior knots")
    h = np.arange(1, n_knots + 1)
    return lo + h * (hi - lo) / (n_knots + 1)


def truncated_power_basis(z: np.ndarray, spec: SplineBasisSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(fixed, random)``: polynomial columns ``1, z, ..., z^L`` and
    truncated columns ``(z - knot)_+^L``."""
    z = np.asarray(z, dtype=float).ravel()
    if spec.knots is None:
        spec = spec.with_knots_for(z)
    knots = np.asarray(spec.knots, dtype=float)
    fixed = np.vander(z, spec.degree + 1, increasing=True)
    random = np.maximum(z[:, None] - knots[None, :], 0.0) ** spec.degree
    return fixed, random
