"""Seedable random streams and the handful of samplers the package needs.

Every stochastic routine takes an :class:`RngStream`.  A stream is a plain value
``(seed, stream_id)``; the numpy generator it hands out is rebuilt from a
``SeedSequence`` so the same pair always yields the same sequence, and child
streams derived through :meth:`RngStream.child` never overlap their parent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if isinstance(self.stream_id, int):
            object.__setattr__(self, "stream_id", (self.stream_id,))
        if any(s < 0 for s in self.stream_id):
            raise ValueError("stream ids must be non-negative")

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng: RngStream | np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return RngStream(0 if rng is None else int(rng)).generator()


def sample_normal(rng: np.random.Generator, mu: float, var: float, size=None):
    """Normal draw parameterised by mean and VARIANCE."""
    if var < 0:
        raise ValueError(f"variance must be non-negative, got {var}")
    if var == 0:
        return mu if size is None else np.full(size, float(mu))
    return rng.normal(mu, math.sqrt(var), size)


def _one_sided_tail(rng: np.random.Generator, a: float) -> float:
    """Standard normal conditioned on x > a."""
    if a <= 0.45:
        while True:
            x = rng.standard_normal()
            if x > a:
                return x
    # exponential proposal with optimal rate (Robert, 1995)
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        x = a + rng.standard_exponential() / alpha
        if rng.random() <= math.exp(-0.5 * (x - alpha) ** 2):
            return x


def sample_truncated_normal(rng: np.random.Generator, mu: float, a: float, b: float) -> float:
    """Draw from N(mu, 1) restricted to the open interval (a, b)."""
    if not a < b:
        raise ValueError(f"empty truncation interval ({a}, {b})")
    lo, hi = a - mu, b - mu
    if lo == -math.inf and hi == math.inf:
        return mu + rng.standard_normal()
    if hi == math.inf:
        return mu + _one_sided_tail(rng, lo)
    if lo == -math.inf:
        return mu - _one_sided_tail(rng, -hi)
    # two-sided: invert the CDF on whichever side keeps the most precision
    if lo > 0:
        plo, phi = special.ndtr(-lo), special.ndtr(-hi)
        u = rng.uniform(phi, plo)
        if plo - phi > 1e-300:
            return mu - special.ndtri(u)
    elif hi < 0:
        plo, phi = special.ndtr(lo), special.ndtr(hi)
        u = rng.uniform(plo, phi)
        if phi - plo > 1e-300:
            return mu + special.ndtri(u)
    else:
        u = rng.uniform(special.ndtr(lo), special.ndtr(hi))
        return mu + special.ndtri(u)
    # interval far in a tail and too narrow to resolve: uniform-proposal rejection
    edge = lo if lo > 0 else hi
    while True:
        x = rng.uniform(lo, hi)
        if rng.random() <= math.exp(0.5 * (edge * edge - x * x)):
            return mu + x


def sample_scaled_inv_chisq(rng: np.random.Generator, nu: float, lam: float, size=None):
    """Scaled inverse chi-square with ``nu`` degrees of freedom and scale ``lam``."""
    if nu <= 0 or lam <= 0:
        raise ValueError("scaled inverse chi-square needs nu > 0 and lambda > 0")
    return nu * lam / rng.chisquare(nu, size)


def sigma_prior_scale(nu: float, q: float, sigma_hat: float) -> float:
    """Scale ``lam`` such that P(sigma < sigma_hat) = q under sigma^2 ~ nu*lam/chi2_nu."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    if nu <= 0 or sigma_hat <= 0:
        raise ValueError("nu and sigma_hat must be positive")
    return sigma_hat**2 * stats.chi2.ppf(1.0 - q, nu) / nu
