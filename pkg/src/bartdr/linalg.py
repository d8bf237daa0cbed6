"""Deterministic model fits: least squares, logistic regression, REML-penalised
mixed-model regression and the Box-Cox profile likelihood."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import optimize, special, stats


class SeparationError(RuntimeError):
    """Logistic coefficients diverge: the classes are (quasi-)separable."""


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True)
class LinearFit:
    coef: np.ndarray
    resid_var: float
    rank: int

    def predict(self, design: np.ndarray) -> np.ndarray:
        return design @ self.coef


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    converged: bool
    iterations: int

    def predict(self, design: np.ndarray) -> np.ndarray:
        return special.expit(design @ self.coef)


@dataclass(frozen=True)
class MixedModelFit:
    fixed_coef: np.ndarray
    random_coef: np.ndarray
    penalty: float  # sigma^2 / sigma_u^2, multiplies the identity on the random block
    sigma2: float
    sigma2_u: float
    reml_loglik: float
    cov_unscaled: np.ndarray  # inverse of the penalised crossproduct

    def predict(self, fixed: np.ndarray, random: np.ndarray) -> np.ndarray:
        return fixed @ self.fixed_coef + random @ self.random_coef

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([self.fixed_coef, self.random_coef])


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("inputs contain non-finite values")


def ols_fit(design: np.ndarray, y: np.ndarray, names=None) -> LinearFit:
    """Least squares through a column-pivoted QR decomposition.

    Raises :class:`RankDeficientError` naming the first collinear column.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if design.ndim != 2 or design.shape[0] != y.shape[0]:
        raise ValueError("design rows must match len(y)")
    n, p = design.shape
    if n < p:
        raise RankDeficientError(f"{n} rows cannot identify {p} coefficients")
    _check_finite(design, y)
    q, r, piv = sla.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if p else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p:
        bad = int(piv[rank])
        label = names[bad] if names is not None else f"column {bad}"
        raise RankDeficientError(f"design is rank deficient: {label} is collinear with the others")
    coef = np.empty(p)
    coef[piv] = sla.solve_triangular(r, q.T @ y)
    resid = y - design @ coef
    dof = n - p
    resid_var = float(resid @ resid / dof) if dof > 0 else 0.0
    return LinearFit(coef=coef, resid_var=resid_var, rank=rank)


def logistic_fit(design: np.ndarray, r: np.ndarray, max_iter: int = 100, tol: float = 1e-8,
                 jitter: float = 1e-10, max_norm: float = 30.0) -> LogisticFit:
    """Maximum likelihood logistic regression by iteratively reweighted least squares."""
    design = np.asarray(design, dtype=float)
    r = np.asarray(r, dtype=float)
    if design.shape[0] != r.shape[0]:
        raise ValueError("design rows must match len(r)")
    _check_finite(design, r)
    if not np.all((r == 0) | (r == 1)):
        raise ValueError("response indicator must be 0/1")
    if r.min() == r.max():
        raise ValueError("logistic regression needs both classes present")
    p = design.shape[1]
    beta = np.zeros(p)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = design @ beta
        mu = special.expit(eta)
        w = mu * (1.0 - mu)
        xtwx = design.T @ (design * w[:, None])
        xtwx[np.diag_indices(p)] += jitter  # numeric safety only, not a prior
        step = sla.solve(xtwx, design.T @ (r - mu), assume_a="pos")
        beta = beta + step
        if np.linalg.norm(beta) > max_norm:
            raise SeparationError(
                "logistic coefficients diverge (norm > %g): the response classes are separable; "
                "use a regularised or smaller propensity model" % max_norm)
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    return LogisticFit(coef=beta, converged=converged, iterations=it)


def ridge_solve(fixed: np.ndarray, random: np.ndarray, y: np.ndarray, penalty: float):
    """Solve the generalised ridge system with ``penalty`` on the random block only."""
    w = np.hstack([fixed, random])
    c = w.T @ w
    k = fixed.shape[1]
    c[k:, k:][np.diag_indices(random.shape[1])] += penalty
    return sla.solve(c, w.T @ y, assume_a="sym")


class _RemlProblem:
    def __init__(self, fixed, random, y):
        self.k = fixed.shape[1]
        self.q = random.shape[1]
        self.n = y.shape[0]
        w = np.hstack([fixed, random])
        self.wtw = w.T @ w
        self.wty = w.T @ y
        self.yty = float(y @ y)
        self.scale = max(float(np.mean(np.diag(self.wtw)[self.k:])) if self.q else 1.0, 1e-300)

    def solve(self, penalty):
        c = self.wtw.copy()
        idx = np.arange(self.k, self.k + self.q)
        c[idx, idx] += penalty
        cf = sla.cho_factor(c)
        b = sla.cho_solve(cf, self.wty)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        return b, cf, logdet

    def neg_loglik(self, log_pen):
        penalty = math.exp(log_pen) * self.scale
        try:
            b, _, logdet = self.solve(penalty)
        except (np.linalg.LinAlgError, ValueError):
            return np.inf
        rss = max(self.yty - float(b @ self.wty), 1e-300)
        dof = self.n - self.k
        return 0.5 * (dof * math.log(rss / dof) + logdet - self.q * math.log(penalty))


def reml_spline_fit(fixed: np.ndarray, random: np.ndarray, y: np.ndarray,
                    penalty: float | None = None) -> MixedModelFit:
    """Fit ``y = fixed @ b + random @ u + e`` with ``u ~ N(0, s2u I)``, ``e ~ N(0, s2 I)``.

    The variance ratio is found by maximising the restricted likelihood over
    ``log(s2 / s2u)``.  Passing ``penalty`` skips the search and returns the
    generalised ridge solution for that ratio.  ``s2u -> 0`` is allowed and
    shows up as a very large penalty with the random coefficients near zero.
    """
    fixed = np.asarray(fixed, dtype=float)
    random = np.asarray(random, dtype=float).reshape(fixed.shape[0], -1)
    y = np.asarray(y, dtype=float)
    _check_finite(fixed, random, y)
    n, k = fixed.shape
    if n != y.shape[0] or random.shape[0] != n:
        raise ValueError("fixed, random and y must have the same number of rows")
    if n <= k:
        raise ValueError("need more rows than fixed-effect columns")
    prob = _RemlProblem(fixed, random, y)
    if prob.q == 0:
        penalty = 0.0
    elif penalty is None:
        lo, hi = -25.0, 25.0
        grid = np.linspace(lo, hi, 51)
        vals = np.array([prob.neg_loglik(g) for g in grid])
        i = int(np.argmin(vals))
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        if a < b:
            res = optimize.minimize_scalar(prob.neg_loglik, bounds=(a, b), method="bounded",
                                           options={"xatol": 1e-6})
            best = res.x if res.fun <= vals[i] else grid[i]
        else:
            best = grid[i]
        penalty = math.exp(best) * prob.scale
    elif penalty < 0:
        raise ValueError("penalty must be non-negative")
    if prob.q == 0 or penalty == 0:
        coef = ridge_solve(fixed, random, y, float(penalty))
        cov = np.linalg.pinv(prob.wtw)
        loglik = math.nan
    else:
        coef, cf, _ = prob.solve(penalty)
        cov = sla.cho_solve(cf, np.eye(k + prob.q))
        loglik = -prob.neg_loglik(math.log(penalty / prob.scale))
    rss_pen = max(prob.yty - float(coef @ prob.wty), 0.0)
    sigma2 = rss_pen / (n - k)
    sigma2_u = sigma2 / penalty if penalty > 0 else math.inf
    return MixedModelFit(fixed_coef=coef[:k], random_coef=coef[k:], penalty=float(penalty),
                         sigma2=float(sigma2), sigma2_u=float(sigma2_u), reml_loglik=loglik,
                         cov_unscaled=cov)


@dataclass(frozen=True)
class BoxCoxFit:
    lam_hat: float
    lam_tilde: float

    def transform(self, y):
        return boxcox_transform(y, self.lam_tilde)

    def inverse(self, t):
        return boxcox_inverse(t, self.lam_tilde)


def boxcox_transform(y, lam: float):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("Box-Cox requires strictly positive values")
    if abs(lam) < 1e-12:
        return np.log(y)
    return np.expm1(lam * np.log(y)) / lam


def boxcox_inverse(t, lam: float):
    t = np.asarray(t, dtype=float)
    if abs(lam) < 1e-12:
        return np.exp(t)
    return np.exp(np.log1p(lam * t) / lam)


def box_cox(y, design: np.ndarray | None = None, lo: float = -2.0, hi: float = 2.0,
            step: float = 0.01) -> BoxCoxFit:
    """Profile-likelihood Box-Cox exponent on a grid, shifted by one for imputation.

    With ``design`` the likelihood uses regression residuals instead of the
    marginal variance.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size < 2:
        raise ValueError("need at least two observations")
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ValueError("Box-Cox requires strictly positive finite values")
    grid = np.round(np.arange(lo, hi + step / 2, step), 10)
    if design is None:
        ll = np.array([stats.boxcox_llf(g, y) for g in grid])
    else:
        design = np.asarray(design, dtype=float)
        q, _ = np.linalg.qr(design)
        logsum = np.log(y).sum()
        n = y.size
        ll = np.empty(grid.size)
        for i, g in enumerate(grid):
            t = boxcox_transform(y, g)
            res = t - q @ (q.T @ t)
            ll[i] = -0.5 * n * math.log(max(res @ res / n, 1e-300)) + (g - 1.0) * logsum
    lam_hat = float(grid[int(np.argmax(ll))])
    return BoxCoxFit(lam_hat=lam_hat, lam_tilde=lam_hat + 1.0)
