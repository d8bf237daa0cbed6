from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Literal

import numpy as np
from scipy import special

from ..rng import as_generator, sigma_prior_scale
from . import _kernels as K

Mode = Literal["mean"] | int


class BartError(ValueError):
    pass


@dataclass(frozen=True)
class BartConfig:
    """Hyperparameters and chain lengths of the sum-of-trees sampler."""

    m: int = 200
    burn: int = 250
    draws: int = 1000
    alpha: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.90
    min_node: int = 5
    p_grow: float = 0.28
    p_prune: float = 0.28
    p_change: float = 0.44
    max_depth: int = 10
    sigma_fixed: float | None = None  # continuous mode only; skips the sigma Gibbs step

    def __post_init__(self):
        for name in ("m", "draws", "min_node", "max_depth"):
            if getattr(self, name) < 1:
                raise BartError(f"{name} must be positive")
        if self.burn < 0:
            raise BartError("burn must be non-negative")
        if not 0 < self.alpha < 1 or self.beta < 0:
            raise BartError("tree prior needs 0 < alpha < 1 and beta >= 0")
        if self.k <= 0 or self.nu <= 0 or not 0 < self.q < 1:
            raise BartError("k and nu must be positive and q in (0, 1)")
        probs = (self.p_grow, self.p_prune, self.p_change)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise BartError("proposal probabilities must be non-negative and sum to 1")
        if self.sigma_fixed is not None and self.sigma_fixed <= 0:
            raise BartError("sigma_fixed must be positive")

    def updated(self, **kw) -> "BartConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class BartPosterior:
    """Stored post-burn-in forests plus their predictions on the training rows.

    ``train_draws`` and :meth:`predict_raw` are on the model scale: outcome
    units for the continuous model, the latent ``G(x)`` for the probit model.
    """

    kind: Literal["continuous", "probit"]
    config: BartConfig
    n_features: int
    offset: float
    scale: float
    train_draws: np.ndarray
    sigma_trace: np.ndarray
    node_var: np.ndarray
    node_cut: np.ndarray
    node_mu: np.ndarray
    node_left: np.ndarray
    roots: np.ndarray  # (draws, m) root positions
    accept: np.ndarray = field(default_factory=lambda: np.zeros((3, 2), np.int64))
    x_pred: np.ndarray | None = None
    pred_draws: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.roots.shape[0]

    def predict_raw(self, xnew: np.ndarray) -> np.ndarray:
        xnew = np.ascontiguousarray(xnew, dtype=float)
        if xnew.ndim != 2 or xnew.shape[1] != self.n_features:
            raise BartError(f"expected {self.n_features} covariate columns")
        out = K.predict_forests(xnew, self.node_var, self.node_cut, self.node_mu,
                                self.node_left, self.roots)
        return self.offset + self.scale * out

    def to_response(self, raw: np.ndarray) -> np.ndarray:
        return special.ndtr(raw) if self.kind == "probit" else raw

    def tree(self, draw: int, j: int) -> "Tree":
        return Tree.from_flat(self.node_var, self.node_cut, self.node_mu, self.node_left,
                              int(self.roots[draw, j]))


def _continuous_transform(y):
    lo, hi = float(np.min(y)), float(np.max(y))
    span = hi - lo
    return lo + 0.5 * span, span


class _Chain:
    """Mutable sampler state for one fit."""

    def __init__(self, X, y_work, config, tau2, init_mu, Xp):
        n, p = X.shape
        m = config.m
        cap = 2 ** (config.max_depth + 1) - 1
        self.X = X
        self.order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T).astype(np.int64)
        self.distinct = np.array([np.unique(X[:, v]).size == n for v in range(p)], np.bool_)
        self.y = y_work
        self.config = config
        self.tau2 = tau2
        self.var = np.full((m, cap), K.UNUSED, np.int64)
        self.var[:, 0] = K.LEAF
        self.cut = np.zeros((m, cap))
        self.mu = np.zeros((m, cap))
        self.mu[:, 0] = init_mu
        self.nobs = np.zeros((m, cap), np.int64)
        self.nobs[:, 0] = n
        self.spl = np.zeros((m, cap), np.bool_)
        self.mark = np.zeros(n, np.int64)
        self.stamp = np.zeros(1, np.int64)
        self.buf = np.empty(n)
        rows = np.arange(n, dtype=np.int64)
        self.spl[:, 0] = K.is_splittable(X, self.order, self.distinct, rows, n, 0,
                                         config.max_depth, config.min_node, self.mark,
                                         self.stamp, self.buf)
        self.leaf_of = np.zeros((m, n), np.int64)
        self.hiwater = np.ones(m, np.int64)
        self.total = np.full(n, m * init_mu)
        self.Xp = Xp
        self.leaf_of_p = np.zeros((m, Xp.shape[0]), np.int64)
        self.total_p = np.full(Xp.shape[0], m * init_mu)
        self.resid = np.empty(n)
        self.ibuf = np.empty((3, n), np.int64)
        self.ncut = np.empty(p, np.int64)
        self.sums = np.empty(cap)
        self.cnts = np.empty(cap, np.int64)
        self.stats = np.zeros((3, 2), np.int64)

    def sweep(self, sigma2, gen):
        c = self.config
        K.sweep(self.X, self.order, self.distinct, self.y, self.total, self.Xp, self.leaf_of_p,
                self.total_p, self.var, self.cut, self.mu, self.nobs, self.spl, self.leaf_of,
                self.hiwater, sigma2, self.tau2, c.alpha, c.beta, c.p_grow, c.p_prune,
                c.min_node, c.max_depth, gen, self.resid, self.ibuf, self.mark, self.stamp,
                self.buf, self.ncut, self.sums, self.cnts, self.stats)

    def refresh(self):
        K.recompute_total(self.mu, self.leaf_of, self.total)
        K.recompute_total(self.mu, self.leaf_of_p, self.total_p)

    def snapshot(self):
        return K.snapshot(self.var, self.cut, self.mu, self.hiwater)


def _validate(X, target, config, x_pred=None):
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2:
        raise BartError("covariates must be a 2-D matrix")
    target = np.asarray(target, dtype=float)
    if target.shape != (X.shape[0],):
        raise BartError("outcome length must equal the number of rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(target))):
        raise BartError("inputs must be finite")
    if X.shape[0] < 2 * config.min_node:
        raise BartError(f"need at least {2 * config.min_node} rows, got {X.shape[0]}")
    if x_pred is None:
        Xp = np.zeros((0, X.shape[1]))
    else:
        Xp = np.ascontiguousarray(x_pred, dtype=float)
        if Xp.ndim != 2 or Xp.shape[1] != X.shape[1] or not np.all(np.isfinite(Xp)):
            raise BartError("prediction rows must be finite with the training column count")
    return X, target, Xp


def _assemble(kind, config, p, offset, scale, train, pred, x_pred, sig, snaps, stats):
    sizes = [s[0].size for s in snaps]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    node_left = np.concatenate([np.where(s[3] >= 0, s[3] + st, -1) for s, st in zip(snaps, starts)])
    roots = np.stack([s[4] + st for s, st in zip(snaps, starts)])
    return BartPosterior(
        kind=kind, config=config, n_features=p, offset=offset, scale=scale,
        train_draws=np.asarray(train), sigma_trace=np.asarray(sig),
        node_var=np.concatenate([s[0] for s in snaps]),
        node_cut=np.concatenate([s[1] for s in snaps]),
        node_mu=np.concatenate([s[2] for s in snaps]),
        node_left=node_left.astype(np.int64), roots=roots, accept=stats.copy(),
        x_pred=None if x_pred is None or x_pred.shape[0] == 0 else x_pred,
        pred_draws=None if x_pred is None or x_pred.shape[0] == 0 else np.asarray(pred))


def _constant_posterior(config, p, value, n, Xp):
    m = config.m
    snap = (np.full(m, K.LEAF, np.int32), np.zeros(m), np.zeros(m), np.full(m, -1, np.int64),
            np.arange(m, dtype=np.int64))
    return _assemble("continuous", config, p, value, 1.0, np.full((config.draws, n), value),
                     np.full((config.draws, Xp.shape[0]), value), Xp,
                     np.zeros(config.burn + config.draws), [snap] * config.draws,
                     np.zeros((3, 2), np.int64))


def backfit_continuous(x, y, config: BartConfig = BartConfig(), rng=None,
                       x_pred=None) -> BartPosterior:
    """Posterior sample of the sum-of-trees regression ``y = sum_j g_j(x) + N(0, sigma^2)``.

    The outcome is mapped affinely onto [-0.5, 0.5] while sampling; leaf means
    get a N(0, (0.5 / (k sqrt(m)))^2) prior and sigma^2 a scaled inverse
    chi-square prior whose q-quantile is the marginal SD of the outcome.
    Rows in ``x_pred`` are tracked through the chain, which is much cheaper
    than predicting them from the stored forests afterwards.
    """
    X, y, Xp = _validate(x, y, config, x_pred)
    n, p = X.shape
    gen = as_generator(rng)
    center, span = _continuous_transform(y)
    if span == 0.0:
        return _constant_posterior(config, p, center, n, Xp)
    yw = (y - center) / span
    tau2 = (0.5 / (config.k * math.sqrt(config.m))) ** 2
    if config.sigma_fixed is None:
        sd = float(np.std(yw, ddof=1))
        lam = sigma_prior_scale(config.nu, config.q, sd)
        sigma2 = sd * sd
    else:
        sigma2 = (config.sigma_fixed / span) ** 2
    chain = _Chain(X, yw, config, tau2, float(np.mean(yw)) / config.m, Xp)
    train, pred, sig, snaps = [], [], [], []
    for it in range(config.burn + config.draws):
        chain.sweep(sigma2, gen)
        if it % 10 == 9:
            chain.refresh()
        if config.sigma_fixed is None:
            ssr = K.sum_sq_resid(yw, chain.total)
            sigma2 = (config.nu * lam + ssr) / gen.chisquare(config.nu + n)
        sig.append(math.sqrt(sigma2) * span)
        if it >= config.burn:
            train.append(center + span * chain.total)
            pred.append(center + span * chain.total_p)
            snaps.append(chain.snapshot())
    return _assemble("continuous", config, p, center, span, train, pred, Xp, sig, snaps,
                     chain.stats)


def backfit_probit(x, r, config: BartConfig = BartConfig(), rng=None,
                   x_pred=None) -> BartPosterior:
    """Probit sum-of-trees classifier ``P(r = 1 | x) = Phi(G(x))`` by latent-variable augmentation.

    Each sweep redraws the latent values from normals around the current
    ``G(x)`` truncated to the side given by ``r``, then runs one backfitting
    pass on them with the noise SD fixed at one.
    """
    X, rr, Xp = _validate(x, r, config, x_pred)
    if not np.all((rr == 0) | (rr == 1)):
        raise BartError("binary outcome must be 0/1")
    if rr.min() == rr.max():
        raise BartError("probit model needs both classes present")
    n, p = X.shape
    gen = as_generator(rng)
    ri = rr.astype(np.int64)
    offset = float(special.ndtri(np.mean(rr)))
    tau2 = (3.0 / (config.k * math.sqrt(config.m))) ** 2
    chain = _Chain(X, np.zeros(n), config, tau2, 0.0, Xp)
    train, pred, snaps = [], [], []
    for it in range(config.burn + config.draws):
        K.draw_latent(ri, chain.total, offset, chain.y, gen)
        chain.sweep(1.0, gen)
        if it % 10 == 9:
            chain.refresh()
        if it >= config.burn:
            train.append(offset + chain.total)
            pred.append(offset + chain.total_p)
            snaps.append(chain.snapshot())
    return _assemble("probit", config, p, offset, 1.0, train, pred, Xp,
                     np.ones(config.burn + config.draws), snaps, chain.stats)


def posterior_predict(post: BartPosterior, xnew: np.ndarray | None = None, mode: Mode = "mean"):
    """Posterior mean (``mode="mean"``) or a single stored draw (``mode=index``).

    Probit posteriors return probabilities Phi(G); the mean mode averages the
    probabilities, not the latent values.  ``xnew=None`` reuses the training rows.
    """
    if xnew is None:
        raw = post.train_draws
    elif post.x_pred is not None and (xnew is post.x_pred or np.array_equal(xnew, post.x_pred)):
        raw = post.pred_draws
    else:
        raw = post.predict_raw(xnew)
    if mode == "mean":
        return post.to_response(raw).mean(axis=0)
    idx = int(mode)
    if not 0 <= idx < raw.shape[0]:
        raise BartError(f"draw index {idx} outside 0..{raw.shape[0] - 1}")
    return post.to_response(raw[idx])


@dataclass
class Tree:
    """Plain-Python view of a single tree, for inspection and prior evaluation.

    ``nodes`` maps a heap index to ``(var, cut)`` for internal nodes and to
    ``(-1, mu)`` for leaves.
    """

    nodes: dict[int, tuple[int, float]]

    @classmethod
    def root_only(cls, mu: float = 0.0) -> "Tree":
        return cls({0: (-1, mu)})

    @classmethod
    def from_flat(cls, o_var, o_cut, o_mu, o_left, root) -> "Tree":
        nodes = {}
        stack = [(root, 0)]
        while stack:
            pos, h = stack.pop()
            v = int(o_var[pos])
            if v >= 0:
                nodes[h] = (v, float(o_cut[pos]))
                stack.append((int(o_left[pos]), 2 * h + 1))
                stack.append((int(o_left[pos]) + 1, 2 * h + 2))
            else:
                nodes[h] = (-1, float(o_mu[pos]))
        return cls(nodes)

    def split(self, node: int, var: int, cut: float) -> "Tree":
        if self.nodes.get(node, (0,))[0] != -1:
            raise BartError(f"node {node} is not a leaf")
        nodes = dict(self.nodes)
        nodes[node] = (var, float(cut))
        nodes[2 * node + 1] = (-1, 0.0)
        nodes[2 * node + 2] = (-1, 0.0)
        return Tree(nodes)

    def is_leaf(self, h: int) -> bool:
        return self.nodes[h][0] == -1

    def depth(self) -> int:
        return max(K.depth_of(h) for h in self.nodes)

    def route(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[0], np.int64)
        for i in range(x.shape[0]):
            h = 0
            while not self.is_leaf(h):
                v, c = self.nodes[h]
                h = 2 * h + (1 if x[i, v] <= c else 2)
            out[i] = h
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.array([self.nodes[h][1] for h in self.route(x)])


def log_tree_prior(tree: Tree, x: np.ndarray, alpha: float = 0.95, beta: float = 2.0,
                   min_node: int = 5, max_depth: int = 10) -> float:
    """log P(T): depth-dependent split probabilities plus uniform split-rule mass.

    A node that admits no valid split (too few rows, all covariates constant,
    or at ``max_depth``) is terminal with probability one.  Trees with a leaf
    below ``min_node`` rows have zero prior mass.
    """
    x = np.ascontiguousarray(x, dtype=float)
    n, p = x.shape
    leaf = tree.route(x)
    order = np.ascontiguousarray(np.argsort(x, axis=0, kind="stable").T).astype(np.int64)
    distinct = np.array([np.unique(x[:, v]).size == n for v in range(p)], np.bool_)
    mark = np.zeros(n, np.int64)
    stamp = np.zeros(1, np.int64)
    buf = np.empty(n)
    ncut = np.empty(p, np.int64)
    total = 0.0
    for h, (v, c) in tree.nodes.items():
        # rows of node h are those whose leaf lies in h's subtree
        members = np.array([i for i in range(n) if _descends(int(leaf[i]), h)], dtype=np.int64)
        d = K.depth_of(h)
        nn = members.size
        splittable = nn > 0 and K.is_splittable(x, order, distinct, members, nn, d, max_depth,
                                                 min_node, mark, stamp, buf)
        ps = alpha * (1.0 + d) ** (-beta)
        if v == -1:
            if h != 0 and nn < min_node:
                return -math.inf
            if splittable:
                total += math.log(1.0 - ps)
        else:
            if not splittable:
                return -math.inf
            nvalid = K.cut_counts(x, order, distinct, members, nn, min_node, mark, stamp, buf,
                                  ncut)
            if ncut[v] == 0:
                return -math.inf
            total += math.log(ps) - math.log(nvalid) - math.log(ncut[v])
    return total


def _descends(leaf: int, h: int) -> bool:
    while leaf > h:
        leaf = (leaf - 1) // 2
    return leaf == h


def save_posterior(post: BartPosterior, path) -> None:
    """Debug dump (npz with a versioned header); not a stable interchange format."""
    header = {"format": "bartdr-posterior", "version": 1, "kind": post.kind,
              "n_features": post.n_features, "offset": post.offset, "scale": post.scale,
              "config": {f: getattr(post.config, f) for f in BartConfig.field_names()}}
    np.savez_compressed(path, header=np.array(json.dumps(header)), train_draws=post.train_draws,
                        sigma_trace=post.sigma_trace, node_var=post.node_var,
                        node_cut=post.node_cut, node_mu=post.node_mu, node_left=post.node_left,
                        roots=post.roots, accept=post.accept)


def load_posterior(path) -> BartPosterior:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "bartdr-posterior" or header.get("version") != 1:
            raise BartError("unrecognised posterior dump")
        return BartPosterior(kind=header["kind"], config=BartConfig(**header["config"]),
                             n_features=header["n_features"], offset=header["offset"],
                             scale=header["scale"], train_draws=z["train_draws"],
                             sigma_trace=z["sigma_trace"], node_var=z["node_var"],
                             node_cut=z["node_cut"], node_mu=z["node_mu"],
                             node_left=z["node_left"], roots=z["roots"], accept=z["accept"])
