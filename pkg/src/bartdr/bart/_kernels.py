"""Compiled inner loops of the sum-of-trees sampler.

Trees use heap indexing: node ``i`` has children ``2i+1`` and ``2i+2`` and sits
at depth ``floor(log2(i+1))``.  Per-tree state lives in rows of ``(m, capacity)``
arrays.  ``var`` holds the split covariate of an internal node, ``LEAF`` for a
terminal node and ``UNUSED`` for a free slot.  Rows go left when
``x[var] <= cut``.

``spl`` caches whether a node admits at least one split that leaves
``min_node`` rows on each side; a node's row set never changes while it exists,
so the flag is computed once, when the node is created.
"""

import math

import numpy as np
from numba import njit

LEAF = -1
UNUSED = -2

GROW = 0
PRUNE = 1
CHANGE = 2


@njit(cache=True)
def leaf_loglik(nn, s, sigma2, tau2):
    """Log marginal likelihood of a leaf, up to partition-independent terms."""
    d = sigma2 + nn * tau2
    return 0.5 * math.log(sigma2 / d) + 0.5 * tau2 * s * s / (sigma2 * d)


@njit(cache=True)
def count_cuts(s, nn, min_node):
    """Distinct cut values in sorted ``s[:nn]`` leaving ``min_node`` rows per side."""
    if nn < 2 * min_node:
        return 0
    hi = s[nn - min_node]
    cnt = 0
    i = min_node - 1
    while i < nn and s[i] < hi:
        if i == min_node - 1 or s[i] != s[i - 1]:
            cnt += 1
        i += 1
    return cnt


@njit(cache=True)
def kth_cut(s, nn, min_node, k):
    cnt = -1
    i = min_node - 1
    while i < nn:
        if i == min_node - 1 or s[i] != s[i - 1]:
            cnt += 1
            if cnt == k:
                return s[i]
        i += 1
    return s[nn - min_node - 1]


@njit(cache=True)
def mark_rows(rows, nn, mark, stamp):
    """Tag ``rows[:nn]`` with a fresh stamp; returns the stamp."""
    stamp[0] += 1
    s = stamp[0]
    for t in range(nn):
        mark[rows[t]] = s
    return s


@njit(cache=True)
def node_sorted(X, order, v, mark, s, out):
    """Sorted values of covariate ``v`` over the rows tagged ``s`` (a scan of the presorted order)."""
    k = 0
    col = order[v]
    for t in range(col.shape[0]):
        i = col[t]
        if mark[i] == s:
            out[k] = X[i, v]
            k += 1
    return k


@njit(cache=True)
def is_splittable(X, order, distinct, rows, nn, depth, max_depth, min_node, mark, stamp, buf):
    if depth >= max_depth or nn < 2 * min_node:
        return False
    for v in range(X.shape[1]):
        if distinct[v]:
            return True
    s = mark_rows(rows, nn, mark, stamp)
    for v in range(X.shape[1]):
        node_sorted(X, order, v, mark, s, buf)
        if buf[min_node - 1] < buf[nn - min_node]:
            return True
    return False


@njit(cache=True)
def cut_counts(X, order, distinct, rows, nn, min_node, mark, stamp, buf, out):
    nvalid = 0
    s = -1
    for v in range(X.shape[1]):
        if nn < 2 * min_node:
            out[v] = 0
        elif distinct[v]:
            out[v] = nn - 2 * min_node + 1
        else:
            if s < 0:
                s = mark_rows(rows, nn, mark, stamp)
            node_sorted(X, order, v, mark, s, buf)
            out[v] = count_cuts(buf, nn, min_node)
        if out[v] > 0:
            nvalid += 1
    return nvalid


@njit(cache=True)
def draw_rule(X, order, distinct, rows, nn, min_node, rng, mark, stamp, buf, ncut):
    """Uniform covariate among those with a valid cut, then a uniform cut value."""
    nvalid = cut_counts(X, order, distinct, rows, nn, min_node, mark, stamp, buf, ncut)
    k = rng.integers(0, nvalid)
    v = -1
    for w in range(X.shape[1]):
        if ncut[w] > 0:
            if k == 0:
                v = w
                break
            k -= 1
    s = mark_rows(rows, nn, mark, stamp)
    node_sorted(X, order, v, mark, s, buf)
    c = kth_cut(buf, nn, min_node, rng.integers(0, ncut[v]))
    return v, c


@njit(cache=True)
def split_prob(alpha, beta, depth):
    return alpha * (1.0 + depth) ** (-beta)


@njit(cache=True)
def depth_of(i):
    d = 0
    i += 1
    while i > 1:
        i >>= 1
        d += 1
    return d


@njit(cache=True)
def tree_counts(var_j, spl_j, hw):
    """(internal nodes, growable leaves, internal nodes whose children are both leaves)."""
    n_int = 0
    n_grow = 0
    n_nog = 0
    for i in range(hw):
        vi = var_j[i]
        if vi >= 0:
            n_int += 1
            if var_j[2 * i + 1] == LEAF and var_j[2 * i + 2] == LEAF:
                n_nog += 1
        elif vi == LEAF and spl_j[i]:
            n_grow += 1
    return n_int, n_grow, n_nog


@njit(cache=True)
def kth_growable(var_j, spl_j, hw, k):
    for i in range(hw):
        if var_j[i] == LEAF and spl_j[i]:
            if k == 0:
                return i
            k -= 1
    return -1


@njit(cache=True)
def kth_nog(var_j, hw, k):
    for i in range(hw):
        if var_j[i] >= 0 and var_j[2 * i + 1] == LEAF and var_j[2 * i + 2] == LEAF:
            if k == 0:
                return i
            k -= 1
    return -1


@njit(cache=True)
def gather_rows(leaf_of_j, a, b, rows):
    """Rows routed to node ``a`` or ``b``; returns the count."""
    nn = 0
    for i in range(leaf_of_j.shape[0]):
        li = leaf_of_j[i]
        if li == a or li == b:
            rows[nn] = i
            nn += 1
    return nn


@njit(cache=True)
def partition(X, rows, nn, v, c, resid, left, right):
    nl = 0
    nr = 0
    sl = 0.0
    sr = 0.0
    for t in range(nn):
        i = rows[t]
        if X[i, v] <= c:
            left[nl] = i
            nl += 1
            sl += resid[i]
        else:
            right[nr] = i
            nr += 1
            sr += resid[i]
    return nl, sl, nr, sr


@njit(cache=True)
def route_pred(Xp, leaf_of_pj, a, b, node, v, c):
    """Send held-out rows sitting in ``a`` or ``b`` to the children of ``node``."""
    lc = 2 * node + 1
    for i in range(Xp.shape[0]):
        li = leaf_of_pj[i]
        if li == a or li == b:
            leaf_of_pj[i] = lc if Xp[i, v] <= c else lc + 1


@njit(cache=True)
def apply_grow(var_j, cut_j, nobs_j, spl_j, mu_j, leaf_of_j, hiwater, j, node, v, c,
               left, nl, right, nr, spl_l, spl_r):
    lc = 2 * node + 1
    rc = lc + 1
    var_j[node] = v
    cut_j[node] = c
    var_j[lc] = LEAF
    var_j[rc] = LEAF
    cut_j[lc] = 0.0
    cut_j[rc] = 0.0
    nobs_j[lc] = nl
    nobs_j[rc] = nr
    spl_j[lc] = spl_l
    spl_j[rc] = spl_r
    mu_j[lc] = mu_j[node]
    mu_j[rc] = mu_j[node]
    for t in range(nl):
        leaf_of_j[left[t]] = lc
    for t in range(nr):
        leaf_of_j[right[t]] = rc
    if rc + 1 > hiwater[j]:
        hiwater[j] = rc + 1


@njit(cache=True)
def apply_prune(var_j, cut_j, nobs_j, spl_j, mu_j, leaf_of_j, hiwater, j, node):
    lc = 2 * node + 1
    rc = lc + 1
    for t in (lc, rc):
        var_j[t] = UNUSED
        cut_j[t] = 0.0
        nobs_j[t] = 0
        spl_j[t] = False
        mu_j[t] = 0.0
    var_j[node] = LEAF
    cut_j[node] = 0.0
    for i in range(leaf_of_j.shape[0]):
        if leaf_of_j[i] == lc or leaf_of_j[i] == rc:
            leaf_of_j[i] = node
    hw = hiwater[j]
    while hw > 1 and var_j[hw - 1] == UNUSED:
        hw -= 1
    hiwater[j] = hw


@njit(cache=True)
def apply_change(var_j, cut_j, nobs_j, spl_j, leaf_of_j, node, v, c, left, nl, right, nr,
                 spl_l, spl_r):
    lc = 2 * node + 1
    rc = lc + 1
    var_j[node] = v
    cut_j[node] = c
    nobs_j[lc] = nl
    nobs_j[rc] = nr
    spl_j[lc] = spl_l
    spl_j[rc] = spl_r
    for t in range(nl):
        leaf_of_j[left[t]] = lc
    for t in range(nr):
        leaf_of_j[right[t]] = rc


@njit(cache=True)
def update_tree(j, X, order, distinct, y, total, Xp, leaf_of_p, total_p,
                var, cut, mu, nobs, spl, leaf_of, hiwater, sigma2, tau2,
                alpha, beta, p_grow, p_prune, min_node, max_depth, rng,
                resid, ibuf, mark, stamp, buf, ncut, sums, cnts):
    """One Metropolis-Hastings tree move followed by a Gibbs draw of the leaf means.

    ``ibuf`` is an (3, n) integer scratch array.  Returns the attempted move
    type (``-1`` when nothing could be proposed) and whether it was accepted.
    """
    n = y.shape[0]
    var_j = var[j]
    cut_j = cut[j]
    mu_j = mu[j]
    nobs_j = nobs[j]
    spl_j = spl[j]
    leaf_of_j = leaf_of[j]
    leaf_of_pj = leaf_of_p[j]
    rows = ibuf[0]
    left = ibuf[1]
    right = ibuf[2]
    for i in range(n):
        resid[i] = y[i] - total[i] + mu_j[leaf_of_j[i]]
    for i in range(Xp.shape[0]):
        total_p[i] -= mu_j[leaf_of_pj[i]]

    hw = hiwater[j]
    n_int, n_grow, n_nog = tree_counts(var_j, spl_j, hw)
    if n_int == 0:
        move = GROW
    else:
        u = rng.random()
        move = GROW if u < p_grow else (PRUNE if u < p_grow + p_prune else CHANGE)

    accepted = False
    if move == GROW and n_grow == 0:
        move = -1
    elif move == GROW:
        node = kth_growable(var_j, spl_j, hw, rng.integers(0, n_grow))
        nn = gather_rows(leaf_of_j, node, node, rows)
        v, c = draw_rule(X, order, distinct, rows, nn, min_node, rng, mark, stamp, buf, ncut)
        nl, sl, nr, sr = partition(X, rows, nn, v, c, resid, left, right)
        d = depth_of(node)
        spl_l = is_splittable(X, order, distinct, left, nl, d + 1, max_depth, min_node, mark,
                              stamp, buf)
        spl_r = is_splittable(X, order, distinct, right, nr, d + 1, max_depth, min_node, mark,
                              stamp, buf)
        pd = split_prob(alpha, beta, d)
        pd1 = split_prob(alpha, beta, d + 1)
        lr = (leaf_loglik(nl, sl, sigma2, tau2) + leaf_loglik(nr, sr, sigma2, tau2)
              - leaf_loglik(nn, sl + sr, sigma2, tau2))
        lr += math.log(pd) - math.log(1.0 - pd)
        if spl_l:
            lr += math.log(1.0 - pd1)
        if spl_r:
            lr += math.log(1.0 - pd1)
        nog_new = n_nog + 1
        if node > 0:
            sib = node + 1 if node % 2 == 1 else node - 1
            if var_j[sib] == LEAF:
                nog_new -= 1
        p_fwd = (1.0 if n_int == 0 else p_grow) / n_grow
        p_rev = p_prune / nog_new
        lr += math.log(p_rev) - math.log(p_fwd)
        if math.log(rng.random()) < lr:
            apply_grow(var_j, cut_j, nobs_j, spl_j, mu_j, leaf_of_j, hiwater, j, node, v, c,
                       left, nl, right, nr, spl_l, spl_r)
            route_pred(Xp, leaf_of_pj, node, node, node, v, c)
            accepted = True
    elif move == PRUNE:
        node = kth_nog(var_j, hw, rng.integers(0, n_nog))
        lc = 2 * node + 1
        rc = lc + 1
        nl = 0
        nr = 0
        sl = 0.0
        sr = 0.0
        for i in range(n):
            li = leaf_of_j[i]
            if li == lc:
                nl += 1
                sl += resid[i]
            elif li == rc:
                nr += 1
                sr += resid[i]
        d = depth_of(node)
        pd = split_prob(alpha, beta, d)
        pd1 = split_prob(alpha, beta, d + 1)
        lr = (leaf_loglik(nl + nr, sl + sr, sigma2, tau2)
              - leaf_loglik(nl, sl, sigma2, tau2) - leaf_loglik(nr, sr, sigma2, tau2))
        lr += math.log(1.0 - pd) - math.log(pd)
        if spl_j[lc]:
            lr -= math.log(1.0 - pd1)
        if spl_j[rc]:
            lr -= math.log(1.0 - pd1)
        n_grow_new = n_grow + 1 - (1 if spl_j[lc] else 0) - (1 if spl_j[rc] else 0)
        p_g_new = 1.0 if n_int == 1 else p_grow
        lr += math.log(p_g_new / n_grow_new) - math.log(p_prune / n_nog)
        if math.log(rng.random()) < lr:
            apply_prune(var_j, cut_j, nobs_j, spl_j, mu_j, leaf_of_j, hiwater, j, node)
            for i in range(Xp.shape[0]):
                if leaf_of_pj[i] == lc or leaf_of_pj[i] == rc:
                    leaf_of_pj[i] = node
            accepted = True
    else:
        node = kth_nog(var_j, hw, rng.integers(0, n_nog))
        lc = 2 * node + 1
        rc = lc + 1
        nn = gather_rows(leaf_of_j, lc, rc, rows)
        nl0 = 0
        sl0 = 0.0
        sr0 = 0.0
        for t in range(nn):
            i = rows[t]
            if leaf_of_j[i] == lc:
                nl0 += 1
                sl0 += resid[i]
            else:
                sr0 += resid[i]
        nr0 = nn - nl0
        v, c = draw_rule(X, order, distinct, rows, nn, min_node, rng, mark, stamp, buf, ncut)
        nl, sl, nr, sr = partition(X, rows, nn, v, c, resid, left, right)
        d = depth_of(node)
        pd1 = split_prob(alpha, beta, d + 1)
        spl_l = is_splittable(X, order, distinct, left, nl, d + 1, max_depth, min_node, mark,
                              stamp, buf)
        spl_r = is_splittable(X, order, distinct, right, nr, d + 1, max_depth, min_node, mark,
                              stamp, buf)
        lr = (leaf_loglik(nl, sl, sigma2, tau2) + leaf_loglik(nr, sr, sigma2, tau2)
              - leaf_loglik(nl0, sl0, sigma2, tau2) - leaf_loglik(nr0, sr0, sigma2, tau2))
        lt = math.log(1.0 - pd1)
        lr += lt * ((1 if spl_l else 0) + (1 if spl_r else 0)
                    - (1 if spl_j[lc] else 0) - (1 if spl_j[rc] else 0))
        if math.log(rng.random()) < lr:
            apply_change(var_j, cut_j, nobs_j, spl_j, leaf_of_j, node, v, c, left, nl, right, nr,
                         spl_l, spl_r)
            route_pred(Xp, leaf_of_pj, lc, rc, node, v, c)
            accepted = True

    # Gibbs draw of the leaf means from their conjugate normal
    hw = hiwater[j]
    for k in range(hw):
        sums[k] = 0.0
        cnts[k] = 0
    for i in range(n):
        li = leaf_of_j[i]
        sums[li] += resid[i]
        cnts[li] += 1
    for k in range(hw):
        if var_j[k] == LEAF:
            pv = 1.0 / (1.0 / tau2 + cnts[k] / sigma2)
            mu_j[k] = pv * sums[k] / sigma2 + math.sqrt(pv) * rng.standard_normal()
    for i in range(n):
        total[i] = y[i] - resid[i] + mu_j[leaf_of_j[i]]
    for i in range(Xp.shape[0]):
        total_p[i] += mu_j[leaf_of_pj[i]]
    return move, accepted


@njit(cache=True)
def recompute_total(mu, leaf_of, total):
    """Rebuild the sum of tree fits from scratch (limits floating-point drift)."""
    total[:] = 0.0
    for j in range(mu.shape[0]):
        for i in range(total.shape[0]):
            total[i] += mu[j, leaf_of[j, i]]


@njit(cache=True)
def tail_normal(rng, a):
    """Standard normal conditioned on x > a."""
    if a <= 0.45:
        while True:
            x = rng.standard_normal()
            if x > a:
                return x
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        x = a + rng.standard_exponential() / alpha
        if rng.random() <= math.exp(-0.5 * (x - alpha) * (x - alpha)):
            return x


@njit(cache=True)
def draw_latent(r, total, offset, y, rng):
    """Probit augmentation: latent value around G = offset + total, sign fixed by r."""
    for i in range(r.shape[0]):
        g = offset + total[i]
        if r[i] == 1:
            z = g + tail_normal(rng, -g)
        else:
            z = g - tail_normal(rng, g)
        y[i] = z - offset


@njit(cache=True)
def sweep(X, order, distinct, y, total, Xp, leaf_of_p, total_p, var, cut, mu, nobs, spl,
          leaf_of, hiwater, sigma2, tau2, alpha, beta, p_grow, p_prune, min_node, max_depth,
          rng, resid, ibuf, mark, stamp, buf, ncut, sums, cnts, stats):
    """One backfitting pass over all trees.  ``stats[move, 0/1]`` counts proposals/acceptances."""
    for j in range(var.shape[0]):
        move, acc = update_tree(j, X, order, distinct, y, total, Xp, leaf_of_p, total_p,
                                var, cut, mu, nobs, spl, leaf_of, hiwater, sigma2, tau2,
                                alpha, beta, p_grow, p_prune, min_node, max_depth, rng,
                                resid, ibuf, mark, stamp, buf, ncut, sums, cnts)
        if move >= 0:
            stats[move, 0] += 1
            if acc:
                stats[move, 1] += 1


@njit(cache=True)
def sum_sq_resid(y, total):
    s = 0.0
    for i in range(y.shape[0]):
        e = y[i] - total[i]
        s += e * e
    return s


@njit(cache=True)
def snapshot(var, cut, mu, hiwater):
    """Flatten a forest breadth-first; siblings are stored adjacently.

    Returns ``(o_var, o_cut, o_mu, o_left, roots)`` where ``o_left`` is the
    position of the left child (right child follows it) and ``roots[j]`` the
    position of tree ``j``'s root.
    """
    m = var.shape[0]
    total = 0
    for j in range(m):
        for i in range(hiwater[j]):
            if var[j, i] != UNUSED:
                total += 1
    o_var = np.empty(total, np.int32)
    o_cut = np.empty(total, np.float64)
    o_mu = np.empty(total, np.float64)
    o_left = np.full(total, -1, np.int64)
    roots = np.empty(m, np.int64)
    queue = np.empty(var.shape[1], np.int64)
    pos = 0
    for j in range(m):
        roots[j] = pos
        queue[0] = 0
        head = 0
        tail = 1
        base = pos
        while head < tail:
            h = queue[head]
            p = base + head
            o_var[p] = var[j, h]
            o_cut[p] = cut[j, h]
            o_mu[p] = mu[j, h]
            if var[j, h] >= 0:
                o_left[p] = base + tail
                queue[tail] = 2 * h + 1
                queue[tail + 1] = 2 * h + 2
                tail += 2
            head += 1
        pos = base + tail
    return o_var, o_cut, o_mu, o_left, roots


@njit(cache=True)
def predict_forests(X, o_var, o_cut, o_mu, o_left, roots):
    """Sum-of-trees predictions, one row of output per stored forest (``roots`` is draws x m)."""
    nd, m = roots.shape
    n = X.shape[0]
    out = np.zeros((nd, n))
    for d in range(nd):
        for t in range(m):
            r0 = roots[d, t]
            for i in range(n):
                p = r0
                while o_var[p] >= 0:
                    p = o_left[p] + (1 if X[i, o_var[p]] > o_cut[p] else 0)
                out[d, i] += o_mu[p]
    return out
