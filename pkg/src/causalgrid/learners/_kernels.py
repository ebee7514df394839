"""Compiled kernels for CART growth and packed-ensemble prediction.

Trees are flat arrays in the usual layout: ``feature[k] == -1`` marks a leaf,
otherwise rows with ``x[feature[k]] <= threshold[k]`` go to ``left[k]``.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _best_split(X, y, srt, s, e, min_leaf, mtry, random_split, perm):
    m = e - s
    best_f = -1
    best_t = 0.0
    best_g = 0.0
    if m < 2 * min_leaf:
        return best_f, best_t, best_g
    p = X.shape[1]
    sumsq = 0.0
    mean = 0.0
    for i in range(s, e):
        v = y[srt[0, i]]
        mean += v
        sumsq += v * v
    mean /= m
    min_gain = 1e-12 * sumsq

    for k in range(p):
        perm[k] = k
    for k in range(mtry):
        j = k + np.random.randint(0, p - k)
        tmp = perm[k]
        perm[k] = perm[j]
        perm[j] = tmp
        f = perm[k]

        if random_split:
            lo = X[srt[f, s], f]
            hi = X[srt[f, e - 1], f]
            if not hi > lo:
                continue
            t = lo + np.random.random() * (hi - lo)
            if t >= hi:
                t = lo
            n_l = 0
            s_l = 0.0
            for i in range(s, e):
                r = srt[f, i]
                if X[r, f] <= t:
                    n_l += 1
                    s_l += y[r] - mean
                else:
                    break
            n_r = m - n_l
            if n_l < min_leaf or n_r < min_leaf:
                continue
            g = s_l * s_l * m / (n_l * n_r)
            if g > best_g:
                best_f, best_t, best_g = f, t, g
        else:
            s_l = 0.0
            for i in range(s, e - 1):
                r = srt[f, i]
                s_l += y[r] - mean
                n_l = i - s + 1
                n_r = m - n_l
                if n_l < min_leaf:
                    continue
                if n_r < min_leaf:
                    break
                a = X[r, f]
                b = X[srt[f, i + 1], f]
                if not a < b:
                    continue
                g = s_l * s_l * m / (n_l * n_r)
                if g > best_g:
                    t = 0.5 * (a + b)
                    if t >= b:
                        t = a
                    best_f, best_t, best_g = f, t, g
    if best_g <= min_gain:
        return -1, 0.0, 0.0
    return best_f, best_t, best_g


@njit(cache=True, nogil=True)
def grow_cart(X, y, rows, order, max_depth, min_leaf, max_leaves, mtry, random_split, best_first, seed):
    """Grow one least-squares tree on ``rows`` (duplicates allowed).

    ``order`` is the per-feature argsort of all rows of ``X`` (shape
    ``(p, N)``), computed once per fit. ``max_depth < 0`` and
    ``max_leaves < 0`` mean unlimited. With ``best_first`` the open leaf with
    the largest gain is expanded next, otherwise breadth-first.
    """
    np.random.seed(seed)
    n = rows.shape[0]
    N, p = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap)
    gain = np.zeros(cap)
    depth = np.zeros(cap, np.int64)
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    cand_f = np.full(cap, -1, np.int64)
    cand_t = np.zeros(cap)
    cand_g = np.zeros(cap)
    pending = np.empty(cap, np.int64)
    perm = np.empty(p, np.int64)

    # per-feature sorted copies of the (multi)set of training rows
    mult = np.zeros(N, np.int64)
    for i in range(n):
        mult[rows[i]] += 1
    srt = np.empty((p, n), np.int64)
    for f in range(p):
        k = 0
        for i in range(N):
            r = order[f, i]
            for _ in range(mult[r]):
                srt[f, k] = r
                k += 1
    goes_left = np.zeros(N, np.bool_)
    buf = np.empty(n, np.int64)

    tot = 0.0
    for i in range(n):
        tot += y[rows[i]]
    value[0] = tot / n
    count[0] = n
    start[0] = 0
    end[0] = n
    n_nodes = 1
    n_pending = 0
    head = 0
    if max_depth != 0:
        f, t, g = _best_split(X, y, srt, 0, n, min_leaf, mtry, random_split, perm)
        if f >= 0:
            cand_f[0], cand_t[0], cand_g[0] = f, t, g
            pending[n_pending] = 0
            n_pending += 1
    n_leaves = 1

    while head < n_pending:
        if max_leaves > 0 and n_leaves >= max_leaves:
            break
        if best_first:
            k_best = head
            for k in range(head + 1, n_pending):
                if cand_g[pending[k]] > cand_g[pending[k_best]]:
                    k_best = k
            tmp = pending[head]
            pending[head] = pending[k_best]
            pending[k_best] = tmp
        node = pending[head]
        head += 1

        f = cand_f[node]
        t = cand_t[node]
        s = start[node]
        e = end[node]
        nl = 0
        for i in range(s, e):
            r = srt[f, i]
            goes_left[r] = X[r, f] <= t
            if goes_left[r]:
                nl += 1
        for ff in range(p):
            a = 0
            b = nl
            for i in range(s, e):
                r = srt[ff, i]
                if goes_left[r]:
                    buf[a] = r
                    a += 1
                else:
                    buf[b] = r
                    b += 1
            for i in range(e - s):
                srt[ff, s + i] = buf[i]
        mid = s + nl

        feature[node] = f
        threshold[node] = t
        gain[node] = cand_g[node]
        for side in range(2):
            c = n_nodes
            n_nodes += 1
            if side == 0:
                left[node] = c
                start[c] = s
                end[c] = mid
            else:
                right[node] = c
                start[c] = mid
                end[c] = e
            depth[c] = depth[node] + 1
            acc = 0.0
            for i in range(start[c], end[c]):
                acc += y[srt[0, i]]
            count[c] = end[c] - start[c]
            value[c] = acc / count[c]
            if max_depth < 0 or depth[c] < max_depth:
                cf, ct, cg = _best_split(X, y, srt, start[c], end[c], min_leaf, mtry, random_split, perm)
                if cf >= 0:
                    cand_f[c], cand_t[c], cand_g[c] = cf, ct, cg
                    pending[n_pending] = c
                    n_pending += 1
        n_leaves += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        count[:n_nodes].copy(),
        gain[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def predict_packed(X, feature, threshold, left, right, value, roots):
    """Sum of leaf values over all packed trees for every row of ``X``."""
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for r in range(roots.shape[0]):
            node = roots[r]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += value[node]
        out[i] = acc
    return out


@njit(cache=True, nogil=True)
def apply_packed(X, feature, threshold, left, right, roots):
    """Leaf node id (global, packed numbering) of every row in every tree."""
    n = X.shape[0]
    out = np.empty((n, roots.shape[0]), np.int64)
    for i in range(n):
        for r in range(roots.shape[0]):
            node = roots[r]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i, r] = node
    return out
