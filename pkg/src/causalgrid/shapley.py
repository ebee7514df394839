"""Exact Shapley attribution for fitted tree ensembles.

Two independent routes compute the same quantity:

* ``tree_shap``: the polynomial-time path algorithm that tracks, for every
  root-to-leaf path, the proportion of subsets that flow down it.
* ``brute_shap``: explicit enumeration of all ``2**p`` feature subsets of the
  coalition value ``f_x(S)`` followed by the weighted-difference sum.

Missing features are marginalized with the training-cover weights stored in
each node ("tree-path" expectation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from numba import njit

from .learners import TreeEnsemble

MAX_ENUM_FEATURES = 15


class ShapError(ValueError):
    pass


# --------------------------------------------------------------------------
# coalition values by direct recursion (oracle route)

@njit(cache=True, nogil=True)
def _tree_cond_exp(feature, threshold, left, right, value, count, root, x, in_s):
    stack = np.empty(256, np.int64)
    wstack = np.empty(256)
    top = 0
    stack[0] = root
    wstack[0] = 1.0
    top = 1
    total = 0.0
    while top > 0:
        top -= 1
        node = stack[top]
        w = wstack[top]
        f = feature[node]
        if f < 0:
            total += w * value[node]
            continue
        lc = left[node]
        rc = right[node]
        if in_s[f]:
            stack[top] = lc if x[f] <= threshold[node] else rc
            wstack[top] = w
            top += 1
        else:
            c = count[node]
            stack[top] = lc
            wstack[top] = w * count[lc] / c
            top += 1
            stack[top] = rc
            wstack[top] = w * count[rc] / c
            top += 1
    return total


@njit(cache=True, nogil=True)
def _subset_values(feature, threshold, left, right, value, count, roots, x, p):
    n_sub = 1 << p
    out = np.zeros(n_sub)
    in_s = np.zeros(p, np.bool_)
    for mask in range(n_sub):
        for j in range(p):
            in_s[j] = (mask >> j) & 1
        acc = 0.0
        for r in range(roots.shape[0]):
            acc += _tree_cond_exp(feature, threshold, left, right, value, count, roots[r], x, in_s)
        out[mask] = acc
    return out


def conditional_expectation(model: TreeEnsemble, x, S: Sequence[int]) -> float:
    """``f_x(S)``: prediction at ``x`` when only the features in ``S`` are known."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    in_s = np.zeros(model.n_features, dtype=np.bool_)
    for j in S:
        if not 0 <= j < model.n_features:
            raise ShapError(f"feature index {j} out of range")
        in_s[j] = True
    if not model.trees:
        return model.base_score
    feature, threshold, left, right, value, count, roots = model.packed
    acc = sum(_tree_cond_exp(feature, threshold, left, right, value, count, r, x, in_s) for r in roots)
    return model.base_score + model.tree_weight * acc


def expected_value(model: TreeEnsemble) -> float:
    return conditional_expectation(model, np.zeros(model.n_features), [])


def subset_values(model: TreeEnsemble, x) -> np.ndarray:
    """``f_x(S)`` for every subset, indexed by bitmask (bit ``j`` set means ``j`` in ``S``)."""
    p = model.n_features
    if p > MAX_ENUM_FEATURES:
        raise ShapError(f"subset enumeration refused for p={p} > {MAX_ENUM_FEATURES}")
    if not model.trees:
        return np.full(1 << p, model.base_score)
    x = np.ascontiguousarray(x, dtype=np.float64)
    feature, threshold, left, right, value, count, roots = model.packed
    raw = _subset_values(feature, threshold, left, right, value, count, roots, x, p)
    return model.base_score + model.tree_weight * raw


def _popcounts(p: int) -> np.ndarray:
    masks = np.arange(1 << p)
    return np.array([bin(m).count("1") for m in masks])


def _shapley_from_values(v: np.ndarray, p: int) -> np.ndarray:
    masks = np.arange(1 << p)
    size = _popcounts(p)
    weight = np.array([math.factorial(s) * math.factorial(p - s - 1) / math.factorial(p) for s in range(p)])
    phi = np.zeros(p)
    for j in range(p):
        bit = 1 << j
        sel = masks[(masks & bit) == 0]
        phi[j] = np.sum(weight[size[sel]] * (v[sel | bit] - v[sel]))
    return phi


@dataclass
class ShapExplanation:
    """Attributions for a batch of instances; ``values[i]`` belongs to ``data[i]``."""

    values: np.ndarray
    base_value: float
    data: np.ndarray
    feature_names: list[str]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.values[i]


def _names(p: int, feature_names: Sequence[str] | None) -> list[str]:
    return list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]


def brute_shap(model: TreeEnsemble, X, feature_names: Sequence[str] | None = None) -> ShapExplanation:
    """Shapley values by enumeration of all subsets; oracle for ``tree_shap``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    p = model.n_features
    phi = np.array([_shapley_from_values(subset_values(model, x), p) for x in X])
    return ShapExplanation(phi, expected_value(model), X, _names(p, feature_names))


# --------------------------------------------------------------------------
# path algorithm (fast route)

@njit(cache=True, nogil=True)
def _extend(pz, po, pw, pf, lvl, d, zero, one, feat):
    pf[lvl, d] = feat
    pz[lvl, d] = zero
    po[lvl, d] = one
    pw[lvl, d] = 1.0 if d == 0 else 0.0
    for i in range(d - 1, -1, -1):
        pw[lvl, i + 1] += one * pw[lvl, i] * (i + 1) / (d + 1)
        pw[lvl, i] = zero * pw[lvl, i] * (d - i) / (d + 1)


@njit(cache=True, nogil=True)
def _unwind(pz, po, pw, pf, lvl, d, k):
    one = po[lvl, k]
    zero = pz[lvl, k]
    nxt = pw[lvl, d]
    for i in range(d - 1, -1, -1):
        if one != 0.0:
            tmp = pw[lvl, i]
            pw[lvl, i] = nxt * (d + 1) / ((i + 1) * one)
            nxt = tmp - pw[lvl, i] * zero * (d - i) / (d + 1)
        else:
            pw[lvl, i] = pw[lvl, i] * (d + 1) / (zero * (d - i))
    for i in range(k, d):
        pf[lvl, i] = pf[lvl, i + 1]
        pz[lvl, i] = pz[lvl, i + 1]
        po[lvl, i] = po[lvl, i + 1]


@njit(cache=True, nogil=True)
def _unwound_sum(pz, po, pw, lvl, d, k):
    one = po[lvl, k]
    zero = pz[lvl, k]
    nxt = pw[lvl, d]
    total = 0.0
    for i in range(d - 1, -1, -1):
        if one != 0.0:
            tmp = nxt * (d + 1) / ((i + 1) * one)
            total += tmp
            nxt = pw[lvl, i] - tmp * zero * (d - i) / (d + 1)
        else:
            total += pw[lvl, i] / (zero * (d - i) / (d + 1))
    return total


@njit(cache=True, nogil=True)
def _tree_shap_one(x, phi, root, pz, po, pw, pf, st_node, st_lvl, st_d, st_zero, st_one, st_feat,
                   feature, threshold, left, right, value, count):
    # depth-first walk with an explicit stack; level ``lvl`` owns row ``lvl`` of
    # the path arrays, so a finished subtree never disturbs its parent's path
    top = 0
    st_node[0], st_lvl[0], st_d[0] = root, 0, 0
    st_zero[0], st_one[0], st_feat[0] = 1.0, 1.0, -1
    while top >= 0:
        node, lvl, d = st_node[top], st_lvl[top], st_d[top]
        zero, one, feat = st_zero[top], st_one[top], st_feat[top]
        top -= 1
        if lvl > 0:
            for i in range(d):
                pz[lvl, i] = pz[lvl - 1, i]
                po[lvl, i] = po[lvl - 1, i]
                pw[lvl, i] = pw[lvl - 1, i]
                pf[lvl, i] = pf[lvl - 1, i]
        _extend(pz, po, pw, pf, lvl, d, zero, one, feat)
        f = feature[node]
        if f < 0:
            for i in range(1, d + 1):
                w = _unwound_sum(pz, po, pw, lvl, d, i)
                phi[pf[lvl, i]] += w * (po[lvl, i] - pz[lvl, i]) * value[node]
            continue
        if x[f] <= threshold[node]:
            hot, cold = left[node], right[node]
        else:
            hot, cold = right[node], left[node]
        iz = 1.0
        io = 1.0
        k = 1
        while k <= d:
            if pf[lvl, k] == f:
                break
            k += 1
        if k <= d:
            iz = pz[lvl, k]
            io = po[lvl, k]
            _unwind(pz, po, pw, pf, lvl, d, k)
            d -= 1
        c = count[node]
        top += 1
        st_node[top], st_lvl[top], st_d[top] = cold, lvl + 1, d + 1
        st_zero[top], st_one[top], st_feat[top] = iz * count[cold] / c, 0.0, f
        top += 1
        st_node[top], st_lvl[top], st_d[top] = hot, lvl + 1, d + 1
        st_zero[top], st_one[top], st_feat[top] = iz * count[hot] / c, io, f


@njit(cache=True, nogil=True)
def _tree_shap_batch(X, feature, threshold, left, right, value, count, roots, max_depth):
    n, p = X.shape
    out = np.zeros((n, p))
    size = max_depth + 2
    pz = np.zeros((size, size))
    po = np.zeros((size, size))
    pw = np.zeros((size, size))
    pf = np.zeros((size, size), np.int64)
    cap = 2 * size + 2
    st_node = np.empty(cap, np.int64)
    st_lvl = np.empty(cap, np.int64)
    st_d = np.empty(cap, np.int64)
    st_zero = np.empty(cap)
    st_one = np.empty(cap)
    st_feat = np.empty(cap, np.int64)
    for i in range(n):
        phi = np.zeros(p)
        for r in range(roots.shape[0]):
            _tree_shap_one(X[i], phi, roots[r], pz, po, pw, pf, st_node, st_lvl, st_d, st_zero, st_one,
                           st_feat, feature, threshold, left, right, value, count)
        out[i] = phi
    return out


def tree_shap(model: TreeEnsemble, X, feature_names: Sequence[str] | None = None) -> ShapExplanation:
    """Exact Shapley values for every row of ``X`` in polynomial time."""
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    p = model.n_features
    if X.shape[1] != p:
        raise ShapError(f"expected {p} columns, got {X.shape[1]}")
    base = expected_value(model)
    if not model.trees:
        return ShapExplanation(np.zeros((len(X), p)), base, X, _names(p, feature_names))
    feature, threshold, left, right, value, count, roots = model.packed
    max_depth = max(t.depth for t in model.trees)
    phi = _tree_shap_batch(X, feature, threshold, left, right, value, count, roots, max_depth)
    return ShapExplanation(model.tree_weight * phi, base, X, _names(p, feature_names))


# --------------------------------------------------------------------------
# summaries

def global_importance(expl: ShapExplanation) -> pd.DataFrame:
    """Mean absolute Shapley value per feature, sorted descending (ties by name)."""
    if len(expl) == 0:
        raise ShapError("need at least one explanation")
    imp = np.mean(np.abs(expl.values), axis=0)
    df = pd.DataFrame({"feature": expl.feature_names, "importance": imp})
    return df.sort_values(["importance", "feature"], ascending=[False, True], kind="mergesort").reset_index(drop=True)


def shapley_interactions(model: TreeEnsemble, x) -> np.ndarray:
    """Pairwise Shapley interaction values at ``x`` (symmetric, split evenly across ij/ji).

    The diagonal holds main effects, so the full matrix sums to ``f(x) - base``.
    """
    p = model.n_features
    v = subset_values(model, x)
    masks = np.arange(1 << p)
    size = _popcounts(p)
    phi = _shapley_from_values(v, p)
    out = np.zeros((p, p))
    if p == 1:
        out[0, 0] = phi[0]
        return out
    weight = np.array([math.factorial(s) * math.factorial(p - s - 2) / (2.0 * math.factorial(p - 1))
                       for s in range(p - 1)])
    for i in range(p):
        for j in range(i + 1, p):
            bi, bj = 1 << i, 1 << j
            sel = masks[(masks & (bi | bj)) == 0]
            delta = v[sel | bi | bj] - v[sel | bi] - v[sel | bj] + v[sel]
            out[i, j] = out[j, i] = np.sum(weight[size[sel]] * delta)
    for i in range(p):
        out[i, i] = phi[i] - (out[i].sum() - out[i, i])
    return out


@dataclass
class InteractionMatrix:
    matrix: np.ndarray
    feature_names: list[str]
    n_samples: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.matrix, index=self.feature_names, columns=self.feature_names)


def interaction_matrix(model: TreeEnsemble, X_sample, feature_names: Sequence[str] | None = None,
                       max_samples: int = 200) -> InteractionMatrix:
    """Mean absolute interaction index per feature pair over (at most ``max_samples``) rows."""
    p = model.n_features
    if p > MAX_ENUM_FEATURES:
        raise ShapError(f"interaction enumeration refused for p={p} > {MAX_ENUM_FEATURES}")
    X = np.atleast_2d(np.asarray(X_sample, dtype=np.float64))[:max_samples]
    acc = np.zeros((p, p))
    for x in X:
        acc += np.abs(shapley_interactions(model, x))
    acc /= len(X)
    acc = 0.5 * (acc + acc.T)
    return InteractionMatrix(acc, _names(p, feature_names), len(X))


def lowess(x, y, frac: float = 0.3, iters: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Robust locally weighted linear smoothing; returns ``(x_sorted, fitted)``.

    Each point is fitted from its ``ceil(frac * n)`` nearest neighbours with
    tricube weights; ``iters`` robustifying passes reweight by the bisquare
    of residuals scaled by six median absolute residuals.
    """
    if not 0.0 < frac <= 1.0:
        raise ShapError("frac must lie in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    x, y = x[order], y[order]
    n = len(x)
    if n < 2:
        return x, y.copy()
    k = min(n, max(2, int(math.ceil(frac * n))))
    dist = np.abs(x[:, None] - x[None, :])
    h = np.sort(dist, axis=1)[:, k - 1]
    h = np.where(h > 0, h, np.finfo(float).tiny)
    u = np.clip(dist / h[:, None], 0.0, 1.0)
    w_local = (1.0 - u ** 3) ** 3
    robust = np.ones(n)
    fitted = np.zeros(n)
    for it in range(iters + 1):
        for i in range(n):
            w = w_local[i] * robust
            sw = w.sum()
            if sw <= 0:
                fitted[i] = y[i]
                continue
            xm = w @ x / sw
            ym = w @ y / sw
            sxx = w @ (x - xm) ** 2
            if sxx > 1e-12 * max(1.0, xm * xm) * sw:
                b = w @ ((x - xm) * (y - ym)) / sxx
                fitted[i] = ym + b * (x[i] - xm)
            else:
                fitted[i] = ym
        if it == iters:
            break
        resid = y - fitted
        s = np.median(np.abs(resid))
        if s <= 0:
            break
        r = np.clip(resid / (6.0 * s), -1.0, 1.0)
        robust = (1.0 - r ** 2) ** 2
    return x, fitted


def dependence_data(expl: ShapExplanation, feature: int | str, frac: float = 0.3, iters: int = 2) -> pd.DataFrame:
    """Scatter ``(x_j, phi_j)`` with a LOWESS curve; columns x, phi, lowess_x, lowess_y."""
    j = expl.feature_names.index(feature) if isinstance(feature, str) else int(feature)
    xs = expl.data[:, j]
    phi = expl.values[:, j]
    if len(xs) < 10:
        raise ShapError("need at least 10 points for a smoothed dependence curve")
    lx, ly = lowess(xs, phi, frac=frac, iters=iters)
    order = np.argsort(xs, kind="mergesort")
    return pd.DataFrame({"x": xs[order], "phi": phi[order], "lowess_x": lx, "lowess_y": ly})
