"""Honest causal forest for a continuous treatment.

Outcome and treatment are first centered with cross-fitted nuisance models.
Each tree is grown on a subsample that is split in two: the split half
chooses the partition, the estimation half fills the leaves. The forest
turns co-leaf membership into kernel weights and solves a weighted least
squares slope of centered outcome on centered treatment at every query point.

Trees come in pairs sharing a half-sample ("little bags"); the spread of
bag-level linearized estimates gives the variance.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from numba import njit

from ._rng import derive_seed, rng_for
from .dml import DmlEstimate, FoldPlan, Z95, crossfit_residuals, make_folds, normal_inference
from .learners import LearnerSpec

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_RETRIES = 5
# leaf statistic columns, all summed over estimation-half rows
N, ST, SY, STT, STY = range(5)


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 2000
    subsample: float = 0.5
    honest_fraction: float = 0.5
    min_leaf: int = 5
    mtry: int | None = None
    max_depth: int | None = None
    # a split is kept only if its squared standardized slope difference reaches this
    min_split_stat: float = 9.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.subsample < 1.0 or not 0.0 < self.honest_fraction < 1.0:
            raise ForestError("subsample and honest_fraction must lie in (0, 1)")
        if self.n_trees < 2 or self.n_trees % 2:
            raise ForestError("n_trees must be an even number >= 2 (trees are grown in pairs)")
        if self.min_leaf < 1:
            raise ForestError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ForestError("mtry must be >= 1")
        if self.min_split_stat < 0:
            raise ForestError("min_split_stat must be >= 0")

    def resolved_mtry(self, p: int) -> int:
        return min(p, self.mtry if self.mtry is not None else int(math.ceil(math.sqrt(p))))


# --------------------------------------------------------------------------
# tree growth

@njit(cache=True, nogil=True)
def _split_node(X, yr, tr, jidx, js, je, iidx, is_, ie, min_leaf, mtry, min_stat, perm):
    p = X.shape[1]
    mj = je - js
    mi = ie - is_
    best_f = -1
    best_t = 0.0
    best_g = 0.0
    best_z = 0.0
    if mj < 2 * min_leaf or mi < 2 * min_leaf:
        return best_f, best_t, best_g
    jtt_tot = 0.0
    itt_tot = 0.0
    for k in range(js, je):
        jtt_tot += tr[jidx[k]] ** 2
    for k in range(is_, ie):
        itt_tot += tr[iidx[k]] ** 2
    eps_j = 1e-12 * jtt_tot
    eps_i = 1e-12 * itt_tot

    jv = np.empty(mj)
    iv = np.empty(mi)
    # prefix moments over the split half: t^2, t*y, t^2 y^2, t^3 y, t^4
    c_tt = np.empty(mj)
    c_ty = np.empty(mj)
    c_ttyy = np.empty(mj)
    c_ttty = np.empty(mj)
    c_tttt = np.empty(mj)
    for k in range(p):
        perm[k] = k
    for k in range(mtry):
        j = k + np.random.randint(0, p - k)
        tmp = perm[k]
        perm[k] = perm[j]
        perm[j] = tmp
        f = perm[k]
        for a in range(mj):
            jv[a] = X[jidx[js + a], f]
        for a in range(mi):
            iv[a] = X[iidx[is_ + a], f]
        jo = np.argsort(jv, kind="mergesort")
        io = np.argsort(iv, kind="mergesort")
        a_tt = 0.0
        a_ty = 0.0
        a_ttyy = 0.0
        a_ttty = 0.0
        a_tttt = 0.0
        for a in range(mj):
            r = jidx[js + jo[a]]
            t = tr[r]
            y = yr[r]
            a_tt += t * t
            a_ty += t * y
            a_ttyy += t * t * y * y
            a_ttty += t * t * t * y
            a_tttt += t * t * t * t
            c_tt[a] = a_tt
            c_ty[a] = a_ty
            c_ttyy[a] = a_ttyy
            c_ttty[a] = a_ttty
            c_tttt[a] = a_tttt
        ptr = 0
        i_tt = 0.0
        for a in range(min_leaf - 1, mj - min_leaf):
            lo = jv[jo[a]]
            hi = jv[jo[a + 1]]
            if not lo < hi:
                continue
            thr = 0.5 * (lo + hi)
            if thr >= hi:
                thr = lo
            while ptr < mi and iv[io[ptr]] <= thr:
                i_tt += tr[iidx[is_ + io[ptr]]] ** 2
                ptr += 1
            if ptr < min_leaf:
                continue
            if mi - ptr < min_leaf:
                break
            if i_tt <= eps_i or itt_tot - i_tt <= eps_i:
                continue
            ttl = c_tt[a]
            ttr = c_tt[mj - 1] - ttl
            if ttl <= eps_j or ttr <= eps_j:
                continue
            tyl = c_ty[a]
            tyr = c_ty[mj - 1] - tyl
            taul = tyl / ttl
            taur = tyr / ttr
            nl = a + 1
            nr = mj - nl
            diff = taul - taur
            g = nl * nr / (nl + nr) * diff * diff
            if g > best_g:
                # sandwich variances of the two child slopes
                ql = c_ttyy[a] - 2.0 * taul * c_ttty[a] + taul * taul * c_tttt[a]
                qr = (c_ttyy[mj - 1] - c_ttyy[a]) - 2.0 * taur * (c_ttty[mj - 1] - c_ttty[a]) \
                    + taur * taur * (c_tttt[mj - 1] - c_tttt[a])
                v = max(ql, 0.0) / (ttl * ttl) + max(qr, 0.0) / (ttr * ttr)
                z = diff * diff / v if v > 0 else np.inf
                best_f, best_t, best_g, best_z = f, thr, g, z
    if best_f < 0 or best_g <= 0.0 or best_z < min_stat:
        return -1, 0.0, 0.0
    return best_f, best_t, best_g


@njit(cache=True, nogil=True)
def grow_honest(X, yr, tr, J, I, min_leaf, mtry, max_depth, min_stat, seed):
    np.random.seed(seed)
    p = X.shape[1]
    nj = J.shape[0]
    ni = I.shape[0]
    cap = 2 * min(nj, ni) + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    depth = np.zeros(cap, np.int64)
    js = np.zeros(cap, np.int64)
    je = np.zeros(cap, np.int64)
    is_ = np.zeros(cap, np.int64)
    ie = np.zeros(cap, np.int64)
    jidx = J.copy()
    iidx = I.copy()
    perm = np.empty(p, np.int64)
    js[0], je[0], is_[0], ie[0] = 0, nj, 0, ni
    stack = np.empty(cap, np.int64)
    stack[0] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if max_depth >= 0 and depth[node] >= max_depth:
            continue
        f, t, g = _split_node(X, yr, tr, jidx, js[node], je[node], iidx, is_[node], ie[node],
                              min_leaf, mtry, min_stat, perm)
        if f < 0:
            continue
        # stable partition of both halves
        for arr_id in range(2):
            if arr_id == 0:
                idx = jidx
                s, e = js[node], je[node]
            else:
                idx = iidx
                s, e = is_[node], ie[node]
            buf = np.empty(e - s, np.int64)
            a = 0
            for k in range(s, e):
                if X[idx[k], f] <= t:
                    buf[a] = idx[k]
                    a += 1
            mid = s + a
            for k in range(s, e):
                if not X[idx[k], f] <= t:
                    buf[a] = idx[k]
                    a += 1
            for k in range(e - s):
                idx[s + k] = buf[k]
            if arr_id == 0:
                jmid = mid
            else:
                imid = mid
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = f
        threshold[node] = t
        left[node] = lc
        right[node] = rc
        js[lc], je[lc], is_[lc], ie[lc] = js[node], jmid, is_[node], imid
        js[rc], je[rc], is_[rc], ie[rc] = jmid, je[node], imid, ie[node]
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        stack[top] = rc
        stack[top + 1] = lc
        top += 2
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _leaf_of(x, feature, threshold, left, right, root):
    node = root
    while feature[node] >= 0:
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True, nogil=True)
def _fill_stats(X, yr, tr, rows, feature, threshold, left, right):
    stats = np.zeros((feature.shape[0], 5))
    for k in range(rows.shape[0]):
        r = rows[k]
        leaf = _leaf_of(X[r], feature, threshold, left, right, 0)
        t = tr[r]
        y = yr[r]
        stats[leaf, 0] += 1.0
        stats[leaf, 1] += t
        stats[leaf, 2] += y
        stats[leaf, 3] += t * t
        stats[leaf, 4] += t * y
    return stats


@dataclass(frozen=True, eq=False)
class HonestTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    stats: np.ndarray
    split_rows: np.ndarray
    est_rows: np.ndarray
    bag: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                d[self.left[k]] = d[k] + 1
                d[self.right[k]] = d[k] + 1
        return int(d.max())

    def leaf(self, x) -> int:
        return int(_leaf_of(np.asarray(x, dtype=np.float64), self.feature, self.threshold, self.left, self.right, 0))

    def leaf_stats(self) -> np.ndarray:
        return self.stats[self.feature < 0]

    def to_dict(self) -> dict[str, Any]:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HonestTree":
        ints = ("feature", "left", "right", "split_rows", "est_rows")
        kw = {k: np.asarray(v, dtype=np.int64 if k in ints else np.float64) for k, v in d.items() if k != "bag"}
        if kw["stats"].size == 0:
            kw["stats"] = kw["stats"].reshape(0, 5)
        return cls(bag=int(d["bag"]), **kw)


def populate_leaves(tree: HonestTree, X, y_res, t_res, rows: np.ndarray | None = None) -> np.ndarray:
    """Leaf sufficient statistics of ``tree`` recomputed from ``rows`` (default: its estimation half)."""
    rows = tree.est_rows if rows is None else np.asarray(rows, dtype=np.int64)
    return _fill_stats(np.ascontiguousarray(X, dtype=np.float64), np.asarray(y_res, dtype=np.float64),
                       np.asarray(t_res, dtype=np.float64), rows, tree.feature, tree.threshold,
                       tree.left, tree.right)


def grow_tree(y_res, t_res, X, params: ForestParams, tree_seed: int, sample: np.ndarray | None = None,
              bag: int = 0) -> HonestTree:
    """Grow one honest tree.

    ``sample`` is the pool the subsample is drawn from (default: all rows).
    A draw whose root has no treatment variation in either half is retried
    up to five times.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y_res = np.ascontiguousarray(y_res, dtype=np.float64)
    t_res = np.ascontiguousarray(t_res, dtype=np.float64)
    n, p = X.shape
    pool = np.arange(n) if sample is None else np.asarray(sample, dtype=np.int64)
    size = min(len(pool), max(2, int(round(params.subsample * n))))
    mtry = params.resolved_mtry(p)
    for attempt in range(MAX_RETRIES + 1):
        rng = rng_for(tree_seed, "draw", attempt)
        sub = rng.choice(pool, size=size, replace=False)
        n_split = int(round(params.honest_fraction * size))
        J = np.sort(sub[:n_split])
        I = np.sort(sub[n_split:])
        if len(J) == 0 or len(I) == 0 or np.ptp(t_res[J]) == 0 or np.ptp(t_res[I]) == 0:
            log.info("tree %d draw %d has no treatment variation at the root; redrawing", tree_seed, attempt)
            continue
        feature, threshold, left, right = grow_honest(
            X, y_res, t_res, J, I, params.min_leaf, mtry,
            -1 if params.max_depth is None else params.max_depth,
            params.min_split_stat, derive_seed(tree_seed, "grow", attempt))
        stats = _fill_stats(X, y_res, t_res, I, feature, threshold, left, right)
        return HonestTree(feature, threshold, left, right, stats, J, I, bag)
    raise ForestError(f"tree with seed {tree_seed}: no usable subsample after {MAX_RETRIES} retries")


# --------------------------------------------------------------------------
# fitted forest

@dataclass(frozen=True, eq=False)
class CausalForestModel:
    trees: list[HonestTree]
    bags: list[np.ndarray]
    X: np.ndarray
    y_res: np.ndarray
    t_res: np.ndarray
    params: ForestParams
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def packed(self):
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        shift = np.repeat(offsets[:-1], [t.n_nodes for t in self.trees]).astype(np.int64)
        feature = np.concatenate([t.feature for t in self.trees]).astype(np.int64)
        internal = feature >= 0
        left = np.where(internal, np.concatenate([t.left for t in self.trees]) + shift, -1)
        right = np.where(internal, np.concatenate([t.right for t in self.trees]) + shift, -1)
        return (feature, np.concatenate([t.threshold for t in self.trees]), left, right,
                np.concatenate([t.stats for t in self.trees]), offsets[:-1].astype(np.int64),
                np.array([t.bag for t in self.trees], dtype=np.int64))

    def in_bag(self) -> np.ndarray:
        mask = np.zeros((len(self.bags), self.n), dtype=np.bool_)
        for g, rows in enumerate(self.bags):
            mask[g, rows] = True
        return mask

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": "causalgrid.causal_forest",
            "version": FORMAT_VERSION,
            "params": asdict(self.params),
            "X": self.X.tolist(),
            "y_res": self.y_res.tolist(),
            "t_res": self.t_res.tolist(),
            "bags": [b.tolist() for b in self.bags],
            "trees": [t.to_dict() for t in self.trees],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CausalForestModel":
        if d.get("format") != "causalgrid.causal_forest" or d.get("version") != FORMAT_VERSION:
            raise ForestError("not a version-1 causalgrid causal forest document")
        return cls(
            trees=[HonestTree.from_dict(t) for t in d["trees"]],
            bags=[np.asarray(b, dtype=np.int64) for b in d["bags"]],
            X=np.asarray(d["X"], dtype=np.float64),
            y_res=np.asarray(d["y_res"], dtype=np.float64),
            t_res=np.asarray(d["t_res"], dtype=np.float64),
            params=ForestParams(**d["params"]),
            meta=d.get("meta", {}),
        )


def center(X, Y, T, spec: LearnerSpec | None = None, plan: FoldPlan | None = None, seed: int = 0,
           n_jobs: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Cross-fitted outcome and treatment residuals (same contract as the DML residuals)."""
    Y = np.asarray(Y, dtype=np.float64)
    spec = spec or LearnerSpec.default("bagged_trees", seed=derive_seed(seed, "centering"))
    plan = plan or make_folds(len(Y), 5, derive_seed(seed, "centering-folds"))
    res = crossfit_residuals(spec, X, Y, T, plan, n_jobs=n_jobs)
    return res.y_res, res.t_res


def grow_forest(X, y_res, t_res, params: ForestParams, n_jobs: int = 1, meta: dict | None = None) -> CausalForestModel:
    """Grow the forest on already-centered data."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y_res = np.ascontiguousarray(y_res, dtype=np.float64)
    t_res = np.ascontiguousarray(t_res, dtype=np.float64)
    n = X.shape[0]
    n_bags = params.n_trees // 2
    half = n // 2
    bags = [np.sort(rng_for(params.seed, "bag", g).choice(n, size=half, replace=False)) for g in range(n_bags)]

    def one(b: int) -> HonestTree:
        g = b // 2
        return grow_tree(y_res, t_res, X, params, derive_seed(params.seed, "tree", b), sample=bags[g], bag=g)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(one, range(params.n_trees)))
    else:
        trees = [one(b) for b in range(params.n_trees)]
    return CausalForestModel(trees, bags, X, y_res, t_res, params, dict(meta or {}))


def fit_forest(X, Y, T, params: ForestParams | None = None, centering: LearnerSpec | None = None,
               k: int = 5, n_jobs: int = 1) -> CausalForestModel:
    """Center ``Y`` and ``T`` with cross-fitting, then grow the forest."""
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    plan = make_folds(len(X), k, derive_seed(params.seed, "centering-folds"))
    spec = centering or LearnerSpec.default("bagged_trees", seed=derive_seed(params.seed, "centering"))
    y_res, t_res = center(X, Y, T, spec, plan, n_jobs=n_jobs)
    meta = {"centering": spec.to_dict(), "folds": k}
    return grow_forest(X, y_res, t_res, params, n_jobs=n_jobs, meta=meta)


# --------------------------------------------------------------------------
# estimation

@njit(cache=True, nogil=True)
def _forest_scores(Q, feature, threshold, left, right, stats, roots, tree_bag, n_bags, in_bag, q_rows):
    """Forest-weighted slope, little-bag moments and per-tree ATE scores at every query row.

    ``q_rows[i] >= 0`` names the training row behind query ``i``; trees whose
    bag contains that row are skipped (out-of-bag estimation).
    """
    nq = Q.shape[0]
    B = roots.shape[0]
    tau = np.full(nq, np.nan)
    between = np.zeros(nq)
    total = np.zeros(nq)
    used = np.zeros(nq, np.int64)
    used_bags = np.zeros(nq, np.int64)
    ate_psi = np.zeros(B)
    leaves = np.empty(B, np.int64)
    use = np.empty(B, np.bool_)
    bag_sum = np.zeros(n_bags)
    bag_cnt = np.zeros(n_bags, np.int64)
    for i in range(nq):
        sw = 0.0
        st = 0.0
        sy = 0.0
        stt = 0.0
        sty = 0.0
        nb = 0
        for b in range(B):
            use[b] = True
            if q_rows[i] >= 0 and in_bag[tree_bag[b], q_rows[i]]:
                use[b] = False
                continue
            leaf = _leaf_of(Q[i], feature, threshold, left, right, roots[b])
            leaves[b] = leaf
            c = stats[leaf, 0]
            sw += 1.0
            st += stats[leaf, 1] / c
            sy += stats[leaf, 2] / c
            stt += stats[leaf, 3] / c
            sty += stats[leaf, 4] / c
            nb += 1
        used[i] = nb
        if nb == 0:
            continue
        tbar = st / sw
        ybar = sy / sw
        den = stt / sw - tbar * tbar
        if not den > 1e-12 * (stt / sw):
            continue
        t_i = (sty / sw - tbar * ybar) / den
        tau[i] = t_i
        for g in range(n_bags):
            bag_sum[g] = 0.0
            bag_cnt[g] = 0
        tot = 0.0
        for b in range(B):
            if not use[b]:
                continue
            leaf = leaves[b]
            c = stats[leaf, 0]
            cross = stats[leaf, 4] - tbar * stats[leaf, 2] - ybar * stats[leaf, 1] + c * tbar * ybar
            sq = stats[leaf, 3] - 2.0 * tbar * stats[leaf, 1] + c * tbar * tbar
            psi = (cross - t_i * sq) / (c * den)
            tot += psi * psi
            bag_sum[tree_bag[b]] += psi
            bag_cnt[tree_bag[b]] += 1
            ate_psi[b] += psi / nb
        btw = 0.0
        ng = 0
        for g in range(n_bags):
            if bag_cnt[g] > 0:
                m = bag_sum[g] / bag_cnt[g]
                btw += m * m
                ng += 1
        between[i] = btw / ng
        total[i] = tot / nb
        used_bags[i] = ng
    return tau, between, total, used, used_bags, ate_psi


def _little_bag_variance(between, total, n_groups, group_size: int = 2):
    """Debiased between-bag variance plus the Monte Carlo variance of a finite forest."""
    noise = (total - between) / (group_size - 1)
    raw = between - noise
    clamped = raw < 0
    var = np.where(clamped, 0.0, raw) + between / np.maximum(n_groups, 1)
    return var, clamped


@dataclass
class CateResult:
    tau: np.ndarray
    variance: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    defined: np.ndarray
    clamped: np.ndarray
    cell_id: np.ndarray | None = None
    ate_scores: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tau)

    def to_frame(self):
        import pandas as pd

        ids = self.cell_id if self.cell_id is not None else np.arange(len(self.tau))
        return pd.DataFrame({
            "cell_id": ids,
            "tau": np.where(self.defined, self.tau, np.nan),
            "variance": np.where(self.defined, self.variance, np.nan),
            "ci_low": np.where(self.defined, self.ci_low, np.nan),
            "ci_high": np.where(self.defined, self.ci_high, np.nan),
            "defined": self.defined,
        })


def _scores(model: CausalForestModel, Q: np.ndarray, q_rows: np.ndarray):
    feature, threshold, left, right, stats, roots, tree_bag = model.packed()
    in_bag = model.in_bag()
    return _forest_scores(np.ascontiguousarray(Q, dtype=np.float64), feature, threshold, left, right,
                          stats, roots, tree_bag, len(model.bags), in_bag, q_rows.astype(np.int64))


def estimate_cate(model: CausalForestModel, X=None, cell_id=None) -> CateResult:
    """CATE with variance and 95% CI; ``X=None`` gives out-of-bag estimates for the training rows."""
    if X is None:
        Q = model.X
        q_rows = np.arange(model.n)
    else:
        Q = np.atleast_2d(np.asarray(X, dtype=np.float64))
        q_rows = np.full(len(Q), -1)
    tau, between, total, used, used_bags, ate_psi = _scores(model, Q, q_rows)
    defined = np.isfinite(tau)
    var, clamped = _little_bag_variance(between, total, used_bags)
    var = np.where(defined, var, np.nan)
    sd = np.sqrt(var)
    return CateResult(tau=tau, variance=var, ci_low=tau - Z95 * sd, ci_high=tau + Z95 * sd,
                      defined=defined, clamped=clamped & defined,
                      cell_id=None if cell_id is None else np.asarray(cell_id), ate_scores=ate_psi)


def cate_variance(model: CausalForestModel, X) -> np.ndarray:
    return estimate_cate(model, X).variance


def _spread_variance(model: CausalForestModel, cates: CateResult) -> float:
    """Variance of the true effect across units, projected onto the CATE estimates.

    Forest CATEs are smoothed toward the mean, so their raw variance
    understates the spread. Doubly robust pseudo-outcomes are unbiased for the
    unit effect and, out of bag, independent of the estimate at that unit, so
    ``cov(tau_hat, gamma)^2 / var(tau_hat)`` recovers the spread along the
    estimated direction.
    """
    d = cates.defined
    tau = cates.tau[d]
    t = model.t_res[d]
    y = model.y_res[d]
    vt = float(np.mean(t * t))
    v_hat = float(np.var(tau, ddof=1))
    if vt <= 0 or v_hat <= 1e-12 * max(1.0, float(np.mean(tau * tau))):
        return 0.0
    gamma = tau + t * (y - tau * t) / vt
    c = float(np.cov(tau, gamma)[0, 1])
    return c * c / v_hat


def estimate_ate(model: CausalForestModel, cates: CateResult | None = None) -> DmlEstimate:
    """Mean of out-of-bag CATEs over training rows.

    The variance adds the little-bag estimate for the per-tree scores to the
    sampling variance of averaging heterogeneous effects over ``n`` units.
    The latter uses the spread estimate of ``_spread_variance``.
    """
    cates = cates or estimate_cate(model)
    if cates.ate_scores is None:
        raise ForestError("ATE needs out-of-bag CATEs of the training rows")
    n_valid = int(cates.defined.sum())
    if n_valid < 10:
        raise ForestError(f"only {n_valid} defined CATEs; need at least 10")
    if n_valid < 0.5 * len(cates):
        raise ForestError(f"{len(cates) - n_valid} of {len(cates)} CATEs are undefined")
    ate = float(np.mean(cates.tau[cates.defined]))
    # per-tree linearized deviation of the ATE, scaled so the forest value is their mean
    B = len(model.trees)
    psi = cates.ate_scores * B / n_valid
    bags = np.array([t.bag for t in model.trees])
    bag_mean = np.bincount(bags, weights=psi) / np.bincount(bags)
    between = float(np.mean(bag_mean ** 2))
    total = float(np.mean(psi ** 2))
    var, _ = _little_bag_variance(np.array([between]), np.array([total]), np.array([len(bag_mean)]))
    spread = _spread_variance(model, cates) / n_valid
    return normal_inference(ate, float(np.sqrt(var[0] + spread)), learner="causal_forest", n=n_valid)


def forest_weights(model: CausalForestModel, x) -> np.ndarray:
    """Kernel weight of every training row at ``x`` (only estimation-half rows carry weight)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.zeros(model.n)
    for tree in model.trees:
        leaf = tree.leaf(x)
        members = [r for r in tree.est_rows if tree.leaf(model.X[r]) == leaf]
        if members:
            np.add.at(w, np.asarray(members, dtype=np.int64), 1.0 / len(members))
    return w / len(model.trees)


def weighted_slope(w: np.ndarray, t: np.ndarray, y: np.ndarray) -> float:
    """Weighted least squares slope of ``y`` on ``t`` around the weighted means."""
    sw = w.sum()
    tbar = w @ t / sw
    ybar = w @ y / sw
    den = w @ (t - tbar) ** 2
    if not den > 0:
        return float("nan")
    return float(w @ ((t - tbar) * (y - ybar)) / den)
