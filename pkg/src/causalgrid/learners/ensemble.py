"""Regression tree ensembles used as nuisance models.

Four kinds share one tree representation so that the Shapley code can
explain any of them:

* ``bagged_trees``  bootstrap rows, per-split feature subsampling, mean of trees
* ``extra_trees``   all rows, random thresholds, mean of trees
* ``gbt_depthwise`` least-squares boosting with depth-limited trees
* ``gbt_leafwise``  least-squares boosting with best-first growth to ``max_leaves``
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Any

import numpy as np

from .._rng import derive_seed, rng_for
from ._kernels import apply_packed, grow_cart, predict_packed

KINDS = ("bagged_trees", "extra_trees", "gbt_depthwise", "gbt_leafwise")
BOOSTED = ("gbt_depthwise", "gbt_leafwise")
FORMAT_VERSION = 1


class LearnerError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    n_trees: int = 200
    max_depth: int | None = None
    max_leaves: int | None = None
    min_leaf: int = 5
    learning_rate: float = 0.1
    feature_subsample: float = 1.0
    row_subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LearnerError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if self.n_trees < 1:
            raise LearnerError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise LearnerError("min_leaf must be >= 1")
        if self.kind in BOOSTED and not 0.0 < self.learning_rate <= 1.0:
            raise LearnerError("learning_rate must lie in (0, 1] for boosted kinds")
        if not 0.0 < self.feature_subsample <= 1.0 or not 0.0 < self.row_subsample <= 1.0:
            raise LearnerError("subsample fractions must lie in (0, 1]")
        if self.max_depth is not None and self.max_depth < 0:
            raise LearnerError("max_depth must be >= 0")
        if self.max_leaves is not None and self.max_leaves < 2:
            raise LearnerError("max_leaves must be >= 2")

    @classmethod
    def default(cls, kind: str, seed: int = 0) -> "LearnerSpec":
        presets = {
            "bagged_trees": dict(n_trees=200, max_depth=None, min_leaf=5, feature_subsample=0.6),
            "extra_trees": dict(n_trees=200, max_depth=None, min_leaf=5, feature_subsample=1.0),
            "gbt_depthwise": dict(n_trees=200, max_depth=3, min_leaf=5, learning_rate=0.05, row_subsample=0.8),
            "gbt_leafwise": dict(n_trees=200, max_leaves=8, min_leaf=5, learning_rate=0.05, row_subsample=0.8),
        }
        return cls(kind=kind, seed=seed, **presets[kind])

    def with_seed(self, seed: int) -> "LearnerSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Tree:
    """One fitted tree; ``count`` holds the training rows reaching each node."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    gain: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.gain is None:
            object.__setattr__(self, "gain", np.zeros(len(self.feature)))

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                d[self.left[k]] = d[k] + 1
                d[self.right[k]] = d[k] + 1
        return int(d.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return predict_packed(X, self.feature, self.threshold, self.left, self.right, self.value,
                              np.zeros(1, dtype=np.int64))

    def to_dict(self) -> dict[str, list]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "count": self.count.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, list]) -> "Tree":
        ints = ("feature", "left", "right")
        return cls(**{k: np.asarray(v, dtype=np.int64 if k in ints else np.float64) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class TreeEnsemble:
    """``predict(x) = base_score + tree_weight * sum(tree(x) for tree in trees)``.

    Bagged kinds use ``base_score = 0`` and ``tree_weight = 1 / n_trees``;
    boosted kinds use the training mean and the learning rate.
    """

    trees: list[Tree]
    kind: str
    base_score: float
    tree_weight: float
    n_features: int
    spec: LearnerSpec | None = None

    @cached_property
    def packed(self) -> tuple[np.ndarray, ...]:
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        cat = lambda name: (np.concatenate([getattr(t, name) for t in self.trees])
                            if self.trees else np.zeros(0))
        feature = cat("feature").astype(np.int64)
        left = cat("left").astype(np.int64)
        right = cat("right").astype(np.int64)
        shift = np.repeat(offsets[:-1], [t.n_nodes for t in self.trees]).astype(np.int64)
        internal = feature >= 0
        left = np.where(internal, left + shift, -1)
        right = np.where(internal, right + shift, -1)
        return (feature, cat("threshold").astype(np.float64), left, right,
                cat("value").astype(np.float64), cat("count").astype(np.float64),
                offsets[:-1].astype(np.int64))

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise LearnerError(f"expected {self.n_features} columns, got shape {X.shape}")
        if not self.trees:
            return np.full(X.shape[0], self.base_score)
        feature, threshold, left, right, value, _, roots = self.packed
        return self.base_score + self.tree_weight * predict_packed(X, feature, threshold, left, right, value, roots)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Packed leaf ids, shape ``(n_rows, n_trees)``."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        feature, threshold, left, right, _, _, roots = self.packed
        return apply_packed(X, feature, threshold, left, right, roots)

    def feature_gains(self) -> np.ndarray:
        out = np.zeros(self.n_features)
        for t in self.trees:
            internal = t.feature >= 0
            np.add.at(out, t.feature[internal], t.gain[internal])
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": "causalgrid.tree_ensemble",
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "base_score": self.base_score,
            "tree_weight": self.tree_weight,
            "n_features": self.n_features,
            "spec": self.spec.to_dict() if self.spec else None,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TreeEnsemble":
        if d.get("format") != "causalgrid.tree_ensemble" or d.get("version") != FORMAT_VERSION:
            raise LearnerError("not a version-1 causalgrid tree ensemble document")
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            kind=d["kind"],
            base_score=float(d["base_score"]),
            tree_weight=float(d["tree_weight"]),
            n_features=int(d["n_features"]),
            spec=LearnerSpec(**d["spec"]) if d.get("spec") else None,
        )


def _as_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise LearnerError("cannot fit on empty input")
    if X.shape[0] != y.shape[0]:
        raise LearnerError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    return X, y


def _presort(X: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))


def _grow(X, y, rows, order, max_depth, min_leaf, max_leaves, mtry, random_split, best_first, seed) -> Tree:
    arrays = grow_cart(
        X, y, np.ascontiguousarray(rows, dtype=np.int64), order,
        -1 if max_depth is None else int(max_depth),
        int(min_leaf),
        -1 if max_leaves is None else int(max_leaves),
        int(mtry), bool(random_split), bool(best_first), int(seed),
    )
    return Tree(*arrays)


def fit_cart(X, y, max_depth: int | None = None, min_leaf: int = 1, max_features: int | None = None,
             seed: int = 0, random_split: bool = False) -> Tree:
    """Greedy variance-reduction tree; ``max_features`` features are tried per split."""
    X, y = _as_xy(X, y)
    if X.shape[0] < 2:
        raise LearnerError("fit_cart needs at least 2 rows")
    p = X.shape[1]
    mtry = p if max_features is None else max(1, min(p, int(max_features)))
    return _grow(X, y, np.arange(X.shape[0]), _presort(X), max_depth, min_leaf, None, mtry, random_split, False, seed)


def _mtry(spec: LearnerSpec, p: int) -> int:
    return max(1, min(p, int(math.ceil(spec.feature_subsample * p))))


def fit(spec: LearnerSpec, X, y, n_jobs: int = 1) -> TreeEnsemble:
    """Fit an ensemble of the requested kind. Deterministic given ``spec.seed``."""
    X, y = _as_xy(X, y)
    n, p = X.shape
    if n < 2 * spec.min_leaf:
        raise LearnerError(f"need at least 2*min_leaf={2 * spec.min_leaf} rows, got {n}")
    mtry = _mtry(spec, p)
    order = _presort(X)

    if spec.kind in ("bagged_trees", "extra_trees"):
        def one(b: int) -> Tree:
            if spec.kind == "bagged_trees":
                rows = rng_for(spec.seed, "rows", b).integers(0, n, n)
            else:
                rows = np.arange(n)
            if spec.row_subsample < 1.0:
                m = max(2 * spec.min_leaf, int(round(spec.row_subsample * n)))
                rows = np.sort(rng_for(spec.seed, "sub", b).choice(rows, size=min(m, n), replace=False))
            return _grow(X, y, rows, order, spec.max_depth, spec.min_leaf, spec.max_leaves, mtry,
                         spec.kind == "extra_trees", False, derive_seed(spec.seed, "tree", b))

        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                trees = list(pool.map(one, range(spec.n_trees)))
        else:
            trees = [one(b) for b in range(spec.n_trees)]
        return TreeEnsemble(trees, spec.kind, 0.0, 1.0 / spec.n_trees, p, spec)

    base = float(np.mean(y))
    resid = y - base
    trees = []
    best_first = spec.kind == "gbt_leafwise"
    max_depth = spec.max_depth
    if spec.kind == "gbt_depthwise" and max_depth is None:
        max_depth = 3
    max_leaves = spec.max_leaves if best_first else None
    if best_first and max_leaves is None:
        max_leaves = 31
    for b in range(spec.n_trees):
        if spec.row_subsample < 1.0:
            m = max(2 * spec.min_leaf, int(round(spec.row_subsample * n)))
            rows = np.sort(rng_for(spec.seed, "sub", b).choice(n, size=min(m, n), replace=False))
        else:
            rows = np.arange(n)
        tree = _grow(X, resid, rows, order, max_depth, spec.min_leaf, max_leaves, mtry, False, best_first,
                     derive_seed(spec.seed, "tree", b))
        trees.append(tree)
        resid = resid - spec.learning_rate * tree.predict(X)
    return TreeEnsemble(trees, spec.kind, base, spec.learning_rate, p, spec)


def predict(model: TreeEnsemble, X) -> np.ndarray:
    return model.predict(X)
