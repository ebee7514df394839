"""Seeded random search over learner hyperparameters."""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Any, Mapping, Sequence

import numpy as np

from .._rng import rng_for
from .ensemble import BOOSTED, LearnerError, LearnerSpec, fit

log = logging.getLogger(__name__)

DEFAULT_GRID: dict[str, dict[str, Sequence[Any]]] = {
    "bagged_trees": {
        "max_depth": [2, 3, 4, 5, 6, 7, 8],
        "n_trees": [100, 200, 300, 400, 500],
        "min_leaf": [5, 20],
        "feature_subsample": [0.7, 1.0],
    },
    "extra_trees": {
        "max_depth": [2, 3, 4, 5, 6, 7, 8],
        "n_trees": [100, 200, 300, 400, 500],
        "min_leaf": [5, 20],
        "feature_subsample": [0.7, 1.0],
    },
    "gbt_depthwise": {
        "max_depth": [2, 3, 4, 5, 6, 7, 8],
        "n_trees": [100, 200, 300, 400, 500],
        "learning_rate": [0.03, 0.1, 0.3],
        "min_leaf": [5, 20],
        "row_subsample": [0.7, 1.0],
    },
    "gbt_leafwise": {
        "max_leaves": [7, 15, 31, 63],
        "n_trees": [100, 200, 300, 400, 500],
        "learning_rate": [0.03, 0.1, 0.3],
        "min_leaf": [5, 20],
        "row_subsample": [0.7, 1.0],
    },
}


def cv_mse(spec: LearnerSpec, X: np.ndarray, y: np.ndarray, folds: int, seed: int) -> float:
    n = len(y)
    fold = np.empty(n, dtype=np.int64)
    fold[rng_for(seed, "cv").permutation(n)] = np.arange(n) % folds
    sse = 0.0
    for f in range(folds):
        test = fold == f
        model = fit(spec, X[~test], y[~test])
        sse += float(np.sum((y[test] - model.predict(X[test])) ** 2))
    return sse / n


def sample_specs(template: LearnerSpec, grid: Mapping[str, Sequence[Any]], budget: int,
                 seed: int) -> list[LearnerSpec]:
    out = []
    for trial in range(budget):
        rng = rng_for(seed, "tune", trial)
        params = {k: v[int(rng.integers(len(v)))] for k, v in sorted(grid.items())}
        for k, v in params.items():
            if isinstance(v, np.generic):
                params[k] = v.item()
        out.append(replace(template, **params))
    return out


def tune(template: LearnerSpec, X, y, budget: int = 30, folds: int = 3, seed: int = 0,
         grid: Mapping[str, Sequence[Any]] | None = None) -> LearnerSpec:
    """Return the sampled spec with the lowest cross-validated MSE.

    Ties keep the earliest trial. Trials whose fit raises are skipped.
    """
    if budget < 1:
        raise LearnerError("budget must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    grid = DEFAULT_GRID[template.kind] if grid is None else grid
    candidates = sample_specs(template, grid, budget, seed)
    if budget == 1:
        return candidates[0]
    best, best_mse = None, np.inf
    for i, spec in enumerate(candidates):
        try:
            mse = cv_mse(spec, X, y, folds, seed)
        except (LearnerError, ValueError) as exc:
            log.warning("tuning trial %d skipped: %s", i, exc)
            continue
        if mse < best_mse:
            best, best_mse = spec, mse
    if best is None:
        raise LearnerError("every tuning trial failed")
    return best
