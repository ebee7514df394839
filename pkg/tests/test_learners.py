import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causalgrid._rng import derive_seed, rng_for
from causalgrid.learners import KINDS, LearnerError, LearnerSpec, Tree, TreeEnsemble, fit, fit_cart, tune


def friedman(rng, n=600):
    X = rng.uniform(0, 1, size=(n, 5))
    y = 10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.5) ** 2 + 10 * X[:, 3] + 5 * X[:, 4]
    return X, y


def r2(y, f):
    return 1 - np.sum((y - f) ** 2) / np.sum((y - y.mean()) ** 2)


# -- single trees --------------------------------------------------------------------

def test_constant_target_gives_single_leaf(rng):
    t = fit_cart(rng.normal(size=(30, 3)), np.full(30, 4.0))
    assert t.n_nodes == 1 and t.value[0] == 4.0


def test_stump_on_step():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    t = fit_cart(X, np.array([0.0, 0.0, 4.0, 4.0]), max_depth=1)
    assert t.feature[0] == 0 and 1.0 <= t.threshold[0] < 2.0
    np.testing.assert_array_equal(t.predict(X), [0.0, 0.0, 4.0, 4.0])
    assert t.count[0] == 4 and sorted(t.count[1:]) == [2, 2]


def test_min_leaf_equal_n_blocks_splitting(rng):
    X = rng.normal(size=(12, 2))
    t = fit_cart(X, X[:, 0], min_leaf=12)
    assert t.n_nodes == 1


@given(st.integers(1, 15), st.integers(0, 10**6))
def test_leaves_respect_min_leaf(min_leaf, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(60, 3))
    t = fit_cart(X, X[:, 0] + r.normal(size=60), min_leaf=min_leaf)
    assert t.count[t.feature < 0].min() >= min_leaf
    assert t.count[t.feature < 0].sum() == 60


def test_tree_round_trip(rng):
    X = rng.normal(size=(50, 3))
    t = fit_cart(X, X[:, 1] ** 2, max_depth=4)
    back = Tree.from_dict(json.loads(json.dumps(t.to_dict())))
    np.testing.assert_array_equal(back.predict(X), t.predict(X))


# -- ensembles -----------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_each_kind_fits_friedman(kind, rng):
    X, y = friedman(rng)
    Xt, yt = friedman(np.random.default_rng(9), 400)
    spec = LearnerSpec.default(kind, seed=3)
    model = fit(spec, X, y)
    assert r2(yt, model.predict(Xt)) >= 0.8


def test_single_bagged_tree_is_cart_on_its_bootstrap(rng):
    X, y = friedman(rng, 200)
    spec = LearnerSpec("bagged_trees", n_trees=1, min_leaf=3, seed=5)
    model = fit(spec, X, y)
    rows = rng_for(5, "rows", 0).integers(0, 200, 200)
    ref = fit_cart(X[rows], y[rows], min_leaf=3, seed=derive_seed(5, "tree", 0))
    np.testing.assert_allclose(model.predict(X), ref.predict(X), rtol=0, atol=1e-12)


def test_hand_boosting_step():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0.0, 0.0, 4.0, 4.0])
    spec = LearnerSpec("gbt_depthwise", n_trees=1, max_depth=1, min_leaf=1, learning_rate=0.5)
    model = fit(spec, X, y)
    assert model.base_score == 2.0
    np.testing.assert_allclose(model.predict(X), [1.0, 1.0, 3.0, 3.0], rtol=0, atol=1e-15)


def test_empty_ensemble_predicts_base():
    m = TreeEnsemble([], "gbt_depthwise", 1.25, 0.1, 2)
    np.testing.assert_array_equal(m.predict(np.zeros((3, 2))), [1.25] * 3)


def test_duplicated_trees_leave_average_unchanged(rng):
    X, y = friedman(rng, 200)
    m = fit(LearnerSpec("extra_trees", n_trees=5, seed=1), X, y)
    doubled = TreeEnsemble(m.trees * 2, m.kind, 0.0, 1 / 10, m.n_features)
    np.testing.assert_allclose(doubled.predict(X), m.predict(X), rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["gbt_depthwise", "gbt_leafwise"])
def test_boosting_train_mse_non_increasing(kind, rng):
    X, y = friedman(rng, 300)
    m = fit(LearnerSpec(kind, n_trees=40, max_depth=3, max_leaves=8, learning_rate=0.2), X, y)
    mses = []
    for b in range(41):
        part = TreeEnsemble(m.trees[:b], m.kind, m.base_score, m.tree_weight, m.n_features)
        mses.append(np.mean((y - part.predict(X)) ** 2))
    assert all(b <= a + 1e-12 for a, b in zip(mses, mses[1:]))


@pytest.mark.parametrize("kind", KINDS)
def test_thread_count_does_not_change_fit(kind, rng):
    X, y = friedman(rng, 200)
    spec = LearnerSpec.default(kind, seed=11)
    a = fit(spec, X, y, n_jobs=1).predict(X)
    b = fit(spec, X, y, n_jobs=3).predict(X)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kind", KINDS)
def test_ensemble_json_round_trip(kind, rng):
    X, y = friedman(rng, 150)
    m = fit(LearnerSpec(kind, n_trees=7, max_depth=3, seed=2), X, y)
    back = TreeEnsemble.from_dict(json.loads(json.dumps(m.to_dict())))
    assert np.array_equal(back.predict(X), m.predict(X))
    assert back.spec == m.spec


def test_spec_validation():
    with pytest.raises(LearnerError):
        LearnerSpec("random_forest")
    with pytest.raises(LearnerError):
        LearnerSpec("gbt_depthwise", learning_rate=0.0)
    with pytest.raises(LearnerError):
        fit(LearnerSpec("bagged_trees", min_leaf=10), np.zeros((15, 1)), np.zeros(15))


def test_wrong_column_count_rejected(rng):
    m = fit(LearnerSpec("extra_trees", n_trees=2), rng.normal(size=(20, 3)), rng.normal(size=20))
    with pytest.raises(LearnerError):
        m.predict(np.zeros((2, 4)))


# -- tuning --------------------------------------------------------------------------

def test_tune_budget_one_returns_first_sample(rng):
    X, y = friedman(rng, 100)
    spec = tune(LearnerSpec("gbt_depthwise"), X, y, budget=1, seed=4)
    assert spec.max_depth in range(2, 9)


def test_tune_is_deterministic(rng):
    X, y = friedman(rng, 150)
    grid = {"max_depth": [1, 2, 4], "n_trees": [20, 40]}
    a = tune(LearnerSpec("gbt_depthwise"), X, y, budget=4, seed=7, grid=grid)
    b = tune(LearnerSpec("gbt_depthwise"), X, y, budget=4, seed=7, grid=grid)
    assert a == b


def test_tune_prefers_depth_the_signal_needs():
    hits = 0
    for s in range(20):
        r = np.random.default_rng(s)
        X = r.uniform(-1, 1, size=(300, 3))
        y = 4.0 * (X[:, 0] > 0) * (X[:, 1] > 0) * (X[:, 2] > 0) + 0.3 * r.normal(size=300)
        best = tune(LearnerSpec("gbt_depthwise", n_trees=30, learning_rate=0.3), X, y, budget=6, seed=s,
                    grid={"max_depth": [1, 3]})
        hits += best.max_depth == 3
    assert hits >= 16


def test_tune_rejects_zero_budget(rng):
    with pytest.raises(LearnerError):
        tune(LearnerSpec("extra_trees"), np.zeros((10, 1)), np.zeros(10), budget=0)
