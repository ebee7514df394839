import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from statsmodels.nonparametric.smoothers_lowess import lowess as sm_lowess

from causalgrid import shapley as sh
from causalgrid.learners import KINDS, LearnerSpec, Tree, TreeEnsemble, fit


def stump(feature=0, threshold=0.5, lo=1.0, hi=5.0, n_lo=30, n_hi=10):
    return Tree(np.array([feature, -1, -1]), np.array([threshold, 0.0, 0.0]), np.array([1, -1, -1]),
                np.array([2, -1, -1]), np.array([0.0, lo, hi]), np.array([n_lo + n_hi, n_lo, n_hi], float))


def model_of(trees, p, weight=1.0, base=0.0):
    return TreeEnsemble(list(trees), "gbt_depthwise", base, weight, p)


def naive_shapley(model, x):
    # independent permutation-free formula over explicit subsets
    p = model.n_features
    phi = np.zeros(p)
    for j in range(p):
        others = [k for k in range(p) if k != j]
        for r in range(p):
            for S in itertools.combinations(others, r):
                w = math.factorial(r) * math.factorial(p - r - 1) / math.factorial(p)
                phi[j] += w * (sh.conditional_expectation(model, x, list(S) + [j])
                               - sh.conditional_expectation(model, x, list(S)))
    return phi


def test_hand_stump_expectation():
    m = model_of([stump()], 2)
    assert sh.expected_value(m) == pytest.approx((30 * 1 + 10 * 5) / 40)
    assert sh.conditional_expectation(m, [0.9, 0.0], [0]) == 5.0
    phi = sh.tree_shap(m, [[0.9, 0.0]]).values[0]
    assert phi[0] == pytest.approx(5.0 - 2.0) and phi[1] == 0.0


def test_brute_matches_naive_enumeration(rng):
    X = rng.normal(size=(120, 4))
    m = fit(LearnerSpec("gbt_depthwise", n_trees=10, max_depth=3, min_leaf=3), X, X[:, 0] * X[:, 1] + X[:, 2])
    for x in X[:3]:
        np.testing.assert_allclose(sh.brute_shap(m, x).values[0], naive_shapley(m, x), atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_tree_shap_equals_brute(kind, rng):
    X = rng.normal(size=(200, 6))
    y = np.sin(X[:, 0]) * X[:, 1] + X[:, 2] ** 2 + 0.1 * rng.normal(size=200)
    m = fit(LearnerSpec(kind, n_trees=15, max_depth=4, max_leaves=10, min_leaf=3, seed=2), X, y)
    fast = sh.tree_shap(m, X[:15])
    slow = sh.brute_shap(m, X[:15])
    np.testing.assert_allclose(fast.values, slow.values, rtol=0, atol=1e-10)
    np.testing.assert_allclose(fast.values.sum(1) + fast.base_value, m.predict(X[:15]), rtol=0, atol=1e-10)


def test_additive_model_attributes_each_term(rng):
    X = rng.uniform(-1, 1, size=(300, 3))
    trees = [stump(0, 0.0, -1.0, 1.0, 150, 150), stump(2, 0.2, 0.0, 3.0, 200, 100)]
    m = model_of(trees, 3)
    phi = sh.tree_shap(m, [[0.5, 0.0, -0.5]]).values[0]
    assert phi[0] == pytest.approx(1.0) and phi[1] == 0.0 and phi[2] == pytest.approx(-1.0)


def test_symmetric_features_get_equal_credit():
    # f = 1[x0 > 0] + 1[x1 > 0] with identical covers
    m = model_of([stump(0, 0.0, 0.0, 1.0, 20, 20), stump(1, 0.0, 0.0, 1.0, 20, 20)], 2)
    phi = sh.tree_shap(m, [[1.0, 1.0]]).values[0]
    assert phi[0] == phi[1]


def test_constant_model_has_zero_attribution():
    leaf = Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([3.0]), np.array([10.0]))
    m = model_of([leaf], 3)
    e = sh.tree_shap(m, np.zeros((4, 3)))
    assert np.all(e.values == 0) and e.base_value == 3.0


def test_wide_model_refused_by_enumeration():
    m = model_of([stump()], 16)
    with pytest.raises(sh.ShapError):
        sh.subset_values(m, np.zeros(16))


@given(st.integers(0, 10**6))
def test_local_accuracy_property(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(80, 5))
    m = fit(LearnerSpec("gbt_leafwise", n_trees=5, max_leaves=6, min_leaf=2, seed=seed), X, r.normal(size=80))
    e = sh.tree_shap(m, X[:5])
    np.testing.assert_allclose(e.values.sum(1) + e.base_value, m.predict(X[:5]), rtol=0, atol=1e-10)


def test_global_importance_order(rng):
    X = rng.normal(size=(300, 3))
    m = fit(LearnerSpec("gbt_depthwise", n_trees=30, max_depth=2), X, 3 * X[:, 1] + 0.5 * X[:, 0])
    imp = sh.global_importance(sh.tree_shap(m, X, ["a", "b", "c"]))
    assert imp["feature"].tolist()[:2] == ["b", "a"]


# -- interactions --------------------------------------------------------------------

def test_additive_model_has_no_interactions():
    m = model_of([stump(0, 0.0, -1.0, 1.0, 10, 10), stump(1, 0.0, 0.0, 2.0, 5, 15)], 3)
    I = sh.shapley_interactions(m, np.array([1.0, -1.0, 0.0]))
    off = I - np.diag(np.diag(I))
    assert np.abs(off).max() < 1e-8


def test_product_pair_dominates_and_matrix_is_efficient(rng):
    X = rng.uniform(-1, 1, size=(400, 4))
    y = 3 * X[:, 0] * X[:, 1] + 0.3 * X[:, 2]
    m = fit(LearnerSpec("gbt_depthwise", n_trees=60, max_depth=3, learning_rate=0.2, min_leaf=3), X, y)
    for x in X[:3]:
        I = sh.shapley_interactions(m, x)
        assert np.array_equal(I, I.T)
        assert I.sum() == pytest.approx(m.predict(x[None])[0] - sh.expected_value(m), abs=1e-6)
        np.testing.assert_allclose(I.sum(1), sh.tree_shap(m, x[None]).values[0], atol=1e-9)
    mat = sh.interaction_matrix(m, X, max_samples=40).matrix
    off = mat - np.diag(np.diag(mat))
    assert np.unravel_index(np.argmax(off), off.shape) in [(0, 1), (1, 0)]


# -- LOWESS --------------------------------------------------------------------------

def test_lowess_reproduces_a_line(rng):
    x = rng.uniform(0, 10, 50)
    lx, ly = sh.lowess(x, 2 * x - 1, frac=0.3)
    np.testing.assert_allclose(ly, 2 * lx - 1, atol=1e-10)


def test_lowess_full_span_without_robust_passes_near_ols(rng):
    x = np.linspace(0, 1, 200)
    y = x + 0.1 * rng.normal(size=200)
    _, ly = sh.lowess(x, y, frac=1.0, iters=0)
    # the tricube kernel still downweights far points, so only closeness is expected
    b = np.polyfit(x, y, 1)
    assert np.abs(ly - np.polyval(b, x)).max() < 0.05


def test_lowess_matches_statsmodels(rng):
    x = np.sort(rng.uniform(0, 10, 100))
    y = np.sin(x) + 0.3 * rng.normal(size=100)
    y[::17] += 4  # outliers exercise the robust passes
    ours = sh.lowess(x, y, frac=0.3, iters=2)[1]
    ref = sm_lowess(y, x, frac=0.3, it=2, delta=0.0, return_sorted=False)
    np.testing.assert_allclose(ours, ref, atol=1e-8)


@pytest.mark.parametrize("frac", [0.0, -0.1, 1.5])
def test_lowess_rejects_bad_frac(frac):
    with pytest.raises(sh.ShapError):
        sh.lowess([1, 2, 3], [1, 2, 3], frac=frac)


def test_dependence_data_columns(rng):
    X = rng.normal(size=(100, 2))
    m = fit(LearnerSpec("gbt_depthwise", n_trees=10, max_depth=2), X, X[:, 0] ** 2)
    d = sh.dependence_data(sh.tree_shap(m, X, ["a", "b"]), "a")
    assert list(d.columns) == ["x", "phi", "lowess_x", "lowess_y"]
    assert d["x"].is_monotonic_increasing
    with pytest.raises(sh.ShapError):
        sh.dependence_data(sh.tree_shap(m, X[:5]), 0)
