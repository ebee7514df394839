import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from causalgrid import screening as sc


def table_from(X, y, names=None):
    names = names or [f"f{j:02d}" for j in range(X.shape[1])]
    frame = pd.DataFrame(X, columns=names)
    frame.insert(0, "Y", y)
    frame.insert(0, "cell_id", np.arange(len(y)))
    return sc.assemble(frame, "Y", [], names)


# -- rank correlation --------------------------------------------------------------

def test_spearman_perfect_monotone():
    assert sc.spearman([1, 2, 3, 4, 5], [1, 4, 9, 16, 25]) == 1.0
    assert sc.spearman([1, 2, 3, 4, 5], [5, 4, 3, 2, 1]) == -1.0


def test_spearman_average_ranks_for_ties():
    assert sc.spearman([1, 2, 2, 4], [1, 3, 3, 4]) == pytest.approx(1.0, abs=1e-15)


def test_spearman_matches_scipy(rng):
    x = rng.integers(0, 5, 40).astype(float)
    y = x + rng.normal(size=40)
    assert sc.spearman(x, y) == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)


def test_spearman_constant_is_nan():
    assert np.isnan(sc.spearman([1, 1, 1, 1], [1, 2, 3, 4]))


def test_spearman_rejects_short_or_nonfinite():
    with pytest.raises(sc.ScreenError):
        sc.spearman([1, 2], [1, 2])
    with pytest.raises(sc.ScreenError):
        sc.spearman([1, 2, np.nan], [1, 2, 3])


@given(st.lists(st.integers(-100, 100), min_size=5, max_size=30, unique=True))
def test_spearman_invariant_to_monotone_transform(xs):
    x = np.array(xs, dtype=float)
    y = np.sin(np.arange(len(x)))
    assert sc.spearman(np.exp(x / 50) * 3 + 1, y) == pytest.approx(sc.spearman(x, y), abs=1e-12)


# -- importance ----------------------------------------------------------------------

def test_importance_finds_planted_feature(rng):
    X = rng.normal(size=(400, 5))
    y = 3 * X[:, 2] + 0.1 * rng.normal(size=400)
    imp = sc.importance_rank(table_from(X, y), seed=1)
    assert imp.idxmax() == "f02"
    assert imp.sum() == pytest.approx(1.0)


def test_importance_under_null_stays_spread():
    for s in range(20):
        r = np.random.default_rng(s)
        X = r.normal(size=(300, 5))
        imp = sc.importance_rank(table_from(X, r.normal(size=300)), seed=s)
        assert imp.max() < 3 * 0.2


def test_single_feature_importance_is_one(rng):
    X = rng.normal(size=(100, 1))
    imp = sc.importance_rank(table_from(X, X[:, 0] + rng.normal(size=100)))
    assert imp.iloc[0] == pytest.approx(1.0)


def test_constant_outcome_gives_uniform_importance(rng):
    imp = sc.importance_rank(table_from(rng.normal(size=(50, 4)), np.ones(50)))
    assert np.allclose(imp.to_numpy(), 0.25)


# -- selection -----------------------------------------------------------------------

def test_select_tie_break_by_name():
    rho = pd.Series({"b": 0.5, "a": -0.5, "c": 0.1, "d": np.nan})
    imp = pd.Series({"a": 0.3, "b": 0.3, "c": 0.4, "d": 0.0})
    # stage 1 keeps a, b (|rho| tie broken by name); importance tie keeps stage-1 order
    assert sc.select_covariates(rho, imp, k_corr=2, k_final=2) == ["a", "b"]
    assert sc.select_covariates(rho, imp, k_corr=3, k_final=1) == ["c"]


def test_select_nan_rho_ranks_last():
    rho = pd.Series({"a": np.nan, "b": 0.01})
    assert sc.select_covariates(rho, pd.Series({"a": 1.0, "b": 0.0}), k_corr=1, k_final=1) == ["b"]


def test_select_validates_k():
    rho = pd.Series({"a": 0.1, "b": 0.2})
    with pytest.raises(sc.ScreenError):
        sc.select_covariates(rho, rho, k_corr=1, k_final=2)
    with pytest.raises(sc.ScreenError):
        sc.select_covariates(rho, rho, k_corr=3, k_final=3)


def test_planted_recovery():
    hits = 0
    for s in range(20):
        r = np.random.default_rng(100 + s)
        X = r.normal(size=(500, 30))
        y = X[:, :5] @ np.array([2.0, -1.5, 1.2, 1.0, -0.8]) + r.normal(size=500)
        rep = sc.screen(table_from(X, y), k_corr=17, k_final=10, seed=s)
        hits += {f"f{j:02d}" for j in range(5)} <= set(rep.selected)
    assert hits >= 18


def test_screen_report_frame(rng):
    X = rng.normal(size=(60, 4))
    rep = sc.screen(table_from(X, X[:, 0] + rng.normal(size=60)), k_corr=3, k_final=2)
    f = rep.to_frame()
    assert list(f.columns) == ["feature", "rho", "importance", "selected"]
    assert f["selected"].sum() == 2


# -- z-scoring -----------------------------------------------------------------------

def test_zscore_moments_and_round_trip(rng):
    X = rng.normal(5, 3, size=(80, 3))
    t = table_from(X, rng.normal(size=80))
    z = sc.zscore(t, t.covariates + ["Y"])
    for c in t.covariates:
        v = z.frame[c].to_numpy()
        assert abs(v.mean()) < 1e-10 and abs(v.std(ddof=1) - 1) < 1e-10
    assert np.array_equal(z.Y, t.Y)  # outcome stays raw
    back = sc.unzscore(z)
    np.testing.assert_allclose(back.X, t.X, rtol=0, atol=1e-12)
    np.testing.assert_allclose(z.raw("f01"), t.X[:, 1], rtol=0, atol=1e-12)


def test_zscore_zero_variance_names_column(rng):
    X = rng.normal(size=(20, 3))
    X[:, 1] = 4.0
    t = table_from(X, rng.normal(size=20))
    with pytest.raises(sc.ScreenError, match="f01"):
        sc.zscore(t, t.covariates)


def test_assemble_listwise_deletion_and_sort():
    frame = pd.DataFrame({"cell_id": [3, 1, 2], "Y": [1.0, 2.0, np.nan], "a": [1.0, 2.0, 3.0]})
    t = sc.assemble(frame, "Y", [], ["a"])
    assert t.ids.tolist() == [1, 3]
    with pytest.raises(sc.ScreenError, match="lacks"):
        sc.assemble(frame, "Y", ["zz"], ["a"])
