"""Covariate screening (rank correlation, then boosted-tree gain) and z-scoring."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .learners import LearnerSpec, fit

log = logging.getLogger(__name__)


class ScreenError(ValueError):
    pass


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties; NaN if either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ScreenError("spearman needs two 1-d columns of equal length")
    if len(x) < 3:
        raise ScreenError("spearman needs at least 3 observations")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ScreenError("spearman inputs must be finite")
    rx = rankdata(x) - (len(x) + 1) / 2.0
    ry = rankdata(y) - (len(y) + 1) / 2.0
    sxx = float(rx @ rx)
    syy = float(ry @ ry)
    if sxx == 0.0 or syy == 0.0:
        return float("nan")
    return float(np.clip((rx @ ry) / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class FeatureTable:
    """Analysis matrix: raw outcome, treatments and covariates, plus z-score parameters."""

    frame: pd.DataFrame
    outcome: str
    treatments: list[str]
    covariates: list[str]
    id_column: str = "cell_id"
    params: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def ids(self) -> np.ndarray:
        return self.frame[self.id_column].to_numpy()

    @property
    def Y(self) -> np.ndarray:
        return self.frame[self.outcome].to_numpy(dtype=np.float64)

    @property
    def X(self) -> np.ndarray:
        return self.frame[self.covariates].to_numpy(dtype=np.float64)

    def T(self, name: str | None = None) -> np.ndarray:
        return self.frame[name or self.treatments[0]].to_numpy(dtype=np.float64)

    def raw(self, column: str) -> np.ndarray:
        """Column on its original scale, undoing any stored standardization."""
        v = self.frame[column].to_numpy(dtype=np.float64)
        if column in self.params:
            mu, sd = self.params[column]
            return v * sd + mu
        return v

    def with_covariates(self, covariates: Sequence[str]) -> "FeatureTable":
        return FeatureTable(self.frame, self.outcome, list(self.treatments), list(covariates),
                            self.id_column, dict(self.params))


def assemble(frame: pd.DataFrame, outcome: str, treatments: Sequence[str], covariates: Sequence[str],
             id_column: str = "cell_id") -> FeatureTable:
    """Select columns and drop rows with any missing value (count logged)."""
    cols = [id_column, outcome, *treatments, *[c for c in covariates if c not in treatments]]
    missing = [c for c in cols if c not in frame.columns]
    if missing:
        raise ScreenError(f"table lacks columns {missing}")
    sub = frame.loc[:, cols].apply(lambda s: s if s.name == id_column else pd.to_numeric(s, errors="coerce"))
    keep = sub.notna().all(axis=1) & np.isfinite(sub.drop(columns=[id_column]).to_numpy(dtype=np.float64)).all(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropped %d of %d rows with missing values", dropped, len(sub))
    sub = sub.loc[keep].sort_values(id_column).reset_index(drop=True)
    return FeatureTable(sub, outcome, list(treatments), [c for c in covariates if c not in treatments], id_column)


def zscore(table: FeatureTable, columns: Sequence[str]) -> FeatureTable:
    """Standardize ``columns`` with the sample (n - 1) sd; the outcome is never touched."""
    columns = [c for c in columns if c != table.outcome]
    frame = table.frame.copy()
    params = dict(table.params)
    bad = []
    for c in columns:
        if c in params:
            raise ScreenError(f"column {c} is already standardized")
        v = frame[c].to_numpy(dtype=np.float64)
        mu = float(np.mean(v))
        sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        if not sd > 0:
            bad.append(c)
            continue
        frame[c] = (v - mu) / sd
        params[c] = (mu, sd)
    if bad:
        raise ScreenError(f"zero-variance columns cannot be standardized: {bad}")
    return FeatureTable(frame, table.outcome, list(table.treatments), list(table.covariates), table.id_column, params)


def unzscore(table: FeatureTable, columns: Sequence[str] | None = None) -> FeatureTable:
    frame = table.frame.copy()
    params = dict(table.params)
    for c in list(params if columns is None else columns):
        mu, sd = params.pop(c)
        frame[c] = frame[c].to_numpy(dtype=np.float64) * sd + mu
    return FeatureTable(frame, table.outcome, list(table.treatments), list(table.covariates), table.id_column, params)


def importance_rank(table: FeatureTable, features: Sequence[str] | None = None, seed: int = 0,
                    spec: LearnerSpec | None = None) -> pd.Series:
    """Total split gain per feature from a depth-wise boosted ensemble, normalized to sum 1."""
    features = list(table.covariates if features is None else features)
    if not features:
        raise ScreenError("importance needs at least one feature")
    spec = (spec or LearnerSpec.default("gbt_depthwise")).with_seed(seed)
    model = fit(spec, table.frame[features].to_numpy(dtype=np.float64), table.Y)
    gains = model.feature_gains()
    total = gains.sum()
    # no split anywhere: nothing distinguishes the features
    share = gains / total if total > 0 else np.full(len(features), 1.0 / len(features))
    return pd.Series(share, index=features, name="importance")


@dataclass
class ScreenReport:
    rho: pd.Series
    importance: pd.Series
    selected: list[str]
    k_corr: int
    k_final: int

    def to_frame(self) -> pd.DataFrame:
        feats = list(self.rho.index)
        return pd.DataFrame({
            "feature": feats,
            "rho": self.rho.reindex(feats).to_numpy(),
            "importance": self.importance.reindex(feats).to_numpy(),
            "selected": [f in self.selected for f in feats],
        })

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12g")


def _abs_rho_order(rho: pd.Series) -> list[str]:
    # NaN correlations sort after every defined one
    key = rho.abs().fillna(-1.0)
    return sorted(rho.index, key=lambda f: (-key[f], f))


def select_covariates(report_or_rho, importance: pd.Series | None = None, k_corr: int = 17,
                      k_final: int = 10) -> list[str]:
    """Top ``k_corr`` by |rho|, then top ``k_final`` of those by importance.

    Ties break by (|rho| desc, name asc). Features without an importance
    score rank last in the second stage.
    """
    if isinstance(report_or_rho, ScreenReport):
        rho, importance = report_or_rho.rho, report_or_rho.importance
    else:
        rho = report_or_rho
    if importance is None:
        raise ScreenError("importance scores required")
    n = len(rho)
    if k_final < 1 or k_final > k_corr:
        raise ScreenError(f"need 1 <= k_final <= k_corr, got k_final={k_final}, k_corr={k_corr}")
    if n < k_final:
        raise ScreenError(f"{n} candidates is fewer than k_final={k_final}")
    stage1 = _abs_rho_order(rho)[:min(k_corr, n)]
    rank1 = {f: i for i, f in enumerate(stage1)}
    imp = importance.reindex(stage1).fillna(-1.0)
    stage2 = sorted(stage1, key=lambda f: (-imp[f], rank1[f]))
    return stage2[:k_final]


def screen(table: FeatureTable, candidates: Sequence[str] | None = None, k_corr: int = 17, k_final: int = 10,
           seed: int = 0) -> ScreenReport:
    """Run both screening stages; importance is fitted on the rank-correlation survivors."""
    candidates = list(table.covariates if candidates is None else candidates)
    if len(candidates) < k_final:
        raise ScreenError(f"{len(candidates)} candidates is fewer than k_final={k_final}")
    y = table.Y
    rho = pd.Series({c: spearman(table.frame[c].to_numpy(dtype=np.float64), y) for c in candidates}, name="rho")
    undefined = rho.index[rho.isna()].tolist()
    if undefined:
        log.warning("rank correlation undefined for constant columns %s", undefined)
    stage1 = _abs_rho_order(rho)[:min(k_corr, len(candidates))]
    imp = importance_rank(table, stage1, seed=seed).reindex(candidates)
    selected = select_covariates(rho, imp, k_corr=min(k_corr, len(candidates)), k_final=k_final)
    return ScreenReport(rho, imp, selected, k_corr, k_final)
