"""Effect heterogeneity reports: quartile strata, semi-elasticities, subtype forests, CATE maps."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from shapely.geometry import box, mapping

from .causal_forest import CateResult, ForestParams, estimate_ate, estimate_cate, fit_forest
from .data_pipeline import GridSpec
from .dml import DmlEstimate
from .learners import LearnerSpec

log = logging.getLogger(__name__)

N_DENSITY = 256
QUARTILES = ("Q1", "Q2", "Q3", "Q4")


class HeterogeneityError(ValueError):
    pass


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    sd = float(np.std(x, ddof=1))
    iqr = float(np.subtract(*np.quantile(x, [0.75, 0.25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * len(x) ** -0.2


def kde(x: np.ndarray, n_points: int = N_DENSITY) -> tuple[np.ndarray, np.ndarray] | None:
    """Gaussian KDE on an even grid covering the data plus four bandwidths each side."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return None
    h = silverman_bandwidth(x)
    if not h > 0:
        return None
    grid = np.linspace(x.min() - 4 * h, x.max() + 4 * h, n_points)
    z = (grid[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (len(x) * h * np.sqrt(2 * np.pi))
    return grid, dens


@dataclass
class Subgroup:
    label: str
    lower: float
    upper: float
    n: int
    ate: float
    se: float
    flagged: bool
    density: tuple[np.ndarray, np.ndarray] | None


@dataclass
class SubgroupReport:
    covariate: str
    cuts: np.ndarray  # 25th, 50th, 75th percentiles (type 7)
    groups: list[Subgroup]
    membership: np.ndarray  # quartile index 0..3 per defined CATE

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "covariate": self.covariate, "quartile": g.label, "lower": g.lower, "upper": g.upper,
            "n": g.n, "ate": g.ate, "se": g.se, "flagged": g.flagged,
        } for g in self.groups])

    def density_frame(self) -> pd.DataFrame:
        rows = []
        for g in self.groups:
            if g.density is not None:
                rows.append(pd.DataFrame({"quartile": g.label, "tau": g.density[0], "density": g.density[1]}))
        cols = ["quartile", "tau", "density"]
        return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=cols)


def quartile_subgroups(cates: CateResult, covariate, name: str = "covariate") -> SubgroupReport:
    """Stratify defined CATEs at the covariate quartiles.

    Q1 is ``x <= q25``, Q2 ``q25 < x <= q50``, Q3 ``q50 < x <= q75`` and Q4
    ``x > q75``. A subgroup ATE is the mean member CATE with SE ``sd / sqrt(n)``.
    """
    x = np.asarray(covariate, dtype=np.float64)
    if len(x) != len(cates):
        raise HeterogeneityError("covariate length differs from the CATE set")
    d = cates.defined & np.isfinite(x)
    if d.sum() < 8:
        raise HeterogeneityError(f"need at least 8 defined CATEs, got {int(d.sum())}")
    x, tau = x[d], cates.tau[d]
    cuts = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    member = np.searchsorted(cuts, x, side="left")
    bounds = np.r_[x.min(), cuts, x.max()]
    groups = []
    for q in range(4):
        v = tau[member == q]
        n = len(v)
        flagged = n < 2
        if flagged:
            log.warning("quartile %s of %s has %d members", QUARTILES[q], name, n)
        groups.append(Subgroup(
            QUARTILES[q], float(bounds[q]), float(bounds[q + 1]), n,
            float(v.mean()) if n else float("nan"),
            float(v.std(ddof=1) / np.sqrt(n)) if n >= 2 else float("nan"),
            flagged, None if flagged else kde(v),
        ))
    return SubgroupReport(name, cuts, groups, member)


def delta_percent(ate: float, y_q1: float) -> int | None:
    """``round(100 * ate / y_q1)`` to an integer percent, halves away from zero."""
    if not np.isfinite(ate) or not np.isfinite(y_q1) or y_q1 == 0:
        return None
    value = Decimal(repr(float(ate))) * 100 / Decimal(repr(float(y_q1)))
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass
class SemiElasticityRow:
    outcome: str
    ate: float
    y_bar: float
    y_bar_q1: float
    q1_cut: float
    delta_pct: int | None

    @property
    def defined(self) -> bool:
        return self.delta_pct is not None

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "ate": self.ate, "y_bar": self.y_bar, "y_bar_q1": self.y_bar_q1,
                "q1_cut": self.q1_cut, "delta_pct": self.delta_pct}


def semi_elasticity(ate: float, outcome, treatment_raw, name: str = "outcome") -> SemiElasticityRow:
    """Effect as a percent of the mean outcome among rows in the lowest treatment quartile.

    ``treatment_raw`` must be on its original (unstandardized) scale.
    """
    y = np.asarray(outcome, dtype=np.float64)
    t = np.asarray(treatment_raw, dtype=np.float64)
    if y.shape != t.shape or y.ndim != 1 or len(y) == 0:
        raise HeterogeneityError("outcome and treatment must be equal-length 1-d columns")
    cut = float(np.quantile(t, 0.25, method="linear"))
    y_q1 = float(y[t <= cut].mean())
    pct = delta_percent(ate, y_q1)
    if pct is None:
        log.warning("semi-elasticity of %s undefined (mean outcome in Q1 is %s)", name, y_q1)
    return SemiElasticityRow(name, float(ate), float(y.mean()), y_q1, cut, pct)


@dataclass
class SubtypeResult:
    outcome: str
    estimate: DmlEstimate | None
    cates: CateResult | None
    semi: SemiElasticityRow | None
    error: str | None = None

    def to_dict(self) -> dict:
        out = {"outcome": self.outcome, "error": self.error}
        if self.estimate is not None:
            out.update({k: getattr(self.estimate, k) for k in ("theta", "se", "ci_low", "ci_high", "p_value")})
        if self.semi is not None:
            out.update({k: v for k, v in self.semi.to_dict().items() if k != "outcome"})
        return out


def per_subtype_forests(X, T, outcomes: Mapping[str, np.ndarray], params: ForestParams,
                        treatment_raw=None, centering: LearnerSpec | None = None, cell_id=None,
                        n_jobs: int = 1) -> list[SubtypeResult]:
    """One causal forest per outcome column, all sharing covariates, treatment and seed.

    Failures are isolated: the failing outcome gets a row with ``error`` set.
    Results come back in the order of ``outcomes``.
    """
    t_raw = np.asarray(T if treatment_raw is None else treatment_raw, dtype=np.float64)

    def one(name: str) -> SubtypeResult:
        y = np.asarray(outcomes[name], dtype=np.float64)
        try:
            model = fit_forest(X, y, T, params, centering=centering)
            cates = estimate_cate(model)
            if cell_id is not None:
                cates.cell_id = np.asarray(cell_id)
            est = estimate_ate(model, cates)
            return SubtypeResult(name, est, cates, semi_elasticity(est.theta, y, t_raw, name))
        except Exception as exc:  # noqa: BLE001 - reported per subtype
            log.warning("subtype forest for %s failed: %s", name, exc)
            return SubtypeResult(name, None, None, None, f"{type(exc).__name__}: {exc}")

    names = list(outcomes)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(one, names))
    return [one(n) for n in names]


def _num(v: float) -> float | None:
    return float(v) if np.isfinite(v) else None


def export_cate_map(cates: CateResult, grid: GridSpec) -> dict:
    """GeoJSON with one cell polygon per CATE row, ordered by cell id."""
    if cates.cell_id is None:
        raise HeterogeneityError("CATEs carry no cell ids")
    ids = np.asarray(cates.cell_id).astype(np.int64)
    known = set(int(c) for c in grid.cell_ids)
    orphans = sorted(int(c) for c in ids if int(c) not in known)
    if orphans:
        raise HeterogeneityError(f"cell ids not in the grid: {orphans[:10]}")
    if len(np.unique(ids)) != len(ids):
        raise HeterogeneityError("duplicate cell ids in CATE set")
    feats = []
    for k in np.argsort(ids, kind="stable"):
        ok = bool(cates.defined[k])
        feats.append({
            "type": "Feature",
            "id": int(ids[k]),
            "geometry": mapping(box(*grid.cell_bounds(int(ids[k])))),
            "properties": {
                "cell_id": int(ids[k]),
                "tau": _num(cates.tau[k]) if ok else None,
                "ci_low": _num(cates.ci_low[k]) if ok else None,
                "ci_high": _num(cates.ci_high[k]) if ok else None,
                "defined": ok,
            },
        })
    return {"type": "FeatureCollection", "features": feats}


def write_cate_map(path, cates: CateResult, grid: GridSpec) -> None:
    Path(path).write_text(json.dumps(export_cate_map(cates, grid), sort_keys=True) + "\n")


def read_cate_map(path) -> pd.DataFrame:
    doc = json.loads(Path(path).read_text())
    return pd.DataFrame([f["properties"] for f in doc["features"]])


def subtype_table(results: Sequence[SubtypeResult]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in results])
