"""Simulated partially linear and heterogeneous-effect data with known truth.

Used as the ground-truth harness for the estimators: ``gen_plr`` and
``gen_hetero`` draw tables, ``score_estimator`` runs an estimator over
seeded replications and reports bias, RMSE and CI coverage.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Any, Callable, Mapping

import numpy as np
import pandas as pd

from ._rng import derive_seed, rng_for

log = logging.getLogger(__name__)

G_FORMS = ("linear", "sine-interaction", "step")
M_FORMS = ("linear", "logistic-shaped")


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class DgpSpec:
    n: int = 1000
    p: int = 5
    theta: float = 2.0
    tau_intercept: float | None = None
    tau_slope: float = 0.0
    g_form: str = "linear"
    m_form: str = "linear"
    sigma_eps: float = 1.0
    sigma_v: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 50:
            raise SimulationError("n must be >= 50")
        if self.p < 2:
            raise SimulationError("p must be >= 2")
        if self.sigma_eps < 0 or self.sigma_v < 0:
            raise SimulationError("noise sds must be >= 0")
        if self.g_form not in G_FORMS:
            raise SimulationError(f"g_form must be one of {G_FORMS}")
        if self.m_form not in M_FORMS:
            raise SimulationError(f"m_form must be one of {M_FORMS}")

    def with_seed(self, seed: int) -> "DgpSpec":
        return replace(self, seed=seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DgpSpec":
        return cls(**json.loads(text))


def g_function(X: np.ndarray, form: str) -> np.ndarray:
    x0, x1, x2 = X[:, 0], X[:, 1], X[:, 2 % X.shape[1]]
    if form == "linear":
        return x0 + 0.5 * x1 + 0.25 * x2
    if form == "sine-interaction":
        return 2.0 * np.sin(2.0 * x0) + 1.5 * x0 * x1 + np.cos(x2)
    if form == "step":
        return 2.0 * (x0 > 0) - 1.5 * (x1 > 0.5) + (x2 > -0.5)
    raise SimulationError(f"unknown g form {form!r}")


def m_function(X: np.ndarray, form: str) -> np.ndarray:
    x0, x1 = X[:, 0], X[:, 1]
    if form == "linear":
        return 0.5 * x0 + 0.25 * x1
    if form == "logistic-shaped":
        return 2.0 / (1.0 + np.exp(-(x0 + x0 * x1))) - 1.0
    raise SimulationError(f"unknown m form {form!r}")


@dataclass(frozen=True, eq=False)
class SimTable:
    """Simulated analysis table plus the truth that generated it."""

    frame: pd.DataFrame
    covariates: list[str]
    outcome: str
    treatment: str
    spec: DgpSpec
    theta: float
    tau: np.ndarray | None = None

    @property
    def X(self) -> np.ndarray:
        return self.frame[self.covariates].to_numpy()

    @property
    def Y(self) -> np.ndarray:
        return self.frame[self.outcome].to_numpy()

    @property
    def T(self) -> np.ndarray:
        return self.frame[self.treatment].to_numpy()


def _draw(spec: DgpSpec):
    rng = rng_for(spec.seed, "dgp")
    X = rng.standard_normal((spec.n, spec.p))
    v = spec.sigma_v * rng.standard_normal(spec.n)
    eps = spec.sigma_eps * rng.standard_normal(spec.n)
    T = m_function(X, spec.m_form) + v
    return X, T, v, eps


def _frame(X, T, Y, extra: Mapping[str, np.ndarray]) -> tuple[pd.DataFrame, list[str]]:
    covs = [f"x{j}" for j in range(X.shape[1])]
    df = pd.DataFrame(X, columns=covs)
    df.insert(0, "T", T)
    df.insert(0, "Y", Y)
    for k, v in extra.items():
        df[k] = v
    return df, covs


def gen_plr(spec: DgpSpec) -> SimTable:
    """``X ~ N(0, I)``, ``T = m(X) + v``, ``Y = theta * T + g(X) + eps``."""
    X, T, v, eps = _draw(spec)
    Y = spec.theta * T + g_function(X, spec.g_form) + eps
    df, covs = _frame(X, T, Y, {"_v": v, "_eps": eps})
    return SimTable(df, covs, "Y", "T", spec, spec.theta)


def gen_hetero(spec: DgpSpec) -> SimTable:
    """``Y = tau(X) * T + g(X) + eps`` with ``tau(x) = a + b * x0``.

    ``a`` is ``spec.tau_intercept`` (``spec.theta`` when unset) and ``b`` is
    ``spec.tau_slope``; the population ATE is ``a`` because ``x0`` is centered.
    """
    a = spec.theta if spec.tau_intercept is None else spec.tau_intercept
    X, T, v, eps = _draw(spec)
    tau = a + spec.tau_slope * X[:, 0]
    Y = tau * T + g_function(X, spec.g_form) + eps
    df, covs = _frame(X, T, Y, {"_v": v, "_eps": eps, "tau_true": tau})
    return SimTable(df, covs, "Y", "T", spec, float(a), tau)


@dataclass
class EstimatorScore:
    estimator: str
    bias: float
    rmse: float
    coverage: float
    mean_ci_width: float
    replications: int
    failures: int
    truth: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# An estimator maps a simulated table and a seed to (theta, ci_low, ci_high).
Estimator = Callable[[SimTable, int], tuple[float, float, float]]


# Repeated splits fold split-to-split nuisance noise into the SE; one split undercovers with tree nuisances.
DML_SIM_REPS = 3


def _dml(table: SimTable, seed: int, kind: str = "gbt_depthwise", reps: int = DML_SIM_REPS):
    from .dml import repeat_estimate
    from .learners import LearnerSpec

    est = repeat_estimate(LearnerSpec.default(kind), table.X, table.Y, table.T, k=5, reps=reps, seed=seed)
    return est.theta, est.ci_low, est.ci_high


def _ols_controls(table: SimTable, seed: int):
    from .dml import ols_baseline

    est = ols_baseline(table.Y, table.T, table.X)
    return est.theta, est.ci_low, est.ci_high


def _ols_naive(table: SimTable, seed: int):
    from .dml import ols_baseline

    est = ols_baseline(table.Y, table.T)
    return est.theta, est.ci_low, est.ci_high


def _forest(table: SimTable, seed: int):
    from .causal_forest import ForestParams, estimate_ate, fit_forest

    model = fit_forest(table.X, table.Y, table.T, ForestParams(n_trees=200, seed=seed))
    est = estimate_ate(model)
    return est.theta, est.ci_low, est.ci_high


ESTIMATORS: dict[str, Estimator] = {
    "dml": _dml,
    "ols_controls": _ols_controls,
    "ols_naive": _ols_naive,
    "causal_forest": _forest,
}

GENERATORS = {"plr": gen_plr, "hetero": gen_hetero}


def score_estimator(estimator: str | Estimator, spec: DgpSpec, replications: int = 100,
                    generator: str = "plr", name: str | None = None) -> EstimatorScore:
    """Run ``estimator`` on ``replications`` fresh draws and score it against the truth.

    Replication ``r`` uses data seed ``derive_seed(spec.seed, "data", r)`` and
    estimator seed ``derive_seed(spec.seed, "fit", r)``.
    """
    if replications < 10:
        raise SimulationError("need at least 10 replications")
    fn = ESTIMATORS[estimator] if isinstance(estimator, str) else estimator
    label = name or (estimator if isinstance(estimator, str) else getattr(fn, "__name__", "custom"))
    gen = GENERATORS[generator]
    thetas, lows, highs, truths = [], [], [], []
    failures = 0
    for r in range(replications):
        table = gen(spec.with_seed(derive_seed(spec.seed, "data", r)))
        try:
            th, lo, hi = fn(table, derive_seed(spec.seed, "fit", r))
        except Exception as exc:  # noqa: BLE001 - failures are counted, not fatal
            log.warning("replication %d of %s failed: %s", r, label, exc)
            failures += 1
            continue
        thetas.append(th)
        lows.append(lo)
        highs.append(hi)
        truths.append(table.theta)
    if failures > 0.1 * replications:
        raise SimulationError(f"{failures}/{replications} replications of {label} failed")
    thetas, lows, highs, truths = map(np.asarray, (thetas, lows, highs, truths))
    err = thetas - truths
    return EstimatorScore(
        estimator=label,
        bias=float(err.mean()),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        coverage=float(np.mean((lows <= truths) & (truths <= highs))),
        mean_ci_width=float(np.mean(highs - lows)),
        replications=len(thetas),
        failures=failures,
        truth=float(truths.mean()),
    )


# -- bundled toy inputs -------------------------------------------------------

TOY_TREATMENT = "seg_08"


def toy_inputs(seed: int = 0, n_cols: int = 6, n_rows: int = 5, cell_size: float = 2000.0,
               points_per_cell: int = 4) -> dict[str, Any]:
    """Raw crash, tract and image inputs for a small grid with a known protective greenery effect.

    Each cell gets a latent deprivation score ``z`` and a greenery level.
    Image proportions are Dirichlet around the cell profile, tract
    percentages follow ``z`` and crash counts are Poisson with log-rate
    falling in greenery and rising in ``z``. Returns frames plus a GeoJSON
    dict for the tracts and the grid extent.
    """
    from .data_pipeline import CATEGORIES, HEADINGS, N_SEG, SEG_COLUMNS

    rng = rng_for(seed, "toy")
    n_cells = n_cols * n_rows
    z = rng.standard_normal(n_cells)
    green = np.clip(0.25 - 0.06 * z + 0.06 * rng.standard_normal(n_cells), 0.03, 0.6)

    base = np.full(N_SEG, 1.0)
    base[0] = 8.0  # road
    base[2] = 4.0  # building
    base[10] = 6.0  # sky
    images = []
    for c in range(n_cells):
        row, col = divmod(c, n_cols)
        x0, y0 = col * cell_size, row * cell_size
        for k in range(points_per_cell):
            px, py = x0 + cell_size * rng.uniform(0.05, 0.95), y0 + cell_size * rng.uniform(0.05, 0.95)
            for h in HEADINGS:
                g = green[c] * rng.uniform(0.8, 1.2)
                # seg_08 is vegetation; 1% of pixels stay unclassified
                rest = rng.dirichlet(np.delete(base, 8) * 3.0) * (1.0 - g)
                prop = np.insert(rest, 8, g) * 0.99
                images.append([f"p{c:03d}_{k}", round(px, 3), round(py, 3), h, *np.round(prop, 6)])
    images = pd.DataFrame(images, columns=["point_id", "x", "y", "heading", *SEG_COLUMNS])

    tracts = []
    width = 3
    for row in range(n_rows):
        for c0 in range(0, n_cols, width):
            cells = [row * n_cols + c for c in range(c0, min(c0 + width, n_cols))]
            zt = float(np.mean(z[cells]))
            x0, x1 = c0 * cell_size, min(c0 + width, n_cols) * cell_size
            y0, y1 = row * cell_size, (row + 1) * cell_size
            tracts.append({
                "type": "Feature",
                "geometry": {"type": "Polygon",
                             "coordinates": [[[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]]},
                "properties": {
                    "population": float(round(rng.uniform(2000, 8000))),
                    "pct_poverty": float(np.clip(round(18 + 7 * zt + 2 * rng.standard_normal(), 2), 0, 100)),
                    "pct_no_vehicle": float(np.clip(round(9 + 4 * zt + rng.standard_normal(), 2), 0, 100)),
                    "pct_minority": float(np.clip(round(35 + 12 * zt + 5 * rng.standard_normal(), 2), 0, 100)),
                },
            })
    tract_doc = {"type": "FeatureCollection", "features": tracts}

    rate = np.exp(3.2 + 0.35 * z - 3.0 * (green - 0.25))
    counts = rng.poisson(rate)
    probs = np.array([0.22, 0.05, 0.3, 0.01, 0.04, 0.18, 0.2])
    crashes = []
    for c in range(n_cells):
        row, col = divmod(c, n_cols)
        for _ in range(counts[c]):
            crashes.append([round(col * cell_size + cell_size * rng.random(), 3),
                            round(row * cell_size + cell_size * rng.random(), 3),
                            CATEGORIES[rng.choice(len(CATEGORIES), p=probs)],
                            int(rng.integers(2016, 2021))])
    crashes = pd.DataFrame(crashes, columns=["x", "y", "category", "year"])
    extent = [0.0, 0.0, n_cols * cell_size, n_rows * cell_size]
    return {"crashes": crashes, "tracts": tract_doc, "images": images, "extent": extent}


def write_toy_inputs(directory, seed: int = 0) -> dict[str, str]:
    """Write ``toy_inputs`` as crashes.csv, tracts.geojson and images.csv."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    toy = toy_inputs(seed)
    toy["crashes"].to_csv(d / "crashes.csv", index=False)
    toy["images"].to_csv(d / "images.csv", index=False)
    (d / "tracts.geojson").write_text(json.dumps(toy["tracts"], sort_keys=True, indent=1) + "\n")
    return {k: str(d / f) for k, f in
            (("crashes", "crashes.csv"), ("images", "images.csv"), ("tracts", "tracts.geojson"))}
