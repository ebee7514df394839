"""Command-line driver: ``causalgrid <subcommand> --config <path> [--out DIR] [--seed N]``.

Stages communicate through files in the output directory:

  grid-build  -> grid.geojson
  screen      -> screen_report.csv, features.csv, standardization.json
  dml         -> robustness.csv, estimates.json[dml]
  shap        -> shap_importance.csv, shap_interactions.csv, dependence_<feature>.csv
  cforest     -> cate.csv, estimates.json[forest]
  hetero      -> subgroups_<cov>.csv, semi_elasticity.csv, subtypes.csv, cate_map.geojson
  simulate    -> scores.csv, dgp.json, estimates.json[simulate]
  report      -> report.md

Exit status is 0 on success, 2 for configuration or prerequisite errors and
3 when a stage fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from . import data_pipeline as dp
from . import heterogeneity as het
from . import reporting as rp
from . import screening as scr
from . import shapley
from ._rng import derive_seed
from .causal_forest import ForestParams, estimate_ate, estimate_cate, fit_forest
from .dml import ols_baseline, robustness_screen
from .learners import KINDS, LearnerSpec, fit
from .synthetic import DgpSpec, score_estimator

log = logging.getLogger("causalgrid")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
FLAG_COLUMNS = {"socio_weight", "socio_missing", "n_images", "visual_missing"}


class ConfigError(ValueError):
    pass


class PrerequisiteError(ConfigError):
    pass


@dataclass
class RunConfig:
    seed: int
    output_dir: Path
    inputs: dict[str, Path]
    grid: dict[str, Any] = field(default_factory=dict)
    outcome: str = "Y"
    treatments: list[str] = field(default_factory=list)
    candidates: list[str] | None = None
    screening: dict[str, int] = field(default_factory=lambda: {"k_corr": 17, "k_final": 10})
    learners: dict[str, dict[str, Any]] = field(default_factory=lambda: {k: {} for k in KINDS})
    dml: dict[str, Any] = field(default_factory=lambda: {"k": 5, "reps": 10, "alpha": 0.05})
    forest: dict[str, Any] = field(default_factory=dict)
    subtypes: list[str] = field(default_factory=list)
    shap: dict[str, Any] = field(default_factory=dict)
    simulate: dict[str, Any] | None = None
    n_jobs: int = 1
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def hash(self) -> str:
        doc = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def learner_specs(self) -> dict[str, LearnerSpec]:
        out = {}
        for kind, over in self.learners.items():
            base = dataclasses.asdict(LearnerSpec.default(kind))
            base.update(over or {})
            out[kind] = LearnerSpec(**base)
        return out

    def forest_params(self) -> ForestParams:
        return ForestParams(**{**self.forest, "seed": derive_seed(self.seed, "cforest")})


_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"raw"}


def load_config(path, out: str | None = None, seed: int | None = None, need_inputs: bool = True) -> RunConfig:
    """Parse and validate a JSON run config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(raw) - _KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    if "seed" not in raw or not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool) or raw["seed"] < 0:
        raise ConfigError("a nonnegative integer seed is required")
    base = path.parent

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (base / p)

    inputs = {k: resolve(v) for k, v in (raw.get("inputs") or {}).items()}
    bad_keys = sorted(set(inputs) - {"crashes", "tracts", "images", "grid", "mask"})
    if bad_keys:
        raise ConfigError(f"unknown input kinds {bad_keys}")
    if need_inputs:
        missing = [f"{k}={v}" for k, v in inputs.items() if not v.exists()]
        if missing:
            raise ConfigError(f"input paths do not exist: {missing}")
    kw = {k: raw[k] for k in _KEYS if k in raw and k not in ("inputs", "output_dir")}
    cfg = RunConfig(output_dir=resolve(raw.get("output_dir", "out")), inputs=inputs, raw=raw, **kw)
    bad = sorted(set(cfg.learners) - set(KINDS))
    if bad:
        raise ConfigError(f"unknown learner kinds {bad}")
    try:
        cfg.learner_specs()
        cfg.forest_params()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid learner or forest settings: {exc}") from None
    if cfg.n_jobs < 1:
        raise ConfigError("n_jobs must be >= 1")
    return cfg


# -- stage helpers -------------------------------------------------------------

def _require(out: Path, name: str, stage: str) -> Path:
    p = out / name
    if not p.exists():
        raise PrerequisiteError(f"{name} not found in {out}; run the '{stage}' stage first")
    return p


def _load_features(out: Path) -> tuple[scr.FeatureTable, dict]:
    meta = json.loads(_require(out, "standardization.json", "screen").read_text())
    frame = pd.read_csv(_require(out, "features.csv", "screen"))
    table = scr.FeatureTable(frame, meta["outcome"], meta["treatments"], meta["covariates"],
                             params={k: tuple(v) for k, v in meta["params"].items()})
    return table, meta


def stage_grid_build(cfg: RunConfig, out: Path) -> list[Path]:
    if "grid" in cfg.inputs:
        grid, table = dp.read_grid(cfg.inputs["grid"])
    else:
        for k in ("crashes", "tracts", "images"):
            if k not in cfg.inputs:
                raise ConfigError(f"grid-build needs inputs.{k} (or inputs.grid)")
        if "extent" not in cfg.grid:
            raise ConfigError("grid.extent is required to build a grid")
        mask = None
        if "mask" in cfg.inputs:
            import shapely
            from shapely.geometry import shape

            doc = json.loads(cfg.inputs["mask"].read_text())
            mask = shapely.union_all([shape(f["geometry"]) for f in doc["features"]])
        grid, _ = dp.build_grid(cfg.grid["extent"], cfg.grid.get("cell_size", 2000.0), mask)
        table = dp.build_grid_table(grid, dp.read_crashes(cfg.inputs["crashes"]),
                                    dp.read_tracts(cfg.inputs["tracts"]), dp.read_images(cfg.inputs["images"]))
    path = out / "grid.geojson"
    dp.write_grid(path, grid, table)
    return [path]


def stage_screen(cfg: RunConfig, out: Path) -> list[Path]:
    _, frame = dp.read_grid(_require(out, "grid.geojson", "grid-build"))
    if not cfg.treatments:
        raise ConfigError("at least one treatment is required")
    excluded = {"cell_id", cfg.outcome, *cfg.treatments, *dp.CATEGORIES, *cfg.subtypes} | FLAG_COLUMNS
    if cfg.candidates is not None:
        candidates = list(cfg.candidates)
    else:
        candidates = [c for c in frame.columns if c not in excluded and pd.api.types.is_numeric_dtype(frame[c])]
    missing = [c for c in [cfg.outcome, *cfg.treatments, *candidates, *cfg.subtypes] if c not in frame.columns]
    if missing:
        raise ConfigError(f"grid table lacks columns {missing}")
    table = scr.assemble(frame, cfg.outcome, cfg.treatments, candidates)
    dropped = len(frame) - len(table.frame)
    table = scr.zscore(table, [*cfg.treatments, *table.covariates])
    k_corr = cfg.screening.get("k_corr", 17)
    k_final = cfg.screening.get("k_final", 10)
    report = scr.screen(table, table.covariates, k_corr=k_corr, k_final=k_final,
                        seed=derive_seed(cfg.seed, "screen"))
    selected = report.selected
    feats = table.frame[["cell_id", cfg.outcome, *cfg.treatments, *selected]].copy()
    sub = frame.set_index("cell_id").loc[feats["cell_id"], cfg.subtypes].reset_index(drop=True)
    for c in cfg.subtypes:
        feats[c] = sub[c].to_numpy(dtype=np.float64)
    paths = [out / "screen_report.csv", out / "features.csv", out / "standardization.json"]
    report.write_csv(paths[0])
    rp.write_csv(paths[1], feats)
    rp.dump_json(paths[2], {
        "outcome": cfg.outcome, "treatments": cfg.treatments, "covariates": selected, "subtypes": cfg.subtypes,
        "params": {c: list(table.params[c]) for c in [*cfg.treatments, *selected]},
        "dropped_rows": dropped, "n": len(feats),
    })
    return paths


def stage_dml(cfg: RunConfig, out: Path) -> list[Path]:
    table, _ = _load_features(out)
    X, Y = table.X, table.Y
    specs = cfg.learner_specs()
    alpha = cfg.dml.get("alpha", 0.05)
    matrix = robustness_screen({t: table.T(t) for t in table.treatments}, X, Y, kinds=list(specs), specs=specs,
                               k=cfg.dml.get("k", 5), reps=cfg.dml.get("reps", 10),
                               seed=derive_seed(cfg.seed, "dml"), alpha=alpha, n_jobs=cfg.n_jobs)
    rows, cells = [], []
    for t in matrix.treatments:
        for lk in matrix.learners:
            est = matrix.cells[(t, lk)]
            rec = {"treatment": t, "learner": lk, "verdict": matrix.verdicts[t],
                   "error": matrix.errors.get((t, lk))}
            if est is not None:
                rec.update({k: getattr(est, k) for k in ("theta", "se", "ci_low", "ci_high", "p_value", "n_reps")})
            rows.append(rec)
            cells.append(rec)
    ols = []
    for t in table.treatments:
        est = ols_baseline(Y, table.T(t), X, names=table.covariates, treatment=t)
        ols.append({"treatment": t, **{k: getattr(est, k) for k in ("theta", "se", "ci_low", "ci_high", "p_value")}})
    path = out / "robustness.csv"
    cols = ["treatment", "learner", "theta", "se", "ci_low", "ci_high", "p_value", "n_reps", "verdict", "error"]
    rp.write_csv(path, pd.DataFrame(rows).reindex(columns=cols))
    est_path = rp.update_estimates(out, "dml", {"cells": cells, "verdicts": matrix.verdicts, "ols": ols,
                                                "alpha": alpha, "n": len(Y)})
    return [path, est_path]


def stage_shap(cfg: RunConfig, out: Path) -> list[Path]:
    table, _ = _load_features(out)
    kind = cfg.shap.get("learner", "gbt_depthwise")
    base = cfg.learner_specs().get(kind) or LearnerSpec.default(kind)
    max_samples = int(cfg.shap.get("max_samples", 200))
    top = int(cfg.shap.get("dependence_top", 3))
    frac = float(cfg.shap.get("lowess_frac", 0.3))
    X, names = table.X, table.covariates
    imp_rows, int_rows = [], []
    dep: dict[str, list[pd.DataFrame]] = {}
    targets = {"outcome": table.Y, **{f"treatment:{t}": table.T(t) for t in table.treatments}}
    for label, target in targets.items():
        model = fit(base.with_seed(derive_seed(cfg.seed, "shap", label)), X, target, n_jobs=cfg.n_jobs)
        expl = shapley.tree_shap(model, X, names)
        imp = shapley.global_importance(expl)
        imp.insert(0, "model", label)
        imp_rows.append(imp)
        if len(names) <= shapley.MAX_ENUM_FEATURES:
            im = shapley.interaction_matrix(model, X, names, max_samples=max_samples)
            for i in range(len(names)):
                for j in range(i + 1, len(names)):
                    int_rows.append({"model": label, "feature_i": names[i], "feature_j": names[j],
                                     "strength": im.matrix[i, j]})
        else:
            log.warning("skipping interactions: %d features exceeds enumeration limit", len(names))
        for feat in imp["feature"].head(top):
            d = shapley.dependence_data(expl, feat, frac=frac)
            d.insert(0, "model", label)
            dep.setdefault(feat, []).append(d)
    paths = [out / "shap_importance.csv", out / "shap_interactions.csv"]
    rp.write_csv(paths[0], pd.concat(imp_rows, ignore_index=True))
    rp.write_csv(paths[1], pd.DataFrame(int_rows, columns=["model", "feature_i", "feature_j", "strength"]))
    for feat in sorted(dep):
        paths.append(out / f"dependence_{feat}.csv")
        rp.write_csv(paths[-1], pd.concat(dep[feat], ignore_index=True))
    return paths


def _forest_run(cfg: RunConfig, table: scr.FeatureTable):
    t = table.treatments[0]
    model = fit_forest(table.X, table.Y, table.T(t), cfg.forest_params(), n_jobs=cfg.n_jobs)
    cates = estimate_cate(model)
    cates.cell_id = table.ids
    return t, cates, estimate_ate(model, cates)


def stage_cforest(cfg: RunConfig, out: Path) -> list[Path]:
    table, _ = _load_features(out)
    t, cates, ate = _forest_run(cfg, table)
    path = out / "cate.csv"
    rp.write_csv(path, cates.to_frame())
    est_path = rp.update_estimates(out, "forest", {
        "treatment": t, "outcome": table.outcome, "n": len(cates), "n_defined": int(cates.defined.sum()),
        **{k: getattr(ate, k) for k in ("theta", "se", "ci_low", "ci_high", "p_value")},
    })
    return [path, est_path]


def stage_hetero(cfg: RunConfig, out: Path) -> list[Path]:
    cate_path = _require(out, "cate.csv", "cforest")
    est_path = _require(out, rp.ESTIMATES, "cforest")
    forest = json.loads(est_path.read_text()).get("forest")
    if forest is None:
        raise PrerequisiteError("estimates.json has no forest section; run the 'cforest' stage first")
    grid, _ = dp.read_grid(_require(out, "grid.geojson", "grid-build"))
    table, meta = _load_features(out)
    cdf = pd.read_csv(cate_path)
    if not np.array_equal(cdf["cell_id"].to_numpy(), table.ids):
        raise PrerequisiteError("cate.csv does not match features.csv; rerun 'cforest'")
    defined = cdf["defined"].to_numpy(dtype=bool)
    from .causal_forest import CateResult

    cates = CateResult(tau=cdf["tau"].to_numpy(), variance=cdf["variance"].to_numpy(),
                       ci_low=cdf["ci_low"].to_numpy(), ci_high=cdf["ci_high"].to_numpy(), defined=defined,
                       clamped=np.zeros(len(cdf), bool), cell_id=cdf["cell_id"].to_numpy())
    paths = []
    for cov in table.covariates:
        rep = het.quartile_subgroups(cates, table.frame[cov].to_numpy(), cov)
        p1, p2 = out / f"subgroups_{cov}.csv", out / f"subgroups_{cov}_density.csv"
        rp.write_csv(p1, rep.to_frame())
        rp.write_csv(p2, rep.density_frame())
        paths += [p1, p2]
    t = forest["treatment"]
    t_raw = table.raw(t)
    main = het.semi_elasticity(forest["theta"], table.Y, t_raw, table.outcome)
    semi = [{**main.to_dict(), "ci_low": forest["ci_low"], "ci_high": forest["ci_high"],
             "p_value": forest["p_value"], "error": None}]
    subtypes = {s: table.frame[s].to_numpy(dtype=np.float64) for s in meta.get("subtypes", [])}
    results = het.per_subtype_forests(table.X, table.T(t), subtypes, cfg.forest_params(), treatment_raw=t_raw,
                                      cell_id=table.ids, n_jobs=1)
    for r in results:
        d = r.to_dict()
        semi.append({"outcome": r.outcome, "ate": d.get("theta"), "y_bar": d.get("y_bar"),
                     "y_bar_q1": d.get("y_bar_q1"), "q1_cut": d.get("q1_cut"), "delta_pct": d.get("delta_pct"),
                     "ci_low": d.get("ci_low"), "ci_high": d.get("ci_high"), "p_value": d.get("p_value"),
                     "error": r.error})
    p_semi, p_sub, p_map = out / "semi_elasticity.csv", out / "subtypes.csv", out / "cate_map.geojson"
    cols = ["outcome", "ate", "ci_low", "ci_high", "p_value", "y_bar", "y_bar_q1", "q1_cut", "delta_pct", "error"]
    semi_df = pd.DataFrame(semi).reindex(columns=cols)
    semi_df["delta_pct"] = semi_df["delta_pct"].astype("Int64")
    rp.write_csv(p_semi, semi_df)
    rp.write_csv(p_sub, het.subtype_table(results) if results else pd.DataFrame(columns=["outcome"]))
    het.write_cate_map(p_map, cates, grid)
    est = rp.update_estimates(out, "semi_elasticity", semi)
    return paths + [p_semi, p_sub, p_map, est]


def stage_simulate(cfg: RunConfig, out: Path) -> list[Path]:
    sim = dict(cfg.simulate or {})
    dgp = DgpSpec(**{**sim.get("dgp", {}), "seed": derive_seed(cfg.seed, "simulate")})
    reps = int(sim.get("replications", 20))
    generator = sim.get("generator", "plr")
    scores = [score_estimator(e, dgp, reps, generator=generator).to_dict()
              for e in sim.get("estimators", ["dml", "ols_controls", "ols_naive"])]
    p_scores, p_dgp = out / "scores.csv", out / "dgp.json"
    rp.write_csv(p_scores, pd.DataFrame(scores))
    p_dgp.write_text(dgp.to_json() + "\n")
    est = rp.update_estimates(out, "simulate", {"dgp": json.loads(dgp.to_json()), "generator": generator,
                                                "scores": scores})
    return [p_scores, p_dgp, est]


def stage_report(cfg: RunConfig, out: Path) -> list[Path]:
    est = json.loads(_require(out, rp.ESTIMATES, "dml").read_text())
    text = rp.render_report(est)
    path = out / "report.md"
    path.write_text(text)
    print(text)
    return [path]


STAGES: dict[str, Callable[[RunConfig, Path], list[Path]]] = {
    "grid-build": stage_grid_build,
    "screen": stage_screen,
    "dml": stage_dml,
    "shap": stage_shap,
    "cforest": stage_cforest,
    "hetero": stage_hetero,
    "simulate": stage_simulate,
    "report": stage_report,
}
PIPELINE = ["grid-build", "screen", "dml", "shap", "cforest", "hetero", "report"]


def run_stages(cfg: RunConfig, names: list[str], fresh: bool = False) -> int:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest = rp.Manifest(out, cfg.hash, cfg.seed, fresh=fresh)
    for name in names:
        t0 = time.perf_counter()
        try:
            files = STAGES[name](cfg, out)
        except ConfigError as exc:
            manifest.record(name, "failed", time.perf_counter() - t0, error=str(exc))
            log.error("%s: %s", name, exc)
            return EXIT_CONFIG
        except Exception as exc:  # noqa: BLE001 - any stage failure maps to exit code 3
            manifest.record(name, "failed", time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}")
            log.error("stage %s failed: %s", name, exc, exc_info=log.isEnabledFor(logging.DEBUG))
            return EXIT_STAGE
        manifest.record(name, "ok", time.perf_counter() - t0, files)
        log.info("stage %s done in %.2fs", name, time.perf_counter() - t0)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="causalgrid", description="Grid-level causal inference pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in [*STAGES, "run"]:
        p = sub.add_parser(name, help="full pipeline" if name == "run" else f"{name} stage")
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be nonnegative")
        cfg = load_config(args.config, out=args.out, seed=args.seed)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    if args.command == "run":
        names = PIPELINE if cfg.simulate is None else [*PIPELINE[:-1], "simulate", "report"]
        return run_stages(cfg, names, fresh=True)
    return run_stages(cfg, [args.command])


if __name__ == "__main__":
    sys.exit(main())
