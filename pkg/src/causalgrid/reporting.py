"""Artifact writing, the run manifest and the human-readable summary report."""
from __future__ import annotations

import hashlib
import json
import math
import platform
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd

from .heterogeneity import delta_percent

ESTIMATES = "estimates.json"
MANIFEST = "run_manifest.json"


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path, frame: pd.DataFrame) -> None:
    # repr-precision floats and a fixed line terminator keep files byte-stable
    frame.to_csv(path, index=False, lineterminator="\n")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def update_estimates(out: Path, section: str, payload: Any) -> Path:
    path = Path(out) / ESTIMATES
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc[section] = to_jsonable(payload)
    dump_json(path, doc)
    return path


def versions() -> dict[str, str]:
    import numba
    import scipy
    import shapely

    from . import __version__

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__, "numba": numba.__version__, "shapely": shapely.__version__,
            "causalgrid": __version__}


class Manifest:
    """Run manifest kept on disk; each stage call merges its record in."""

    def __init__(self, out: Path, config_hash: str, seed: int, fresh: bool = False):
        self.path = Path(out) / MANIFEST
        doc = {} if fresh or not self.path.exists() else json.loads(self.path.read_text())
        if doc.get("config_sha256") != config_hash or doc.get("seed") != seed:
            doc = {}
        doc.update({"config_sha256": config_hash, "seed": seed, "versions": versions()})
        doc.setdefault("stages", [])
        doc.setdefault("files", {})
        doc.setdefault("failed_stage", None)
        self.doc = doc

    def record(self, stage: str, status: str, seconds: float, files=(), error: str | None = None) -> None:
        stages = [s for s in self.doc["stages"] if s["name"] != stage]
        entry = {"name": stage, "status": status, "seconds": round(seconds, 3)}
        if error:
            entry["error"] = error
        stages.append(entry)
        self.doc["stages"] = stages
        for f in files:
            p = Path(f)
            if p.exists():
                self.doc["files"][p.name] = {"stage": stage, "sha256": sha256(p), "format": p.suffix.lstrip(".")}
        if status == "failed":
            self.doc["failed_stage"] = stage
        elif self.doc.get("failed_stage") == stage:
            self.doc["failed_stage"] = None
        self.save()

    def save(self) -> None:
        dump_json(self.path, self.doc)


def _fmt(v, nd: int = 3) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    return f"{v:.{nd}f}"


def _stars(p) -> str:
    if p is None:
        return ""
    return "***" if p < 0.001 else "**" if p < 0.01 else "*" if p < 0.05 else ""


def effects_table(est: Mapping) -> str:
    """Learner-by-treatment effects with SEs, the OLS baseline and robustness verdicts."""
    dml = est.get("dml")
    if not dml:
        return ""
    treatments = list(dml["verdicts"])
    learners = []
    for c in dml["cells"]:
        if c["learner"] not in learners:
            learners.append(c["learner"])
    cell = {(c["treatment"], c["learner"]): c for c in dml["cells"]}
    lines = ["| Model | " + " | ".join(treatments) + " |", "|---|" + "---|" * len(treatments)]
    for lk in learners:
        row = []
        for t in treatments:
            c = cell.get((t, lk), {})
            row.append("failed" if c.get("theta") is None else
                       f"{_fmt(c['theta'])}{_stars(c.get('p_value'))} ({_fmt(c['se'])})")
        lines.append(f"| DML {lk} | " + " | ".join(row) + " |")
    ols = {o["treatment"]: o for o in dml.get("ols", [])}
    if ols:
        lines.append("| OLS | " + " | ".join(
            f"{_fmt(ols[t]['theta'])}{_stars(ols[t]['p_value'])} ({_fmt(ols[t]['se'])})" if t in ols else "NA"
            for t in treatments) + " |")
    lines.append("| Verdict | " + " | ".join(dml["verdicts"][t] for t in treatments) + " |")
    return "\n".join(lines)


def semi_elasticity_table(rows) -> str:
    """Outcome rows with ATE, CI, mean outcome, lowest-quartile mean and percent change.

    The percent column is recomputed from the stored ATE and lowest-quartile mean.
    """
    lines = ["| Outcome | ATE | 95% CI | Mean | Mean (Q1) | Change % |", "|---|---|---|---|---|---|"]
    for r in rows:
        pct = delta_percent(r["ate"], r["y_bar_q1"]) if r.get("ate") is not None and r.get("y_bar_q1") is not None else None
        ci = f"[{_fmt(r.get('ci_low'), 2)}, {_fmt(r.get('ci_high'), 2)}]"
        lines.append(f"| {r['outcome']} | {_fmt(r.get('ate'), 2)} | {ci} | {_fmt(r.get('y_bar'), 2)} | "
                     f"{_fmt(r.get('y_bar_q1'), 2)} | {'NA' if pct is None else f'{pct}%'} |")
    return "\n".join(lines)


def render_report(est: Mapping) -> str:
    parts = ["# causalgrid report", ""]
    if "dml" in est:
        parts += ["## Average effects (DML and OLS)", "", effects_table(est), ""]
    if "forest" in est:
        f = est["forest"]
        parts += ["## Causal forest", "",
                  f"ATE {_fmt(f['theta'])} (SE {_fmt(f['se'])}), 95% CI [{_fmt(f['ci_low'])}, {_fmt(f['ci_high'])}], "
                  f"{f['n_defined']} of {f['n']} CATEs defined", ""]
    rows = est.get("semi_elasticity")
    if rows:
        parts += ["## Semi-elasticities", "", semi_elasticity_table(rows), ""]
    if "simulate" in est:
        parts += ["## Simulation scores", "", "| Estimator | Bias | RMSE | Coverage | Reps |", "|---|---|---|---|---|"]
        for s in est["simulate"]["scores"]:
            parts.append(f"| {s['estimator']} | {_fmt(s['bias'])} | {_fmt(s['rmse'])} | {_fmt(s['coverage'], 2)} | "
                         f"{s['replications']} |")
        parts.append("")
    return "\n".join(parts)
