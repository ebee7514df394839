"""Partially linear double machine learning with cross-fitting.

The outcome and treatment are each residualized on the controls with
out-of-fold predictions, then the causal coefficient is the no-intercept
OLS slope of outcome residuals on treatment residuals.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import stats

from ._rng import derive_seed, rng_for
from .learners import KINDS, LearnerSpec, fit

log = logging.getLogger(__name__)

Z95 = float(stats.norm.ppf(0.975))


class DmlError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FoldPlan:
    n: int
    k: int
    assignment: np.ndarray
    seed: int

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.k).tolist()


@dataclass(frozen=True, eq=False)
class ResidualSet:
    y_res: np.ndarray
    t_res: np.ndarray
    fold: np.ndarray
    y_hat: np.ndarray
    t_hat: np.ndarray


@dataclass
class DmlEstimate:
    theta: float
    se: float
    ci_low: float
    ci_high: float
    p_value: float
    learner: str = ""
    n_reps: int = 1
    thetas: list[float] = field(default_factory=list)
    ses: list[float] = field(default_factory=list)
    seed: int | None = None
    treatment: str | None = None
    n: int | None = None

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def normal_inference(theta: float, se: float, **kwargs) -> DmlEstimate:
    """Wrap a point estimate and standard error with a 95% CI and two-sided p."""
    if se > 0:
        p = float(2.0 * stats.norm.sf(abs(theta) / se))
    else:
        p = 0.0 if theta != 0 else 1.0
    return DmlEstimate(theta=float(theta), se=float(se), ci_low=float(theta - Z95 * se),
                       ci_high=float(theta + Z95 * se), p_value=p, **kwargs)


def make_folds(n: int, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle rows with the seed, then deal them round-robin into ``k`` folds."""
    if k < 2:
        raise DmlError("need at least 2 folds")
    if n < 2 * k:
        raise DmlError(f"n={n} is too small for {k} folds (need n >= {2 * k})")
    assignment = np.empty(n, dtype=np.int64)
    assignment[rng_for(seed, "folds").permutation(n)] = np.arange(n) % k
    return FoldPlan(n=n, k=k, assignment=assignment, seed=seed)


def crossfit_predictions(spec: LearnerSpec, X: np.ndarray, target: np.ndarray, plan: FoldPlan,
                         label: str, n_jobs: int = 1) -> np.ndarray:
    """Out-of-fold predictions of ``target`` from ``X``.

    The model for fold ``f`` is fitted on the complement of ``f`` with seed
    derived from ``(spec.seed, label, f)``.
    """
    out = np.empty(plan.n)
    for f in range(plan.k):
        test = plan.assignment == f
        model = fit(spec.with_seed(derive_seed(spec.seed, label, f)), X[~test], target[~test], n_jobs=n_jobs)
        out[test] = model.predict(X[test])
    return out


def _check_inputs(X, Y, T) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    Y = np.asarray(Y, dtype=np.float64).ravel()
    T = np.asarray(T, dtype=np.float64).ravel()
    if not (len(X) == len(Y) == len(T)):
        raise DmlError("X, Y and T must have the same number of rows")
    if not (np.isfinite(X).all() and np.isfinite(Y).all() and np.isfinite(T).all()):
        raise DmlError("inputs contain missing or non-finite values")
    return X, Y, T


def _check_treatment_folds(T: np.ndarray, plan: FoldPlan) -> None:
    for f in range(plan.k):
        if np.ptp(T[plan.assignment != f]) == 0:
            raise DmlError(f"treatment has zero variance in the training complement of fold {f}")


def crossfit_residuals(spec: LearnerSpec, X, Y, T, plan: FoldPlan, n_jobs: int = 1) -> ResidualSet:
    X, Y, T = _check_inputs(X, Y, T)
    if plan.n != len(Y):
        raise DmlError("fold plan size does not match the data")
    _check_treatment_folds(T, plan)
    y_hat = crossfit_predictions(spec, X, Y, plan, "outcome", n_jobs)
    t_hat = crossfit_predictions(spec, X, T, plan, "treatment", n_jobs)
    return ResidualSet(y_res=Y - y_hat, t_res=T - t_hat, fold=plan.assignment.copy(), y_hat=y_hat, t_hat=t_hat)


def plr_theta(res: ResidualSet, learner: str = "") -> DmlEstimate:
    """Final-stage slope with a heteroskedasticity-robust (HC0) sandwich SE."""
    t, y = res.t_res, res.y_res
    stt = float(t @ t)
    if not stt > 0:
        raise DmlError("treatment residuals have zero variance")
    theta = float(t @ y) / stt
    u = y - theta * t
    se = float(np.sqrt(np.sum(t * t * u * u)) / stt)
    return normal_inference(theta, se, learner=learner, thetas=[theta], ses=[se], n=len(t))


def aggregate(estimates: Sequence[DmlEstimate], **kwargs) -> DmlEstimate:
    """Mean over replications; variance = mean within-split variance + between-split spread."""
    thetas = np.array([e.theta for e in estimates])
    ses = np.array([e.se for e in estimates])
    theta = float(thetas.mean())
    se = float(np.sqrt(np.mean(ses ** 2 + (thetas - theta) ** 2)))
    return normal_inference(theta, se, n_reps=len(estimates), thetas=thetas.tolist(), ses=ses.tolist(), **kwargs)


def repeat_estimate(spec: LearnerSpec, X, Y, T, k: int = 5, reps: int = 10, seed: int = 0,
                    n_jobs: int = 1, treatment: str | None = None) -> DmlEstimate:
    """Repeat cross-fitting over ``reps`` independent fold plans and aggregate."""
    if reps < 1:
        raise DmlError("reps must be >= 1")
    X, Y, T = _check_inputs(X, Y, T)
    ests = []
    for r in range(reps):
        plan = make_folds(len(Y), k, derive_seed(seed, "split", r))
        rep_spec = spec.with_seed(derive_seed(seed, spec.kind, r))
        ests.append(plr_theta(crossfit_residuals(rep_spec, X, Y, T, plan, n_jobs), spec.kind))
    return aggregate(ests, learner=spec.kind, seed=seed, treatment=treatment, n=len(Y))


@dataclass
class RobustnessMatrix:
    treatments: list[str]
    learners: list[str]
    cells: dict[tuple[str, str], DmlEstimate | None]
    errors: dict[tuple[str, str], str]
    verdicts: dict[str, str]
    alpha: float = 0.05

    def to_records(self) -> list[dict[str, Any]]:
        rows = []
        for t in self.treatments:
            for lk in self.learners:
                est = self.cells.get((t, lk))
                if est is None:
                    rows.append({"treatment": t, "learner": lk, "error": self.errors.get((t, lk))})
                    continue
                rows.append({
                    "treatment": t, "learner": lk, "theta": est.theta, "se": est.se,
                    "ci": [est.ci_low, est.ci_high], "p": est.p_value, "reps": est.n_reps, "seed": est.seed,
                })
        return rows


def verdict(cells: Sequence[DmlEstimate | None], alpha: float = 0.05) -> str:
    if not cells or any(c is None for c in cells):
        return "not-robust"
    if all(c.p_value < alpha and c.theta < 0 for c in cells):
        return "robust-negative"
    if all(c.p_value < alpha and c.theta > 0 for c in cells):
        return "robust-positive"
    return "not-robust"


def robustness_screen(treatments: Mapping[str, np.ndarray], X, Y, kinds: Sequence[str] = KINDS,
                      specs: Mapping[str, LearnerSpec] | None = None, k: int = 5, reps: int = 10,
                      seed: int = 0, alpha: float = 0.05, n_jobs: int = 1) -> RobustnessMatrix:
    """Estimate every (treatment, learner) cell and classify each treatment.

    Outcome nuisance predictions depend only on the learner and split, so they
    are computed once per (learner, replication) and shared across treatments;
    each cell is identical to a direct ``repeat_estimate`` call with the same
    seed.
    """
    if not treatments:
        raise DmlError("need at least one treatment")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).ravel()
    specs = dict(specs or {})
    names = list(treatments)
    cells: dict[tuple[str, str], DmlEstimate | None] = {}
    errors: dict[tuple[str, str], str] = {}
    n = len(Y)
    for kind in kinds:
        spec = specs.get(kind) or LearnerSpec.default(kind)
        per_rep: dict[str, list[DmlEstimate]] = {t: [] for t in names}
        failed: dict[str, str] = {}
        for r in range(reps):
            plan = make_folds(n, k, derive_seed(seed, "split", r))
            rep_spec = spec.with_seed(derive_seed(seed, spec.kind, r))
            try:
                y_hat = crossfit_predictions(rep_spec, X, Y, plan, "outcome", n_jobs)
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the screen
                for t in names:
                    failed.setdefault(t, f"outcome model failed: {exc}")
                continue
            for t in names:
                if t in failed:
                    continue
                try:
                    _, _, T = _check_inputs(X, Y, treatments[t])
                    _check_treatment_folds(T, plan)
                    t_hat = crossfit_predictions(rep_spec, X, T, plan, "treatment", n_jobs)
                    res = ResidualSet(Y - y_hat, T - t_hat, plan.assignment, y_hat, t_hat)
                    per_rep[t].append(plr_theta(res, kind))
                except Exception as exc:  # noqa: BLE001
                    failed[t] = str(exc)
        for t in names:
            if t in failed:
                log.warning("screen cell (%s, %s) failed: %s", t, kind, failed[t])
                cells[(t, kind)] = None
                errors[(t, kind)] = failed[t]
            else:
                cells[(t, kind)] = aggregate(per_rep[t], learner=kind, seed=seed, treatment=t, n=n)
    verdicts = {t: verdict([cells[(t, kd)] for kd in kinds], alpha) for t in names}
    return RobustnessMatrix(names, list(kinds), cells, errors, verdicts, alpha)


def _independent_columns(D: np.ndarray, names: Sequence[str]) -> list[str]:
    kept: list[int] = []
    collinear = []
    for j in range(D.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(D[:, trial]) == len(trial):
            kept.append(j)
        else:
            collinear.append(names[j])
    return collinear


def ols_baseline(Y, T, X=None, names: Sequence[str] | None = None, treatment: str | None = None) -> DmlEstimate:
    """OLS of Y on an intercept, T and X; returns the T coefficient with HC1 SE."""
    Y = np.asarray(Y, dtype=np.float64).ravel()
    T = np.asarray(T, dtype=np.float64).ravel()
    cols = [np.ones_like(Y), T]
    labels = ["intercept", treatment or "treatment"]
    if X is not None:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        cols.extend(X.T)
        labels.extend(names or [f"x{j}" for j in range(X.shape[1])])
    D = np.column_stack(cols)
    n, q = D.shape
    if np.linalg.matrix_rank(D) < q:
        bad = _independent_columns(D, labels)
        raise DmlError(f"design matrix is rank deficient; collinear columns: {', '.join(bad)}")
    beta, *_ = np.linalg.lstsq(D, Y, rcond=None)
    u = Y - D @ beta
    bread = np.linalg.inv(D.T @ D)
    meat = (D * (u * u)[:, None]).T @ D
    cov = bread @ meat @ bread * (n / max(n - q, 1))
    return normal_inference(float(beta[1]), float(np.sqrt(max(cov[1, 1], 0.0))), learner="ols",
                            treatment=treatment, n=n)
