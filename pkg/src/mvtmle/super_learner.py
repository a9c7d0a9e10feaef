"""Cross-validated stacking of candidate learners under log-loss.

Each candidate is fit V times, leaving one fold out, to produce out-of-fold
class probabilities.  The ensemble is the convex combination of those
probability matrices with the smallest out-of-fold negative
log-likelihood; members are then refit on all rows.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .folds import FoldAssignment, make_folds
from .learners import FittedLearner, LearnerSpec, fit_learner, predict_proba

__all__ = [
    "CVPredictions",
    "Ensemble",
    "FoldAssignment",
    "Target",
    "cv_predictions",
    "fit_super_learner",
    "make_folds",
    "optimize_weights",
]

# (spec, raw design) -> design actually handed to that learner
Design = Callable[[LearnerSpec, np.ndarray], np.ndarray]

# anything a learner may raise on awkward data
FIT_ERRORS = (RuntimeError, ValueError, ArithmeticError, np.linalg.LinAlgError)


class Target(str, Enum):
    BINOMIAL_OUTCOME = "binomial_outcome"
    MULTINOMIAL_TREATMENT = "multinomial_treatment"


def _identity(spec: LearnerSpec, X: np.ndarray) -> np.ndarray:
    return X


def _observed_prob(P: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return P[np.arange(labels.shape[0]), labels]


def nll(P: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of integer labels under row-probabilities ``P``."""
    return float(-np.mean(np.log(_observed_prob(P, labels))))


@dataclass(frozen=True)
class CVPredictions:
    names: list[str]
    specs: list[LearnerSpec]
    oof: list[np.ndarray]
    cv_nll: np.ndarray
    dropped: dict[str, str] = field(default_factory=dict)


def cv_predictions(
    specs: list[LearnerSpec],
    X: np.ndarray,
    labels: np.ndarray,
    folds: FoldAssignment,
    n_classes: int,
    design: Design | None = None,
) -> CVPredictions:
    """Out-of-fold probability matrices for every member that fits on all folds.

    A member raising on any fold is dropped with a warning; if every member
    fails a ``RuntimeError`` is raised.
    """
    if not specs:
        raise ValueError("need at least one learner")
    design = design or _identity
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    kept_specs, oof, losses = [], [], []
    dropped: dict[str, str] = {}
    for spec in specs:
        Xs = design(spec, X)
        P = np.empty((n, n_classes))
        try:
            for v in range(1, folds.V + 1):
                train, test = folds.split(v)
                model = fit_learner(spec, Xs[train], labels[train], n_classes)
                P[test] = predict_proba(model, Xs[test])
        except FIT_ERRORS as exc:
            dropped[spec.name] = f"{type(exc).__name__}: {exc}"
            warnings.warn(f"learner {spec.name} dropped: {exc}", RuntimeWarning, stacklevel=2)
            continue
        kept_specs.append(spec)
        oof.append(P)
        losses.append(nll(P, labels))
    if not kept_specs:
        raise RuntimeError("every learner in the library failed: " + "; ".join(dropped.values()))
    return CVPredictions([s.name for s in kept_specs], kept_specs, oof, np.array(losses), dropped)


def optimize_weights(
    oof: list[np.ndarray],
    labels: np.ndarray,
    max_iter: int = 5000,
    tol: float = 1e-10,
) -> np.ndarray:
    """Simplex weights minimizing the NLL of ``sum_m w_m P_m``.

    Exponentiated-gradient descent with backtracking, started at the uniform
    mixture.  The result is never worse than the best single member.
    """
    labels = np.asarray(labels, dtype=np.int64)
    M = len(oof)
    if M == 0:
        raise ValueError("need at least one member")
    Q = np.column_stack([_observed_prob(P, labels) for P in oof])
    if not np.all(np.isfinite(Q)) or np.any(Q <= 0):
        raise ValueError("member predictions must be finite and positive")
    if M == 1:
        return np.ones(1)

    def objective(w: np.ndarray) -> float:
        return float(-np.mean(np.log(Q @ w)))

    w = np.full(M, 1.0 / M)
    f = objective(w)
    if not np.isfinite(f):
        raise ValueError("non-finite ensemble objective")
    step = 1.0
    for _ in range(max_iter):
        g = -np.mean(Q / (Q @ w)[:, None], axis=0)
        while True:
            z = np.log(np.maximum(w, 1e-300)) - step * (g - g.min())
            w_new = np.exp(z - z.max())
            w_new /= w_new.sum()
            f_new = objective(w_new)
            if f_new <= f or step < 1e-12:
                break
            step *= 0.5
        if not np.isfinite(f_new):
            raise ValueError("non-finite ensemble objective")
        done = f - f_new <= tol
        if f_new <= f:
            w, f = w_new, f_new
        if done:
            break
        step = min(step * 2.0, 1e3)

    vertex_loss = -np.mean(np.log(Q), axis=0)
    best = int(np.argmin(vertex_loss))
    if vertex_loss[best] < f:
        w = np.zeros(M)
        w[best] = 1.0
    return w


@dataclass(frozen=True)
class Ensemble:
    """Weighted stack of learners refit on the full data."""

    members: list[FittedLearner]
    weights: np.ndarray
    cv_nll_per_member: np.ndarray
    cv_nll_ensemble: float
    class_count: int
    target: Target
    dropped: dict[str, str] = field(default_factory=dict)
    design: Design | None = None

    @property
    def names(self) -> list[str]:
        return [m.spec.name for m in self.members]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        design = self.design or _identity
        out = np.zeros((np.asarray(X).shape[0], self.class_count))
        for m, w in zip(self.members, self.weights):
            if w > 0:
                out += w * predict_proba(m, design(m.spec, X))
        return out

    def report_rows(self) -> list[dict[str, object]]:
        rows: list[dict[str, object]] = [
            {"learner": name, "cv_nll": float(loss), "weight": float(w)}
            for name, loss, w in zip(self.names, self.cv_nll_per_member, self.weights)
        ]
        rows.append({"learner": "super_learner", "cv_nll": float(self.cv_nll_ensemble), "weight": ""})
        return rows

    def write_report(self, path, model: str = "") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            write_report_rows(csv.writer(fh, lineterminator="\n"), self, model, header=True)


def write_report_rows(writer, ens: Ensemble, model: str, header: bool = False) -> None:
    if header:
        writer.writerow(["model", "learner", "cv_nll", "weight"])
    for row in ens.report_rows():
        w = row["weight"]
        writer.writerow([model, row["learner"], repr(row["cv_nll"]), w if w == "" else repr(w)])


def fit_super_learner(
    specs: list[LearnerSpec],
    X: np.ndarray,
    labels: np.ndarray,
    target: Target = Target.MULTINOMIAL_TREATMENT,
    V: int = 5,
    seed: int = 0,
    n_classes: int | None = None,
    design: Design | None = None,
) -> Ensemble:
    """Fold, cross-validate, weight, refit.

    ``labels`` are 0-based class indices; binomial outcomes use 0/1.  A
    member that cross-validates but fails on the full data is removed and
    the weights recomputed without it.
    """
    labels = np.asarray(labels, dtype=np.int64)
    K = int(n_classes or labels.max() + 1)
    if target is Target.BINOMIAL_OUTCOME and K != 2:
        raise ValueError("binomial outcome target needs two classes")
    folds = make_folds(labels.shape[0], labels, V, seed)
    if len(specs) == 1:
        return _single_member(specs[0], X, labels, folds, K, target, design)
    cv = cv_predictions(specs, X, labels, folds, K, design)
    dropped = dict(cv.dropped)
    keep = list(range(len(cv.specs)))
    weights = optimize_weights(cv.oof, labels)
    members: list[FittedLearner] = []
    des = design or _identity
    for idx in list(keep):
        spec = cv.specs[idx]
        try:
            members.append(fit_learner(spec, des(spec, X), labels, K))
        except FIT_ERRORS as exc:
            dropped[spec.name] = f"{type(exc).__name__}: {exc}"
            warnings.warn(f"learner {spec.name} dropped on refit: {exc}", RuntimeWarning, stacklevel=2)
            keep.remove(idx)
    if not keep:
        raise RuntimeError("every learner failed on the full data")
    oof = [cv.oof[i] for i in keep]
    if len(keep) != len(cv.specs):
        weights = optimize_weights(oof, labels)
    combo = sum(w * P for w, P in zip(weights, oof))
    return Ensemble(
        members=members,
        weights=weights,
        cv_nll_per_member=cv.cv_nll[keep],
        cv_nll_ensemble=nll(combo, labels),
        class_count=K,
        target=target,
        dropped=dropped,
        design=design,
    )


def _single_member(spec, X, labels, folds, K, target, design) -> Ensemble:
    # Weight is 1 whatever the CV says, so only a full-data failure is fatal;
    # the CV loss is reported for information and is NaN if a fold fails.
    des = design or _identity
    member = fit_learner(spec, des(spec, X), labels, K)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            loss = cv_predictions([spec], X, labels, folds, K, design).cv_nll
        except RuntimeError:
            loss = np.array([np.nan])
    return Ensemble(
        members=[member],
        weights=np.ones(1),
        cv_nll_per_member=loss,
        cv_nll_ensemble=float(loss[0]),
        class_count=K,
        target=target,
        dropped={},
        design=design,
    )
