"""Learner specifications, fitted-model container and shared numerics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

ETA_CLIP = 30.0
PROB_CLIP = 1e-12


class LearnerError(RuntimeError):
    """A learner could not be fit."""


class ConvergenceError(LearnerError):
    def __init__(self, message: str, grad_norm: float | None = None, lam: float | None = None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.lam = lam


KINDS = ("binomial_glm", "multinomial_glm", "elastic_net", "gradboost")


@dataclass(frozen=True)
class LearnerSpec:
    """Configuration of one candidate learner.

    ``alpha`` is the l1 share of the elastic-net penalty; ``trees``,
    ``depth`` and ``learning_rate`` only matter for gradient boosting.
    """

    kind: str
    alpha: float = 1.0
    trees: int = 100
    depth: int = 3
    learning_rate: float = 0.1
    max_iter: int = 100
    tol: float = 1e-8
    n_lambda: int = 50
    lambda_grid: tuple[float, ...] | None = None
    cv_folds: int = 5
    seed: int = 0
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.trees < 1 or self.depth < 1:
            raise ValueError("trees and depth must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.lambda_grid is not None:
            grid = tuple(float(v) for v in self.lambda_grid)
            if not grid:
                raise ValueError("lambda_grid must be nonempty")
            if any(b > a for a, b in zip(grid, grid[1:])):
                raise ValueError("lambda_grid must be descending")
            object.__setattr__(self, "lambda_grid", grid)
        if not self.name:
            object.__setattr__(self, "name", default_name(self))


def default_name(spec: LearnerSpec) -> str:
    if spec.kind == "elastic_net":
        return "lasso" if spec.alpha == 1.0 else f"enet_a{spec.alpha:g}"
    if spec.kind == "gradboost":
        return f"gbm_t{spec.trees}_d{spec.depth}"
    return spec.kind


@dataclass
class Standardizer:
    """Center and scale continuous columns; {0,1}-valued columns pass through."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        p = X.shape[1]
        mean = np.zeros(p)
        scale = np.ones(p)
        for k in range(p):
            col = X[:, k]
            if np.all((col == 0) | (col == 1)):
                continue
            sd = col.std()
            mean[k] = col.mean()
            # constant column: centre only
            scale[k] = sd if sd > 0 else 1.0
        return cls(mean, scale)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


@dataclass
class FittedLearner:
    spec: LearnerSpec
    params: dict[str, Any]
    class_count: int
    n_features: int
    standardizer: Standardizer | None = None
    info: dict[str, Any] = field(default_factory=dict)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return predict_proba(self, X)

    def to_json(self) -> str:
        def enc(v: Any) -> Any:
            if isinstance(v, np.ndarray):
                return {"__array__": v.tolist(), "dtype": str(v.dtype)}
            if isinstance(v, (list, tuple)):
                return [enc(u) for u in v]
            if isinstance(v, dict):
                return {k: enc(u) for k, u in v.items()}
            if isinstance(v, np.generic):
                return v.item()
            return v

        doc = {
            "spec": asdict(self.spec),
            "params": enc(self.params),
            "class_count": self.class_count,
            "n_features": self.n_features,
            "standardizer": None
            if self.standardizer is None
            else {"mean": self.standardizer.mean.tolist(), "scale": self.standardizer.scale.tolist()},
            "info": enc(self.info),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FittedLearner":
        def dec(v: Any) -> Any:
            if isinstance(v, dict):
                if "__array__" in v:
                    return np.array(v["__array__"], dtype=v["dtype"])
                return {k: dec(u) for k, u in v.items()}
            if isinstance(v, list):
                return [dec(u) for u in v]
            return v

        doc = json.loads(text)
        spec_doc = doc["spec"]
        if spec_doc.get("lambda_grid") is not None:
            spec_doc["lambda_grid"] = tuple(spec_doc["lambda_grid"])
        std = doc["standardizer"]
        return cls(
            spec=LearnerSpec(**spec_doc),
            params=dec(doc["params"]),
            class_count=doc["class_count"],
            n_features=doc["n_features"],
            standardizer=None if std is None else Standardizer(np.array(std["mean"]), np.array(std["scale"])),
            info=dec(doc["info"]),
        )


def as_matrix(X: np.ndarray, n: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return np.zeros((n, 0))
    return X.reshape(n, -1)


def add_intercept(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


def expit_clipped(eta: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(eta, -ETA_CLIP, ETA_CLIP)))


def softmax_ref(eta: np.ndarray) -> np.ndarray:
    """Softmax over columns of ``eta`` (n x K), with linear predictors clipped first."""
    eta = np.clip(eta, -ETA_CLIP, ETA_CLIP)
    eta = eta - eta.max(axis=1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=1, keepdims=True)


def clamp_probs(P: np.ndarray) -> np.ndarray:
    """Clamp to [1e-12, 1 - 1e-12]; multi-column rows are renormalized afterwards."""
    P = np.clip(P, PROB_CLIP, 1.0 - PROB_CLIP)
    if P.shape[1] > 2:
        P = P / P.sum(axis=1, keepdims=True)
    elif P.shape[1] == 2:
        P = np.column_stack([1.0 - P[:, 1], P[:, 1]])
    return P


def predict_proba(model: FittedLearner, X: np.ndarray) -> np.ndarray:
    """n x K class probabilities; binomial models return columns (P(0), P(1))."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} columns, got {X.shape[1]}")
    from . import boosting, glm

    if "constant" in model.params:
        P = np.tile(np.asarray(model.params["constant"], dtype=float), (X.shape[0], 1))
    elif model.spec.kind == "gradboost":
        P = boosting.predict(model, X)
    else:
        P = glm.predict_linear(model, X)
    return clamp_probs(P)


def constant_learner(spec: LearnerSpec, labels: np.ndarray, K: int, p: int) -> FittedLearner:
    freq = np.bincount(labels, minlength=K) / labels.shape[0]
    return FittedLearner(spec, {"constant": freq}, K, p, None, {"constant": True})
