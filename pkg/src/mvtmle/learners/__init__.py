"""Classification learners used as nuisance-model candidates."""

from __future__ import annotations

import numpy as np

from .base import (
    ConvergenceError,
    FittedLearner,
    LearnerError,
    LearnerSpec,
    Standardizer,
    predict_proba,
)
from .boosting import fit_gradboost
from .elastic_net import fit_elastic_net
from .glm import (
    binomial_grad,
    binomial_nll,
    fit_binomial_glm,
    fit_multinomial_glm,
    multinomial_grad,
    multinomial_nll,
    original_coefficients,
)

__all__ = [
    "ConvergenceError",
    "FittedLearner",
    "LearnerError",
    "LearnerSpec",
    "Standardizer",
    "binomial_grad",
    "binomial_nll",
    "fit_binomial_glm",
    "fit_elastic_net",
    "fit_gradboost",
    "fit_learner",
    "fit_multinomial_glm",
    "glm_library",
    "multinomial_grad",
    "multinomial_nll",
    "original_coefficients",
    "predict_proba",
    "sl_library",
]


def fit_learner(spec: LearnerSpec, X: np.ndarray, labels: np.ndarray, n_classes: int) -> FittedLearner:
    """Fit ``spec`` to integer labels 0..n_classes-1."""
    labels = np.asarray(labels, dtype=np.int64)
    if spec.kind == "binomial_glm":
        if n_classes != 2:
            raise LearnerError("binomial GLM needs a two-class target")
        return fit_binomial_glm(X, labels, spec)
    if spec.kind == "multinomial_glm":
        return fit_multinomial_glm(X, labels, spec, n_classes)
    if spec.kind == "elastic_net":
        return fit_elastic_net(X, labels, spec, n_classes=n_classes)
    return fit_gradboost(X, labels, spec, n_classes)


def sl_library(seed: int = 0) -> list[LearnerSpec]:
    """Boosting, lasso and three elastic nets, plus two deeper boosting configurations
    standing in for the random forests."""
    return [
        LearnerSpec("gradboost", trees=100, depth=3, learning_rate=0.1),
        LearnerSpec("elastic_net", alpha=0.25, tol=1e-6, max_iter=1000, seed=seed),
        LearnerSpec("elastic_net", alpha=0.50, tol=1e-6, max_iter=1000, seed=seed),
        LearnerSpec("elastic_net", alpha=0.75, tol=1e-6, max_iter=1000, seed=seed),
        LearnerSpec("elastic_net", alpha=1.0, tol=1e-6, max_iter=1000, seed=seed),
        LearnerSpec("gradboost", trees=100, depth=4, learning_rate=0.1, name="gbm_forest100"),
        LearnerSpec("gradboost", trees=500, depth=4, learning_rate=0.1, name="gbm_forest500"),
    ]


def glm_library(n_classes: int) -> list[LearnerSpec]:
    kind = "binomial_glm" if n_classes == 2 else "multinomial_glm"
    return [LearnerSpec(kind)]
