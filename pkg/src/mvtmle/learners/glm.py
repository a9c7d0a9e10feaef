"""Unpenalized binomial and multinomial logistic regression by damped Newton.

Both fit on standardized covariates with an unpenalized intercept.  The
multinomial model uses class 0 as the reference (its coefficients are 0),
so with two classes it coincides with the binomial model.
"""

from __future__ import annotations

import numpy as np

from .base import (
    ETA_CLIP,
    ConvergenceError,
    FittedLearner,
    LearnerError,
    LearnerSpec,
    Standardizer,
    add_intercept,
    as_matrix,
    expit_clipped,
    softmax_ref,
)

SEPARATION_EIG = 1e-7


def _log1pexp(eta: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, eta)


def binomial_nll(beta: np.ndarray, Z: np.ndarray, y: np.ndarray) -> float:
    eta = np.clip(Z @ beta, -ETA_CLIP, ETA_CLIP)
    return float(np.mean(_log1pexp(eta) - y * eta))


def binomial_grad(beta: np.ndarray, Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return Z.T @ (expit_clipped(Z @ beta) - y) / Z.shape[0]


def _ref_eta(B: np.ndarray, Z: np.ndarray) -> np.ndarray:
    return np.column_stack([np.zeros(Z.shape[0]), Z @ B])


def multinomial_nll(B: np.ndarray, Z: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood; ``B`` is (p+1) x (K-1)."""
    eta = np.clip(_ref_eta(B, Z), -ETA_CLIP, ETA_CLIP)
    mx = eta.max(axis=1)
    lse = mx + np.log(np.exp(eta - mx[:, None]).sum(axis=1))
    return float(np.mean(lse - eta[np.arange(Z.shape[0]), labels]))


def multinomial_grad(B: np.ndarray, Z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    P = softmax_ref(_ref_eta(B, Z))
    Y = np.zeros_like(P)
    Y[np.arange(Z.shape[0]), labels] = 1.0
    return Z.T @ (P - Y)[:, 1:] / Z.shape[0]


def _check_rank(Z: np.ndarray) -> None:
    if Z.shape[0] <= Z.shape[1]:
        raise LearnerError(f"need n > p + 1 (n={Z.shape[0]}, p+1={Z.shape[1]})")
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise LearnerError("rank-deficient design matrix")


def _newton(theta, nll, grad, hess, max_iter, tol):
    f = nll(theta)
    trace = [f]
    g = grad(theta)
    gnorm = float(np.linalg.norm(g))
    for _ in range(max_iter):
        if gnorm <= tol:
            return theta, gnorm, trace
        try:
            step = np.linalg.solve(hess(theta), g.ravel()).reshape(theta.shape)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular Hessian", gnorm) from None
        t = 1.0
        while True:
            cand = theta - t * step
            fc = nll(cand)
            if fc <= f + 1e-12 * (1.0 + abs(f)):
                break
            t *= 0.5
            if t < 1e-12:
                raise ConvergenceError(
                    f"step-halving failed; gradient norm {gnorm:.3g}", gnorm
                )
        theta, f = cand, fc
        trace.append(f)
        g = grad(theta)
        gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return theta, gnorm, trace
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations; gradient norm {gnorm:.3g}", gnorm
    )


def _separation_check(eta: np.ndarray, H: np.ndarray, gnorm: float) -> None:
    # Extreme fitted values alone are legitimate with rare events; separation
    # also leaves the information matrix (nearly) singular along the
    # separating direction.
    if np.max(np.abs(eta)) < ETA_CLIP:
        return
    ev = np.linalg.eigvalsh(H)
    if ev[0] <= SEPARATION_EIG:
        raise ConvergenceError(
            "fitted probabilities numerically 0 or 1 (separation); "
            f"gradient norm {gnorm:.3g}",
            gnorm,
        )


def fit_binomial_glm(X: np.ndarray, y: np.ndarray, spec: LearnerSpec | None = None) -> FittedLearner:
    """Logistic regression by Newton/IRLS with step-halving."""
    spec = spec or LearnerSpec("binomial_glm")
    X = as_matrix(X, len(y))
    y = np.asarray(y, dtype=float)
    std = Standardizer.fit(X)
    Z = add_intercept(std.transform(X))
    _check_rank(Z)
    ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    beta0 = np.zeros(Z.shape[1])
    beta0[0] = np.log(ybar / (1 - ybar))

    def hess(b):
        p = expit_clipped(Z @ b)
        return (Z * (p * (1 - p))[:, None]).T @ Z / Z.shape[0]

    beta, gnorm, trace = _newton(
        beta0,
        lambda b: binomial_nll(b, Z, y),
        lambda b: binomial_grad(b, Z, y),
        hess,
        spec.max_iter,
        spec.tol,
    )
    _separation_check(Z @ beta, hess(beta), gnorm)
    return FittedLearner(spec, {"coef": beta}, 2, X.shape[1], std, {"grad_norm": gnorm, "nll_trace": trace})


def fit_multinomial_glm(
    X: np.ndarray,
    labels: np.ndarray,
    spec: LearnerSpec | None = None,
    n_classes: int | None = None,
) -> FittedLearner:
    """Softmax regression with class 0 as reference, fit by Newton's method.

    ``labels`` are integer codes 0..K-1.
    """
    spec = spec or LearnerSpec("multinomial_glm")
    labels = np.asarray(labels, dtype=np.int64)
    K = int(n_classes or labels.max() + 1)
    if np.unique(labels).size < 2:
        raise LearnerError("need at least 2 distinct labels")
    X = as_matrix(X, len(labels))
    std = Standardizer.fit(X)
    Z = add_intercept(std.transform(X))
    _check_rank(Z)
    n, q = Z.shape
    freq = np.clip(np.bincount(labels, minlength=K) / n, 1e-6, None)
    B0 = np.zeros((q, K - 1))
    B0[0] = np.log(freq[1:] / freq[0])
    eye = np.eye(K - 1)

    def hess(B):
        P1 = softmax_ref(_ref_eta(B, Z))[:, 1:]
        W = P1[:, :, None] * (eye[None] - P1[:, None, :])
        H = np.empty((q, K - 1, q, K - 1))
        for k in range(K - 1):
            for m in range(k, K - 1):
                block = Z.T @ (Z * W[:, k, m, None]) / n
                H[:, k, :, m] = block
                H[:, m, :, k] = block.T
        return H.reshape(q * (K - 1), q * (K - 1))

    B, gnorm, trace = _newton(
        B0,
        lambda B: multinomial_nll(B, Z, labels),
        lambda B: multinomial_grad(B, Z, labels),
        hess,
        spec.max_iter,
        spec.tol,
    )
    _separation_check(Z @ B, hess(B), gnorm)
    return FittedLearner(spec, {"coef": B}, K, X.shape[1], std, {"grad_norm": gnorm, "nll_trace": trace})


def predict_linear(model: FittedLearner, X: np.ndarray) -> np.ndarray:
    Z = add_intercept(model.standardizer.transform(X))
    coef = np.asarray(model.params["coef"], dtype=float)
    if model.class_count == 2 and coef.ndim == 1:
        p = expit_clipped(Z @ coef)
        return np.column_stack([1.0 - p, p])
    if coef.ndim == 1:
        coef = coef[:, None]
    return softmax_ref(_ref_eta(coef, Z))


def original_coefficients(model: FittedLearner) -> np.ndarray:
    """Coefficients on the unstandardized covariate scale, intercept first."""
    coef = np.asarray(model.params["coef"], dtype=float)
    vec = coef.ndim == 1
    C = coef[:, None] if vec else coef
    std = model.standardizer
    slopes = C[1:] / std.scale[:, None]
    intercept = C[0] - (std.mean[:, None] * slopes).sum(axis=0)
    out = np.vstack([intercept, slopes])
    return out[:, 0] if vec else out
