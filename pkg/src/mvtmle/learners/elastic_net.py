"""Elastic-net penalized logistic regression with cross-validated lambda.

Penalty: ``lam * (alpha * ||b||_1 + (1 - alpha) * ||b||_2^2 / 2)`` on the
standardized slopes, intercept unpenalized, added to the mean NLL.

Binomial targets use IRLS with coordinate descent on the weighted
least-squares subproblem.  Multinomial targets (class 0 as reference) use
accelerated proximal gradient with a grouped l1 term, one group per
covariate spanning the K-1 free classes.
"""

from __future__ import annotations

import numba
import numpy as np

from ..folds import make_folds
from .base import (
    ConvergenceError,
    FittedLearner,
    LearnerError,
    LearnerSpec,
    Standardizer,
    add_intercept,
    as_matrix,
    softmax_ref,
)
from .glm import binomial_nll, multinomial_nll

MAX_PROX_ITER = 5000
MAX_SWEEPS = 10000
PATH_STOP = 1e-5
LAMBDA_MIN_RATIO = 1e-4
# IRLS also stops once a full step lowers the penalized NLL by less than this (relative)
OBJ_STALL = 1e-10


@numba.njit(cache=True)
def _cd_sweep(G, c, beta, l1, l2, active, only_active):
    # coordinate 0 is the unpenalized intercept; c holds Z'W r / n
    q = beta.shape[0]
    maxd = 0.0
    for j in range(q):
        gjj = G[j, j]
        if gjj == 0.0 or (only_active and not active[j]):
            continue
        gj = c[j] + gjj * beta[j]
        if j == 0:
            new = gj / gjj
        elif gj > l1:
            new = (gj - l1) / (gjj + l2)
        elif gj < -l1:
            new = (gj + l1) / (gjj + l2)
        else:
            new = 0.0
        d = new - beta[j]
        if d != 0.0:
            for k in range(q):
                c[k] -= d * G[k, j]
            beta[j] = new
            active[j] = True
            if gjj * d * d > maxd:
                maxd = gjj * d * d
    return maxd


@numba.njit(cache=True)
def _cd_wls(Z, z, w, beta, lam, alpha, tol, max_sweeps):
    """Weighted lasso/ridge least squares by covariance-update coordinate descent.

    Minimizes (1/2n) sum w (z - Z beta)^2 + lam*(alpha|b|_1 + (1-alpha)/2 |b|^2)
    over slopes b = beta[1:], updating ``beta`` in place.  Cycles over the
    active set until it settles, then confirms with a full sweep.
    """
    n = Z.shape[0]
    ZTw = Z.T * w
    G = ZTw @ Z / n
    c = ZTw @ (z - Z @ beta) / n
    l1 = lam * alpha
    l2 = lam * (1.0 - alpha)
    active = beta != 0.0
    active[0] = True
    sweeps = 0
    full = True
    while sweeps < max_sweeps:
        sweeps += 1
        maxd = _cd_sweep(G, c, beta, l1, l2, active, not full)
        if maxd < tol:
            if full:
                break
            full = True
        else:
            full = False
    return sweeps


def _penalty(B: np.ndarray, lam: float, alpha: float) -> float:
    S = B[1:]
    if S.ndim == 1:
        l1 = np.abs(S).sum()
    else:
        l1 = np.sqrt((S * S).sum(axis=1)).sum()
    return lam * (alpha * l1 + 0.5 * (1.0 - alpha) * float((S * S).sum()))


@numba.njit(cache=True)
def _binom_obj(Z, y, beta, lam, alpha):
    n, q = Z.shape
    acc = 0.0
    for i in range(n):
        eta = 0.0
        for j in range(q):
            eta += Z[i, j] * beta[j]
        eta = min(max(eta, -30.0), 30.0)
        if eta > 0:
            acc += eta + np.log1p(np.exp(-eta)) - y[i] * eta
        else:
            acc += np.log1p(np.exp(eta)) - y[i] * eta
    pen = 0.0
    for j in range(1, q):
        pen += alpha * abs(beta[j]) + 0.5 * (1.0 - alpha) * beta[j] * beta[j]
    return acc / n + lam * pen


@numba.njit(cache=True)
def _binomial_path_nb(Z, y, lambdas, alpha, tol, max_iter, beta, stop_rel):
    """IRLS + coordinate descent along ``lambdas``; returns (coefs, failed index or -1)."""
    n, q = Z.shape
    L = lambdas.shape[0]
    out = np.zeros((L, q))
    null = _binom_obj(Z, y, beta, 0.0, alpha)
    prev = null
    frozen = False
    w = np.empty(n)
    z = np.empty(n)
    for m in range(L):
        lam = lambdas[m]
        if not frozen:
            obj = _binom_obj(Z, y, beta, lam, alpha)
            ok = False
            for _ in range(max_iter):
                for i in range(n):
                    eta = 0.0
                    for j in range(q):
                        eta += Z[i, j] * beta[j]
                    pr = 1.0 / (1.0 + np.exp(-min(max(eta, -30.0), 30.0)))
                    wi = max(pr * (1.0 - pr), 1e-5)
                    w[i] = wi
                    z[i] = eta + (y[i] - pr) / wi
                step = beta.copy()
                _cd_wls(Z, z, w, step, lam, alpha, tol * tol, MAX_SWEEPS)
                t = 1.0
                trial = beta.copy()
                while True:
                    for j in range(q):
                        trial[j] = beta[j] + t * (step[j] - beta[j])
                    new_obj = _binom_obj(Z, y, trial, lam, alpha)
                    if new_obj <= obj + 1e-12 * (1.0 + abs(obj)) or t < 1e-6:
                        break
                    t *= 0.5
                delta = 0.0
                for j in range(q):
                    d = abs(trial[j] - beta[j])
                    if d > delta:
                        delta = d
                beta[:] = trial
                gain = obj - new_obj
                obj = new_obj
                if delta < tol or gain < OBJ_STALL * (1.0 + abs(obj)):
                    ok = True
                    break
            if not ok:
                return out, m
            cur = _binom_obj(Z, y, beta, 0.0, alpha)
            if m >= 4 and prev - cur < stop_rel * null:
                frozen = True
            prev = cur
        out[m] = beta
    return out, -1


def _mn_hessian(Z: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities (n x K) and Hessian of the mean NLL, indexed (feature, class)."""
    n, q = Z.shape
    m = B.shape[1]
    P = softmax_ref(np.column_stack([np.zeros(n), Z @ B]))
    P1 = P[:, 1:]
    W = P1[:, :, None] * (np.eye(m)[None] - P1[:, None, :])
    ZW = (Z[:, :, None] * W.reshape(n, 1, m * m)).reshape(n, q * m * m)
    H = (Z.T @ ZW).reshape(q, q, m, m).transpose(0, 2, 1, 3).reshape(q * m, q * m) / n
    return P, H


@numba.njit(cache=True)
def _group_prox(V, thr, ridge):
    out = V.copy()
    q, m = V.shape
    for j in range(1, q):
        nrm = 0.0
        for k in range(m):
            nrm += V[j, k] * V[j, k]
        nrm = np.sqrt(nrm)
        shrink = 1.0 - thr / nrm if nrm > thr else 0.0
        for k in range(m):
            out[j, k] = V[j, k] * shrink / (1.0 + ridge)
    return out


@numba.njit(cache=True)
def _quad_prox_solve(B, G, H, Lh, lam, alpha, tol, max_iter):
    # argmin_C  <G, C-B> + (C-B)'H(C-B)/2 + penalty(C), by FISTA
    q, m = B.shape
    C = B.copy()
    Y = B.copy()
    t = 1.0
    for _ in range(max_iter):
        D = (Y - B).ravel()
        g = G.ravel() + H @ D
        V = Y - g.reshape(q, m) / Lh
        Cn = _group_prox(V, lam * alpha / Lh, lam * (1.0 - alpha) / Lh)
        delta = np.max(np.abs(Cn - C))
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Y = Cn + ((t - 1.0) / tn) * (Cn - C)
        C = Cn
        t = tn
        if delta < tol:
            break
    return C


def _mn_objective(Z, labels, B, lam, alpha):
    return multinomial_nll(B, Z, labels) + _penalty(B, lam, alpha)


def _multinomial_at(Z, labels, B, lam, alpha, tol, max_iter):
    """Proximal Newton: exact Hessian, penalized quadratic model solved by FISTA, step-halving."""
    obj = _mn_objective(Z, labels, B, lam, alpha)
    for _ in range(max_iter):
        P, H = _mn_hessian(Z, B)
        P[np.arange(Z.shape[0]), labels] -= 1.0
        G = Z.T @ P[:, 1:] / Z.shape[0]
        Lh = float(np.linalg.eigvalsh(H).max()) + 1e-12
        C = _quad_prox_solve(B, G, H, Lh, lam, alpha, tol * 0.1, MAX_PROX_ITER)
        t = 1.0
        while True:
            trial = B + t * (C - B)
            new_obj = _mn_objective(Z, labels, trial, lam, alpha)
            if new_obj <= obj + 1e-12 * (1.0 + abs(obj)) or t < 1e-6:
                break
            t *= 0.5
        delta = float(np.max(np.abs(trial - B)))
        gain = obj - new_obj
        B, obj = trial, new_obj
        if delta < tol or gain < OBJ_STALL * (1.0 + abs(obj)):
            return B
    raise ConvergenceError(f"elastic net did not converge at lambda={lam:.6g}", lam=lam)


def lambda_max(Z: np.ndarray, labels: np.ndarray, K: int, alpha: float) -> float:
    """Smallest lambda at which every slope is zero."""
    n = Z.shape[0]
    a = max(alpha, 1e-3)
    freq = np.bincount(labels, minlength=K) / n
    Y = np.zeros((n, K))
    Y[np.arange(n), labels] = 1.0
    R = (Y - freq)[:, 1:]
    G = Z[:, 1:].T @ R / n
    if G.size == 0:
        return 1.0
    return float(np.sqrt((G * G).sum(axis=1)).max() / a)


def default_grid(lmax: float, n_lambda: int) -> np.ndarray:
    if n_lambda == 1:
        return np.array([lmax])
    return np.exp(np.linspace(np.log(lmax), np.log(lmax * LAMBDA_MIN_RATIO), n_lambda))


def _path(Z, labels, K, lambdas, alpha, spec):
    """Warm-started solutions along ``lambdas``.

    Once the training NLL improves by less than PATH_STOP times the null
    NLL between neighbouring lambdas, the remaining lambdas reuse the last
    solution.
    """
    n, q = Z.shape
    freq = np.clip(np.bincount(labels, minlength=K) / n, 1e-8, None)
    lambdas = np.asarray(lambdas, dtype=float)
    if K == 2:
        coef = np.zeros(q)
        coef[0] = np.log(freq[1] / freq[0])
        coefs, failed = _binomial_path_nb(
            np.ascontiguousarray(Z), labels.astype(float), lambdas, alpha,
            spec.tol, spec.max_iter, coef, PATH_STOP,
        )
        if failed >= 0:
            lam = float(lambdas[failed])
            raise ConvergenceError(f"elastic net did not converge at lambda={lam:.6g}", lam=lam)
        return list(coefs)
    Zc = np.ascontiguousarray(Z)
    coef = np.zeros((q, K - 1))
    coef[0] = np.log(freq[1:] / freq[0])
    null = multinomial_nll(coef, Zc, labels)
    out = []
    prev = null
    frozen = False
    for m, lam in enumerate(lambdas):
        if not frozen:
            coef = _multinomial_at(Zc, labels, coef, lam, alpha, spec.tol, spec.max_iter)
            cur = multinomial_nll(coef, Zc, labels)
            if m >= 4 and prev - cur < PATH_STOP * null:
                frozen = True
            prev = cur
        out.append(coef.copy())
    return out


def _held_out_nll(Z, labels, coef, K):
    if K == 2:
        return binomial_nll(coef, Z, labels.astype(float))
    return multinomial_nll(coef, Z, labels)


def fit_elastic_net(
    X: np.ndarray,
    labels: np.ndarray,
    spec: LearnerSpec,
    lambda_grid: np.ndarray | None = None,
    n_classes: int | None = None,
) -> FittedLearner:
    """Elastic-net logistic regression with lambda picked by internal K-fold CV.

    ``labels`` are integer codes 0..K-1; two classes give the binomial model.
    """
    labels = np.asarray(labels, dtype=np.int64)
    K = int(n_classes or labels.max() + 1)
    if np.unique(labels).size < 2:
        raise LearnerError("need at least 2 distinct labels")
    X = as_matrix(X, len(labels))
    std = Standardizer.fit(X)
    Z = add_intercept(std.transform(X))
    if lambda_grid is None:
        lambda_grid = spec.lambda_grid
    if lambda_grid is None:
        lambdas = default_grid(lambda_max(Z, labels, K, spec.alpha), spec.n_lambda)
    else:
        lambdas = np.asarray(lambda_grid, dtype=float)
        if lambdas.size == 0 or np.any(np.diff(lambdas) > 0):
            raise ValueError("lambda_grid must be nonempty and descending")

    if lambdas.size == 1:
        best = 0
        cv_loss = np.array([np.nan])
    else:
        folds = make_folds(len(labels), labels, spec.cv_folds, spec.seed)
        loss = np.zeros(lambdas.size)
        for v in range(1, folds.V + 1):
            tr, te = folds.split(v)
            if np.unique(labels[tr]).size < K:
                raise LearnerError("a CV training fold lacks a class")
            path = _path(Z[tr], labels[tr], K, lambdas, spec.alpha, spec)
            for k, c in enumerate(path):
                loss[k] += _held_out_nll(Z[te], labels[te], c, K) * te.size
        cv_loss = loss / len(labels)
        best = int(np.argmin(cv_loss))
    path = _path(Z, labels, K, lambdas[: best + 1], spec.alpha, spec)
    coef = path[-1]
    return FittedLearner(
        spec,
        {"coef": coef},
        K,
        X.shape[1],
        std,
        {"lambda": float(lambdas[best]), "lambdas": lambdas, "cv_loss": cv_loss},
    )
