"""Histogram gradient-boosted trees for binomial and softmax losses.

Trees are grown level by level to a fixed depth on quantile-binned
features.  Leaf values are Newton steps ``-G / (H + reg_lambda)`` scaled by
the learning rate; a split needs positive gain and at least
``min_child_weight`` hessian mass on each side.  No row or column
subsampling is done, so fits are deterministic given the data order.
"""

from __future__ import annotations

import numba
import numpy as np

from .base import FittedLearner, LearnerSpec, as_matrix, constant_learner, softmax_ref

MAX_BINS = 64
REG_LAMBDA = 1.0
MIN_CHILD_WEIGHT = 1.0


def make_thresholds(X: np.ndarray, max_bins: int = MAX_BINS) -> list[np.ndarray]:
    """Per-feature split thresholds; a value goes to bin ``b`` when ``thr[b-1] < x <= thr[b]``."""
    out = []
    for k in range(X.shape[1]):
        u = np.unique(X[:, k])
        if u.size <= max_bins:
            thr = 0.5 * (u[:-1] + u[1:])
        else:
            q = np.quantile(X[:, k], np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
            thr = np.unique(q)
        out.append(thr.astype(float))
    return out


def apply_bins(X: np.ndarray, thresholds: list[np.ndarray]) -> np.ndarray:
    B = np.empty(X.shape, dtype=np.uint8)
    for k, thr in enumerate(thresholds):
        B[:, k] = np.searchsorted(thr, X[:, k], side="left")
    return B


@numba.njit(cache=True)
def _grow(bins, nbins, g, h, depth, reg_lambda, min_child_weight, feat, split, leaf, node_of):
    n, p = bins.shape
    maxb = 0
    for k in range(p):
        if nbins[k] > maxb:
            maxb = nbins[k]
    for i in range(n):
        node_of[i] = 0
    for d in range(depth):
        width = 1 << d
        G = np.zeros((width, p, maxb))
        H = np.zeros((width, p, maxb))
        Gn = np.zeros(width)
        Hn = np.zeros(width)
        for i in range(n):
            v = node_of[i]
            Gn[v] += g[i]
            Hn[v] += h[i]
            for k in range(p):
                b = bins[i, k]
                G[v, k, b] += g[i]
                H[v, k, b] += h[i]
        base = width - 1
        for v in range(width):
            best_gain = 0.0
            best_k = -1
            best_b = 0
            parent = Gn[v] * Gn[v] / (Hn[v] + reg_lambda)
            for k in range(p):
                gl = 0.0
                hl = 0.0
                for b in range(nbins[k] - 1):
                    gl += G[v, k, b]
                    hl += H[v, k, b]
                    hr = Hn[v] - hl
                    if hl < min_child_weight or hr < min_child_weight:
                        continue
                    gr = Gn[v] - gl
                    gain = gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda) - parent
                    if gain > best_gain + 1e-12:
                        best_gain = gain
                        best_k = k
                        best_b = b
            feat[base + v] = best_k
            split[base + v] = best_b
        for i in range(n):
            v = node_of[i]
            k = feat[base + v]
            go_right = 0
            if k >= 0 and bins[i, k] > split[base + v]:
                go_right = 1
            node_of[i] = 2 * v + go_right
    nleaf = 1 << depth
    Gl = np.zeros(nleaf)
    Hl = np.zeros(nleaf)
    for i in range(n):
        Gl[node_of[i]] += g[i]
        Hl[node_of[i]] += h[i]
    for v in range(nleaf):
        if Hl[v] > 0.0:
            leaf[v] = -Gl[v] / (Hl[v] + reg_lambda)
        else:
            leaf[v] = 0.0


@numba.njit(cache=True)
def _predict(bins, feat, split, leaf, depth, out, scale):
    # feat/split: (T, C, 2^depth - 1); leaf: (T, C, 2^depth); out: (n, C)
    n = bins.shape[0]
    T, C, _ = feat.shape
    for t in range(T):
        for c in range(C):
            for i in range(n):
                v = 0
                for d in range(depth):
                    node = (1 << d) - 1 + v
                    k = feat[t, c, node]
                    right = 0
                    if k >= 0 and bins[i, k] > split[t, c, node]:
                        right = 1
                    v = 2 * v + right
                out[i, c] += scale * leaf[t, c, v]


def fit_gradboost(
    X: np.ndarray,
    labels: np.ndarray,
    spec: LearnerSpec | None = None,
    n_classes: int | None = None,
) -> FittedLearner:
    """Boosted trees on the logistic (K=2) or softmax (K>2) negative log-likelihood.

    With K > 2 one tree per class is grown each round on that class's
    gradient.  Constant labels give a constant-probability learner.
    """
    spec = spec or LearnerSpec("gradboost")
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    K = int(n_classes or labels.max() + 1)
    X = as_matrix(X, n)
    if n < 20:
        raise ValueError("gradient boosting needs n >= 20")
    if np.unique(labels).size < 2:
        return constant_learner(spec, labels, K, X.shape[1])

    thresholds = make_thresholds(X)
    bins = apply_bins(X, thresholds)
    nbins = np.array([t.size + 1 for t in thresholds], dtype=np.int64)
    C = 1 if K == 2 else K
    n_int = (1 << spec.depth) - 1
    n_leaf = 1 << spec.depth
    feat = np.full((spec.trees, C, n_int), -1, dtype=np.int64)
    split = np.zeros((spec.trees, C, n_int), dtype=np.int64)
    leaf = np.zeros((spec.trees, C, n_leaf))
    node_of = np.empty(n, dtype=np.int64)

    freq = np.clip(np.bincount(labels, minlength=K) / n, 1e-6, 1 - 1e-6)
    if K == 2:
        base = np.array([np.log(freq[1] / freq[0])])
        y = labels.astype(float)
    else:
        base = np.log(freq)
        Y = np.zeros((n, K))
        Y[np.arange(n), labels] = 1.0
    F = np.tile(base, (n, 1))
    lr = spec.learning_rate
    for t in range(spec.trees):
        if K == 2:
            p = 1.0 / (1.0 + np.exp(-F[:, 0]))
            grads = [(p - y, p * (1.0 - p))]
        else:
            P = softmax_ref(F)
            grads = [(P[:, c] - Y[:, c], P[:, c] * (1.0 - P[:, c])) for c in range(K)]
        for c, (g, h) in enumerate(grads):
            _grow(
                bins, nbins, g, h, spec.depth, REG_LAMBDA, MIN_CHILD_WEIGHT,
                feat[t, c], split[t, c], leaf[t, c], node_of,
            )
            F[:, c] += lr * leaf[t, c][node_of]
    params = {
        "thresholds": thresholds,
        "base": base,
        "feat": feat,
        "split": split,
        "leaf": leaf,
    }
    return FittedLearner(spec, params, K, X.shape[1], None, {})


def raw_scores(model: FittedLearner, X: np.ndarray) -> np.ndarray:
    prm = model.params
    thresholds = [np.asarray(t, dtype=float) for t in prm["thresholds"]]
    bins = apply_bins(np.asarray(X, dtype=float), thresholds)
    base = np.asarray(prm["base"], dtype=float)
    F = np.tile(base, (bins.shape[0], 1))
    _predict(
        bins,
        np.asarray(prm["feat"], dtype=np.int64),
        np.asarray(prm["split"], dtype=np.int64),
        np.asarray(prm["leaf"], dtype=float),
        model.spec.depth,
        F,
        model.spec.learning_rate,
    )
    return F


def predict(model: FittedLearner, X: np.ndarray) -> np.ndarray:
    F = raw_scores(model, X)
    if model.class_count == 2:
        p = 1.0 / (1.0 + np.exp(-np.clip(F[:, 0], -30.0, 30.0)))
        return np.column_stack([1.0 - p, p])
    return softmax_ref(F)
