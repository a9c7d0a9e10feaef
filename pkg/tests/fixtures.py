"""Six-row, three-arm fixture with hand-checkable nuisance values.

Two observations per arm.  Propensity rows sum to one; outcome predictions
are arbitrary values inside (0, 1).  Each arm has one event and one
non-event, so every per-arm fluctuation equation has a finite root.
"""

import math

import numpy as np
from scipy.optimize import brentq

from mvtmle.data import Dataset

Y = [1, 0, 1, 0, 0, 1]
A = [1, 1, 2, 2, 3, 3]
P = [
    [0.5, 0.3, 0.2],
    [0.4, 0.4, 0.2],
    [0.25, 0.5, 0.25],
    [0.2, 0.6, 0.2],
    [0.3, 0.3, 0.4],
    [0.1, 0.4, 0.5],
]
E0 = [
    [0.6, 0.5, 0.4],
    [0.3, 0.4, 0.5],
    [0.7, 0.8, 0.6],
    [0.5, 0.6, 0.7],
    [0.2, 0.3, 0.35],
    [0.4, 0.5, 0.55],
]


def dataset() -> Dataset:
    return Dataset(np.array(Y, float), np.array(A), np.zeros((6, 1)), 3)


# --- oracles written as plain loops, independent of the package ---------------------


def expit(v):
    return 1.0 / (1.0 + math.exp(-v))


def logit(p):
    return math.log(p / (1.0 - p))


def oracle_epsilon(j):
    rows = [i for i in range(6) if A[i] == j + 1]

    def score(e):
        return sum((Y[i] - expit(logit(E0[i][j]) + e / P[i][j])) / P[i][j] for i in rows)

    return brentq(score, -50, 50, xtol=1e-14, rtol=1e-15)


def oracle_tmle_mu():
    eps = [oracle_epsilon(j) for j in range(3)]
    mu = [sum(expit(logit(E0[i][j]) + eps[j] / P[i][j]) for i in range(6)) / 6 for j in range(3)]
    return eps, mu


def oracle_se(E, mu, ref, alt):
    ate = mu[alt - 1] - mu[ref - 1]
    total = 0.0
    for i in range(6):
        a = A[i]
        w = (1.0 / P[i][alt - 1] if a == alt else 0.0) - (1.0 / P[i][ref - 1] if a == ref else 0.0)
        ic = w * (Y[i] - E[i][a - 1]) + E[i][alt - 1] - E[i][ref - 1] - ate
        total += ic * ic
    return math.sqrt(total / 6 / 6)
