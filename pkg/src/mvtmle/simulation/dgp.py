"""Data-generating processes for the Monte-Carlo scenarios.

Treatment follows a multinomial logistic model in (1, x) with level 1 as
the zero-coefficient reference; potential outcomes are Bernoulli with
success probability expit(x'gamma_j + 1) for every level j, and the
observed outcome is the potential outcome at the assigned level.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from ..data import Dataset
from ..learners.base import softmax_ref


class Overlap(str, Enum):
    ADEQUATE = "adequate"
    INADEQUATE = "inadequate"
    RCT = "rct"


class EventRate(str, Enum):
    LOW = "low"
    MODERATE = "moderate"
    NO_EFFECT = "no_effect"


class CovariateRegime(str, Enum):
    STANDARD6 = "standard6"
    HIGHDIM40 = "highdim40"
    HIGHDIM100 = "highdim100"
    THREE_LEVEL = "three_level"

    @property
    def p(self) -> int:
        return {"highdim40": 40, "highdim100": 100}.get(self.value, 6)

    @property
    def J(self) -> int:
        return 3 if self is CovariateRegime.THREE_LEVEL else 6


SIGMA = np.array([[2.0, 1.0, -1.0], [1.0, 1.0, -0.5], [-1.0, -0.5, 1.0]])

KAPPA6 = {
    Overlap.ADEQUATE: (0.1, 0.15, 0.2, 0.25, 0.3),
    Overlap.INADEQUATE: (0.4, 0.6, 0.8, 1.0, 1.2),
    Overlap.RCT: (0.0,) * 5,
}
BETA6 = np.array(
    [
        [0, 0, 0, 0, 0, 0, 0],
        [0, 1, 1, 2, 1, 1, 1],
        [0, 1, 1, 1, 1, 1, -5],
        [0, 1, 1, 1, 1, 1, 5],
        [0, 1, 1, 1, -2, 1, 1],
        [0, 1, 1, 1, -2, -1, 1],
    ],
    dtype=float,
)
GAMMA6 = {
    EventRate.LOW: np.array(
        [
            [-4, 1, -2, -1, 1, 1, 1],
            [-6, 1, -2, -1, 1, 1, 1],
            [-2, 1, -1, -1, -1, -1, -4],
            [1, 2, 1, 2, -1, -1, -3],
            [-2, 2, -1, 1, -2, -1, -3],
            [-3, 3, -1, 1, -2, -1, -2],
        ],
        dtype=float,
    ),
    EventRate.MODERATE: np.array(
        [
            [-1.5, 1, 1, 1, 1, 1, 1],
            [-3, 2, 3, 1, 2, 2, 2],
            [3, 3, 1, 2, -1, -1, -4],
            [2.5, 4, 1, 2, -1, -1, -3],
            [2, 5, 1, 2, -1, -1, -2],
            [1.5, 6, 1, 2, -1, -1, -1],
        ],
        dtype=float,
    ),
}

KAPPA3 = {
    Overlap.ADEQUATE: (0.2, 0.1),
    Overlap.INADEQUATE: (0.7, 0.4),
    Overlap.RCT: (0.0, 0.0),
}
BETA3 = np.array([[0, 0, 0, 0, 0, 0, 0], [0, 1, 1, 1, -1, 1, 1], [0, 1, 1, 1, 1, 1, 1]], dtype=float)
GAMMA3 = {
    EventRate.LOW: np.array(
        [[-4, 1, -2, -1, 1, 1, 1], [-2, 1, -1, -1, -1, -1, -4], [3, 3, -1, 1, -2, -1, -2]], dtype=float
    ),
    EventRate.MODERATE: np.array(
        [[-1.5, 1, 1, 1, 1, 1, 1], [-3, 2, 3, 1, 2, 2, 2], [1.5, 3, 1, 2, -1, -1, -1]], dtype=float
    ),
}
GAMMA6_LOW_P100_LEVEL6 = np.array([-3, -2, -1, 1, -2, -1, -2], dtype=float)

OUTCOME_SHIFT = 1.0


# --- covariates ------------------------------------------------------------------


def gen_covariates_6(n: int, rng: np.random.Generator) -> np.ndarray:
    """x1-x3 ~ MVN(0, SIGMA), x4 ~ U[-3, 3], x5 ~ chi2(1), x6 ~ Bern(0.5)."""
    if n < 1:
        raise ValueError("n must be positive")
    mvn = rng.multivariate_normal(np.zeros(3), SIGMA, size=n, method="cholesky")
    x4 = rng.uniform(-3.0, 3.0, n)
    x5 = rng.chisquare(1.0, n)
    x6 = rng.binomial(1, 0.5, n).astype(float)
    return np.column_stack([mvn, x4, x5, x6])


def _truncated(draw, upper_ok, rng: np.random.Generator, n: int) -> np.ndarray:
    # rejection sampling; every family used has most mass inside its bounds
    out = draw(n)
    bad = ~upper_ok(out)
    while bad.any():
        out[bad] = draw(int(bad.sum()))
        bad = ~upper_ok(out)
    return out


def _extra_column(family: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if family == 0:
        col = _truncated(lambda m: rng.exponential(1.0, m), lambda v: v <= 5.0, rng, n)
    elif family == 1:
        col = _truncated(lambda m: rng.geometric(0.3, m).astype(float), lambda v: v <= 10, rng, n)
    elif family == 2:
        col = rng.hypergeometric(25, 25, 10, n).astype(float)
    elif family == 3:
        col = _truncated(lambda m: rng.logistic(0.0, 1.0, m), lambda v: np.abs(v) <= 5.0, rng, n)
    else:
        col = _truncated(lambda m: rng.poisson(2.0, m).astype(float), lambda v: v <= 8, rng, n)
    sd = col.std()
    return (col - col.mean()) / (sd if sd > 0 else 1.0)


def gen_covariates_highdim(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """Standard six columns followed by p - 6 standardized draws cycling through
    truncated exponential, geometric, hypergeometric, logistic and Poisson."""
    if p not in (40, 100):
        raise ValueError("high-dimensional regime needs p in {40, 100}")
    base = gen_covariates_6(n, rng)
    extra = [_extra_column(k % 5, n, rng) for k in range(p - 6)]
    return np.column_stack([base, *extra])


def gen_covariates(regime: CovariateRegime, n: int, rng: np.random.Generator) -> np.ndarray:
    regime = CovariateRegime(regime)
    if regime in (CovariateRegime.HIGHDIM40, CovariateRegime.HIGHDIM100):
        return gen_covariates_highdim(n, regime.p, rng)
    return gen_covariates_6(n, rng)


# --- coefficients ----------------------------------------------------------------


def _highdim_beta(p: int) -> np.ndarray:
    B = np.zeros((6, p + 1))
    B[1, 1:] = 0.5 if p == 40 else 0.15
    B[1, 3] = 1.0
    for j in (2, 3, 4):
        B[j, 1:] = 0.15
    B[2, -3:] = (0.0, -1.0, 0.5)
    B[3, -3:] = (0.0, 1.0, 0.5)
    B[4, -3:] = (-2.0, 1.0, 1.0)
    B[5, 0] = 0.25
    B[5, 1:] = 0.15
    B[5, -3:] = (-1.0, -1.0, -1.0)
    return B


def treatment_coefficients(regime: CovariateRegime, overlap: Overlap) -> np.ndarray:
    """J x (p + 1) coefficient matrix, intercept first, level 1 all zero."""
    regime, overlap = CovariateRegime(regime), Overlap(overlap)
    if regime is CovariateRegime.THREE_LEVEL:
        kappa = np.array((0.0, *KAPPA3[overlap]))
        return kappa[:, None] * BETA3
    kappa = np.array((0.0, *KAPPA6[overlap]))
    base = BETA6 if regime is CovariateRegime.STANDARD6 else _highdim_beta(regime.p)
    return kappa[:, None] * base


def outcome_coefficients(regime: CovariateRegime, event_rate: EventRate) -> np.ndarray:
    """J x (p + 1) outcome coefficients; high-dimensional vectors repeat the
    six covariate coefficients cyclically over columns 7..p."""
    regime, event_rate = CovariateRegime(regime), EventRate(event_rate)
    J, p = regime.J, regime.p
    if event_rate is EventRate.NO_EFFECT:
        return np.zeros((J, p + 1))
    if regime is CovariateRegime.THREE_LEVEL:
        return GAMMA3[event_rate].copy()
    G6 = GAMMA6[event_rate].copy()
    if regime is CovariateRegime.STANDARD6:
        return G6
    if regime is CovariateRegime.HIGHDIM100 and event_rate is EventRate.LOW:
        G6[5] = GAMMA6_LOW_P100_LEVEL6
    G = np.zeros((J, p + 1))
    G[:, 0] = G6[:, 0]
    for k in range(p):
        G[:, k + 1] = G6[:, 1 + k % 6]
    return G


# --- sampling ----------------------------------------------------------------------


def treatment_probabilities(X: np.ndarray, B: np.ndarray) -> np.ndarray:
    Z = np.column_stack([np.ones(X.shape[0]), X])
    return softmax_ref(Z @ B.T)


def sample_levels(P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF; returns levels 1..J."""
    u = rng.random(P.shape[0])
    cdf = np.cumsum(P, axis=1)
    a = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(a, P.shape[1] - 1) + 1


def _regime_for(J: int, p: int) -> CovariateRegime:
    if J == 3:
        return CovariateRegime.THREE_LEVEL
    return {6: CovariateRegime.STANDARD6, 40: CovariateRegime.HIGHDIM40, 100: CovariateRegime.HIGHDIM100}[p]


def gen_treatment(
    X: np.ndarray, overlap: Overlap, J: int, rng: np.random.Generator
) -> np.ndarray:
    """Levels 1..J drawn from the scenario's multinomial logistic model."""
    B = treatment_coefficients(_regime_for(J, X.shape[1]), overlap)
    return sample_levels(treatment_probabilities(X, B), rng)


def outcome_probabilities(X: np.ndarray, G: np.ndarray) -> np.ndarray:
    Z = np.column_stack([np.ones(X.shape[0]), X])
    return expit(Z @ G.T + OUTCOME_SHIFT)


def gen_potential_outcomes(
    X: np.ndarray, event_rate: EventRate, J: int, rng: np.random.Generator
) -> np.ndarray:
    """n x J matrix of y_i(j) ~ Bern(expit(x_i'gamma_j + 1))."""
    G = outcome_coefficients(_regime_for(J, X.shape[1]), event_rate)
    Q = outcome_probabilities(X, G)
    return (rng.random(Q.shape) < Q).astype(float)


@dataclass(frozen=True)
class TrueEffects:
    """Sample means of the potential outcomes for one replication."""

    mu: np.ndarray

    def ate(self, ref: int, alt: int) -> float:
        return float(self.mu[alt - 1] - self.mu[ref - 1])


def generate(
    regime: CovariateRegime,
    overlap: Overlap,
    event_rate: EventRate,
    n: int,
    rng: np.random.Generator,
) -> tuple[Dataset, TrueEffects]:
    regime = CovariateRegime(regime)
    X = gen_covariates(regime, n, rng)
    a = gen_treatment(X, overlap, regime.J, rng)
    Y = gen_potential_outcomes(X, event_rate, regime.J, rng)
    y = Y[np.arange(n), a - 1]
    names = tuple(f"x{k + 1}" for k in range(X.shape[1]))
    return Dataset(y, a, X, regime.J, names), TrueEffects(Y.mean(axis=0))


def gen_scenario_3(
    n: int, overlap: Overlap, event_rate: EventRate, rng: np.random.Generator
) -> tuple[Dataset, TrueEffects]:
    return generate(CovariateRegime.THREE_LEVEL, overlap, event_rate, n, rng)
