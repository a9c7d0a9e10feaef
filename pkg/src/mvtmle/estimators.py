"""Pairwise ATE estimators for a multi-valued treatment and a binary outcome.

TMLE (multinomial or per-level binomial fluctuation), IPTW (multinomial or
binomial propensities) and G-computation all share the same nuisance
fits: a propensity matrix p(x) and counterfactual outcome predictions
e0(x, j).  Standard errors come from the efficient influence curve.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit, logit

from .data import (
    DataError,
    Dataset,
    OutcomePredictionMatrix,
    PropensityMatrix,
    PropensitySource,
    counts_per_level,
)
from .learners import LearnerSpec, glm_library, sl_library
from .super_learner import Ensemble, Target, fit_super_learner

OUTCOME_BOUND = 5e-4
Z_CRIT = 1.96
FLUCT_MAX_ITER = 100
FLUCT_TOL = 1e-8
LINEAR_KINDS = ("binomial_glm", "multinomial_glm", "elastic_net")


class Estimator(str, Enum):
    TMLE_MULTINOMIAL = "tmle-multinomial"
    TMLE_BINOMIAL = "tmle-binomial"
    IPTW_MULTINOMIAL = "iptw-multinomial"
    IPTW_BINOMIAL = "iptw-binomial"
    GCOMP = "gcomp"

    @property
    def propensity_source(self) -> PropensitySource:
        if self in (Estimator.TMLE_BINOMIAL, Estimator.IPTW_BINOMIAL):
            return PropensitySource.BINOMIAL
        return PropensitySource.MULTINOMIAL


class PositivityError(DataError):
    """A treatment level has no observations."""


class FluctuationError(RuntimeError):
    def __init__(self, message: str, score_norm: float):
        super().__init__(message)
        self.score_norm = score_norm


@dataclass(frozen=True)
class WinsorConfig:
    lower: float = 0.005
    upper: float = 0.995

    def __post_init__(self) -> None:
        if not 0.0 < self.lower < self.upper < 1.0:
            raise ValueError("winsor bounds need 0 < lower < upper < 1")


def winsorize(pm: PropensityMatrix, cfg: WinsorConfig) -> PropensityMatrix:
    """Clamp into [lower, upper]; multinomial rows are renormalized afterwards."""
    P = np.clip(pm.probs, cfg.lower, cfg.upper)
    if np.array_equal(P, pm.probs):
        return pm
    if pm.source == PropensitySource.MULTINOMIAL:
        P = P / P.sum(axis=1, keepdims=True)
    return PropensityMatrix(P, pm.source)


@dataclass(frozen=True)
class NuisanceFits:
    """Propensities, initial counterfactual predictions e0 and e0 at the observed level."""

    propensities: PropensityMatrix
    initial_outcome: OutcomePredictionMatrix
    observed_pred: np.ndarray

    def __post_init__(self) -> None:
        E = self.initial_outcome.preds
        if E.shape != self.propensities.probs.shape:
            raise DataError("propensity and outcome matrices differ in shape")
        if E.size and (E.min() < OUTCOME_BOUND or E.max() > 1.0 - OUTCOME_BOUND):
            raise DataError("initial outcome predictions must be clamped to the fluctuation bounds")


def make_nuisance(d: Dataset, propensities: PropensityMatrix | np.ndarray, outcome: np.ndarray) -> NuisanceFits:
    """Bundle nuisance estimates, clamping e0 to [5e-4, 1 - 5e-4]."""
    if not isinstance(propensities, PropensityMatrix):
        propensities = PropensityMatrix(propensities)
    E = np.clip(np.asarray(outcome, dtype=float), OUTCOME_BOUND, 1.0 - OUTCOME_BOUND)
    if E.shape != (d.n, d.level_count):
        raise DataError(f"outcome predictions must be {d.n} x {d.level_count}")
    return NuisanceFits(propensities, OutcomePredictionMatrix(E), E[np.arange(d.n), d.codes])


# --- simple plug-in estimators -------------------------------------------------


def g_computation(nf: NuisanceFits) -> np.ndarray:
    return nf.initial_outcome.preds.mean(axis=0)


def iptw(d: Dataset, pm: PropensityMatrix) -> np.ndarray:
    """Horvitz-Thompson means (1/n) sum_i 1(a_i = j) y_i / p_j(x_i)."""
    P = pm.probs
    if np.any(P <= 0):
        raise PositivityError("zero propensity")
    W = np.zeros_like(P)
    rows = np.arange(d.n)
    W[rows, d.codes] = d.outcomes / P[rows, d.codes]
    return W.sum(axis=0) / d.n


# --- fluctuation ---------------------------------------------------------------


@dataclass(frozen=True)
class FluctuationFit:
    """``epsilons`` has shape (J,) for the multinomial variant and (J, 2) for
    the binomial one, whose columns are (eps_j, eps_-j)."""

    epsilons: np.ndarray
    converged: bool
    score_norm: float
    iterations: int = 0

    @property
    def level_epsilons(self) -> np.ndarray:
        e = np.asarray(self.epsilons)
        return e if e.ndim == 1 else e[:, 0]


def _logistic_offset_newton(
    H: np.ndarray, y: np.ndarray, offset: np.ndarray, max_iter: int = FLUCT_MAX_ITER, tol: float = FLUCT_TOL
) -> tuple[np.ndarray, float, int]:
    """No-intercept logistic regression of y on H with a fixed offset.

    Newton with step-halving on the log-likelihood; stops when the largest
    absolute score sum_i H_ik (y_i - p_i) is at most ``tol``.
    """
    k = H.shape[1]
    eps = np.zeros(k)

    def loss(e: np.ndarray) -> float:
        eta = offset + H @ e
        return float(np.sum(np.logaddexp(0.0, eta) - y * eta))

    f = loss(eps)
    score_norm = np.inf
    for it in range(max_iter + 1):
        p = expit(offset + H @ eps)
        score = H.T @ (y - p)
        score_norm = float(np.max(np.abs(score))) if k else 0.0
        if score_norm <= tol:
            return eps, score_norm, it
        if it == max_iter:
            break
        hess = H.T @ (H * (p * (1.0 - p))[:, None])
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, score, rcond=None)[0]
        t = 1.0
        while True:
            cand = eps + t * step
            fc = loss(cand)
            if np.isfinite(fc) and fc <= f + 1e-12 * (1.0 + abs(f)):
                break
            t *= 0.5
            if t < 1e-12:
                raise FluctuationError("fluctuation line search failed", score_norm)
        eps, f = cand, fc
    raise FluctuationError(f"fluctuation did not converge in {max_iter} iterations", score_norm)


def _clever_columns(d: Dataset, P: np.ndarray) -> np.ndarray:
    H = np.zeros((d.n, d.level_count))
    rows = np.arange(d.n)
    H[rows, d.codes] = 1.0 / P[rows, d.codes]
    return H


def _check_inputs(nf: NuisanceFits, d: Dataset) -> None:
    if nf.propensities.probs.shape != (d.n, d.level_count):
        raise DataError("nuisance fits do not match the dataset")


def tmle_fluctuate_multinomial(d: Dataset, nf: NuisanceFits) -> FluctuationFit:
    """Solve the J clever-covariate score equations jointly.

    H_j(i) = 1(a_i = j) / p_j(x_i), offset logit e0(x_i, a_i), no intercept.
    """
    _check_inputs(nf, d)
    H = _clever_columns(d, nf.propensities.probs)
    eps, norm, it = _logistic_offset_newton(H, d.outcomes, logit(nf.observed_pred))
    return FluctuationFit(eps, True, norm, it)


def tmle_fluctuate_binomial(d: Dataset, nf: NuisanceFits) -> FluctuationFit:
    """One two-covariate fluctuation per level: 1(a=j)/p_j and 1(a!=j)/(1-p_j)."""
    _check_inputs(nf, d)
    P = nf.propensities.probs
    offset = logit(nf.observed_pred)
    eps = np.zeros((d.level_count, 2))
    worst, total_it = 0.0, 0
    for j in range(d.level_count):
        on = d.codes == j
        H = np.column_stack([on / P[:, j], (~on) / (1.0 - P[:, j])])
        e, norm, it = _logistic_offset_newton(H, d.outcomes, offset)
        eps[j] = e
        worst = max(worst, norm)
        total_it = max(total_it, it)
    return FluctuationFit(eps, True, worst, total_it)


def updated_outcome(nf: NuisanceFits, fluct: FluctuationFit) -> np.ndarray:
    """e1(x_i, j) = expit(logit e0(x_i, j) + eps_j / p_j(x_i)), the set-to-j update."""
    E0 = nf.initial_outcome.preds
    return expit(logit(E0) + fluct.level_epsilons[None, :] / nf.propensities.probs)


def tmle_estimate(d: Dataset, nf: NuisanceFits, fluct: FluctuationFit) -> np.ndarray:
    if not fluct.converged:
        raise FluctuationError("fluctuation not converged", fluct.score_norm)
    return updated_outcome(nf, fluct).mean(axis=0)


# --- inference -----------------------------------------------------------------


def influence_curve(
    d: Dataset, E: np.ndarray, P: np.ndarray, ref: int, alt: int, ate: float
) -> np.ndarray:
    """Efficient influence curve of mu_alt - mu_ref; ``ref``/``alt`` are 1-based levels."""
    r, a = ref - 1, alt - 1
    rows = np.arange(d.n)
    resid = d.outcomes - E[rows, d.codes]
    weight = (d.codes == a) / P[:, a] - (d.codes == r) / P[:, r]
    return weight * resid + E[:, a] - E[:, r] - ate


def wald_interval(ic: np.ndarray, ate: float) -> tuple[float, float, float]:
    n = ic.shape[0]
    if n < 2:
        raise ValueError("need at least two observations")
    se = float(np.sqrt(np.mean(ic**2) / n))
    return se, ate - Z_CRIT * se, ate + Z_CRIT * se


# --- tables --------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateRow:
    ref: int
    alt: int
    mu_ref: float
    mu_alt: float
    ate: float
    se: float
    ci_lo: float
    ci_hi: float


@dataclass(frozen=True)
class EstimateTable:
    estimator: str
    n: int
    rows: tuple[EstimateRow, ...]
    level_labels: tuple[str, ...] | None = None
    info: dict = field(default_factory=dict)

    def label(self, level: int) -> str:
        return str(level) if self.level_labels is None else self.level_labels[level - 1]

    def row(self, ref: int, alt: int) -> EstimateRow:
        for r in self.rows:
            if (r.ref, r.alt) == (ref, alt):
                return r
        raise KeyError((ref, alt))


CSV_COLUMNS = ("estimator", "ref", "alt", "ate", "se", "ci_lo", "ci_hi", "n", "mu_ref", "mu_alt")


def write_estimates(tables: Iterable[EstimateTable], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t in tables:
            for r in t.rows:
                w.writerow(
                    [t.estimator, t.label(r.ref), t.label(r.alt), repr(r.ate), repr(r.se),
                     repr(r.ci_lo), repr(r.ci_hi), t.n, repr(r.mu_ref), repr(r.mu_alt)]
                )


def level_pairs(J: int, reference: int | None = None) -> list[tuple[int, int]]:
    """(ref, alt) pairs: all j < k, or (reference, k) for every other k."""
    if reference is None:
        return list(itertools.combinations(range(1, J + 1), 2))
    if not 1 <= reference <= J:
        raise ValueError(f"reference level {reference} outside 1..{J}")
    return [(reference, k) for k in range(1, J + 1) if k != reference]


def pair_table(
    d: Dataset,
    estimator: str,
    mu: np.ndarray,
    E: np.ndarray,
    P: np.ndarray,
    pairs: Sequence[tuple[int, int]],
    info: dict | None = None,
) -> EstimateTable:
    rows = []
    for ref, alt in pairs:
        if ref == alt:
            raise ValueError("reference and alternative levels must differ")
        ate = float(mu[alt - 1] - mu[ref - 1])
        se, lo, hi = wald_interval(influence_curve(d, E, P, ref, alt, ate), ate)
        rows.append(EstimateRow(ref, alt, float(mu[ref - 1]), float(mu[alt - 1]), ate, se, lo, hi))
    return EstimateTable(estimator, d.n, tuple(rows), d.level_labels, info or {})


# --- nuisance estimation ---------------------------------------------------------


@dataclass(frozen=True)
class OutcomeDesign:
    """Outcome-model design built from [X, dummies for levels 2..J].

    Linear learners also receive every covariate-by-dummy product, which
    makes a GLM equivalent to separate per-arm regressions; trees get the
    main-effects design and find interactions themselves.  With
    ``interactions=False`` every learner gets the main-effects design.
    """

    p: int
    J: int
    interactions: bool = True

    def base(self, X: np.ndarray, codes: np.ndarray) -> np.ndarray:
        D = np.zeros((X.shape[0], self.J - 1))
        on = codes > 0
        D[np.flatnonzero(on), codes[on] - 1] = 1.0
        return np.column_stack([X, D])

    def counterfactual(self, X: np.ndarray, level: int) -> np.ndarray:
        return self.base(X, np.full(X.shape[0], level - 1, dtype=np.int64))

    def __call__(self, spec: LearnerSpec, Z: np.ndarray) -> np.ndarray:
        if not self.interactions or spec.kind not in LINEAR_KINDS:
            return Z
        X, D = Z[:, : self.p], Z[:, self.p :]
        inter = (X[:, :, None] * D[:, None, :]).transpose(0, 2, 1).reshape(Z.shape[0], -1)
        return np.column_stack([Z, inter])


def _sub_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def library_specs(library: str | Sequence[LearnerSpec], n_classes: int, seed: int) -> list[LearnerSpec]:
    if not isinstance(library, str):
        return list(library)
    if library == "sl":
        return sl_library(seed)
    if library == "glm":
        return glm_library(n_classes)
    raise ValueError(f"unknown learner library {library!r}")


@dataclass
class NuisanceBundle:
    """Fitted nuisance models and their predictions on the estimation sample."""

    propensities: dict[PropensitySource, PropensityMatrix]
    outcome: np.ndarray
    ensembles: dict[str, Ensemble]

    def fits(self, d: Dataset, source: PropensitySource) -> NuisanceFits:
        return make_nuisance(d, self.propensities[PropensitySource(source)], self.outcome)


def fit_treatment_model(
    d: Dataset,
    source: PropensitySource,
    library: str | Sequence[LearnerSpec] = "sl",
    seed: int = 0,
    V: int = 5,
    columns: Sequence[int] | None = None,
) -> tuple[PropensityMatrix, dict[str, Ensemble]]:
    """Multinomial propensities, or J separate one-vs-rest binomial fits."""
    X = d.covariates if columns is None else d.covariates[:, list(columns)]
    J = d.level_count
    source = PropensitySource(source)
    if source == PropensitySource.MULTINOMIAL:
        ens = fit_super_learner(
            library_specs(library, J, seed), X, d.codes, Target.MULTINOMIAL_TREATMENT,
            V, _sub_seed(seed, 1), J,
        )
        P = ens.predict_proba(X)
        return PropensityMatrix(P / P.sum(axis=1, keepdims=True), source), {"treatment_multinomial": ens}
    cols, models = [], {}
    for j in range(J):
        y = (d.codes == j).astype(np.int64)
        ens = fit_super_learner(
            library_specs(library, 2, seed), X, y, Target.BINOMIAL_OUTCOME, V, _sub_seed(seed, 10 + j), 2
        )
        models[f"treatment_binomial_{d.label_of(j + 1)}"] = ens
        cols.append(ens.predict_proba(X)[:, 1])
    return PropensityMatrix(np.column_stack(cols), source), models


def fit_outcome_model(
    d: Dataset,
    library: str | Sequence[LearnerSpec] = "sl",
    seed: int = 0,
    V: int = 5,
    columns: Sequence[int] | None = None,
) -> tuple[np.ndarray, Ensemble]:
    """n x J matrix of predicted E[y | x, a = j] from one model on (x, a).

    If the interacted design cannot be fit (an arm too small or too
    homogeneous for its own slopes: rank deficiency or separation), the
    model is refit on main effects plus treatment dummies, with a warning.
    """
    X = d.covariates if columns is None else d.covariates[:, list(columns)]
    specs = library_specs(library, 2, seed)
    labels = d.outcomes.astype(np.int64)
    design = OutcomeDesign(X.shape[1], d.level_count)
    base = design.base(X, d.codes)
    seed_out = _sub_seed(seed, 2)
    try:
        ens = fit_super_learner(specs, base, labels, Target.BINOMIAL_OUTCOME, V, seed_out, 2, design=design)
    except RuntimeError as exc:
        if not any(s.kind in LINEAR_KINDS for s in specs):
            raise
        warnings.warn(f"outcome model refit without interactions: {exc}", RuntimeWarning, stacklevel=2)
        design = OutcomeDesign(X.shape[1], d.level_count, interactions=False)
        ens = fit_super_learner(specs, base, labels, Target.BINOMIAL_OUTCOME, V, seed_out, 2, design=design)
    E = np.column_stack(
        [ens.predict_proba(design.counterfactual(X, j))[:, 1] for j in range(1, d.level_count + 1)]
    )
    return E, ens


def check_positivity(d: Dataset) -> None:
    counts = counts_per_level(d)
    for j, c in enumerate(counts, start=1):
        if c == 0:
            raise PositivityError(f"treatment level {d.label_of(j)} has no observations")


def fit_nuisance(
    d: Dataset,
    sources: Iterable[PropensitySource] = (PropensitySource.MULTINOMIAL, PropensitySource.BINOMIAL),
    library: str | Sequence[LearnerSpec] = "sl",
    winsor: WinsorConfig | None = WinsorConfig(),
    seed: int = 0,
    V: int = 5,
    outcome_columns: Sequence[int] | None = None,
    treatment_columns: Sequence[int] | None = None,
    outcome_library: str | Sequence[LearnerSpec] | None = None,
) -> NuisanceBundle:
    """Fit the requested treatment models and the outcome model.

    ``*_columns`` restrict the covariates each model sees (the data-generating
    process is unaffected); ``winsor=None`` disables clamping.
    """
    check_positivity(d)
    props: dict[PropensitySource, PropensityMatrix] = {}
    ensembles: dict[str, Ensemble] = {}
    for src in dict.fromkeys(PropensitySource(s) for s in sources):
        pm, models = fit_treatment_model(d, src, library, seed, V, treatment_columns)
        props[src] = winsorize(pm, winsor) if winsor is not None else pm
        ensembles.update(models)
    E, ens = fit_outcome_model(d, library if outcome_library is None else outcome_library, seed, V, outcome_columns)
    ensembles["outcome"] = ens
    return NuisanceBundle(props, E, ensembles)


def estimate_from_nuisance(
    d: Dataset,
    bundle: NuisanceBundle,
    estimator: Estimator | str,
    reference: int | None = None,
) -> EstimateTable:
    est = Estimator(estimator)
    pairs = level_pairs(d.level_count, reference)
    if est is Estimator.GCOMP:
        src = (
            PropensitySource.MULTINOMIAL
            if PropensitySource.MULTINOMIAL in bundle.propensities
            else next(iter(bundle.propensities))
        )
        nf = bundle.fits(d, src)
        E = nf.initial_outcome.preds
        return pair_table(d, est.value, g_computation(nf), E, nf.propensities.probs, pairs)
    nf = bundle.fits(d, est.propensity_source)
    P = nf.propensities.probs
    if est in (Estimator.IPTW_MULTINOMIAL, Estimator.IPTW_BINOMIAL):
        return pair_table(d, est.value, iptw(d, nf.propensities), nf.initial_outcome.preds, P, pairs)
    if est is Estimator.TMLE_MULTINOMIAL:
        fl = tmle_fluctuate_multinomial(d, nf)
    else:
        fl = tmle_fluctuate_binomial(d, nf)
    E1 = updated_outcome(nf, fl)
    info = {"epsilons": fl.epsilons.tolist(), "score_norm": fl.score_norm}
    return pair_table(d, est.value, E1.mean(axis=0), E1, P, pairs, info)


def estimate_all_pairs(
    d: Dataset,
    estimator: Estimator | str,
    library: str | Sequence[LearnerSpec] = "sl",
    reference: int | None = None,
    winsor: WinsorConfig | None = WinsorConfig(),
    seed: int = 0,
    V: int = 5,
) -> EstimateTable:
    """Fit nuisance models and report every pairwise ATE with Wald intervals."""
    est = Estimator(estimator)
    level_pairs(d.level_count, reference)
    sources = [est.propensity_source]
    bundle = fit_nuisance(d, sources, library, winsor, seed, V)
    return estimate_from_nuisance(d, bundle, est, reference)
