"""Overlap and covariate-balance diagnostics for estimated propensities."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, PropensityMatrix, counts_per_level

SMD_THRESHOLD = 0.2


def effective_sample_size(w: np.ndarray) -> float:
    """(sum w)^2 / sum w^2; nan for an empty weight vector."""
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        return math.nan
    if np.all(w == w[0]):
        return float(w.size)
    return float(w.sum() ** 2 / np.sum(w**2))


def ess(d: Dataset, pm: PropensityMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-level ESS of inverse-propensity weights among those assigned, and ESS / n_j."""
    P = pm.probs
    if np.any(P <= 0):
        raise ValueError("propensities must be positive")
    counts = counts_per_level(d)
    out = np.full(d.level_count, math.nan)
    for j in range(d.level_count):
        mask = d.codes == j
        out[j] = effective_sample_size(1.0 / P[mask, j])
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(counts > 0, out / np.maximum(counts, 1), math.nan)
    return out, ratio


@dataclass(frozen=True)
class LevelOverlap:
    level: str
    n: int
    min: float
    mean: float
    max: float
    sd: float
    ess: float
    ess_ratio: float


@dataclass(frozen=True)
class OverlapReport:
    source: str
    levels: tuple[LevelOverlap, ...]

    def rows(self) -> list[list[object]]:
        return [
            [self.source, r.level, r.n, repr(r.min), repr(r.mean), repr(r.max), repr(r.sd),
             _fmt(r.ess), _fmt(r.ess_ratio)]
            for r in self.levels
        ]

    def write_csv(self, path: str | Path) -> None:
        write_overlap_reports([self], path)


OVERLAP_COLUMNS = ["source", "level", "n", "min", "mean", "max", "sd", "ess", "ess_ratio"]


def write_overlap_reports(reports: list[OverlapReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OVERLAP_COLUMNS)
        for rep in reports:
            w.writerows(rep.rows())


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def overlap_summary(pm: PropensityMatrix, d: Dataset) -> OverlapReport:
    """Summary statistics of each full propensity column, plus ESS (Table-4 layout)."""
    P = pm.probs
    e, ratio = ess(d, pm)
    counts = counts_per_level(d)
    levels = tuple(
        LevelOverlap(
            d.label_of(j + 1),
            int(counts[j]),
            float(P[:, j].min()),
            float(P[:, j].mean()),
            float(P[:, j].max()),
            float(P[:, j].std(ddof=1)) if d.n > 1 else 0.0,
            float(e[j]),
            float(ratio[j]),
        )
        for j in range(d.level_count)
    )
    return OverlapReport(pm.source.value, levels)


@dataclass(frozen=True)
class CovariateBalance:
    covariate: str
    unadjusted: float
    weighted: float | None
    zero_variance: bool

    @property
    def flagged(self) -> bool:
        """Exceeds the 0.2 threshold after weighting (or unadjusted when unweighted)."""
        v = self.unadjusted if self.weighted is None else self.weighted
        return v > SMD_THRESHOLD


@dataclass(frozen=True)
class BalanceReport:
    rows: tuple[CovariateBalance, ...]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", "smd_unadjusted", "smd_weighted", "flag", "zero_variance"])
            for r in self.rows:
                w.writerow(
                    [r.covariate, repr(r.unadjusted), "" if r.weighted is None else repr(r.weighted),
                     int(r.flagged), int(r.zero_variance)]
                )

    def write_long_csv(self, path: str | Path) -> None:
        """One line per (covariate, variant) for plotting."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", "variant", "smd"])
            for r in self.rows:
                w.writerow([r.covariate, "unadjusted", repr(r.unadjusted)])
                if r.weighted is not None:
                    w.writerow([r.covariate, "weighted", repr(r.weighted)])


def _max_pairwise(means: np.ndarray) -> np.ndarray:
    # means: J x p; max over level pairs of |m_j - m_k|
    J = means.shape[0]
    best = np.zeros(means.shape[1])
    for j, k in itertools.combinations(range(J), 2):
        best = np.maximum(best, np.abs(means[j] - means[k]))
    return best


def covariate_balance(d: Dataset, pm: PropensityMatrix | None = None) -> BalanceReport:
    """Maximum absolute pairwise standardized mean difference per covariate.

    Differences are divided by the unweighted whole-sample standard
    deviation.  Weighted means use 1(a_i = j) / p_j(x_i) within level j.
    Levels with no observations are skipped.
    """
    X = d.covariates
    sd = X.std(axis=0, ddof=1) if d.n > 1 else np.zeros(d.p)
    present = [j for j in range(d.level_count) if np.any(d.codes == j)]
    raw = np.array([X[d.codes == j].mean(axis=0) for j in present]).reshape(len(present), d.p)
    weighted = None
    if pm is not None:
        wm = []
        for j in present:
            mask = d.codes == j
            w = 1.0 / pm.probs[mask, j]
            wm.append(w @ X[mask] / w.sum())
        weighted = np.array(wm).reshape(len(present), d.p)
    zero = sd <= 0
    scale = np.where(zero, 1.0, sd)
    smd_raw = np.where(zero, 0.0, _max_pairwise(raw) / scale)
    smd_w = None if weighted is None else np.where(zero, 0.0, _max_pairwise(weighted) / scale)
    names = d.column_names or tuple(f"x{k + 1}" for k in range(d.p))
    rows = tuple(
        CovariateBalance(
            names[k],
            float(smd_raw[k]),
            None if smd_w is None else float(smd_w[k]),
            bool(zero[k]),
        )
        for k in range(d.p)
    )
    return BalanceReport(rows)
