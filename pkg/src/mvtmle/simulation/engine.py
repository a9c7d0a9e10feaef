"""Monte-Carlo engine: replicate a scenario, estimate, and aggregate metrics.

Replication h draws all its randomness from ``SeedSequence([master_seed, h])``
so results do not depend on worker count or execution order.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from ..data import PropensitySource
from ..estimators import (
    Estimator,
    WinsorConfig,
    estimate_from_nuisance,
    fit_nuisance,
    level_pairs,
)
from .dgp import CovariateRegime, EventRate, Overlap, generate

REFERENCE = "glm-tmle-multinomial"
FAILURE_LIMIT = 0.2


class Misspec(str, Enum):
    NONE = "none"
    OMIT_X6_OUTCOME = "omit_x6_outcome"
    OMIT_X6_TREATMENT = "omit_x6_treatment"
    OMIT_X6_BOTH = "omit_x6_both"


class Library(str, Enum):
    SL = "sl"
    GLM = "glm"


ALL_ESTIMATORS = tuple(e.value for e in Estimator)


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 2000
    H: int = 200
    overlap: Overlap = Overlap.ADEQUATE
    event_rate: EventRate = EventRate.LOW
    covariate_regime: CovariateRegime = CovariateRegime.STANDARD6
    misspec: Misspec = Misspec.NONE
    estimators: tuple[str, ...] = ALL_ESTIMATORS
    learner_library: Library = Library.SL
    master_seed: int = 0
    winsor: tuple[float, float] | None = None
    folds: int = 5
    relative_precision: bool = True

    def __post_init__(self) -> None:
        for name, enum in (
            ("overlap", Overlap),
            ("event_rate", EventRate),
            ("covariate_regime", CovariateRegime),
            ("misspec", Misspec),
            ("learner_library", Library),
        ):
            object.__setattr__(self, name, enum(getattr(self, name)))
        est = tuple(Estimator(e).value for e in self.estimators)
        if not est:
            raise ValueError("need at least one estimator")
        object.__setattr__(self, "estimators", est)
        if self.winsor is not None:
            WinsorConfig(*self.winsor)
            object.__setattr__(self, "winsor", tuple(float(v) for v in self.winsor))
        if self.n < 2 * self.folds or self.H < 1:
            raise ValueError("need n >= 2 * folds and H >= 1")
        if self.misspec is not Misspec.NONE and self.covariate_regime is not CovariateRegime.STANDARD6:
            raise ValueError("misspecification scenarios are only defined for the six-covariate regime")

    @property
    def J(self) -> int:
        return self.covariate_regime.J

    @property
    def p(self) -> int:
        return self.covariate_regime.p

    def to_dict(self) -> dict:
        doc = asdict(self)
        for k, v in doc.items():
            if isinstance(v, Enum):
                doc[k] = v.value
        doc["estimators"] = list(self.estimators)
        doc["winsor"] = None if self.winsor is None else list(self.winsor)
        return doc


def apply_misspecification(cfg: ScenarioConfig) -> tuple[list[int] | None, list[int] | None]:
    """Covariate columns seen by the (outcome, treatment) models; None means all."""
    if cfg.misspec is not Misspec.NONE and cfg.covariate_regime is not CovariateRegime.STANDARD6:
        raise ValueError("misspecification is unsupported outside the six-covariate regime")
    without_x6 = [0, 1, 2, 3, 4]
    outcome = without_x6 if cfg.misspec in (Misspec.OMIT_X6_OUTCOME, Misspec.OMIT_X6_BOTH) else None
    treatment = without_x6 if cfg.misspec in (Misspec.OMIT_X6_TREATMENT, Misspec.OMIT_X6_BOTH) else None
    return outcome, treatment


@dataclass
class Replication:
    h: int
    mu_true: np.ndarray | None = None
    # estimator -> array of (pairs, 4): ate, se, ci_lo, ci_hi
    estimates: dict[str, np.ndarray] = field(default_factory=dict)
    error: str | None = None


def _sources(estimators: Sequence[str]) -> list[PropensitySource]:
    srcs = {Estimator(e).propensity_source for e in estimators}
    return [s for s in PropensitySource if s in srcs]


def run_replication(cfg: ScenarioConfig, h: int) -> Replication:
    """Generate replication ``h`` and apply every configured estimator.

    Any exception is caught and recorded so one bad draw cannot sink a run.
    """
    ss = np.random.SeedSequence([cfg.master_seed, h])
    data_ss, fit_ss = ss.spawn(2)
    fit_seed = int(fit_ss.generate_state(1)[0])
    rep = Replication(h)
    try:
        d, truth = generate(cfg.covariate_regime, cfg.overlap, cfg.event_rate, cfg.n, np.random.default_rng(data_ss))
        rep.mu_true = truth.mu
        out_cols, trt_cols = apply_misspecification(cfg)
        winsor = None if cfg.winsor is None else WinsorConfig(*cfg.winsor)
        pairs = level_pairs(cfg.J)
        bundle = fit_nuisance(
            d, _sources(cfg.estimators), cfg.learner_library.value, winsor, fit_seed, cfg.folds,
            out_cols, trt_cols,
        )
        for est in cfg.estimators:
            t = estimate_from_nuisance(d, bundle, est)
            rep.estimates[est] = np.array([[r.ate, r.se, r.ci_lo, r.ci_hi] for r in t.rows])
        if cfg.relative_precision:
            if cfg.learner_library is Library.GLM and Estimator.TMLE_MULTINOMIAL.value in rep.estimates:
                rep.estimates[REFERENCE] = rep.estimates[Estimator.TMLE_MULTINOMIAL.value]
            else:
                ref_bundle = fit_nuisance(
                    d, [PropensitySource.MULTINOMIAL], "glm", winsor, fit_seed, cfg.folds, out_cols, trt_cols
                )
                t = estimate_from_nuisance(d, ref_bundle, Estimator.TMLE_MULTINOMIAL)
                rep.estimates[REFERENCE] = np.array([[r.ate, r.se, r.ci_lo, r.ci_hi] for r in t.rows])
        assert all(v.shape[0] == len(pairs) for v in rep.estimates.values())
    except Exception as exc:  # noqa: BLE001 - recorded, see docstring
        rep.error = f"{type(exc).__name__}: {exc}"
        rep.estimates = {}
    return rep


def _run_one(args: tuple[ScenarioConfig, int]) -> Replication:
    cfg, h = args
    with threadpool_limits(limits=1):
        return run_replication(cfg, h)


@dataclass(frozen=True)
class MetricRow:
    estimator: str
    ref: str
    alt: str
    bias: float
    coverage: float
    ci_width: float
    rel_precision: float


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    replications: list[Replication]
    metrics: list[MetricRow]

    @property
    def failures(self) -> list[Replication]:
        return [r for r in self.replications if r.error is not None]

    @property
    def n_ok(self) -> int:
        return len(self.replications) - len(self.failures)

    def average(self, estimator: str) -> MetricRow:
        for m in self.metrics:
            if m.estimator == estimator and m.ref == "avg":
                return m
        raise KeyError(estimator)

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "replications": len(self.replications),
            "failed": len(self.failures),
            "failures": {str(r.h): r.error for r in self.failures},
            "averages": {
                m.estimator: {
                    "bias": m.bias,
                    "coverage": m.coverage,
                    "ci_width": m.ci_width,
                    "rel_precision": None if np.isnan(m.rel_precision) else m.rel_precision,
                }
                for m in self.metrics
                if m.ref == "avg"
            },
        }


class ReplicationFailureError(RuntimeError):
    """More than 20% of replications failed; ``result`` holds what did run."""

    def __init__(self, result: ScenarioResult):
        super().__init__(f"{len(result.failures)} of {len(result.replications)} replications failed")
        self.result = result


def compute_metrics(cfg: ScenarioConfig, reps: list[Replication]) -> list[MetricRow]:
    """Per-pair and pair-averaged bias, coverage, CI width and relative precision."""
    ok = [r for r in reps if r.error is None]
    pairs = level_pairs(cfg.J)
    rows: list[MetricRow] = []
    if not ok:
        return rows
    truth = np.array([[r.mu_true[b - 1] - r.mu_true[a - 1] for a, b in pairs] for r in ok])
    ref_var = None
    if REFERENCE in ok[0].estimates:
        ref_est = np.array([r.estimates[REFERENCE][:, 0] for r in ok])
        ref_var = ref_est.var(axis=0, ddof=1) if len(ok) > 1 else None
    for est in cfg.estimators:
        E = np.array([r.estimates[est] for r in ok])  # (H, pairs, 4)
        bias = np.mean(np.abs(E[:, :, 0] - truth), axis=0)
        cover = np.mean((E[:, :, 2] <= truth) & (truth <= E[:, :, 3]), axis=0)
        width = np.mean(E[:, :, 3] - E[:, :, 2], axis=0)
        if ref_var is not None:
            var = E[:, :, 0].var(axis=0, ddof=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(var > 0, ref_var / var, np.nan)
        else:
            rel = np.full(len(pairs), np.nan)
        for k, (a, b) in enumerate(pairs):
            rows.append(MetricRow(est, str(a), str(b), float(bias[k]), float(cover[k]), float(width[k]), float(rel[k])))
        rows.append(
            MetricRow(est, "avg", "avg", float(bias.mean()), float(cover.mean()), float(width.mean()),
                      float(np.mean(rel)) if np.all(np.isfinite(rel)) else float("nan"))
        )
    return rows


def default_threads() -> int:
    env = os.environ.get("MVTMLE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_scenario(cfg: ScenarioConfig, threads: int | None = None, raise_on_failure: bool = True) -> ScenarioResult:
    """Run all H replications and aggregate in replication order."""
    threads = default_threads() if threads is None else max(1, threads)
    jobs = [(cfg, h) for h in range(1, cfg.H + 1)]
    if threads == 1 or cfg.H == 1:
        reps = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(threads, cfg.H)) as pool:
            reps = list(pool.map(_run_one, jobs, chunksize=1))
    result = ScenarioResult(cfg, reps, compute_metrics(cfg, reps))
    if raise_on_failure and len(result.failures) > FAILURE_LIMIT * cfg.H:
        raise ReplicationFailureError(result)
    return result


# --- output ------------------------------------------------------------------------


def _num(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


SCENARIO_KEYS = ("scenario", "overlap", "event_rate", "covariate_regime", "misspec", "learner_library")


def _scenario_cells(idx: int, cfg: ScenarioConfig) -> list[str]:
    return [str(idx), cfg.overlap.value, cfg.event_rate.value, cfg.covariate_regime.value,
            cfg.misspec.value, cfg.learner_library.value]


def write_results(results: Sequence[ScenarioResult], out_dir: str | Path, extra: dict | None = None) -> None:
    """metrics.csv (wide, per pair), raw_estimates.csv (long) and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*SCENARIO_KEYS, "estimator", "ref", "alt", "bias", "coverage", "ci_width", "rel_precision", "n_ok"])
        for i, res in enumerate(results, start=1):
            for m in res.metrics:
                w.writerow([*_scenario_cells(i, res.config), m.estimator, m.ref, m.alt, _num(m.bias),
                            _num(m.coverage), _num(m.ci_width), _num(m.rel_precision), res.n_ok])
    with open(out / "raw_estimates.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "h", "estimator", "ref", "alt", "true_ate", "ate", "se", "ci_lo", "ci_hi"])
        for i, res in enumerate(results, start=1):
            pairs = level_pairs(res.config.J)
            for rep in res.replications:
                if rep.error is not None:
                    continue
                for est, E in rep.estimates.items():
                    for k, (a, b) in enumerate(pairs):
                        true = rep.mu_true[b - 1] - rep.mu_true[a - 1]
                        w.writerow([i, rep.h, est, a, b, _num(true), *(_num(v) for v in E[k])])
    doc = {"scenarios": [res.summary() for res in results]}
    if extra:
        doc.update(extra)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def with_overrides(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
