"""``mvtmle`` command line: simulate, estimate, diagnose.

Exit codes: 0 success, 1 usage/config/input error, 2 too many failed
replications, 3 estimation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from .data import DataError, Dataset, PropensitySource, load_csv
from .diagnostics import covariate_balance, overlap_summary, write_overlap_reports
from .estimators import (
    Estimator,
    PositivityError,
    WinsorConfig,
    check_positivity,
    estimate_from_nuisance,
    fit_nuisance,
    fit_treatment_model,
    winsorize,
    write_estimates,
)
from .simulation.dgp import CovariateRegime, EventRate, Overlap
from .simulation.engine import (
    Library,
    Misspec,
    ReplicationFailureError,
    ScenarioConfig,
    default_threads,
    run_scenario,
    write_results,
)
from .super_learner import write_report_rows

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_ESTIMATION = 0, 1, 2, 3

ESTIMATOR_NAMES = [e.value for e in Estimator]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- schemas -----------------------------------------------------------------------

_SCENARIO_PROPS: dict[str, Any] = {
    "n": {"type": "integer", "minimum": 10},
    "reps": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0},
    "overlap": {"enum": [o.value for o in Overlap]},
    "event_rate": {"enum": [e.value for e in EventRate]},
    "covariate_regime": {"enum": [c.value for c in CovariateRegime]},
    "misspec": {"enum": [m.value for m in Misspec]},
    "library": {"enum": [lib.value for lib in Library]},
    "estimators": {"type": "array", "items": {"enum": ESTIMATOR_NAMES}, "minItems": 1, "uniqueItems": True},
    "winsor": {
        "oneOf": [
            {"type": "null"},
            {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
             "minItems": 2, "maxItems": 2},
        ]
    },
    "folds": {"type": "integer", "minimum": 2},
    "relative_precision": {"type": "boolean"},
}
GRID_KEYS = ("overlap", "event_rate", "covariate_regime", "misspec", "library")

SIMULATE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        **_SCENARIO_PROPS,
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                k: {"type": "array", "items": _SCENARIO_PROPS[k], "minItems": 1, "uniqueItems": True}
                for k in GRID_KEYS
            },
        },
        "scenarios": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "object", "additionalProperties": False, "properties": _SCENARIO_PROPS},
        },
    },
}

ESTIMATE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {"type": "string"},
        "outcome": {"type": "string"},
        "treatment": {"type": "string"},
        "covariates": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "estimators": {"type": "array", "items": {"enum": ESTIMATOR_NAMES}, "minItems": 1, "uniqueItems": True},
        "reference": {"type": ["string", "null"]},
        "winsor": _SCENARIO_PROPS["winsor"],
        "library": _SCENARIO_PROPS["library"],
        "folds": _SCENARIO_PROPS["folds"],
        "seed": _SCENARIO_PROPS["seed"],
        "treatment_model": {"enum": [s.value for s in PropensitySource]},
    },
}


def _load_config(path: str | None, schema: dict) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in {path}: {exc}") from None
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config error at {where}: {exc.message}") from None
    return doc


def git_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _parse_winsor(text: str | None) -> tuple[float, float] | None:
    if text is None or text.lower() == "none":
        return None
    try:
        lo, hi = (float(v) for v in text.split(","))
        WinsorConfig(lo, hi)
    except ValueError as exc:
        raise UsageError(f"--winsor expects 'lo,hi' with 0 < lo < hi < 1 ({exc})") from None
    return lo, hi


def _split_list(text: str | None) -> list[str] | None:
    return None if text is None else [v.strip() for v in text.split(",") if v.strip()]


# --- simulate ----------------------------------------------------------------------


def _scenario_from(doc: dict) -> ScenarioConfig:
    kw: dict[str, Any] = {}
    mapping = {"reps": "H", "seed": "master_seed", "library": "learner_library"}
    for key, value in doc.items():
        if key in ("grid", "scenarios"):
            continue
        if key == "estimators":
            value = tuple(value)
        if key == "winsor" and value is not None:
            value = tuple(value)
        kw[mapping.get(key, key)] = value
    return ScenarioConfig(**kw)


def expand_scenarios(doc: dict) -> list[dict]:
    base = {k: v for k, v in doc.items() if k not in ("grid", "scenarios")}
    if "scenarios" in doc:
        return [{**base, **s} for s in doc["scenarios"]]
    grid = doc.get("grid", {})
    keys = [k for k in GRID_KEYS if k in grid]
    if not keys:
        return [base]
    return [{**base, **dict(zip(keys, combo))} for combo in itertools.product(*(grid[k] for k in keys))]


def cmd_simulate(args: argparse.Namespace) -> int:
    doc = _load_config(args.config, SIMULATE_SCHEMA)
    raw = Path(args.config).read_bytes() if args.config else b""
    overrides: dict[str, Any] = {
        k: v for k, v in (("n", args.n), ("reps", args.reps), ("seed", args.seed), ("library", args.library))
        if v is not None
    }
    if args.estimators:
        overrides["estimators"] = _split_list(args.estimators)
        bad = [e for e in overrides["estimators"] if e not in ESTIMATOR_NAMES]
        if bad:
            raise UsageError(f"unknown estimator(s): {', '.join(bad)}")
    if args.winsor is not None:
        overrides["winsor"] = _parse_winsor(args.winsor)
    docs = [{**s, **overrides} for s in expand_scenarios(doc)]
    try:
        configs = [_scenario_from(s) for s in docs]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    threads = args.threads or default_threads()
    results, partial = [], False
    for cfg in configs:
        try:
            res = run_scenario(cfg, threads=threads)
        except ReplicationFailureError as exc:
            res, partial = exc.result, True
            print(f"warning: {exc}", file=sys.stderr)
        results.append(res)
    extra = {"input_hash": git_hash(raw), "resolved_config": [c.to_dict() for c in configs], "threads": threads}
    write_results(results, args.out, extra)
    return EXIT_PARTIAL if partial else EXIT_OK


# --- estimate / diagnose ------------------------------------------------------------


def _resolve_reference(d: Dataset, ref: str | None) -> int | None:
    if ref is None:
        return None
    labels = d.level_labels or tuple(str(k) for k in range(1, d.level_count + 1))
    if ref in labels:
        return labels.index(ref) + 1
    raise UsageError(f"reference level {ref!r} not among treatment levels {', '.join(labels)}")


def _load_dataset(path: str, outcome: str | None, treatment: str, covariates: Sequence[str]) -> tuple[Dataset, bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read data: {exc}") from None
    try:
        d = load_csv(path, outcome, treatment, list(covariates))
    except (DataError, OSError) as exc:
        raise UsageError(str(exc)) from None
    return d, raw


def _estimate_settings(args: argparse.Namespace) -> dict:
    doc = _load_config(args.config, ESTIMATE_SCHEMA)
    s = {
        "data": doc.get("data"),
        "outcome": doc.get("outcome"),
        "treatment": doc.get("treatment"),
        "covariates": doc.get("covariates"),
        "estimators": doc.get("estimators", ["tmle-multinomial"]),
        "reference": doc.get("reference"),
        "winsor": tuple(doc["winsor"]) if doc.get("winsor") else (None if "winsor" in doc else (0.005, 0.995)),
        "library": doc.get("library", "sl"),
        "folds": doc.get("folds", 5),
        "seed": doc.get("seed", 0),
        "treatment_model": doc.get("treatment_model", "multinomial"),
    }
    for key in ("data", "outcome", "treatment", "reference"):
        if getattr(args, key, None) is not None:
            s[key] = getattr(args, key)
    if args.covariates is not None:
        s["covariates"] = _split_list(args.covariates)
    if getattr(args, "estimator", None):
        s["estimators"] = _split_list(args.estimator)
        bad = [e for e in s["estimators"] if e not in ESTIMATOR_NAMES]
        if bad:
            raise UsageError(f"unknown estimator(s): {', '.join(bad)}")
    if args.winsor is not None:
        s["winsor"] = _parse_winsor(args.winsor)
    if args.library:
        s["library"] = args.library
    if args.seed is not None:
        s["seed"] = args.seed
    if args.folds is not None:
        s["folds"] = args.folds
    if getattr(args, "treatment_model", None):
        s["treatment_model"] = args.treatment_model
    missing = [k for k in ("data", "treatment", "covariates") if not s[k]]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")
    return s


def cmd_estimate(args: argparse.Namespace) -> int:
    s = _estimate_settings(args)
    if not s["outcome"]:
        raise UsageError("missing required setting: outcome")
    d, raw = _load_dataset(s["data"], s["outcome"], s["treatment"], s["covariates"])
    reference = _resolve_reference(d, s["reference"])
    estimators = [Estimator(e) for e in s["estimators"]]
    winsor = None if s["winsor"] is None else WinsorConfig(*s["winsor"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        sources = [src for src in PropensitySource if any(e.propensity_source == src for e in estimators)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            bundle = fit_nuisance(d, sources, s["library"], winsor, s["seed"], s["folds"])
            tables = [estimate_from_nuisance(d, bundle, e, reference) for e in estimators]
    except (PositivityError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    write_estimates(tables, out / "estimates.csv")
    _write_ensemble_report(bundle.ensembles, out / "ensemble_report.csv")
    _write_overlap(d, bundle.propensities, out / "overlap.csv")
    pm_bal = bundle.propensities.get(PropensitySource.MULTINOMIAL) or next(iter(bundle.propensities.values()))
    bal = covariate_balance(d, pm_bal)
    bal.write_csv(out / "balance.csv")
    bal.write_long_csv(out / "balance_long.csv")
    _write_json(
        out / "summary.json",
        {"command": "estimate", "resolved_config": _jsonable(s), "input_hash": git_hash(raw),
         "n": d.n, "levels": list(d.level_labels or ()), "threads": args.threads or default_threads()},
    )
    return EXIT_OK


def _jsonable(s: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in s.items()}


def _write_ensemble_report(ensembles: dict, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "learner", "cv_nll", "weight"])
        for name, ens in ensembles.items():
            write_report_rows(w, ens, name)


def _write_overlap(d: Dataset, props: dict, path: Path) -> None:
    write_overlap_reports([overlap_summary(pm, d) for pm in props.values()], path)


def cmd_diagnose(args: argparse.Namespace) -> int:
    s = _estimate_settings(args)
    d, raw = _load_dataset(s["data"], s["outcome"], s["treatment"], s["covariates"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src = PropensitySource(s["treatment_model"])
    try:
        check_positivity(d)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pm, ensembles = fit_treatment_model(d, src, s["library"], s["seed"], s["folds"])
    except (PositivityError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    if s["winsor"] is not None:
        pm = winsorize(pm, WinsorConfig(*s["winsor"]))
    _write_overlap(d, {src: pm}, out / "overlap.csv")
    bal = covariate_balance(d, pm)
    bal.write_csv(out / "balance.csv")
    bal.write_long_csv(out / "balance_long.csv")
    _write_ensemble_report(ensembles, out / "ensemble_report.csv")
    _write_json(
        out / "summary.json",
        {"command": "diagnose", "resolved_config": _jsonable(s), "input_hash": git_hash(raw),
         "n": d.n, "levels": list(d.level_labels or ()), "threads": args.threads or default_threads()},
    )
    return EXIT_OK


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvtmle", description="Pairwise treatment-effect estimation for multi-valued treatments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker processes (default: $MVTMLE_THREADS or all cores)")
        sp.add_argument("--winsor", help="'lo,hi' propensity bounds, or 'none'")
        lib = sp.add_mutually_exclusive_group()
        lib.add_argument("--sl", dest="library", action="store_const", const="sl", help="super-learner library")
        lib.add_argument("--glm", dest="library", action="store_const", const="glm", help="parametric GLMs only")

    sim = sub.add_parser("simulate", help="run Monte-Carlo scenarios")
    common(sim)
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--estimators", help="comma-separated estimator names")
    sim.set_defaults(func=cmd_simulate)

    def data_args(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--data")
        sp.add_argument("--outcome")
        sp.add_argument("--treatment")
        sp.add_argument("--covariates", help="comma-separated column names")
        sp.add_argument("--folds", type=int)

    est = sub.add_parser("estimate", help="estimate pairwise ATEs from a CSV file")
    common(est)
    data_args(est)
    est.add_argument("--estimator", help=f"comma-separated, from: {', '.join(ESTIMATOR_NAMES)}")
    est.add_argument("--reference", help="reference treatment label")
    est.set_defaults(func=cmd_estimate)

    dia = sub.add_parser("diagnose", help="overlap and balance diagnostics")
    common(dia)
    data_args(dia)
    dia.add_argument("--treatment-model", choices=[s.value for s in PropensitySource])
    dia.set_defaults(func=cmd_diagnose)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
