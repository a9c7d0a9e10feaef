"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one PASS/FAIL line (collected in the terminal summary)
and then asserts.  The Monte-Carlo criteria run at their stated n and H
with GLM learners where that is the stated library.  The super-learner
coverage criterion first times a pilot replication; the full 200-replication
run is attempted only when the projected wall time fits the one-hour budget
on this machine, or when MVTMLE_ACCEPTANCE_FULL=1 forces it.
"""

import json
import os
import time
import warnings

import numpy as np
import pytest

from mvtmle.cli import main as cli_main
from mvtmle.data import Dataset, PropensityMatrix, PropensitySource
from mvtmle.diagnostics import effective_sample_size, ess
from mvtmle.estimators import (
    Estimator,
    NuisanceBundle,
    estimate_from_nuisance,
    fit_nuisance,
    fit_treatment_model,
    influence_curve,
    level_pairs,
    make_nuisance,
    tmle_fluctuate_multinomial,
    updated_outcome,
)
from mvtmle.learners import (
    LearnerSpec,
    binomial_grad,
    binomial_nll,
    fit_binomial_glm,
    fit_multinomial_glm,
    multinomial_grad,
    multinomial_nll,
    predict_proba,
    sl_library,
)
from mvtmle.learners.base import add_intercept
from mvtmle.simulation.dgp import (
    EventRate,
    Overlap,
    gen_covariates_6,
    gen_potential_outcomes,
    gen_treatment,
    generate,
)
from mvtmle.simulation.engine import ScenarioConfig, default_threads, run_scenario
from mvtmle.super_learner import Target, fit_super_learner

from . import fixtures as fx

pytestmark = [pytest.mark.filterwarnings("ignore::RuntimeWarning"), pytest.mark.slow]

SEED = 20240601


def _span(v):
    return float(np.min(v)), float(np.max(v))


def _span_ok(got, want, tol):
    return abs(got[0] - want[0]) <= tol and abs(got[1] - want[1]) <= tol


def _fmt_span(s):
    return f"[{s[0]:.3f}, {s[1]:.3f}]"


# 1 --------------------------------------------------------------------------------


def test_c01_treatment_marginals(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    X = gen_covariates_6(100_000, rng)
    marg = {
        o: np.bincount(gen_treatment(X, o, 6, rng) - 1, minlength=6) / X.shape[0]
        for o in (Overlap.ADEQUATE, Overlap.INADEQUATE, Overlap.RCT)
    }
    elapsed = time.perf_counter() - t0
    adequate, inadequate = _span(marg[Overlap.ADEQUATE]), _span(marg[Overlap.INADEQUATE])
    checks = {
        "adequate": _span_ok(adequate, (0.087, 0.256), 0.02),
        "inadequate": _span_ok(inadequate, (0.039, 0.339), 0.02),
        "rct": bool(np.all(np.abs(marg[Overlap.RCT] - 1 / 6) <= 0.01)),
        "runtime": elapsed < 10,
    }
    ok = all(checks.values())
    detail = (
        f"adequate {_fmt_span(adequate)} vs [0.087, 0.256]; inadequate {_fmt_span(inadequate)} vs "
        f"[0.039, 0.339]; rct {_fmt_span(_span(marg[Overlap.RCT]))}; {elapsed:.1f}s; "
        f"failing: {[k for k, v in checks.items() if not v] or 'none'}"
    )
    assert record(1, "treatment-assignment marginals", ok, detail)


# 2 --------------------------------------------------------------------------------


def test_c02_event_rates(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED + 1)
    X = gen_covariates_6(100_000, rng)
    rates = {e: gen_potential_outcomes(X, e, 6, rng).mean(axis=0) for e in EventRate}
    elapsed = time.perf_counter() - t0
    low, moderate = _span(rates[EventRate.LOW]), _span(rates[EventRate.MODERATE])
    overall = float(rates[EventRate.NO_EFFECT].mean())
    checks = {
        "low": _span_ok(low, (0.035, 0.554), 0.03),
        "moderate": _span_ok(moderate, (0.211, 0.996), 0.03),
        "no_effect": abs(overall - 0.731) <= 0.01,
        "runtime": elapsed < 10,
    }
    ok = all(checks.values())
    detail = (
        f"low {_fmt_span(low)} vs [0.035, 0.554]; moderate {_fmt_span(moderate)} vs [0.211, 0.996]; "
        f"no-effect {overall:.4f} vs 0.731; {elapsed:.1f}s; "
        f"failing: {[k for k, v in checks.items() if not v] or 'none'}"
    )
    assert record(2, "potential-outcome event rates", ok, detail)


# 3 --------------------------------------------------------------------------------


def test_c03_nominal_coverage_rct(record):
    threads = default_threads()
    cfg = ScenarioConfig(
        n=2000, H=300, overlap="rct", event_rate="no_effect", learner_library="glm",
        estimators=("tmle-multinomial", "tmle-binomial"), master_seed=SEED, relative_precision=False,
    )
    t0 = time.perf_counter()
    res = run_scenario(cfg, threads=threads)
    elapsed = time.perf_counter() - t0
    cov = {e: res.average(e).coverage for e in cfg.estimators}
    # the 10 minute budget is stated for 8 cores; scale it to the cores used
    budget = 600 * 8 / min(threads, 8)
    ok = all(0.92 <= c <= 0.98 for c in cov.values()) and elapsed < budget
    detail = (
        f"coverage multinomial {cov['tmle-multinomial']:.3f}, binomial {cov['tmle-binomial']:.3f}; "
        f"{res.n_ok}/{cfg.H} reps ok; {elapsed:.0f}s on {threads} core(s), budget {budget:.0f}s"
    )
    assert record(3, "TMLE coverage in RCT / no effect", ok, detail)


# 4 --------------------------------------------------------------------------------


def test_c04_coverage_ordering_super_learner(record):
    threads = default_threads()
    cfg = ScenarioConfig(
        n=2000, H=200, overlap="adequate", event_rate="low", learner_library="sl",
        estimators=("tmle-multinomial", "tmle-binomial"), master_seed=SEED, relative_precision=False,
    )
    forced = os.environ.get("MVTMLE_ACCEPTANCE_FULL") == "1"
    pilot_h = max(1, threads)
    t0 = time.perf_counter()
    pilot = run_scenario(ScenarioConfig(**{**cfg.to_dict(), "H": pilot_h}), threads=threads, raise_on_failure=False)
    per_rep = (time.perf_counter() - t0) / pilot_h
    projected = per_rep * cfg.H / threads
    if projected > 3600 and not forced:
        detail = (
            f"not run: pilot {per_rep:.0f}s per replication on {threads} core(s) projects "
            f"{projected / 3600:.1f}h for H=200, over the 1h budget (pilot ok={pilot.n_ok}/{pilot_h}); "
            "set MVTMLE_ACCEPTANCE_FULL=1 to run anyway"
        )
        assert record(4, "SL coverage ordering, adequate / low", False, detail)
    t0 = time.perf_counter()
    res = run_scenario(cfg, threads=threads)
    elapsed = time.perf_counter() - t0
    cm, cb = res.average("tmle-multinomial").coverage, res.average("tmle-binomial").coverage
    ok = cm >= cb - 0.01 and elapsed < 3600
    detail = f"coverage multinomial {cm:.3f} vs binomial {cb:.3f}; {res.n_ok}/200 ok; {elapsed:.0f}s"
    assert record(4, "SL coverage ordering, adequate / low", ok, detail)


# 5 --------------------------------------------------------------------------------


@pytest.mark.parametrize("regime,overlap,event_rate,n", [
    ("three_level", "adequate", "moderate", 800),
    ("standard6", "adequate", "low", 1500),
    ("standard6", "inadequate", "moderate", 1200),
    ("standard6", "rct", "no_effect", 1000),
])
def test_c05_score_and_ic_identities(record, regime, overlap, event_rate, n):
    t0 = time.perf_counter()
    d, _ = generate(regime, overlap, event_rate, n, np.random.default_rng(SEED + n))
    bundle = fit_nuisance(d, [PropensitySource.MULTINOMIAL], "glm", None, seed=1)
    nf = bundle.fits(d, PropensitySource.MULTINOMIAL)
    fl = tmle_fluctuate_multinomial(d, nf)
    E1 = updated_outcome(nf, fl)
    P = nf.propensities.probs
    resid = d.outcomes - E1[np.arange(d.n), d.codes]
    score = max(abs(float(np.sum((d.codes == j) * resid / P[:, j]))) for j in range(d.level_count))
    mu = E1.mean(axis=0)
    ic_mean = max(
        abs(float(influence_curve(d, E1, P, a, b, mu[b - 1] - mu[a - 1]).mean())) for a, b in level_pairs(d.level_count)
    )
    elapsed = time.perf_counter() - t0
    ok = fl.converged and score <= 1e-8 and ic_mean <= 1e-8 and elapsed < 1.0
    detail = f"{regime}/{overlap}/{event_rate}: max score {score:.1e}, max |mean IC| {ic_mean:.1e}, {elapsed:.2f}s"
    prev = _previous(5)
    assert record(5, "score and influence-curve identities", ok and prev, _join(5, detail))


def _previous(num):
    from .conftest import ACCEPTANCE

    return ACCEPTANCE.get(num, ("", True, ""))[1]


def _join(num, detail):
    from .conftest import ACCEPTANCE

    old = ACCEPTANCE.get(num, ("", True, ""))[2]
    return f"{old}; {detail}" if old else detail


# 6 --------------------------------------------------------------------------------


def test_c06_fixture_oracles(record):
    d = fx.dataset()
    nf = make_nuisance(d, np.array(fx.P), np.array(fx.E0))
    bundle = NuisanceBundle({PropensitySource.MULTINOMIAL: nf.propensities}, nf.initial_outcome.preds, {})
    eps, mu_t = fx.oracle_tmle_mu()
    E1 = [[fx.expit(fx.logit(fx.E0[i][j]) + eps[j] / fx.P[i][j]) for j in range(3)] for i in range(6)]
    mu_g = [sum(fx.E0[i][j] for i in range(6)) / 6 for j in range(3)]
    mu_w = [sum(fx.Y[i] / fx.P[i][j] for i in range(6) if fx.A[i] == j + 1) / 6 for j in range(3)]
    worst = 0.0
    for est, (E, mu) in {
        Estimator.TMLE_MULTINOMIAL: (E1, mu_t),
        Estimator.GCOMP: (fx.E0, mu_g),
        Estimator.IPTW_MULTINOMIAL: (fx.E0, mu_w),
    }.items():
        for r in estimate_from_nuisance(d, bundle, est).rows:
            worst = max(worst, abs(r.ate - (mu[r.alt - 1] - mu[r.ref - 1])),
                        abs(r.se - fx.oracle_se(E, mu, r.ref, r.alt)))
    eps_err = float(np.max(np.abs(tmle_fluctuate_multinomial(d, nf).epsilons - eps)))
    ok = worst <= 1e-10 and eps_err <= 1e-10
    assert record(6, "6-row fixture oracles", ok, f"max estimate/SE error {worst:.1e}, epsilon error {eps_err:.1e}")


# 7 --------------------------------------------------------------------------------


def _fd(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        e = np.zeros_like(theta)
        e[idx] = h
        g[idx] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def test_c07_learner_correctness(record):
    rng = np.random.default_rng(SEED)
    Z = add_intercept(rng.normal(size=(300, 4)))
    y = rng.integers(0, 2, 300).astype(float)
    labels = rng.integers(0, 4, 300)
    rel = 0.0
    for _ in range(10):
        b = rng.normal(size=5)
        fd = _fd(lambda t: binomial_nll(t, Z, y), b)
        rel = max(rel, np.linalg.norm(binomial_grad(b, Z, y) - fd) / np.linalg.norm(fd))
        B = rng.normal(size=(5, 3))
        fd = _fd(lambda t: multinomial_nll(t, Z, labels), B)
        rel = max(rel, np.linalg.norm(multinomial_grad(B, Z, labels) - fd) / np.linalg.norm(fd))

    lab = np.repeat([0, 1, 2, 3], [30, 50, 15, 5])
    freq = np.bincount(lab) / lab.size
    P = predict_proba(fit_multinomial_glm(np.zeros((100, 0)), lab), np.zeros((1, 0)))[0]
    yb = (lab == 1).astype(int)
    pb = predict_proba(fit_binomial_glm(np.zeros((100, 0)), yb), np.zeros((1, 0)))[0, 1]
    freq_err = max(float(np.max(np.abs(P - freq))), abs(pb - 0.5))

    X = rng.normal(size=(600, 3))
    y2 = (rng.random(600) < 1 / (1 + np.exp(-(X @ [0.8, -0.4, 0.3])))).astype(int)
    eq_err = float(np.max(np.abs(predict_proba(fit_multinomial_glm(X, y2), X) - predict_proba(fit_binomial_glm(X, y2), X))))
    ok = rel <= 1e-5 and freq_err <= 1e-8 and eq_err <= 1e-6
    detail = f"gradient rel. error {rel:.1e}, intercept-only error {freq_err:.1e}, J=2 equivalence {eq_err:.1e}"
    assert record(7, "learner correctness", ok, detail)


# 8 --------------------------------------------------------------------------------


def test_c08_super_learner_weights(record):
    worst_simplex, worst_gap = 0.0, -np.inf
    for seed in range(3):
        rng = np.random.default_rng(SEED + seed)
        n = 500
        X = rng.normal(size=(n, 4))
        eta = np.column_stack([np.zeros(n), X[:, 0] - 0.5 * X[:, 1] ** 2, 0.7 * X[:, 2] * X[:, 3]])
        P = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
        labels = (rng.random(n)[:, None] > np.cumsum(P, axis=1)).sum(axis=1)
        specs = [*sl_library(seed), LearnerSpec("multinomial_glm")]
        ens = fit_super_learner(specs, X, labels, Target.MULTINOMIAL_TREATMENT, 5, seed, 3)
        w = ens.weights
        worst_simplex = max(worst_simplex, abs(w.sum() - 1), float(max(0.0, -w.min())))
        worst_gap = max(worst_gap, ens.cv_nll_ensemble - float(ens.cv_nll_per_member.min()))
    ok = worst_simplex <= 1e-10 and worst_gap <= 1e-8
    detail = f"simplex violation {worst_simplex:.1e}; ensemble minus best member CV NLL {worst_gap:.2e} (max of 3)"
    assert record(8, "super-learner weights and CV loss", ok, detail)


# 9 --------------------------------------------------------------------------------


def test_c09_ess(record):
    formula = effective_sample_size(np.array([1.0, 1.0, 2.0, 2.0]))
    rng = np.random.default_rng(SEED)
    n = 1000
    a = rng.integers(1, 5, n)
    raw = rng.uniform(0.02, 1, (n, 4))
    d = Dataset(np.zeros(n), a, rng.normal(size=(n, 1)), 4)
    e, _ = ess(d, PropensityMatrix(raw / raw.sum(axis=1, keepdims=True)))
    counts = np.bincount(a - 1)
    bounded = bool(np.all(e <= counts + 1e-9))
    e_const, _ = ess(d, PropensityMatrix(np.full((n, 4), 0.25)))
    equal = bool(np.all(e_const == counts))

    drct, _ = generate("standard6", "rct", "no_effect", 3000, np.random.default_rng(SEED + 9))
    intercept = LearnerSpec("elastic_net", lambda_grid=(1e6,), name="intercept_only")
    ratios = []
    for src in PropensitySource:
        pm, _ = fit_treatment_model(drct, src, [intercept], seed=0)
        ratios.append(ess(drct, pm)[1])
    rct_one = all(bool(np.all(r == 1.0)) for r in ratios)
    ok = formula == pytest.approx(3.6, abs=1e-12) and bounded and equal and rct_one
    detail = f"(1,1,2,2) -> {formula:.12g}; ESS <= n_j {bounded}; constant weights equal {equal}; RCT ratios 1 {rct_one}"
    assert record(9, "effective sample size", ok, detail)


# 10 -------------------------------------------------------------------------------


def test_c10_misspecification_robustness(record):
    threads = default_threads()
    base = dict(n=2000, H=200, overlap="adequate", event_rate="low", learner_library="glm",
                master_seed=SEED, relative_precision=False)
    trt = run_scenario(ScenarioConfig(**base, misspec="omit_x6_treatment"), threads=threads)
    out = run_scenario(ScenarioConfig(**base, misspec="omit_x6_outcome"), threads=threads)
    tm = [trt.average(e).bias for e in ("tmle-multinomial", "tmle-binomial")]
    iptw = min(trt.average(e).bias for e in ("iptw-multinomial", "iptw-binomial"))
    to = [out.average(e).bias for e in ("tmle-multinomial", "tmle-binomial")]
    gcomp = out.average("gcomp").bias
    ok = min(tm) < iptw and min(to) < gcomp
    detail = (
        f"treatment model misspecified: TMLE {tm[0]:.4f}/{tm[1]:.4f} vs IPTW {iptw:.4f} ({trt.n_ok}/200 ok); "
        f"outcome model misspecified: TMLE {to[0]:.4f}/{to[1]:.4f} vs G-comp {gcomp:.4f} ({out.n_ok}/200 ok)"
    )
    assert record(10, "double robustness under x6 omission", ok, detail)


# 11 -------------------------------------------------------------------------------


def test_c11_determinism(record, tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"n": 500, "reps": 4, "covariate_regime": "three_level", "library": "glm",
                               "grid": {"overlap": ["adequate", "rct"]}}))
    d, _ = generate("three_level", "adequate", "moderate", 600, np.random.default_rng(SEED))
    from mvtmle.data import write_csv

    data = tmp_path / "d.csv"
    write_csv(d, data)
    runs = []
    for tag in ("a", "b"):
        sim = tmp_path / f"sim_{tag}"
        est = tmp_path / f"est_{tag}"
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            codes = (
                cli_main(["simulate", "--config", str(cfg), "--seed", "5", "--threads", "2", "--out", str(sim)]),
                cli_main(["estimate", "--data", str(data), "--outcome", "y", "--treatment", "a",
                          "--covariates", "x1,x2,x3,x4,x5,x6", "--estimator", ",".join(e.value for e in Estimator),
                          "--seed", "5", "--threads", "2", "--sl", "--out", str(est)]),
            )
        runs.append((codes, sim, est))
    files = [("sim", n) for n in ("metrics.csv", "raw_estimates.csv")] + [
        ("est", n) for n in ("estimates.csv", "ensemble_report.csv", "overlap.csv", "balance.csv")
    ]
    same = all(
        (runs[0][1 if kind == "sim" else 2] / name).read_bytes() == (runs[1][1 if kind == "sim" else 2] / name).read_bytes()
        for kind, name in files
    )
    ok = same and runs[0][0] == runs[1][0] == (0, 0)
    assert record(11, "byte-identical reruns", ok, f"exit codes {runs[0][0]}, {len(files)} CSV files identical: {same}")
