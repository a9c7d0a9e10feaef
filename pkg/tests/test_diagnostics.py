import csv
import math

import numpy as np
import pytest

from mvtmle.data import Dataset, PropensityMatrix, PropensitySource
from mvtmle.diagnostics import (
    covariate_balance,
    effective_sample_size,
    ess,
    overlap_summary,
    write_overlap_reports,
)
from mvtmle.estimators import fit_treatment_model
from mvtmle.learners import LearnerSpec
from mvtmle.simulation.dgp import generate


def test_ess_formula():
    assert effective_sample_size(np.array([1.0, 1.0, 2.0, 2.0])) == pytest.approx(3.6, abs=1e-15)
    assert effective_sample_size(np.full(7, 3.3)) == 7.0
    assert math.isnan(effective_sample_size(np.array([])))


def test_ess_bounded_by_level_size():
    rng = np.random.default_rng(0)
    n = 500
    a = rng.integers(1, 4, n)
    raw = rng.uniform(0.05, 1, (n, 3))
    pm = PropensityMatrix(raw / raw.sum(axis=1, keepdims=True))
    d = Dataset(np.zeros(n), a, rng.normal(size=(n, 2)), 3)
    e, ratio = ess(d, pm)
    counts = np.bincount(a - 1)
    assert np.all(e <= counts + 1e-9)
    np.testing.assert_allclose(ratio, e / counts)


def test_ess_empty_level_is_nan():
    d = Dataset([0, 1, 0], [1, 1, 2], np.zeros((3, 1)), 3)
    e, ratio = ess(d, PropensityMatrix(np.full((3, 3), 1 / 3)))
    assert math.isnan(e[2]) and math.isnan(ratio[2])
    assert e[0] == 2.0 and ratio[0] == 1.0


def test_rct_intercept_only_ratio_exactly_one():
    rng = np.random.default_rng(1)
    d, _ = generate("standard6", "rct", "no_effect", 3000, rng)
    # heavy penalty: slopes are zero, propensities equal the level frequencies
    spec = LearnerSpec("elastic_net", lambda_grid=(1e6,), name="intercept_only")
    for src in PropensitySource:
        pm, _ = fit_treatment_model(d, src, [spec], seed=0)
        _, ratio = ess(d, pm)
        assert np.all(ratio == 1.0)


def test_overlap_summary_and_csv(tmp_path):
    d = Dataset([0, 1, 0, 1], [1, 2, 1, 2], np.zeros((4, 1)), 2, level_labels=("a", "b"))
    pm = PropensityMatrix(np.array([[0.2, 0.8], [0.4, 0.6], [0.6, 0.4], [0.8, 0.2]]))
    rep = overlap_summary(pm, d)
    lv = rep.levels[0]
    assert (lv.level, lv.n, lv.min, lv.max) == ("a", 2, 0.2, 0.8)
    assert lv.mean == pytest.approx(0.5, abs=1e-15)
    assert lv.sd == pytest.approx(np.std([0.2, 0.4, 0.6, 0.8], ddof=1), abs=1e-15)
    # weights 1/0.2 and 1/0.6 -> (5 + 5/3)^2 / (25 + 25/9)
    assert lv.ess == pytest.approx((5 + 5 / 3) ** 2 / (25 + 25 / 9), abs=1e-12)
    path = tmp_path / "o.csv"
    write_overlap_reports([rep], path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["source", "level", "n", "min", "mean", "max", "sd", "ess", "ess_ratio"]
    assert rows[1][:3] == ["multinomial", "a", "2"]


def test_smd_examples():
    # x1: means 0 vs 2, pooled sd of (0,0,2,2) = 2/sqrt(3)
    X = np.array([[0.0, 5.0], [0.0, 5.0], [2.0, 5.0], [2.0, 5.0]])
    d = Dataset([0, 1, 0, 1], [1, 1, 2, 2], X, 2)
    rep = covariate_balance(d)
    assert rep.rows[0].unadjusted == pytest.approx(2 / (2 / math.sqrt(3)), abs=1e-12)
    assert rep.rows[0].flagged and rep.rows[0].weighted is None
    assert rep.rows[1].zero_variance and rep.rows[1].unadjusted == 0.0 and not rep.rows[1].flagged


def test_smd_uses_largest_pair():
    X = np.array([[0.0], [0.0], [1.0], [1.0], [3.0], [3.0]])
    d = Dataset(np.zeros(6), [1, 1, 2, 2, 3, 3], X, 3)
    sd = np.std(X[:, 0], ddof=1)
    assert covariate_balance(d).rows[0].unadjusted == pytest.approx(3 / sd, abs=1e-12)


def test_smd_scale_invariant_and_weighted_balance():
    rng = np.random.default_rng(2)
    d, _ = generate("three_level", "adequate", "moderate", 4000, rng)
    pm, _ = fit_treatment_model(d, PropensitySource.MULTINOMIAL, "glm")
    rep = covariate_balance(d, pm)
    scaled = Dataset(d.outcomes, d.treatments, d.covariates * 7.5 + 3, 3)
    rep2 = covariate_balance(scaled, pm)
    for a, b in zip(rep.rows, rep2.rows):
        assert a.unadjusted == pytest.approx(b.unadjusted, rel=1e-10)
        assert a.weighted == pytest.approx(b.weighted, rel=1e-10)
    # a correctly specified propensity model balances the covariates
    assert max(r.weighted for r in rep.rows) < max(r.unadjusted for r in rep.rows)
    assert max(r.weighted for r in rep.rows) < 0.1


def test_balance_csvs(tmp_path):
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    d = Dataset([0, 1, 0, 1], [1, 2, 1, 2], X, 2)
    rep = covariate_balance(d, PropensityMatrix(np.full((4, 2), 0.5)))
    rep.write_csv(tmp_path / "b.csv")
    rep.write_long_csv(tmp_path / "l.csv")
    wide = list(csv.reader((tmp_path / "b.csv").open()))
    assert wide[0] == ["covariate", "smd_unadjusted", "smd_weighted", "flag", "zero_variance"]
    assert wide[1][0] == "x1" and wide[1][1] == wide[1][2]
    long = list(csv.reader((tmp_path / "l.csv").open()))
    assert [r[1] for r in long[1:]] == ["unadjusted", "weighted"]
