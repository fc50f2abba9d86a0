"""
Pre-analysis diagnostics: visit counts, ICC, random-effect correlation and
covariate association with the intervals.
"""
import math

import numpy as np
import pandas as pd
import pytest

from engine.engine import FitResult
from models.lmm import LmmSpec
from models.samplers.studySampler import simulate_study
from utils.diagnostics import (FRAILTY_NOTE, DiagnosticThresholds, DiagnosticUnavailable,
                               covariate_association_diagnostic, diagnose, flag_above, flag_below, flag_exceeds,
                               icc_diagnostic, re_correlation_diagnostic, visits_summary)

from conftest import make_dataset

Y_TREND = LmmSpec(fixed=("intercept", "time"), random=("intercept",))
R_TREND = LmmSpec(fixed=("intercept", "time"), random=("intercept",), response="r")


def _counts_dataset(counts):
    return make_dataset([(list(np.arange(n, dtype=float)), [0.0] * n) for n in counts], tau=200.0)


class TestFlags:

    @pytest.mark.parametrize("high,moderate", [(0.3, 0.15), (0.5, 0.5), (0.9, 0.0)])
    def test_monotone_in_value(self, high, moderate):
        order = {"low": 0, "moderate": 1, "high": 2}
        values = np.linspace(-0.5, 1.5, 41)
        levels = [order[flag_above(v, high, moderate)] for v in values]
        assert levels == sorted(levels)
        levels = [order[flag_below(v, high, moderate)] for v in values]
        assert levels == sorted(levels, reverse=True)

    def test_boundaries(self):
        assert flag_above(0.3, 0.3, 0.15) == "high"
        assert flag_above(0.15, 0.3, 0.15) == "moderate"
        assert flag_below(6.0, 6.0, 8.0) == "moderate"
        assert flag_below(5.9, 6.0, 8.0) == "high"

    def test_nan_is_low(self):
        assert flag_above(math.nan, 0.3, 0.15) == "low"

    def test_thresholds_must_be_ordered(self):
        with pytest.raises(AssertionError):
            DiagnosticThresholds(icc_high=0.1, icc_moderate=0.2)

    def test_thresholds_from_config(self):
        thresholds = DiagnosticThresholds.from_config({"icc_high": 0.5, "unrelated": 3})
        assert thresholds.icc_high == 0.5
        assert thresholds.corr_high == DiagnosticThresholds().corr_high


class TestVisitsSummary:

    def test_constant_counts(self):
        result = visits_summary(_counts_dataset([5] * 10))
        assert result.details["mean"] == 5.0
        assert result.details["median"] == 5.0
        assert result.details["iqr"] == 0.0
        assert result.flag == "high"

    def test_uniform_counts(self):
        result = visits_summary(_counts_dataset(range(1, 101)))
        assert result.details["median"] == 50.5
        assert result.details["min"] == 1.0
        assert result.details["max"] == 100.0
        assert result.flag == "low"


class TestIcc:

    def test_high_icc_is_flagged(self, engine, toy_dataset):
        result = icc_diagnostic(toy_dataset, LmmSpec(fixed=("intercept",), random=("intercept",)), engine=engine)
        assert result.value > 0.9
        assert result.flag == "high"

    def test_thresholds_above_value(self, engine, toy_dataset):
        thresholds = DiagnosticThresholds(icc_high=0.999, icc_moderate=0.995)
        result = icc_diagnostic(toy_dataset, LmmSpec(fixed=("intercept",), random=("intercept",)),
                                thresholds=thresholds, engine=engine)
        assert result.flag == "low"


class TestReCorrelation:

    def test_identical_outcome_and_interval(self, engine, scenario):
        ds = simulate_study(scenario("study1"), 60, 11)
        ds = ds.replace_subjects([s.with_r(s.y) for s in ds])
        result, scatter = re_correlation_diagnostic(ds, Y_TREND, R_TREND, engine=engine)
        assert result.value == pytest.approx(1.0, abs=1e-6)
        assert result.flag == "high"
        assert isinstance(scatter, pd.DataFrame)
        assert len(scatter) == 60

    def test_missing_r(self, engine, scenario):
        ds = simulate_study(scenario("intercept_only"), 20, 1)
        with pytest.raises(DiagnosticUnavailable):
            re_correlation_diagnostic(ds, LmmSpec(fixed=("intercept",)), R_TREND, engine=engine)

    def test_interval_model_must_describe_r(self, engine, scenario):
        ds = simulate_study(scenario("study1"), 20, 1)
        with pytest.raises(ValueError):
            re_correlation_diagnostic(ds, Y_TREND, Y_TREND, engine=engine)

    def test_subject_order(self, engine, scenario):
        ds = simulate_study(scenario("study1"), 50, 5)
        first, _ = re_correlation_diagnostic(ds, Y_TREND, R_TREND, engine=engine)
        order = np.random.default_rng(0).permutation(len(ds))
        second, _ = re_correlation_diagnostic(ds.reordered(order), Y_TREND, R_TREND, engine=engine)
        assert second.value == pytest.approx(first.value, abs=1e-4)


class FixedEstimateEngine(object):
    """Returns a preset covariate estimate and SE instead of fitting."""

    def __init__(self, estimate, se):
        self._estimate, self._se = estimate, se

    def fit_lmm(self, ds, spec):
        name = spec.fixed[-1]
        return FitResult(model_type="univariate", spec=spec.to_dict(), beta={"intercept": 0.0, name: self._estimate},
                         variance={"sd(intercept)": 1.0, "sigma_eps": 1.0}, se_beta={"intercept": 1.0, name: self._se},
                         converged=True)


def _two_arm_dataset():
    return make_dataset([([0.0, 1.0], [1.0, 2.0]), ([0.0, 2.0], [0.0, 1.0]), ([0.0, 1.5], [2.0, 2.5])],
                        with_r=True, baseline={"arm": [0.0, 1.0, 1.0]})


class TestCovariateAssociation:

    @pytest.mark.parametrize("estimate,se,expected", [
        (2.0, 1.0, "moderate"),
        (2.0001, 1.0, "high"),
        (-1.0, 1.0, "low"),
        (0.5, 0.0, "high"),
        (0.0, 0.0, "low"),
        (1.0, math.nan, "low"),
    ])
    def test_flag_needs_estimate_beyond_two_se(self, estimate, se, expected):
        result = covariate_association_diagnostic(_two_arm_dataset(), "arm", engine=FixedEstimateEngine(estimate, se))
        assert result.flag == expected

    def test_exceeds_is_strict(self):
        assert flag_exceeds(2.0, 2.0, 1.0) == "moderate"
        assert flag_exceeds(math.inf, 2.0, 1.0) == "high"
        assert flag_exceeds(math.nan, 2.0, 1.0) == "low"

    def test_treatment_drives_intervals(self, engine, scenario):
        ds = simulate_study(scenario("study2"), 200, 3)
        result = covariate_association_diagnostic(ds, "treatment", engine=engine)
        assert result.details["response"] == "r"
        assert result.value < 0.0
        assert result.flag == "high"

    def test_unknown_covariate(self, engine, scenario):
        ds = simulate_study(scenario("study2"), 20, 3)
        with pytest.raises(KeyError):
            covariate_association_diagnostic(ds, "age", engine=engine)

    def test_constant_covariate(self, engine):
        ds = make_dataset([([0.0, 1.0], [1.0, 2.0]), ([0.0, 2.0], [0.0, 1.0])], with_r=True,
                          baseline={"site": [1.0, 1.0]})
        with pytest.raises(ValueError):
            covariate_association_diagnostic(ds, "site", engine=engine)

    def test_falls_back_to_observed_intervals(self, engine, scenario):
        ds = simulate_study(scenario("binary_baseline"), 60, 2)
        result = covariate_association_diagnostic(ds, "x", engine=engine)
        assert result.details["response"] == "s"


class TestDiagnose:

    def test_without_r(self, engine, scenario):
        ds = simulate_study(scenario("binary_baseline"), 40, 4)
        report = diagnose(ds, LmmSpec(fixed=("intercept", "x")), covariates=["x"], engine=engine)
        assert FRAILTY_NOTE in report.notes
        assert "re_correlation" in report.failures
        assert {"visits", "icc", "covariate:x"} <= set(report.flags)

    def test_failure_does_not_stop_others(self, engine, scenario):
        ds = simulate_study(scenario("study2"), 40, 4)
        report = diagnose(ds, Y_TREND, R_TREND, covariates=["age"], engine=engine)
        assert "covariate:age" in report.failures
        assert {"visits", "icc", "re_correlation"} <= set(report.flags)
        assert report.scatter is not None

    def test_recommendation(self, engine, scenario):
        ds = simulate_study(scenario("study2"), 120, 4)
        report = diagnose(ds, Y_TREND, R_TREND, covariates=["treatment"], engine=engine)
        assert report.result("covariate:treatment").flag == "high"
        assert report.recommendation.startswith("consider joint model")
        assert report.to_dict()["flags"] == report.flags

    @pytest.mark.slow
    @pytest.mark.parametrize("name,linked", [("study1", True), ("decoupled", False)])
    def test_majority_over_replications(self, engine, scenario, model_config, name, linked):
        y_spec = LmmSpec.from_config(model_config(name)["univariate"])
        r_spec = LmmSpec.from_config(model_config(name)["interval"])
        votes = 0
        for rep in range(50):
            report = diagnose(simulate_study(scenario(name), 200, rep), y_spec, r_spec, engine=engine)
            if linked:
                votes += report.recommendation.startswith("consider joint model")
            else:
                votes += not report.failures and all(flag == "low" for flag in report.flags.values())
        assert votes > 25
