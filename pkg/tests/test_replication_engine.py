"""
Replication plans, table aggregation and cell contrasts.
"""
import math

import numpy as np
import pandas as pd
import pytest

from engine.engine import FitEngine
from engine.engineBase import ConfigError
from engine.replicationEngine import (TABLE_COLUMNS, ReplicationPlan, ReplicationTable, aggregate, compare_cells,
                                      run_replications, run_table, summarise)

from conftest import load_config, load_scenario


def make_plan(name, **overrides):
    cfg = load_config("plan", name)
    return ReplicationPlan.from_config(cfg, load_scenario(cfg.scenario), load_config("model", cfg.model), **overrides)


def _records(plan, estimates, converged, fitter="univariate"):
    return [{"plan": plan.name, "rep": i, "fitter": fitter, "estimate": e, "se": 0.1, "converged": c,
             "loglik": -1.0, "mean_visits": 3.0} for i, (e, c) in enumerate(zip(estimates, converged))]


def _table(rows):
    frame = pd.DataFrame(rows)
    for column in TABLE_COLUMNS:
        if column not in frame.columns:
            frame[column] = "" if column == "warning" else math.nan
    return ReplicationTable(frame[TABLE_COLUMNS])


# =============================================================================
# Plans
# =============================================================================

class TestReplicationPlan:

    def test_from_config(self):
        plan = make_plan("time_slope_high")
        assert plan.truth == pytest.approx(-0.10)
        assert plan.reps_for("univariate") == 300
        assert plan.reps_for("joint") == 150
        assert plan.cell == "High"

    def test_overrides(self):
        plan = make_plan("time_slope_high", n_reps=20, n_subjects=50, n_reps_joint=None)
        assert plan.n_reps == 20
        assert plan.reps_for("joint") == 20
        assert plan.n_subjects == 50

    def test_variation_changes_truth_source(self):
        plan = make_plan("time_slope_tau_low")
        assert plan.effective_scenario().tau != plan.scenario.tau

    def test_decay_rate_follows_scenario(self):
        plan = make_plan("decay_low")
        specs = plan.fit_specs()
        assert specs["univariate"].decay_rate == 2.0
        assert specs["joint"].decay_rate == 2.0

    def test_too_few_reps(self):
        with pytest.raises(ConfigError) as err:
            make_plan("time_slope_high", n_reps=1)
        assert err.value.field == "n_reps"

    def test_estimand_must_be_fixed_term(self):
        cfg = load_config("plan", "time_slope_high")
        cfg.estimand = "decay"
        with pytest.raises(ConfigError) as err:
            ReplicationPlan.from_config(cfg, load_scenario("study1"), load_config("model", "study1"))
        assert err.value.field == "estimand"

    def test_unknown_fitter(self):
        cfg = load_config("plan", "time_slope_high")
        cfg.fitters = ["univariate", "gee"]
        with pytest.raises(ConfigError):
            ReplicationPlan.from_config(cfg, load_scenario("study1"), load_config("model", "study1"))

    def test_unknown_variation(self):
        cfg = load_config("plan", "time_slope_high")
        cfg.variation = {"gamma9": 1.0}
        with pytest.raises(ConfigError) as err:
            ReplicationPlan.from_config(cfg, load_scenario("study1"), load_config("model", "study1"))
        assert err.value.field == "variation"


# =============================================================================
# Aggregation
# =============================================================================

class TestAggregate:

    def test_summarise(self):
        stats = summarise([1.0, 2.0, 3.0], truth=2.0)
        assert stats["bias"] == 0.0
        assert stats["ese"] == pytest.approx(1.0)
        assert stats["mc_se"] == pytest.approx(1.0 / math.sqrt(3.0))

    def test_summarise_empty(self):
        assert math.isnan(summarise([], truth=1.0)["bias"])

    def test_mc_se_shrinks_with_reps(self, rng):
        draws = rng.normal(size=1600)
        ratio = summarise(draws[:400], 0.0)["mc_se"] / summarise(draws, 0.0)["mc_se"]
        assert ratio == pytest.approx(2.0, abs=0.3)

    def test_percent_scale(self):
        plan = make_plan("unconnected_covariate")
        rows = aggregate(plan, _records(plan, [1.1, 1.3, 1.2, 1.0], [True] * 4))
        row = rows.iloc[0]
        assert row["bias"] == pytest.approx(0.15)
        assert row["pct_rel_bias"] == pytest.approx(15.0)
        assert row["ese_pct"] == pytest.approx(100.0 * row["ese"])
        assert row["warning"] == ""

    def test_low_convergence_adds_warning_row(self):
        plan = make_plan("unconnected_covariate")
        rows = aggregate(plan, _records(plan, np.ones(10), [True] * 7 + [False] * 3))
        assert list(rows["fitter"]) == ["univariate", "WARNING"]
        assert rows.iloc[0]["n_converged"] == 7
        assert rows.iloc[0]["convergence_rate"] == pytest.approx(0.7)
        assert "70.0%" in rows.iloc[1]["warning"]
        assert ReplicationTable(rows).warnings

    def test_non_converged_estimates_excluded(self):
        plan = make_plan("unconnected_covariate")
        rows = aggregate(plan, _records(plan, [1.0, 1.0, 1.0, 1.0, 99.0], [True] * 4 + [False]))
        assert rows.iloc[0]["mean_estimate"] == pytest.approx(1.0)


# =============================================================================
# Contrasts
# =============================================================================

class TestCompareCells:

    ROWS = [
        {"plan": "high", "cell": "High", "fitter": "univariate", "bias": -0.0307, "pct_rel_bias": -30.70,
         "mc_se": 0.0019, "mc_se_pct": 1.9},
        {"plan": "tau_low", "cell": "Low", "fitter": "univariate", "bias": -0.0080, "pct_rel_bias": -8.03,
         "mc_se": 0.0019, "mc_se_pct": 1.9},
        {"plan": "high", "cell": "High", "fitter": "joint", "bias": 0.0063, "pct_rel_bias": 6.34,
         "mc_se": 0.0018, "mc_se_pct": 1.8},
        {"plan": "corr_low", "cell": "Low", "fitter": "univariate", "bias": -0.0100, "pct_rel_bias": -10.0,
         "mc_se": 0.0019, "mc_se_pct": 1.9},
    ]

    def test_identical_cells(self):
        contrast = compare_cells(_table(self.ROWS), "high", "high")
        assert contrast.difference == 0.0
        assert contrast.n_se == 0.0
        assert not contrast.a_exceeds_b

    def test_high_exceeds_low(self):
        contrast = compare_cells(_table(self.ROWS), "high", "tau_low")
        assert contrast.a_exceeds_b
        assert contrast.difference == pytest.approx(30.70 - 8.03)
        assert contrast.n_se == pytest.approx((30.70 - 8.03) / math.hypot(1.9, 1.9))
        assert "exceeds" in contrast.verdict

    def test_joint_below_univariate(self):
        contrast = compare_cells(_table(self.ROWS), "high", "high", fitter_a="joint", fitter_b="univariate")
        assert not contrast.a_exceeds_b
        assert contrast.n_se < 0.0

    def test_ambiguous_cell_label(self):
        with pytest.raises(KeyError):
            compare_cells(_table(self.ROWS), "Low", "high")

    def test_unknown_cell(self):
        with pytest.raises(KeyError):
            compare_cells(_table(self.ROWS), "medium", "high")

    def test_raw_scale_when_truth_is_zero(self):
        rows = [dict(r, pct_rel_bias=math.nan, mc_se_pct=math.nan) for r in self.ROWS[:2]]
        contrast = compare_cells(_table(rows), "high", "tau_low")
        assert contrast.abs_bias_a == pytest.approx(0.0307)


# =============================================================================
# Running plans
# =============================================================================

class TestRunReplications:

    def test_reproducible(self):
        plan = make_plan("unconnected_covariate", n_subjects=40, n_reps=3)
        engine = FitEngine(n_starts=1)
        first = run_replications(plan, engine=engine)
        second = run_replications(plan, engine=engine)
        pd.testing.assert_frame_equal(first.rows, second.rows)
        pd.testing.assert_frame_equal(first.estimates, second.estimates)
        assert len(first.estimates) == 3
        assert list(first.rows.columns) == TABLE_COLUMNS

    def test_text_layout(self):
        plan = make_plan("unconnected_covariate", n_subjects=40, n_reps=2)
        table = run_replications(plan, engine=FitEngine(n_starts=1))
        text = table.to_text()
        assert text.startswith("Plan unconnected_covariate")
        assert "% rel. bias (ESE)" in text

    def test_table_of_cells(self):
        plans = [make_plan(name, n_subjects=30, n_reps=2) for name in ("unconnected_covariate", "ignorable")]
        table = run_table(plans, engine=FitEngine(n_starts=1))
        assert set(table.rows["plan"]) == {"unconnected_covariate", "ignorable"}
        assert table.lookup("ignorable")["cell"] == "zero"

    @pytest.mark.slow
    def test_joint_fitter_rows(self):
        plan = make_plan("decoupled", n_subjects=60, n_reps=4)
        table = run_replications(plan, engine=FitEngine(n_starts=1))
        assert {"univariate", "joint"} <= set(table.rows["fitter"])
        assert (table.estimates["fitter"] == "joint").sum() == 4

    @pytest.mark.slow
    def test_ignorable_visits_unbiased(self):
        plan = make_plan("ignorable")
        row = run_replications(plan, engine=FitEngine(), n_jobs=-1).lookup("ignorable")
        assert abs(row["bias"]) < 3 * row["mc_se"]


# =============================================================================
# Full-size plans
# =============================================================================

TIME_SLOPE_REDUCED = ("time_slope_tau_medium", "time_slope_tau_low", "time_slope_corr_medium", "time_slope_corr_low",
                      "time_slope_revar_medium", "time_slope_revar_low")


@pytest.fixture(scope="module")
def time_slope_table():
    # the reduced cells are only compared on the univariate fit
    plans = [make_plan("time_slope_high")] + [make_plan(name, fitters=("univariate",)) for name in TIME_SLOPE_REDUCED]
    return run_table(plans, engine=FitEngine(), n_jobs=-1)


@pytest.fixture(scope="module")
def treatment_decay_table():
    plans = [make_plan(name) for name in ("treatment_high", "treatment_low", "decay_high", "decay_low")]
    return run_table(plans, engine=FitEngine(), n_jobs=-1)


@pytest.mark.slow
class TestPlanScale:

    def test_unconnected_covariate_unbiased(self):
        table = run_replications(make_plan("unconnected_covariate"), engine=FitEngine(), n_jobs=-1)
        row = table.lookup("unconnected_covariate")
        assert row["n_reps"] == 500
        assert abs(row["pct_rel_bias"]) < 3 * row["mc_se_pct"]

    def test_time_slope_high_cell(self, time_slope_table):
        univariate = time_slope_table.lookup("time_slope_high")
        joint = time_slope_table.lookup("time_slope_high", fitter="joint")
        assert int(univariate["n_reps"]) == 300
        assert int(joint["n_reps"]) == 150
        assert -39.0 <= univariate["pct_rel_bias"] <= -23.0
        assert -2.0 <= joint["pct_rel_bias"] <= 14.0
        assert compare_cells(time_slope_table, "time_slope_high", "time_slope_high",
                             fitter_a="joint", fitter_b="univariate").difference < 0.0

    @pytest.mark.parametrize("cell", TIME_SLOPE_REDUCED)
    def test_reduced_cells_shrink_bias(self, time_slope_table, cell):
        contrast = compare_cells(time_slope_table, "time_slope_high", cell)
        assert contrast.n_se > 2.0, contrast.verdict

    def test_treatment_cell(self, treatment_decay_table):
        assert 1.4 <= treatment_decay_table.lookup("treatment_high")["pct_rel_bias"] <= 5.4

    def test_decay_cells(self, treatment_decay_table):
        assert 2.7 <= treatment_decay_table.lookup("decay_high")["pct_rel_bias"] <= 8.7
        assert compare_cells(treatment_decay_table, "decay_high", "decay_low").a_exceeds_b

    @pytest.mark.parametrize("cell", ["treatment_high", "treatment_low", "decay_high", "decay_low"])
    def test_joint_fit_removes_bias(self, treatment_decay_table, cell):
        row = treatment_decay_table.lookup(cell, fitter="joint")
        # 1% plus the Monte Carlo noise of 150 replications
        assert abs(row["pct_rel_bias"]) < 1.0 + 2 * row["mc_se_pct"]
