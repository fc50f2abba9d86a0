"""
Replication harness.

Each replication simulates one dataset from the plan's scenario, fits every
requested model and records the estimand. Replication streams derive from
(seed, rep), so every cell of a table sees the same seeds and two plans that
differ in one knob are compared on common random numbers.
"""
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import wandb
from joblib import Parallel, delayed

from engine.engine import FitEngine
from engine.engineBase import ConfigError
from models.jointModel import JointSpec
from models.lmm import LmmSpec
from models.modelCreator import spec_from_config
from models.samplers.studySampler import StudyScenario, simulate_study
from utils.helpers import subject_seed

from utils import logging
logger = logging.getLogger(__name__)

FITTERS = ("univariate", "joint")
MIN_CONVERGENCE = 0.8
TABLE_COLUMNS = ["plan", "factor", "cell", "fitter", "n_reps", "n_converged", "convergence_rate",
                 "mean_estimate", "bias", "pct_rel_bias", "ese", "ese_pct", "mc_se", "mc_se_pct", "warning"]

def _fixed_terms(spec):
    return spec.y_fixed if isinstance(spec, JointSpec) else spec.fixed

@dataclass(frozen=True, eq=False)
class ReplicationPlan:
    name: str
    scenario: StudyScenario
    specs: Mapping[str, object]
    estimand: str
    coefficient: str
    n_subjects: int = 200
    n_reps: int = 300
    n_reps_joint: Optional[int] = None
    fitters: Tuple[str, ...] = ("univariate", "joint")
    seed: int = 0
    variation: Mapping[str, float] = field(default_factory=dict)
    factor: str = ""
    cell: str = ""

    def __post_init__(self):
        object.__setattr__(self, "fitters", tuple(self.fitters))
        object.__setattr__(self, "variation", dict(self.variation or {}))
        if self.n_reps < 2:
            raise ConfigError("A replication plan needs n_reps >= 2, got {0}".format(self.n_reps), field="n_reps")
        if self.n_subjects < 2:
            raise ConfigError("A replication plan needs n_subjects >= 2", field="n_subjects")
        for fitter in self.fitters:
            if fitter not in FITTERS:
                raise ConfigError("Unknown fitter {0}, choose from {1}".format(fitter, FITTERS), field="fitters")
            if fitter not in self.specs:
                raise ConfigError("Plan {0} has no {1} model".format(self.name, fitter), field="model")
            if self.estimand not in _fixed_terms(self.specs[fitter]):
                raise ConfigError("Estimand {0} is not a fixed term of the {1} model".format(self.estimand, fitter),
                                  field="estimand")
        # raises KeyError on an unknown knob or coefficient
        try:
            self.truth
        except KeyError as err:
            raise ConfigError(str(err), field="variation")

    @classmethod
    def from_config(cls, cfg, scenario, model_cfg, **overrides):
        """Plan from a plan config node, a scenario and a model config with univariate/joint entries."""
        fitters = tuple(cfg.get("fitters", FITTERS))
        specs = {}
        for fitter in fitters:
            if model_cfg is None or model_cfg.get(fitter, None) is None:
                raise ConfigError("Model config lacks a {0} entry".format(fitter), field="model")
            specs[fitter] = spec_from_config(model_cfg[fitter])
        values = dict(name=str(cfg.get("name", "plan")), scenario=scenario, specs=specs,
                      estimand=str(cfg["estimand"]), coefficient=str(cfg["coefficient"]),
                      n_subjects=int(cfg.get("n_subjects", 200)), n_reps=int(cfg.get("n_reps", 300)),
                      n_reps_joint=None if cfg.get("n_reps_joint", None) is None else int(cfg["n_reps_joint"]),
                      fitters=fitters, seed=int(cfg.get("seed", 0)),
                      variation=dict(cfg.get("variation", None) or {}),
                      factor=str(cfg.get("factor", "") or ""), cell=str(cfg.get("cell", "") or ""))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def effective_scenario(self):
        return self.scenario.vary(self.variation)

    @property
    def truth(self):
        return self.effective_scenario().coefficient(self.coefficient)

    def fit_specs(self):
        """Specs of the requested fitters, decay bases tied to the scenario's decay rate."""
        rate = self.effective_scenario().decay_rate
        specs = {}
        for fitter in self.fitters:
            spec = self.specs[fitter]
            if spec.decay_rate is not None and rate is not None:
                spec = spec.with_decay_rate(rate)
            specs[fitter] = spec
        return specs

    def reps_for(self, fitter):
        if fitter == "joint" and self.n_reps_joint is not None:
            return min(self.n_reps, self.n_reps_joint)
        return self.n_reps

def _one_rep(plan, scenario, specs, rep, engine_settings, single_thread):
    if single_thread:
        torch.set_num_threads(1)
    engine = FitEngine(**(engine_settings or {}))
    ds = simulate_study(scenario, plan.n_subjects, subject_seed(plan.seed, rep))
    mean_visits = float(np.mean(ds.visit_counts()))
    records = []
    fits = {}
    for fitter in plan.fitters:
        if rep >= plan.reps_for(fitter):
            continue
        spec = specs[fitter]
        if fitter == "joint":
            uni = fits.get("univariate")
            y_fit = uni if uni is not None and isinstance(specs.get("univariate"), LmmSpec) \
                and specs["univariate"] == spec.y_spec() else None
            fit = engine.fit_joint(ds, spec, y_fit=y_fit)
        else:
            fit = engine.fit_lmm(ds, spec)
        fits[fitter] = fit
        records.append({"plan": plan.name, "rep": rep, "fitter": fitter, "estimate": fit.estimate(plan.estimand),
                        "se": fit.se(plan.estimand), "converged": bool(fit.converged),
                        "loglik": fit.loglik, "mean_visits": mean_visits})
    return records

def summarise(estimates, truth):
    """Bias, ESE and MC SE of a vector of converged estimates."""
    estimates = np.asarray(estimates, dtype=float)
    n = len(estimates)
    if n == 0:
        return {"mean_estimate": math.nan, "bias": math.nan, "ese": math.nan, "mc_se": math.nan}
    ese = float(np.std(estimates, ddof=1)) if n > 1 else math.nan
    mean = float(np.mean(estimates))
    return {"mean_estimate": mean, "bias": mean - truth, "ese": ese, "mc_se": ese / math.sqrt(n)}

def _percent(value, truth):
    if truth == 0 or not math.isfinite(value):
        return math.nan
    return 100.0 * value / abs(truth)

def aggregate(plan, records):
    """Table rows of one plan from its per-rep records; warning rows follow rows under 80% convergence."""
    truth = plan.truth
    frame = pd.DataFrame(records)
    rows = []
    for fitter in plan.fitters:
        sub = frame[frame["fitter"] == fitter] if len(frame) else frame
        attempted = len(sub)
        good = sub[sub["converged"]]["estimate"].to_numpy() if attempted else np.array([])
        stats = summarise(good, truth)
        rate = len(good) / attempted if attempted else 0.0
        row = {"plan": plan.name, "factor": plan.factor, "cell": plan.cell, "fitter": fitter,
               "n_reps": attempted, "n_converged": len(good), "convergence_rate": rate}
        row.update(stats)
        row["pct_rel_bias"] = 100.0 * stats["bias"] / truth if truth != 0 else math.nan
        row["ese_pct"] = _percent(stats["ese"], truth)
        row["mc_se_pct"] = _percent(stats["mc_se"], truth)
        row["warning"] = ""
        rows.append(row)
        if rate < MIN_CONVERGENCE:
            message = "{0} {1}: convergence rate {2:.1%} below {3:.0%}".format(plan.name, fitter, rate, MIN_CONVERGENCE)
            logger.warning(message)
            warning_row = {k: math.nan for k in TABLE_COLUMNS}
            warning_row.update({"plan": plan.name, "factor": plan.factor, "cell": plan.cell,
                                "fitter": "WARNING", "warning": message})
            rows.append(warning_row)
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)

@dataclass(frozen=True, eq=False)
class CellContrast:
    cell_a: str
    cell_b: str
    abs_bias_a: float
    abs_bias_b: float
    difference: float
    combined_mc_se: float
    n_se: float
    a_exceeds_b: bool
    verdict: str

class ReplicationTable(object):
    def __init__(self, rows, estimates=None):
        self._rows = rows.reset_index(drop=True)
        self._estimates = estimates if estimates is not None else pd.DataFrame()

    @property
    def rows(self):
        return self._rows

    @property
    def estimates(self):
        return self._estimates

    @property
    def warnings(self):
        return [w for w in self._rows["warning"] if isinstance(w, str) and w]

    def __len__(self):
        return len(self._rows)

    @classmethod
    def concat(cls, tables):
        tables = list(tables)
        assert tables, "Nothing to concatenate"
        return cls(pd.concat([t.rows for t in tables], ignore_index=True),
                   pd.concat([t.estimates for t in tables], ignore_index=True))

    def lookup(self, key, fitter="univariate"):
        """Row of a cell, addressed by plan name or cell label."""
        rows = self._rows[(self._rows["fitter"] == fitter)
                          & ((self._rows["plan"] == key) | (self._rows["cell"] == key))]
        if len(rows) == 0:
            logger.error("No {0} row for cell {1}; cells are {2}".format(fitter, key, sorted(set(self._rows["plan"]))))
            raise KeyError(key)
        if len(rows) > 1:
            raise KeyError("Cell label {0} is ambiguous, use the plan name".format(key))
        return rows.iloc[0]

    def to_text(self):
        """Plain-text layout: one line per cell and fitter, % bias with ESE in brackets."""
        lines = []
        for plan, rows in self._rows.groupby("plan", sort=False):
            lines.append("Plan {0}".format(plan))
            lines.append("  {0:<10} {1:<10} {2:<11} {3:>18} {4:>9} {5:>11}".format(
                "factor", "cell", "fitter", "% rel. bias (ESE)", "MC SE", "converged"))
            for _, row in rows.iterrows():
                if row["fitter"] == "WARNING":
                    lines.append("  !! {0}".format(row["warning"]))
                    continue
                lines.append("  {0:<10} {1:<10} {2:<11} {3:>18} {4:>9} {5:>11}".format(
                    str(row["factor"]), str(row["cell"]), row["fitter"],
                    "{0:.2f} ({1:.2f})".format(row["pct_rel_bias"], row["ese_pct"]),
                    "{0:.2f}".format(row["mc_se_pct"]),
                    "{0}/{1}".format(int(row["n_converged"]), int(row["n_reps"]))))
        return "\n".join(lines)

    def to_dict(self):
        return {"rows": self._rows.to_dict(orient="records")}

def run_replications(plan, engine=None, n_jobs=1):
    """Runs one plan.

    Args:
        plan (ReplicationPlan): scenario, models, estimand and scale
        engine (FitEngine): supplies the optimiser settings of every fit
        n_jobs (int): joblib workers over replications

    Returns:
        table (ReplicationTable)
    """
    scenario = plan.effective_scenario()
    specs = plan.fit_specs()
    settings = engine.settings() if engine is not None else {}
    logger.info("Replicating {0}: {1} reps of n={2}, fitters {3}".format(
        plan.name, plan.n_reps, plan.n_subjects, list(plan.fitters)))
    chunks = Parallel(n_jobs=n_jobs)(
        delayed(_one_rep)(plan, scenario, specs, rep, settings, n_jobs != 1) for rep in range(plan.n_reps))
    records = [r for chunk in chunks for r in chunk]
    rows = aggregate(plan, records)
    estimates = pd.DataFrame(records, columns=["plan", "rep", "fitter", "estimate", "se", "converged",
                                               "loglik", "mean_visits"])
    _log_wandb(plan, rows, estimates)
    for _, row in rows.iterrows():
        if row["fitter"] != "WARNING":
            logger.info("{0} {1}: % relative bias {2:.2f} (MC SE {3:.2f}), {4}/{5} converged".format(
                plan.name, row["fitter"], row["pct_rel_bias"], row["mc_se_pct"],
                int(row["n_converged"]), int(row["n_reps"])))
    return ReplicationTable(rows, estimates)

def run_table(plans, engine=None, n_jobs=1):
    """Runs every plan of a multi-cell table in order."""
    return ReplicationTable.concat(run_replications(p, engine=engine, n_jobs=n_jobs) for p in plans)

def _log_wandb(plan, rows, estimates):
    if wandb.run is None:
        return
    for _, rec in estimates.iterrows():
        wandb.log({"{0}/{1}/estimate".format(plan.name, rec["fitter"]): rec["estimate"], "rep": int(rec["rep"])})
    wandb.log({"{0}/table".format(plan.name): wandb.Table(dataframe=rows.fillna("").astype(str))})

def compare_cells(table, cell_a, cell_b, fitter_a="univariate", fitter_b=None):
    """Whether |bias| of cell A exceeds that of cell B, in combined MC SEs.

    Bias and MC SE are taken on the percent scale when the truth is non-zero.
    """
    fitter_b = fitter_b or fitter_a
    row_a = table.lookup(cell_a, fitter_a)
    row_b = table.lookup(cell_b, fitter_b)

    def scaled(row):
        if math.isfinite(row["pct_rel_bias"]):
            return abs(float(row["pct_rel_bias"])), float(row["mc_se_pct"])
        return abs(float(row["bias"])), float(row["mc_se"])

    bias_a, se_a = scaled(row_a)
    bias_b, se_b = scaled(row_b)
    difference = bias_a - bias_b
    combined = math.hypot(se_a, se_b)
    if difference == 0:
        n_se = 0.0
    else:
        n_se = difference / combined if combined > 0 else math.copysign(math.inf, difference)
    label_a = "{0}/{1}".format(cell_a, fitter_a)
    label_b = "{0}/{1}".format(cell_b, fitter_b)
    if difference > 0:
        verdict = "|bias| of {0} exceeds {1} by {2:.2f} MC SEs".format(label_a, label_b, n_se)
    elif difference < 0:
        verdict = "|bias| of {0} is below {1} by {2:.2f} MC SEs".format(label_a, label_b, -n_se)
    else:
        verdict = "|bias| of {0} equals {1}".format(label_a, label_b)
    return CellContrast(cell_a=label_a, cell_b=label_b, abs_bias_a=bias_a, abs_bias_b=bias_b,
                        difference=difference, combined_mc_se=combined, n_se=n_se,
                        a_exceeds_b=difference > 0, verdict=verdict)
