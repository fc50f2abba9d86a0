"""
Bias sweeps over one scenario parameter.

Every grid point regenerates its population from the same seed, so
neighbouring points share their random numbers and the curves are smooth in
the swept parameter. The intercept-only and binary-covariate cases evaluate
the closed forms; the random-slope case refits the univariate model.
"""
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed

from engine.engine import FitEngine
from models.biasTheory import VisitPopulation, binary_covariate_terms, intercept_only_terms, weighted_mean_se
from models.covariance import RandomEffectSpec
from models.lmm import LmmSpec
from models.samplers.intervalSampler import gen_intervals_memory
from models.samplers.studySampler import binary_covariate, simulate_study
from utils.helpers import subject_seed

from utils import logging
logger = logging.getLogger(__name__)

# operation -> (scenario study, estimand, true coefficient)
_SWEEP_DICT = {
    "intercept_only": ("intercept_only", "intercept", "beta0"),
    "binary_covariate": ("binary_baseline", "x", "beta1"),
    "random_slope": ("random_slope", "time", "beta1"),
}
SWEEP_OPERATIONS = tuple(_SWEEP_DICT)
SWEEP_PARAMETERS = ("sigma_b", "re_scale", "gamma0", "sigma_eta", "floor", "alpha0", "alpha1", "sigma_eps", "tau")
POINT = "point"

@dataclass(frozen=True, eq=False)
class BiasReport:
    operation: str
    parameter: str
    estimand: str
    truth: float
    grid: Tuple[float, ...]
    bias: Tuple[float, ...]
    mc_se: Tuple[float, ...]
    mean_visits: Tuple[float, ...] = ()
    n_used: Tuple[int, ...] = ()
    n_population: int = 0
    inputs: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.grid)

    @property
    def relative_bias(self):
        """bias / truth x 100, NaN where the truth is 0."""
        if self.truth == 0:
            return tuple(math.nan for _ in self.bias)
        return tuple(100.0 * b / self.truth for b in self.bias)

    def to_frame(self):
        frame = pd.DataFrame({self.parameter: self.grid, "bias": self.bias, "mc_se": self.mc_se,
                              "pct_rel_bias": self.relative_bias,
                              "mean_visits": self.mean_visits or [math.nan] * len(self.grid),
                              "n_used": self.n_used or [self.n_population] * len(self.grid)})
        frame.insert(0, "estimand", self.estimand)
        frame.insert(0, "operation", self.operation)
        if self.parameter == POINT:
            frame = frame.drop(columns=POINT)
        return frame

def apply_parameter(scenario, parameter, value):
    """Scenario with one sweep parameter set to value."""
    value = float(value)
    if parameter == "sigma_b":
        sds = (value,) + tuple(scenario.re_spec.sds[1:])
        return replace(scenario, re_spec=RandomEffectSpec(names=scenario.re_spec.names, sds=sds, corr=scenario.re_spec.corr))
    if parameter == "re_scale":
        assert value > 0, "Random-effect scale must be positive"
        return replace(scenario, re_spec=scenario.re_spec.scaled(1.0 / value ** 2))
    if parameter in ("gamma0", "sigma_eta", "floor"):
        return scenario.vary({"interval.{0}".format(parameter): value})
    if parameter in ("alpha0", "alpha1"):
        return scenario.vary({"alpha.{0}".format(parameter): value})
    if parameter == "sigma_eps":
        return replace(scenario, residual=replace(scenario.residual, sigma_eps=value))
    if parameter == "tau":
        return scenario.vary({"tau": value})
    logger.error("Unknown sweep parameter {0}, choose from {1}".format(parameter, SWEEP_PARAMETERS))
    raise KeyError(parameter)

def theory_population(scenario, n_subjects, seed):
    """Interval draws of a theory scenario as a VisitPopulation (X = H)."""
    params = scenario.interval_params()
    design = np.ones((n_subjects, 1))
    if scenario.study == "binary_baseline":
        design = np.column_stack([design, binary_covariate(seed, n_subjects, scenario.treatment_prob)])
    draws = gen_intervals_memory(params, design, n_subjects, seed)
    return params, VisitPopulation.from_draws(draws, H=design, X=design)

def _closed_form(operation, scenario, n_population, seed):
    params, pop = theory_population(scenario, n_population, seed)
    gamma0 = params.gamma[0]
    sigma_b = scenario.re_spec.sds[0]
    sigma_eps = scenario.residual.sigma_eps
    mean_visits = float(np.mean(pop.n_visits))
    if operation == "intercept_only":
        weights, kernel = intercept_only_terms(pop, params.alpha[0], gamma0, sigma_b, params.sigma_eta, sigma_eps)
        bias, se = weighted_mean_se(weights, kernel)
    else:
        x, weights, kernel = binary_covariate_terms(pop, params.alpha[0], params.alpha[1], gamma0, sigma_b,
                                                    params.sigma_eta, sigma_eps)
        treated, se1 = weighted_mean_se(weights[x == 1], kernel[x == 1])
        control, se0 = weighted_mean_se(weights[x == 0], kernel[x == 0])
        bias, se = treated - control, math.hypot(se1, se0)
    return bias, se, mean_visits, len(pop)

def _refit(scenario, truth, n_population, seed, n_reps, engine_settings, single_thread):
    if single_thread:
        torch.set_num_threads(1)
    engine = FitEngine(**(engine_settings or {}))
    spec = LmmSpec(fixed=("intercept", "time"), random=("intercept", "time"))
    estimates, visits = [], []
    for rep in range(n_reps):
        ds = simulate_study(scenario, n_population, subject_seed(seed, rep))
        visits.append(float(np.mean(ds.visit_counts())))
        fit = engine.fit_lmm(ds, spec)
        if fit.converged:
            estimates.append(fit.estimate("time"))
            last_se = fit.se("time")
    if not estimates:
        logger.warning("No converged refit at this grid point")
        return math.nan, math.nan, float(np.mean(visits)), 0
    estimates = np.asarray(estimates)
    se = float(np.std(estimates, ddof=1) / math.sqrt(len(estimates))) if len(estimates) > 1 else last_se
    return float(np.mean(estimates) - truth), se, float(np.mean(visits)), len(estimates)

def _grid_point(operation, scenario, truth, n_population, seed, n_reps, engine_settings, single_thread=False):
    if operation == "random_slope":
        return _refit(scenario, truth, n_population, seed, n_reps, engine_settings, single_thread)
    return _closed_form(operation, scenario, n_population, seed)

def operation_for(scenario):
    """Bias operation matching a theory scenario."""
    for op, (study, _, _) in _SWEEP_DICT.items():
        if study == scenario.study:
            return op
    logger.error("Scenario {0} has no bias operation; theory studies are {1}".format(
        scenario.study, [s for s, _, _ in _SWEEP_DICT.values()]))
    raise ValueError("Not a theory scenario: {0}".format(scenario.study))

def _check_operation(bias_op, base):
    if bias_op not in _SWEEP_DICT:
        logger.error("Unknown bias operation {0}. Registered operations: {1}".format(bias_op, SWEEP_OPERATIONS))
        raise NotImplementedError(bias_op)
    study, estimand, coefficient = _SWEEP_DICT[bias_op]
    if base.study != study:
        logger.error("Operation {0} needs a {1} scenario, got {2}".format(bias_op, study, base.study))
        raise ValueError("Scenario does not match the bias operation")
    return estimand, base.beta.get(coefficient, 0.0)

def sweep(bias_op, parameter, grid, base, n_population, seed, n_reps=1, n_jobs=1, engine_settings=None):
    """Bias curve of one operation over a parameter grid.

    Args:
        bias_op (str): intercept_only, binary_covariate or random_slope
        parameter (str): scenario parameter to vary, see SWEEP_PARAMETERS
        grid (list): parameter values
        base (StudyScenario): settings held fixed
        n_population (int): subjects per grid point (M)
        seed (int): population seed shared by all grid points
        n_reps (int): refits per point, random_slope only
        n_jobs (int): joblib workers over grid points

    Returns:
        report (BiasReport)
    """
    estimand, truth = _check_operation(bias_op, base)
    grid = [float(v) for v in grid]
    if not grid:
        raise ValueError("Empty sweep grid")

    logger.info("Sweeping {0} over {1} = {2} with M={3}".format(bias_op, parameter, grid, n_population))
    scenarios = [apply_parameter(base, parameter, v) for v in grid]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_grid_point)(bias_op, sc, truth, n_population, seed, n_reps, engine_settings, n_jobs != 1) for sc in scenarios)
    bias, mc_se, visits, used = zip(*results)
    return BiasReport(operation=bias_op, parameter=parameter, estimand=estimand, truth=truth, grid=tuple(grid),
                      bias=tuple(float(b) for b in bias), mc_se=tuple(float(s) for s in mc_se),
                      mean_visits=tuple(visits), n_used=tuple(int(u) for u in used), n_population=int(n_population),
                      inputs={"scenario": base.name or base.study, "seed": int(seed), "n_reps": int(n_reps)})

def bias_point(scenario, n_population, seed, n_reps=1, engine_settings=None):
    """Bias of a theory scenario at its own settings, as a one-row report."""
    bias_op = operation_for(scenario)
    estimand, truth = _check_operation(bias_op, scenario)
    bias, mc_se, visits, used = _grid_point(bias_op, scenario, truth, n_population, seed, n_reps, engine_settings)
    return BiasReport(operation=bias_op, parameter=POINT, estimand=estimand, truth=truth, grid=(math.nan,),
                      bias=(float(bias),), mc_se=(float(mc_se),), mean_visits=(visits,), n_used=(int(used),),
                      n_population=int(n_population),
                      inputs={"scenario": scenario.name or scenario.study, "seed": int(seed), "n_reps": int(n_reps)})
