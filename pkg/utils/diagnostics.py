"""
Pre-analysis diagnostics for informative visit processes.

Four checks decide whether a univariate mixed model of Y is at risk of
meaningful bias: few visits per subject, a large intraclass correlation,
correlated subject effects of the outcome and interval models, and
covariates that predict the intervals. Each check carries a three-level
flag (low, moderate, high) against configurable thresholds.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.stats import pearsonr

from engine.engine import FitEngine, icc, predict_blups
from models.lmm import LmmSpec

from utils import logging
logger = logging.getLogger(__name__)

FLAGS = ("low", "moderate", "high")
FRAILTY_NOTE = ("Recommended intervals are missing: a frailty model for the observed intervals "
                "would be needed for the random-effect correlation check and is not available.")

class DiagnosticUnavailable(RuntimeError):
    """A sub-diagnostic cannot run on this dataset."""

@dataclass(frozen=True)
class DiagnosticThresholds:
    visits_high: float = 6.0
    visits_moderate: float = 8.0
    icc_high: float = 0.3
    icc_moderate: float = 0.15
    corr_high: float = 0.4
    corr_moderate: float = 0.2
    z_high: float = 2.0
    z_moderate: float = 1.0

    def __post_init__(self):
        assert self.visits_high <= self.visits_moderate, "visits_high must not exceed visits_moderate"
        assert self.icc_moderate <= self.icc_high, "icc_moderate must not exceed icc_high"
        assert self.corr_moderate <= self.corr_high, "corr_moderate must not exceed corr_high"
        assert self.z_moderate <= self.z_high, "z_moderate must not exceed z_high"

    @classmethod
    def from_config(cls, cfg):
        if cfg is None:
            return cls()
        known = cls.__dataclass_fields__
        return cls(**{k: float(v) for k, v in dict(cfg).items() if k in known and v is not None})

    def to_dict(self):
        return asdict(self)

def flag_above(value, high, moderate):
    """Risk grows with value."""
    if not math.isfinite(value):
        return "low"
    if value >= high:
        return "high"
    if value >= moderate:
        return "moderate"
    return "low"

def flag_exceeds(value, high, moderate):
    """Strict version of flag_above; an infinite value is high risk."""
    if math.isnan(value):
        return "low"
    if value > high:
        return "high"
    if value > moderate:
        return "moderate"
    return "low"

def flag_below(value, high, moderate):
    """Risk grows as value falls."""
    if not math.isfinite(value):
        return "low"
    if value < high:
        return "high"
    if value < moderate:
        return "moderate"
    return "low"

@dataclass
class DiagnosticResult:
    name: str
    value: float
    flag: str
    details: Dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "value": self.value, "flag": self.flag, "details": dict(self.details)}

def visits_summary(ds, thresholds=None):
    """Mean, median, IQR, min and max of the per-subject visit counts; flagged on the mean."""
    thresholds = thresholds or DiagnosticThresholds()
    counts = ds.visit_counts().astype(float)
    if len(counts) == 0:
        raise ValueError("Empty dataset")
    q1, median, q3 = np.percentile(counts, [25, 50, 75])
    stats = {"mean": float(np.mean(counts)), "median": float(median), "q1": float(q1), "q3": float(q3),
             "iqr": float(q3 - q1), "min": float(np.min(counts)), "max": float(np.max(counts)),
             "n_subjects": int(len(counts))}
    flag = flag_below(stats["mean"], thresholds.visits_high, thresholds.visits_moderate)
    return DiagnosticResult(name="visits", value=stats["mean"], flag=flag, details=stats)

def icc_diagnostic(ds, y_spec, thresholds=None, engine=None):
    thresholds = thresholds or DiagnosticThresholds()
    engine = engine or FitEngine()
    fit = engine.fit_lmm(ds, y_spec)
    if not fit.converged:
        logger.warning("Y model did not converge; ICC is taken at the last iterate")
    value = icc(fit)
    flag = flag_above(value, thresholds.icc_high, thresholds.icc_moderate)
    return DiagnosticResult(name="icc", value=value, flag=flag,
                            details={"sigma_b": fit.variance.get("sd(intercept)", math.nan),
                                     "sigma_eps": fit.variance["sigma_eps"], "converged": fit.converged})

def re_correlation_diagnostic(ds, y_spec, r_spec, thresholds=None, engine=None):
    """Pearson correlation of the subject effects of separately fitted Y and R models.

    Returns:
        result (DiagnosticResult): correlation and flag
        scatter (DataFrame): paired first random effects per subject, for plotting
    """
    thresholds = thresholds or DiagnosticThresholds()
    if not ds.has_r:
        logger.error(FRAILTY_NOTE)
        raise DiagnosticUnavailable(FRAILTY_NOTE)
    if r_spec.response != "r":
        raise ValueError("The interval model must describe R, got response {0}".format(r_spec.response))
    engine = engine or FitEngine()
    y_fit = engine.fit_lmm(ds, y_spec)
    r_fit = engine.fit_lmm(ds, r_spec)
    y_blups = predict_blups(y_fit, ds)
    r_blups = predict_blups(r_fit, ds)
    scatter = pd.DataFrame({"y_effect": y_blups.iloc[:, 0], "r_effect": r_blups.iloc[:, 0]})
    if np.std(scatter["y_effect"]) == 0 or np.std(scatter["r_effect"]) == 0:
        raise DiagnosticUnavailable("A fitted random-effect variance is zero; no correlation to report")
    corr, p_value = pearsonr(scatter["y_effect"], scatter["r_effect"])
    corr = float(corr)
    flag = flag_above(abs(corr), thresholds.corr_high, thresholds.corr_moderate)
    details = {"p_value": float(p_value), "y_effect": y_blups.columns[0], "r_effect": r_blups.columns[0],
               "converged": bool(y_fit.converged and r_fit.converged)}
    return DiagnosticResult(name="re_correlation", value=corr, flag=flag, details=details), scatter

def covariate_association_diagnostic(ds, covariate, thresholds=None, engine=None, random=("intercept",)):
    """Effect of a baseline covariate on the intervals (R, else S) in a random-intercept model."""
    thresholds = thresholds or DiagnosticThresholds()
    if covariate not in ds.baseline_names:
        logger.error("Covariate {0} not in the dataset; available: {1}".format(covariate, ds.baseline_names))
        raise KeyError(covariate)
    values = np.array([s.baseline.get(covariate, np.nan) for s in ds.subjects])
    if np.nanstd(values) == 0:
        logger.error("Covariate {0} is constant".format(covariate))
        raise ValueError("Constant covariate {0}".format(covariate))
    if ds.has_r:
        response = "r"
    elif ds.has_s:
        response = "s"
    else:
        raise DiagnosticUnavailable("No interval column (R or S) in the dataset")
    engine = engine or FitEngine()
    fit = engine.fit_lmm(ds, LmmSpec(fixed=("intercept", covariate), random=tuple(random), response=response))
    estimate, se = fit.estimate(covariate), fit.se(covariate)
    if se > 0:
        z = estimate / se
    elif se == 0:
        # exact fit: any nonzero effect is decisive
        z = math.copysign(math.inf, estimate) if estimate != 0 else 0.0
    else:
        logger.warning("No standard error for covariate {0}; association left unflagged".format(covariate))
        z = math.nan
    flag = flag_exceeds(abs(z), thresholds.z_high, thresholds.z_moderate)
    return DiagnosticResult(name="covariate:{0}".format(covariate), value=estimate, flag=flag,
                            details={"se": se, "z": z, "response": response, "converged": fit.converged})

@dataclass
class DiagnosticReport:
    thresholds: DiagnosticThresholds
    results: List[DiagnosticResult] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    scatter: Optional[pd.DataFrame] = None

    @property
    def flags(self):
        return {r.name: r.flag for r in self.results}

    @property
    def high_risk(self):
        return [r.name for r in self.results if r.flag == "high"]

    @property
    def recommendation(self):
        if self.high_risk:
            return "consider joint model: high risk from {0}".format(", ".join(self.high_risk))
        return "univariate mixed model acceptable: no high-risk diagnostics"

    def result(self, name):
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self):
        return {"thresholds": self.thresholds.to_dict(), "results": [r.to_dict() for r in self.results],
                "flags": self.flags, "failures": dict(self.failures), "notes": list(self.notes),
                "recommendation": self.recommendation}

def diagnose(ds, y_spec, r_spec=None, covariates=(), thresholds=None, engine=None):
    """Runs all four diagnostics. A failing check is noted on the report, the others still run.

    Args:
        ds (LongitudinalDataset): data to examine
        y_spec (LmmSpec): outcome model
        r_spec (LmmSpec): interval model for R, needed for the random-effect correlation
        covariates (list): baseline covariates to test against the intervals
        thresholds (DiagnosticThresholds): flag cutoffs

    Returns:
        report (DiagnosticReport)
    """
    thresholds = thresholds or DiagnosticThresholds()
    engine = engine or FitEngine()
    report = DiagnosticReport(thresholds=thresholds)

    def attempt(name, func):
        try:
            return func()
        except (DiagnosticUnavailable, ValueError, KeyError) as err:
            logger.warning("Diagnostic {0} unavailable: {1}".format(name, err))
            report.failures[name] = str(err)
            return None

    outcome = attempt("visits", lambda: visits_summary(ds, thresholds))
    if outcome is not None:
        report.results.append(outcome)
    outcome = attempt("icc", lambda: icc_diagnostic(ds, y_spec, thresholds, engine))
    if outcome is not None:
        report.results.append(outcome)

    if not ds.has_r:
        report.failures["re_correlation"] = "recommended intervals R missing"
        report.notes.append(FRAILTY_NOTE)
    elif r_spec is None:
        report.failures["re_correlation"] = "no interval model given"
    else:
        outcome = attempt("re_correlation", lambda: re_correlation_diagnostic(ds, y_spec, r_spec, thresholds, engine))
        if outcome is not None:
            result, report.scatter = outcome
            report.results.append(result)

    for covariate in covariates:
        name = "covariate:{0}".format(covariate)
        outcome = attempt(name, lambda: covariate_association_diagnostic(ds, covariate, thresholds, engine))
        if outcome is not None:
            report.results.append(outcome)

    logger.info("Diagnostics: {0}; {1}".format(report.flags, report.recommendation))
    return report
