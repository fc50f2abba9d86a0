"""
Study scenarios: outcome, recommended interval and adherence processes.

For the recommended-interval studies every subject is generated visit by
visit: at time t the outcome Y is drawn, the recommended interval R is
computed from it, the observed interval S is drawn around R by Weibull
adherence, and time advances by S until it passes tau. The theory scenarios
(intercept_only, binary_baseline, random_slope) use the interval model with
memory and attach an outcome at the generated visit times.
"""
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from data.dataset import LongitudinalDataset, SubjectRecord
from models.covariance import RandomEffectSpec, ResidualSpec, exponential_correlation
from models.samplers.baseSampler import BaseSampler, as_generator, effect_factor, stream_rng
from models.samplers.intervalSampler import MemoryIntervalParams, IntervalSampler

from utils import logging
logger = logging.getLogger(__name__)

STUDIES = ("intercept_only", "binary_baseline", "random_slope", "study1", "study2", "study3", "joint", "decoupled")
THEORY_STUDIES = ("intercept_only", "binary_baseline", "random_slope")

# Constants
_MAX_VISITS = 10000
_COVARIATE_STREAM = 1
_OUTCOME_STREAM = 2

def _get(cfg, key, default=None):
    value = cfg.get(key, default)
    return default if value is None else value

def binary_covariate(seed, n_subjects, prob=0.5):
    """Population-level Bernoulli(prob) baseline covariate of the theory scenarios."""
    return (stream_rng(seed, _COVARIATE_STREAM).random(n_subjects) < prob).astype(float)

def gen_adherence(r, shape, seed):
    """Observed interval drawn from Weibull(shape, scale=r).

    Args:
        r (float or array): recommended interval(s), strictly positive
        shape (float): Weibull shape; large values mean close adherence
        seed (int or Generator): seed or an already running generator
    """
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr <= 0) or not np.all(np.isfinite(r_arr)):
        logger.error("Recommended interval must be positive, got {0}".format(r))
        raise ValueError("Recommended interval must be positive")
    if not shape > 0:
        raise ValueError("Weibull shape must be positive, got {0}".format(shape))
    rng = as_generator(seed)
    draw = r_arr * rng.weibull(shape, size=r_arr.shape)
    if draw.ndim == 0:
        return float(draw)
    return draw

@dataclass(frozen=True, eq=False)
class StudyScenario:
    study: str
    re_spec: RandomEffectSpec
    residual: ResidualSpec
    tau: float
    beta: Mapping[str, float] = field(default_factory=dict)
    alpha: Mapping[str, float] = field(default_factory=dict)
    weibull_shape: float = 10.0
    decay_rate: Optional[float] = None
    r_floor: float = 1.0 / 52.0
    time_unit: str = "years"
    homogenized: bool = False
    treatment_prob: float = 0.5
    separable: bool = False
    interval: Mapping[str, float] = field(default_factory=dict)
    name: Optional[str] = None
    model: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "beta", MappingProxyType({k: float(v) for k, v in dict(self.beta).items()}))
        object.__setattr__(self, "alpha", MappingProxyType({k: float(v) for k, v in dict(self.alpha).items()}))
        object.__setattr__(self, "interval", MappingProxyType({k: float(v) for k, v in dict(self.interval).items()}))
        if self.study not in STUDIES:
            raise ValueError("Unknown study {0}, choose from {1}".format(self.study, STUDIES))
        if not self.weibull_shape > 0:
            raise ValueError("Weibull shape must be positive")
        if self.study == "study3" and not (self.decay_rate is not None and self.decay_rate > 0):
            raise ValueError("study3 needs a positive decay_rate")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.r_floor > 0:
            raise ValueError("r_floor must be positive")
        if self.study in THEORY_STUDIES:
            for key in ("gamma0", "sigma_eta", "floor"):
                if key not in self.interval:
                    raise ValueError("Theory scenario {0} needs interval.{1}".format(self.study, key))

    @classmethod
    def from_config(cls, cfg):
        return cls(study=str(cfg["study"]),
                   re_spec=RandomEffectSpec.from_config(cfg["random_effects"]),
                   residual=ResidualSpec.from_config(cfg["residual"]),
                   tau=float(cfg["tau"]),
                   beta=dict(_get(cfg, "beta", {})),
                   alpha=dict(_get(cfg, "alpha", {})),
                   weibull_shape=float(_get(cfg, "weibull_shape", 10.0)),
                   decay_rate=None if _get(cfg, "decay_rate") is None else float(cfg["decay_rate"]),
                   r_floor=float(_get(cfg, "r_floor", 1.0 / 52.0)),
                   time_unit=str(_get(cfg, "time_unit", "years")),
                   homogenized=bool(_get(cfg, "homogenized", False)),
                   treatment_prob=float(_get(cfg, "treatment_prob", 0.5)),
                   separable=bool(_get(cfg, "separable", False)),
                   interval=dict(_get(cfg, "interval", {})),
                   name=_get(cfg, "name", None),
                   model=_get(cfg, "model", None))

    def coefficient(self, name):
        """True value of a fixed effect by name (beta0, beta1, ...)."""
        if name not in self.beta:
            raise KeyError("Scenario {0} has no coefficient {1}".format(self.name or self.study, name))
        return self.beta[name]

    def vary(self, variation=None):
        """Copy with the replication knobs applied.

        Known knobs: tau, corr_b1_u1, re_var_divisor, homogenized, decay_rate;
        entries of beta, alpha and interval are addressed as 'beta.beta1' etc.
        """
        scenario = self
        for key, value in (variation or {}).items():
            if value is None:
                continue
            if key == "tau":
                scenario = replace(scenario, tau=float(value))
            elif key == "corr_b1_u1":
                scenario = replace(scenario, re_spec=scenario.re_spec.with_correlation("b1", "u1", value))
            elif key == "re_var_divisor":
                scenario = replace(scenario, re_spec=scenario.re_spec.scaled(float(value)))
            elif key == "homogenized":
                scenario = replace(scenario, homogenized=bool(value))
            elif key == "decay_rate":
                scenario = replace(scenario, decay_rate=float(value))
            elif "." in key and key.split(".", 1)[0] in ("beta", "alpha", "interval"):
                group, entry = key.split(".", 1)
                updated = dict(getattr(scenario, group))
                updated[entry] = float(value)
                scenario = replace(scenario, **{group: updated})
            else:
                logger.error("Unknown scenario variation {0}".format(key))
                raise KeyError(key)
        return scenario

    def interval_params(self):
        """MemoryIntervalParams of a theory scenario."""
        assert self.study in THEORY_STUDIES, "Interval parameters exist for theory scenarios only"
        iv = self.interval
        gamma0 = iv["gamma0"]
        if self.study == "binary_baseline":
            alpha = (self.alpha["alpha0"], self.alpha.get("alpha1", 0.0))
        else:
            alpha = (self.alpha["alpha0"],)
        if self.study == "random_slope":
            gamma, gamma_time = (gamma0, 0.0), (0.0, gamma0)
        else:
            gamma, gamma_time = (gamma0,) + (0.0,) * (self.re_spec.dim - 1), None
        return MemoryIntervalParams(alpha=alpha, gamma=gamma, gamma_time=gamma_time,
                                    sigma_eta=iv["sigma_eta"], re_spec=self.re_spec,
                                    tau=self.tau, floor=iv["floor"])

class _ResidualProcess(object):
    """Residuals drawn one visit at a time from their Gaussian conditional.

    The outcome residual follows the configured family (exponential with
    nugget or iid). With separable=True the pair (eps, zeta) is a bivariate
    process with covariance Lambda * correlation; otherwise zeta is iid and
    independent of eps.
    """
    def __init__(self, spec, separable, rng):
        self._spec = spec
        self._separable = separable
        self._rng = rng
        self._times = []
        self._eps = []
        self._zeta = []
        self._lam_chol = np.linalg.cholesky(spec.lambda_matrix()) if separable else None

    def _conditional(self, t):
        spec = self._spec
        if spec.corr_family == "iid" or not self._times:
            return np.zeros(len(self._times)), 1.0
        past = np.asarray(self._times)
        omega = exponential_correlation(past[:, None] - past[None, :], spec.range_d, spec.nugget_c0)
        np.fill_diagonal(omega, 1.0)
        k = exponential_correlation(t - past, spec.range_d, spec.nugget_c0)
        weights = cho_solve(cho_factor(omega, lower=True), k)
        return weights, max(1.0 - float(k @ weights), 0.0)

    def draw(self, t):
        weights, factor = self._conditional(t)
        z = self._rng.standard_normal(2)
        spec = self._spec
        if self._separable:
            mean = np.array([weights @ np.asarray(self._eps), weights @ np.asarray(self._zeta)]) if self._times else np.zeros(2)
            eps, zeta = mean + math.sqrt(factor) * (self._lam_chol @ z)
        else:
            mean = weights @ np.asarray(self._eps) if self._times else 0.0
            eps = mean + math.sqrt(factor) * spec.sigma_eps * z[0]
            zeta = spec.sigma_zeta * z[1]
        self._times.append(t)
        self._eps.append(float(eps))
        self._zeta.append(float(zeta))
        return float(eps), float(zeta)

class StudySampler(BaseSampler):
    def __init__(self, scenario, seed=0, **kwargs):
        super(StudySampler, self).__init__(seed=seed, **kwargs)
        self._scenario = scenario
        self._factor = effect_factor(scenario.re_spec)

    def _effects(self, rng):
        draw = self._factor @ rng.standard_normal(self._scenario.re_spec.dim)
        return dict(zip(self._scenario.re_spec.names, draw))

    def outcome_mean(self, t, treatment=0.0):
        sc = self._scenario
        beta = sc.beta
        if sc.study == "study3":
            w = math.exp(-sc.decay_rate * t)
            return (beta["beta0"] + beta["beta1"] * t) * w + beta["beta3"] * (1.0 - w)
        return beta.get("beta0", 0.0) + beta.get("beta1", 0.0) * t + beta.get("beta2", 0.0) * treatment

    def recommended_interval(self, t, y, treatment, effects, zeta):
        sc = self._scenario
        alpha = sc.alpha
        if sc.study == "study2" and treatment and not sc.homogenized:
            value = alpha["alpha0"] + alpha["alpha2"] + zeta
        else:
            value = (alpha["alpha0"] + alpha.get("alpha1", 0.0) * y + alpha.get("alpha_time", 0.0) * t
                     + effects.get("u0", 0.0) + effects.get("u1", 0.0) * t + zeta)
        return max(value, sc.r_floor)

    def simulate_subject(self, subject_id):
        sc = self._scenario
        rng = self.subject_rng(subject_id)
        effects = self._effects(rng)
        treatment = float(rng.random() < sc.treatment_prob) if sc.study == "study2" else 0.0
        residuals = _ResidualProcess(sc.residual, sc.separable, rng)
        times, ys, rs, ss = [], [], [], []
        t = 0.0
        while t <= sc.tau:
            eps, zeta = residuals.draw(t)
            y = self.outcome_mean(t, treatment) + effects.get("b0", 0.0) + effects.get("b1", 0.0) * t + eps
            r = self.recommended_interval(t, y, treatment, effects, zeta)
            s = gen_adherence(r, sc.weibull_shape, rng)
            times.append(t)
            ys.append(y)
            rs.append(r)
            ss.append(s)
            t += s
            assert len(times) < _MAX_VISITS, "Subject {0} exceeded {1} visits".format(subject_id, _MAX_VISITS)
        baseline = {"treatment": treatment} if sc.study == "study2" else {}
        return SubjectRecord(id=subject_id, visit_times=times, y=ys, r=rs, s=ss, baseline=baseline,
                             u_sum=float(np.sum(ss)))

    def simulate_interval_study(self, n_subjects):
        sc = self._scenario
        params = sc.interval_params()
        baseline = {}
        covariates = None
        if sc.study == "binary_baseline":
            x = binary_covariate(self._seed, n_subjects, sc.treatment_prob)
            baseline["x"] = x
            covariates = np.column_stack([np.ones(n_subjects), x])
        draws = IntervalSampler(params, seed=self._seed).sample(n_subjects, covariates)
        noise_rng = stream_rng(self._seed, _OUTCOME_STREAM)
        names = sc.re_spec.names
        beta = sc.beta
        subjects = []
        for i in range(n_subjects):
            t = draws.visit_times[i]
            b = dict(zip(names, draws.effects[i]))
            mean = np.full(len(t), beta.get("beta0", 0.0) + b.get("b0", 0.0))
            if sc.study == "random_slope":
                mean += (beta.get("beta1", 0.0) + b.get("b1", 0.0)) * t
            elif sc.study == "binary_baseline":
                mean += beta.get("beta1", 0.0) * baseline["x"][i]
            y = mean + sc.residual.sigma_eps * noise_rng.standard_normal(len(t))
            subjects.append(SubjectRecord(id=i, visit_times=t, y=y, s=draws.intervals[i],
                                          baseline={k: v[i] for k, v in baseline.items()},
                                          u_sum=float(np.sum(draws.intervals[i]))))
        return subjects

    def sample(self, n_subjects):
        sc = self._scenario
        logger.debug("Simulating {0} subjects of scenario {1}".format(n_subjects, sc.name or sc.study))
        if sc.study in THEORY_STUDIES:
            subjects = self.simulate_interval_study(n_subjects)
        else:
            subjects = [self.simulate_subject(i) for i in range(n_subjects)]
        return LongitudinalDataset(subjects=tuple(subjects), tau=sc.tau, time_unit=sc.time_unit)

def simulate_study(scenario, n_subjects, seed):
    """Simulates a full dataset of a scenario; deterministic in (scenario, n, seed)."""
    assert n_subjects >= 1, "Need at least one subject"
    return StudySampler(scenario, seed=seed).sample(n_subjects)
