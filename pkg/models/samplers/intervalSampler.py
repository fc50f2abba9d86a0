"""
Interval model with memory.

Each subject draws consecutive inter-visit intervals
    S_ij = H_i'alpha + (gamma + gamma_time * t_ij)'b_i + eta_ij
truncated below at a floor, until the running sum passes the end of follow-up.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from models.covariance import RandomEffectSpec
from models.samplers.baseSampler import BaseSampler, effect_factor

from utils import logging
logger = logging.getLogger(__name__)

# fraction of subjects whose expected interval may sit at the floor before warning
_DEGENERATE_FRACTION = 0.5

@dataclass(frozen=True, eq=False)
class MemoryIntervalParams:
    alpha: Tuple[float, ...]
    gamma: Tuple[float, ...]
    sigma_eta: float
    re_spec: RandomEffectSpec
    tau: float
    floor: float = 7.0
    gamma_time: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in np.atleast_1d(self.alpha)))
        object.__setattr__(self, "gamma", tuple(float(g) for g in np.atleast_1d(self.gamma)))
        if self.gamma_time is not None:
            object.__setattr__(self, "gamma_time", tuple(float(g) for g in np.atleast_1d(self.gamma_time)))
        if not self.floor > 0:
            raise ValueError("Interval floor must be positive, got {0}".format(self.floor))
        if not self.sigma_eta >= 0:
            raise ValueError("sigma_eta must be non-negative, got {0}".format(self.sigma_eta))
        if not self.tau > 0:
            raise ValueError("tau must be positive, got {0}".format(self.tau))
        if len(self.gamma) != self.re_spec.dim:
            raise ValueError("gamma has {0} entries for {1} random effects".format(len(self.gamma), self.re_spec.dim))
        if self.gamma_time is not None and len(self.gamma_time) != self.re_spec.dim:
            raise ValueError("gamma_time has {0} entries for {1} random effects".format(
                len(self.gamma_time), self.re_spec.dim))

    @property
    def max_intervals(self):
        """Upper bound on intervals per subject; every draw is at least the floor."""
        return int(math.floor(self.tau / self.floor)) + 1

@dataclass(frozen=True, eq=False)
class IntervalDraws:
    """Per-subject output of the interval generator.

    intervals[i] holds S_i1..S_iN, visit_times[i] the N visit times starting
    at 0, n_visits the counts N_i(tau) and u_sum the totals U_i > tau.
    """
    intervals: Tuple[np.ndarray, ...]
    visit_times: Tuple[np.ndarray, ...]
    n_visits: np.ndarray
    u_sum: np.ndarray
    effects: np.ndarray

    @property
    def n_subjects(self):
        return len(self.n_visits)

class IntervalSampler(BaseSampler):
    def __init__(self, params, seed=0, **kwargs):
        super(IntervalSampler, self).__init__(seed=seed, **kwargs)
        self._params = params

    def sample(self, n_subjects, covariates=None):
        params = self._params
        h = np.ones((n_subjects, 1)) if covariates is None else np.asarray(covariates, dtype=float)
        if h.ndim == 1:
            h = h[:, None]
        assert h.shape == (n_subjects, len(params.alpha)), \
            "Covariates H must have shape ({0}, {1}), got {2}".format(n_subjects, len(params.alpha), h.shape)

        q = params.re_spec.dim
        k_max = params.max_intervals
        normals = self.subject_normals(n_subjects, q + k_max)
        effects = normals[:, :q] @ effect_factor(params.re_spec).T
        eta = params.sigma_eta * normals[:, q:]

        base = h @ np.asarray(params.alpha)
        load = effects @ np.asarray(params.gamma)
        load_time = effects @ np.asarray(params.gamma_time) if params.gamma_time is not None else np.zeros(n_subjects)

        expected = base + load
        degenerate = float(np.mean(expected <= params.floor)) if n_subjects else 0.0
        if degenerate > _DEGENERATE_FRACTION:
            logger.warning("Expected interval at or below the floor {0} for {1:.0%} of subjects; "
                           "the generated intervals are dominated by truncation".format(params.floor, degenerate))

        draws = np.full((n_subjects, k_max), np.nan)
        start = np.zeros(n_subjects)
        counts = np.zeros(n_subjects, dtype=int)
        active = np.ones(n_subjects, dtype=bool)
        for j in range(k_max):
            s = np.maximum(base + load + load_time * start + eta[:, j], params.floor)
            draws[active, j] = s[active]
            counts += active
            start = np.where(active, start + s, start)
            active &= start <= params.tau
            if not active.any():
                break
        assert not active.any(), "Interval generator did not pass tau within {0} draws".format(k_max)

        intervals = tuple(draws[i, :counts[i]].copy() for i in range(n_subjects))
        visit_times = tuple(np.concatenate([[0.0], np.cumsum(s)[:-1]]) for s in intervals)
        u_sum = np.array([s.sum() for s in intervals])
        return IntervalDraws(intervals=intervals, visit_times=visit_times, n_visits=counts,
                             u_sum=u_sum, effects=effects)

def gen_intervals_memory(params, covariates, n_subjects, seed):
    """Draws intervals with memory until U_i exceeds tau.

    Args:
        params (MemoryIntervalParams): interval submodel
        covariates (ndarray or None): H, shape (n_subjects, len(alpha)); None for intercept only
        n_subjects (int): population size
        seed (int): seed, combined with the subject id for every subject stream

    Returns:
        draws (IntervalDraws)
    """
    return IntervalSampler(params, seed=seed).sample(n_subjects, covariates)
