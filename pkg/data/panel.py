"""
Padded tensor view of a longitudinal dataset.

Subjects have different numbers of visits; the likelihoods work on batches
padded to the largest visit count, with a mask marking real visits. Padded
rows of every design matrix are zero.
"""
import numpy as np
import torch

from utils import logging
logger = logging.getLogger(__name__)

DTYPE = torch.float64

class DesignError(ValueError):
    """Rank-deficient or numerically singular design."""
    def __init__(self, message, condition_number=None):
        super(DesignError, self).__init__(message)
        self.condition_number = condition_number

def _decay(t, k):
    return np.exp(-k * t)

# time bases: functions of (visit time, decay rate)
_TIME_TERMS = {
    "intercept": lambda t, k: np.ones_like(t),
    "time": lambda t, k: t,
    "fp_inv_sq": lambda t, k: 1.0 / (1.0 + t) ** 2,
    "fp_log_inv_sq": lambda t, k: np.log1p(t) / (1.0 + t) ** 2,
    "decay": lambda t, k: _decay(t, k),
    "time_decay": lambda t, k: t * _decay(t, k),
    "decay_complement": lambda t, k: 1.0 - _decay(t, k),
}
_DECAY_TERMS = ("decay", "time_decay", "decay_complement")

def known_time_terms():
    return tuple(_TIME_TERMS)

def uses_decay(terms):
    return any(part in _DECAY_TERMS for term in terms for part in term.split(":"))

def term_column(term, times, baseline, decay_rate=None):
    """Values of one design term on an (M, n) grid of visit times.

    A term is a time basis, a baseline covariate name, or a product ``a:b``.
    """
    value = np.ones_like(times)
    for part in term.split(":"):
        if part in _TIME_TERMS:
            if part in _DECAY_TERMS and decay_rate is None:
                raise ValueError("Term {0} needs a decay rate".format(part))
            value = value * _TIME_TERMS[part](times, decay_rate)
        elif part in baseline:
            value = value * np.asarray(baseline[part], dtype=float)[:, None]
        else:
            logger.error("Unknown design term {0}; known time bases {1}, baseline covariates {2}".format(
                part, known_time_terms(), sorted(baseline)))
            raise KeyError(part)
    return value

class PaddedPanel(object):
    """
    Dataset arranged as (M, n_max) arrays plus a visit mask.
    """
    def __init__(self, ds):
        assert ds.n_subjects > 0, "Empty dataset"
        self._ds = ds
        counts = ds.visit_counts()
        m, n = ds.n_subjects, int(counts.max())
        self._n_max = n
        times = np.zeros((m, n))
        y = np.zeros((m, n))
        mask = np.zeros((m, n))
        r = np.zeros((m, n)) if ds.has_r else None
        s = np.zeros((m, n)) if ds.has_s else None
        for i, subject in enumerate(ds.subjects):
            k = subject.n_visits
            times[i, :k] = subject.visit_times
            # padded times repeat the last visit so exponential lags stay finite
            times[i, k:] = subject.visit_times[-1]
            y[i, :k] = subject.y
            mask[i, :k] = 1.0
            if r is not None:
                r[i, :k] = subject.r
            if s is not None:
                s[i, :k] = subject.s
        self._times = times
        self._y = y
        self._r = r
        self._s = s
        self._mask = mask
        self._counts = counts
        self._baseline = {name: np.array([subj.baseline.get(name, np.nan) for subj in ds.subjects])
                          for name in ds.baseline_names}

    @property
    def dataset(self):
        return self._ds

    @property
    def n_subjects(self):
        return self._times.shape[0]

    @property
    def n_max(self):
        return self._n_max

    @property
    def n_obs(self):
        return int(self._counts.sum())

    @property
    def subject_ids(self):
        return [s.id for s in self._ds.subjects]

    @property
    def baseline(self):
        return self._baseline

    def response(self, name):
        """Padded response array for 'y', 'r' or 's'."""
        values = {"y": self._y, "r": self._r, "s": self._s}[name]
        if values is None:
            raise ValueError("Response {0} is not available in this dataset".format(name))
        return torch.as_tensor(values * self._mask, dtype=DTYPE)

    def times(self):
        return torch.as_tensor(self._times, dtype=DTYPE)

    def mask(self):
        return torch.as_tensor(self._mask, dtype=DTYPE)

    def design(self, terms, decay_rate=None):
        """(M, n_max, len(terms)) design tensor, zero on padded rows."""
        columns = [term_column(term, self._times, self._baseline, decay_rate) * self._mask for term in terms]
        if not columns:
            return torch.zeros((self.n_subjects, self._n_max, 0), dtype=DTYPE)
        return torch.as_tensor(np.stack(columns, axis=-1), dtype=DTYPE)

    def design_rank(self, terms, decay_rate=None):
        """Rank and condition number of the stacked observed design rows."""
        if not terms:
            return 0, 1.0
        x = self.design(terms, decay_rate).numpy()[self._mask.astype(bool)]
        rank = int(np.linalg.matrix_rank(x))
        sv = np.linalg.svd(x, compute_uv=False)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
        return rank, cond
