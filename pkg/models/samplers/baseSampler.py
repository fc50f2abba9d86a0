"""
Base Class for Samplers of visit and outcome processes

Every sampler draws from numpy generators. Subject level draws come from an
independent stream derived from (seed, subject id), so a subject's data does
not depend on how many other subjects are generated or in which order.
"""
import numpy as np

from models.covariance import build_psi

from utils import logging
logger = logging.getLogger(__name__)

# spawn keys: (0, subject id) for subject streams, (1, key) for population streams
_SUBJECT_BRANCH = 0
_POPULATION_BRANCH = 1

def subject_rng(seed, subject_id):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(_SUBJECT_BRANCH, int(subject_id))))

def stream_rng(seed, key):
    """Population-level stream (covariates, outcome noise of large theory populations)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(_POPULATION_BRANCH, int(key))))

def as_generator(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)

def effect_factor(re_spec):
    """Matrix F with F F^T = Psi, zero columns for degenerate components."""
    build_psi(re_spec, allow_degenerate=True)
    corr_chol = np.linalg.cholesky(np.asarray(re_spec.corr, dtype=float))
    return np.asarray(re_spec.sds, dtype=float)[:, None] * corr_chol

def gen_random_effects(re_spec, n_subjects, seed):
    """Rows are independent N(0, Psi) draws; zero sds give exact zeros.

    Args:
        re_spec (RandomEffectSpec): covariance of the subject effects
        n_subjects (int): number of rows
        seed (int): seed of the generator
    """
    assert n_subjects >= 0, "Negative number of subjects"
    factor = effect_factor(re_spec)
    rng = as_generator(seed)
    z = rng.standard_normal((n_subjects, re_spec.dim))
    return z @ factor.T

class BaseSampler(object):
    def __init__(self, seed=0, **kwargs):
        super(BaseSampler, self).__init__(**kwargs)
        self._seed = int(seed)

    def __repr__(self):
        outstring=""
        for key,val in self.__dict__.items():
            outstring+="{0}: {1}\n".format(key,val)
        return outstring

    @property
    def seed(self):
        return self._seed

    def subject_rng(self, subject_id):
        return subject_rng(self._seed, subject_id)

    def subject_normals(self, n_subjects, width):
        """(n_subjects, width) standard normals, row i from subject i's own stream."""
        out = np.empty((n_subjects, width))
        for i in range(n_subjects):
            out[i] = self.subject_rng(i).standard_normal(width)
        return out

    def sample(self, *args, **kwargs):
        raise NotImplementedError
