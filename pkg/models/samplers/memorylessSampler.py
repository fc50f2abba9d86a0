"""
Memoryless visit process on a discrete grid.

A visit happens at grid point t with probability exp(mu(t) + gamma'b_i),
which approximates an intensity lambda(t) dt for a small grid step. Used as a
comparator for the interval model with memory.
"""
import numpy as np

from models.samplers.baseSampler import BaseSampler, as_generator

from utils import logging
logger = logging.getLogger(__name__)

class MemorylessSampler(BaseSampler):
    def __init__(self, mu, gamma, grid_step=1.0, tau=200.0, seed=0, **kwargs):
        super(MemorylessSampler, self).__init__(seed=seed, **kwargs)
        assert grid_step > 0, "Grid step must be positive"
        assert tau >= grid_step, "Follow-up shorter than one grid step"
        self._mu = mu
        self._gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
        self._grid = grid_step * np.arange(1, int(round(tau / grid_step)) + 1)

    @property
    def grid(self):
        return self._grid

    def probabilities(self, effects):
        effects = np.asarray(effects, dtype=float)
        if effects.ndim == 1:
            effects = effects[:, None]
        mu = np.broadcast_to(np.asarray(self._mu(self._grid), dtype=float), self._grid.shape)
        with np.errstate(over="ignore"):
            p = np.exp(mu[None, :] + (effects @ self._gamma)[:, None])
        if np.any(p > 1.0):
            logger.warning("Visit probability exceeds 1 at {0} grid cells; clipping to 1".format(int(np.sum(p > 1.0))))
            p = np.minimum(p, 1.0)
        return p

    def sample(self, effects):
        p = self.probabilities(effects)
        rng = as_generator(self._seed)
        hits = rng.random(p.shape) < p
        return [self._grid[row] for row in hits]

def gen_visits_memoryless(mu, gamma, b, grid_step, tau, seed):
    """Visit-time lists from Bernoulli thinning of the grid.

    Args:
        mu (callable): log baseline visit probability as a function of time;
            may return -inf for probability 0
        gamma (array): loading of the subject effects
        b (ndarray): (M, q) subject effects
        grid_step (float): spacing of the grid, 1 day by default in configs
        tau (float): end of follow-up
        seed (int): seed of the generator
    """
    return MemorylessSampler(mu, gamma, grid_step=grid_step, tau=tau, seed=seed).sample(b)
