"""
Closed-form bias of the univariate mixed-model fixed effects when visit
intervals share random effects with the outcome.

Given a subject's interval count N_i and interval sum U_i, the outcome random
effects are conditionally normal with
    Sigma_* = (N gamma gamma'/sigma_eta^2 + Sigma_b^-1)^-1
    mean    = Sigma_* gamma/sigma_eta^2 (U_i - N_i H_i'alpha),
and the ML fixed effects are biased by the GLS-weighted average of the
conditional means.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from data.panel import DesignError
from models.covariance import build_psi

from utils import logging
logger = logging.getLogger(__name__)

# Constants
_MAX_CONDITION = 1e12

@dataclass(frozen=True)
class SubjectVisitStats:
    n_visits: int
    u_sum: float
    h: Tuple[float, ...] = (1.0,)
    x: Tuple[float, ...] = (1.0,)
    z: Tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if int(self.n_visits) < 1:
            raise ValueError("n_visits must be at least 1, got {0}".format(self.n_visits))
        object.__setattr__(self, "n_visits", int(self.n_visits))
        object.__setattr__(self, "u_sum", float(self.u_sum))
        for name in ("h", "x", "z"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))

@dataclass(frozen=True, eq=False)
class VisitPopulation:
    """Columnar form of many SubjectVisitStats (one row per subject)."""
    n_visits: np.ndarray
    u_sum: np.ndarray
    H: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n_visits, dtype=float)
        m = len(n)
        object.__setattr__(self, "n_visits", n)
        object.__setattr__(self, "u_sum", np.asarray(self.u_sum, dtype=float))
        for name in ("H", "X", "Z"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.ndim == 1:
                value = value[:, None]
            assert value.shape[0] == m, "{0} has {1} rows for {2} subjects".format(name, value.shape[0], m)
            object.__setattr__(self, name, value)
        if np.any(n < 1):
            raise ValueError("Every subject needs at least one visit")

    def __len__(self):
        return len(self.n_visits)

    @classmethod
    def from_stats(cls, stats):
        stats = list(stats)
        if not stats:
            return cls(n_visits=np.zeros(0), u_sum=np.zeros(0), H=np.zeros((0, 1)), X=np.zeros((0, 1)), Z=np.zeros((0, 1)))
        return cls(n_visits=[s.n_visits for s in stats], u_sum=[s.u_sum for s in stats],
                   H=[s.h for s in stats], X=[s.x for s in stats], Z=[s.z for s in stats])

    @classmethod
    def from_draws(cls, draws, H=None, X=None, Z=None):
        """Population from IntervalDraws; missing designs default to a column of ones."""
        m = draws.n_subjects
        ones = np.ones((m, 1))
        return cls(n_visits=draws.n_visits, u_sum=draws.u_sum,
                   H=ones if H is None else H, X=ones if X is None else X, Z=ones if Z is None else Z)

    def stats(self, i):
        return SubjectVisitStats(n_visits=int(self.n_visits[i]), u_sum=self.u_sum[i],
                                 h=self.H[i], x=self.X[i], z=self.Z[i])

def as_population(population):
    if isinstance(population, VisitPopulation):
        return population
    return VisitPopulation.from_stats(population)

def _inverse_pd(matrix):
    return cho_solve(cho_factor(matrix, lower=True), np.eye(matrix.shape[0]))

def conditional_re_moments(stats, params):
    """Mean and covariance of b_i given (N_i, U_i).

    Args:
        stats (SubjectVisitStats): visit summary of one subject
        params (MemoryIntervalParams): interval submodel; re_spec gives Sigma_b

    Returns:
        mean (ndarray), cov (ndarray)
    """
    if not params.sigma_eta > 0:
        raise ValueError("sigma_eta must be positive")
    sigma_b = build_psi(params.re_spec)
    gamma = np.asarray(params.gamma, dtype=float)
    n = float(stats.n_visits)
    precision = n * np.outer(gamma, gamma) / params.sigma_eta ** 2 + _inverse_pd(sigma_b)
    cov = _inverse_pd(precision)
    cov = 0.5 * (cov + cov.T)
    deviation = stats.u_sum - n * float(np.dot(stats.h, params.alpha))
    mean = cov @ gamma / params.sigma_eta ** 2 * deviation
    return mean, cov

def gls_weight(stats, sigma_b, sigma_eps):
    """w_i = (Z' Sigma_b Z + sigma_eps^2/N_i)^-1.

    sigma_b is a variance (scalar) or a covariance matrix; Z is a vector for a
    single outcome row or a matrix of rows, giving a matrix weight.
    """
    n = stats.n_visits if not isinstance(stats, (int, float)) else stats
    if n <= 0:
        raise ValueError("Number of visits must be positive")
    if sigma_eps < 0:
        raise ValueError("sigma_eps must be non-negative")
    sigma_b = np.atleast_2d(np.asarray(sigma_b, dtype=float))
    z = np.asarray(getattr(stats, "z", np.ones(sigma_b.shape[0])), dtype=float)
    if z.ndim == 2:
        return np.linalg.inv(z @ sigma_b @ z.T + sigma_eps ** 2 / n * np.eye(z.shape[0]))
    return 1.0 / float(z @ sigma_b @ z + sigma_eps ** 2 / n)

def weighted_regression(weights, X, target):
    """(sum w X X')^-1 sum w X target, with linearised Monte Carlo SEs."""
    A = np.einsum("m,mp,mk->pk", weights, X, X)
    cond = np.linalg.cond(A) if A.size else np.inf
    if not np.isfinite(cond) or cond > _MAX_CONDITION:
        logger.error("Weighted design is singular (condition number {0:.3g})".format(cond))
        raise DesignError("Singular design, condition number {0:.3g}".format(cond), condition_number=cond)
    coef = np.linalg.solve(A, np.einsum("m,mp,m->p", weights, X, target))
    residual = target - X @ coef
    influence = np.linalg.solve(A, (weights * residual)[None, :] * X.T)
    se = np.sqrt(np.sum(influence ** 2, axis=1))
    return coef, se

def general_terms(population, params, sigma_eps, gamma=None):
    """GLS weights and per-subject Z'E[b|N,U] of the general bias."""
    pop = as_population(population)
    if len(pop) == 0:
        raise ValueError("Empty population")
    if not params.sigma_eta > 0:
        raise ValueError("sigma_eta must be positive")
    sigma_b = build_psi(params.re_spec)
    prec_b = _inverse_pd(sigma_b)
    m = len(pop)
    gam = np.broadcast_to(np.asarray(params.gamma if gamma is None else gamma, dtype=float), (m, sigma_b.shape[0]))
    n = pop.n_visits
    precision = n[:, None, None] * gam[:, :, None] * gam[:, None, :] / params.sigma_eta ** 2 + prec_b
    cov = np.linalg.inv(precision)
    deviation = pop.u_sum - n * (pop.H @ np.asarray(params.alpha, dtype=float))
    mean = np.einsum("mij,mj->mi", cov, gam) / params.sigma_eta ** 2 * deviation[:, None]
    shift = np.einsum("mq,mq->m", pop.Z, mean)
    weights = 1.0 / (np.einsum("mq,qk,mk->m", pop.Z, sigma_b, pop.Z) + sigma_eps ** 2 / n)
    return weights, shift

def bias_general(population, params, sigma_eps, gamma=None):
    """Bias vector of beta-hat for arbitrary X_i, Z_i, H_i.

    Args:
        population (VisitPopulation or list of SubjectVisitStats)
        params (MemoryIntervalParams): alpha, gamma, sigma_eta and Sigma_b
        sigma_eps (float): outcome residual standard deviation
        gamma (ndarray, optional): (M, q) subject-specific loadings
    """
    pop = as_population(population)
    weights, shift = general_terms(pop, params, sigma_eps, gamma)
    coef, _ = weighted_regression(weights, pop.X, shift)
    return coef

def intercept_only_terms(population, alpha0, gamma0, sigma_b, sigma_eta, sigma_eps):
    pop = as_population(population)
    if len(pop) == 0:
        logger.error("Bias of the intercept needs a non-empty population")
        raise ValueError("Empty population")
    n = pop.n_visits
    weights = 1.0 / (sigma_b ** 2 + sigma_eps ** 2 / n)
    if gamma0 == 0:
        return weights, np.zeros(len(pop))
    ratio = sigma_eta ** 2 / (sigma_b ** 2 * gamma0 ** 2)
    kernel = (pop.u_sum - n * alpha0) / gamma0 / (n + ratio)
    return weights, kernel

def bias_intercept_only(population, alpha0, gamma0, sigma_b, sigma_eta, sigma_eps):
    """Bias in the intercept of a random-intercept model; gamma0=0 gives 0 exactly."""
    weights, kernel = intercept_only_terms(population, alpha0, gamma0, sigma_b, sigma_eta, sigma_eps)
    if gamma0 == 0:
        return 0.0
    return float(np.sum(weights * kernel) / np.sum(weights))

def _binary_column(pop, x):
    if x is None:
        assert pop.X.shape[1] >= 2, "Population design needs a second (binary) column"
        x = pop.X[:, 1]
    x = np.asarray(x, dtype=float)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("Covariate must be binary (0/1)")
    if x.sum() == 0 or x.sum() == len(x):
        logger.error("Both covariate groups must be non-empty")
        raise ValueError("Single-group population")
    return x

def binary_covariate_terms(population, alpha0, alpha1, gamma0, sigma_b, sigma_eta, sigma_eps, x=None):
    pop = as_population(population)
    x = _binary_column(pop, x)
    n = pop.n_visits
    weights = 1.0 / (sigma_b ** 2 + sigma_eps ** 2 / n)
    if gamma0 == 0:
        return x, weights, np.zeros(len(pop))
    ratio = sigma_eta ** 2 / (sigma_b ** 2 * gamma0 ** 2)
    kernel = (pop.u_sum - n * (alpha0 + alpha1 * x)) / gamma0 / (n + ratio)
    return x, weights, kernel

def bias_binary_covariate(population, alpha0, alpha1, gamma0, sigma_b, sigma_eta, sigma_eps, x=None):
    """Bias in the coefficient of a binary covariate shared by Y and the intervals.

    Weights are normalised within each covariate group; the result is the
    group-1 term minus the group-0 term. The covariate is column 1 of the
    population design X unless given explicitly.
    """
    x, weights, kernel = binary_covariate_terms(population, alpha0, alpha1, gamma0, sigma_b,
                                                sigma_eta, sigma_eps, x=x)
    if gamma0 == 0:
        return 0.0
    terms = []
    for group in (1.0, 0.0):
        sel = x == group
        terms.append(np.sum(weights[sel] * kernel[sel]) / np.sum(weights[sel]))
    return float(terms[0] - terms[1])

def weighted_mean_se(weights, values):
    """Weighted mean and its linearised Monte Carlo SE."""
    total = np.sum(weights)
    mean = np.sum(weights * values) / total
    se = np.sqrt(np.sum((weights * (values - mean)) ** 2)) / total
    return float(mean), float(se)
