"""
Closed-form bias of the univariate mixed-model fixed effects.
"""
import math

import numpy as np
import pytest
from scipy.stats import norm

from data.panel import DesignError
from models.biasTheory import (SubjectVisitStats, VisitPopulation, bias_binary_covariate, bias_general,
                               bias_intercept_only, conditional_re_moments, gls_weight, weighted_regression)
from models.covariance import RandomEffectSpec
from models.samplers.intervalSampler import MemoryIntervalParams, gen_intervals_memory

ALPHA0 = 200.0 / 3.0
SIGMA_B = math.sqrt(2.0)


def _params(gamma0=-1.0, sigma_eta=1.0, sd=SIGMA_B, alpha=(ALPHA0,)):
    return MemoryIntervalParams(alpha=alpha, gamma=(gamma0,), sigma_eta=sigma_eta,
                                re_spec=RandomEffectSpec(names=("b0",), sds=(sd,)), tau=200.0)


@pytest.fixture(scope="module")
def intercept_population():
    draws = gen_intervals_memory(_params(), None, 20000, seed=1)
    return VisitPopulation.from_draws(draws)


class TestConditionalMoments:

    def test_no_linkage(self):
        mean, cov = conditional_re_moments(SubjectVisitStats(n_visits=3, u_sum=210.0), _params(gamma0=0.0))
        np.testing.assert_array_equal(mean, [0.0])
        np.testing.assert_allclose(cov, [[2.0]])

    def test_uninformative_intervals(self):
        mean, cov = conditional_re_moments(SubjectVisitStats(n_visits=3, u_sum=210.0), _params(sigma_eta=1e8))
        np.testing.assert_allclose(mean, [0.0], atol=1e-6)
        np.testing.assert_allclose(cov, [[2.0]], atol=1e-6)

    def test_grid_posterior(self):
        n, u = 3, 190.0
        mean, cov = conditional_re_moments(SubjectVisitStats(n_visits=n, u_sum=u), _params())
        grid = np.linspace(-12.0, 12.0, 240001)
        # U - N alpha0 | b ~ N(N gamma0 b, N sigma_eta^2)
        log_post = norm.logpdf(grid, scale=SIGMA_B) + norm.logpdf(u - n * ALPHA0, loc=-n * grid, scale=math.sqrt(n))
        weights = np.exp(log_post - log_post.max())
        weights /= weights.sum()
        grid_mean = np.sum(weights * grid)
        grid_var = np.sum(weights * (grid - grid_mean) ** 2)
        assert mean[0] == pytest.approx(grid_mean, abs=1e-3)
        assert cov[0, 0] == pytest.approx(grid_var, abs=1e-3)

    def test_bivariate_precision(self):
        spec = RandomEffectSpec(names=("b0", "b1"), sds=(1.0, 0.5), corr=np.array([[1.0, -0.3], [-0.3, 1.0]]))
        params = MemoryIntervalParams(alpha=(10.0,), gamma=(-1.0, 2.0), sigma_eta=0.7, re_spec=spec, tau=50.0, floor=1.0)
        mean, cov = conditional_re_moments(SubjectVisitStats(n_visits=4, u_sum=37.0), params)
        gamma = np.array([-1.0, 2.0])
        psi = np.array([[1.0, -0.15], [-0.15, 0.25]])
        expected_cov = np.linalg.inv(4 * np.outer(gamma, gamma) / 0.49 + np.linalg.inv(psi))
        np.testing.assert_allclose(cov, expected_cov, rtol=1e-10)
        np.testing.assert_allclose(mean, expected_cov @ gamma / 0.49 * (37.0 - 40.0), rtol=1e-10)


class TestGlsWeight:

    def test_intercept_only_weight(self):
        assert gls_weight(SubjectVisitStats(n_visits=10, u_sum=700.0), 2.0, 5.0) == pytest.approx(1.0 / 4.5)

    def test_pure_averaging(self):
        assert gls_weight(SubjectVisitStats(n_visits=4, u_sum=300.0), 0.0, 1.0) == pytest.approx(4.0)

    def test_noiseless_limit(self):
        assert gls_weight(SubjectVisitStats(n_visits=4, u_sum=300.0), 2.0, 0.0) == pytest.approx(0.5)

    def test_zero_visits_rejected(self):
        with pytest.raises(ValueError):
            SubjectVisitStats(n_visits=0, u_sum=0.0)
        with pytest.raises(ValueError):
            gls_weight(0, 2.0, 1.0)


class TestBiasGeneral:

    def test_sums_at_expectation(self):
        stats = [SubjectVisitStats(n_visits=n, u_sum=n * ALPHA0) for n in (2, 3, 4, 5)]
        np.testing.assert_allclose(bias_general(stats, _params(), 5.0), [0.0], atol=1e-12)

    def test_no_linkage(self, intercept_population):
        np.testing.assert_allclose(bias_general(intercept_population, _params(gamma0=0.0), 5.0), [0.0])

    def test_matches_intercept_only(self, intercept_population):
        general = bias_general(intercept_population, _params(), 5.0)[0]
        closed = bias_intercept_only(intercept_population, ALPHA0, -1.0, SIGMA_B, 1.0, 5.0)
        assert general == pytest.approx(closed, abs=1e-10)

    def test_unconnected_covariate_has_no_bias(self):
        # x1 enters neither the interval model nor the random effects
        slopes = []
        for seed in range(10):
            draws = gen_intervals_memory(_params(), None, 5000, seed=100 + seed)
            x1 = np.random.default_rng(seed).normal(size=draws.n_subjects)
            pop = VisitPopulation.from_draws(draws, X=np.column_stack([np.ones_like(x1), x1]))
            slopes.append(bias_general(pop, _params(), 5.0)[1])
        mc_se = np.std(slopes, ddof=1) / math.sqrt(len(slopes))
        assert abs(np.mean(slopes)) < 3.0 * mc_se

    def test_singular_design(self):
        with pytest.raises(DesignError):
            weighted_regression(np.ones(4), np.ones((4, 2)), np.arange(4.0))


class TestBiasIntercept:

    def test_sums_at_expectation(self):
        stats = [SubjectVisitStats(n_visits=n, u_sum=n * ALPHA0) for n in (3, 4)]
        assert bias_intercept_only(stats, ALPHA0, -1.0, SIGMA_B, 1.0, 5.0) == 0.0

    def test_no_linkage_is_exactly_zero(self, intercept_population):
        assert bias_intercept_only(intercept_population, ALPHA0, 0.0, SIGMA_B, 1.0, 5.0) == 0.0

    def test_empty_population(self):
        with pytest.raises(ValueError):
            bias_intercept_only([], ALPHA0, -1.0, SIGMA_B, 1.0, 5.0)

    @pytest.mark.parametrize("scale", [0.1, 3.0, 40.0])
    def test_scale_equivariance(self, intercept_population, scale):
        # sigma_eta, gamma0 and U - N alpha0 stretched together leave the bias unchanged
        pop = intercept_population
        offset = pop.n_visits * ALPHA0
        stretched = VisitPopulation(n_visits=pop.n_visits, u_sum=offset + scale * (pop.u_sum - offset), H=pop.H,
                                    X=pop.X, Z=pop.Z)
        expected = bias_intercept_only(pop, ALPHA0, -1.0, SIGMA_B, 1.0, 5.0)
        assert bias_intercept_only(stretched, ALPHA0, -scale, SIGMA_B, scale, 5.0) == pytest.approx(expected, rel=1e-9)
        general = bias_general(stretched, _params(gamma0=-scale, sigma_eta=scale), 5.0)[0]
        assert general == pytest.approx(expected, rel=1e-8)

    def test_frequent_visitors_pull_intercept_up(self, intercept_population):
        # gamma0 < 0: large b shortens intervals, so high-b subjects carry more visits
        assert bias_intercept_only(intercept_population, ALPHA0, -1.0, SIGMA_B, 1.0, 5.0) > 0.0


class TestBiasBinary:

    def _population(self):
        stats = [SubjectVisitStats(n_visits=n, u_sum=u) for n, u in ((3, 190.0), (4, 230.0), (3, 215.0))]
        pop = VisitPopulation.from_stats(stats + stats)
        return pop, np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])

    def test_identical_groups_cancel(self):
        pop, x = self._population()
        assert bias_binary_covariate(pop, ALPHA0, 0.0, -1.0, SIGMA_B, 1.0, 5.0, x=x) == pytest.approx(0.0, abs=1e-12)

    def test_no_linkage(self):
        pop, x = self._population()
        assert bias_binary_covariate(pop, ALPHA0, 5.0, 0.0, SIGMA_B, 1.0, 5.0, x=x) == 0.0

    def test_single_group_rejected(self):
        pop, _ = self._population()
        with pytest.raises(ValueError):
            bias_binary_covariate(pop, ALPHA0, 0.0, -1.0, SIGMA_B, 1.0, 5.0, x=np.ones(6))

    def test_non_binary_rejected(self):
        pop, _ = self._population()
        with pytest.raises(ValueError):
            bias_binary_covariate(pop, ALPHA0, 0.0, -1.0, SIGMA_B, 1.0, 5.0, x=np.linspace(0, 1, 6))
