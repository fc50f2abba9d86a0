"""
Random effects, interval and visit generators, adherence and the study simulators.
"""
import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.special import gamma as gamma_fn

from data.dataset import validate_dataset
from models.covariance import RandomEffectSpec, build_psi
from models.samplers.baseSampler import gen_random_effects
from models.samplers.intervalSampler import MemoryIntervalParams, gen_intervals_memory
from models.samplers.memorylessSampler import gen_visits_memoryless
from models.samplers.studySampler import gen_adherence, simulate_study


def _interval_params(alpha0=50.0, gamma0=0.0, sigma_eta=0.0, sd=1.0, tau=200.0, floor=7.0):
    return MemoryIntervalParams(alpha=(alpha0,), gamma=(gamma0,), sigma_eta=sigma_eta,
                                re_spec=RandomEffectSpec(names=("b0",), sds=(sd,)), tau=tau, floor=floor)


class TestRandomEffects:

    def test_zero_sds_give_zeros(self):
        spec = RandomEffectSpec(names=("b0", "b1"), sds=(0.0, 0.0))
        np.testing.assert_array_equal(gen_random_effects(spec, 50, seed=1), np.zeros((50, 2)))

    def test_same_seed_same_draws(self, scenario):
        spec = scenario("study1").re_spec
        np.testing.assert_array_equal(gen_random_effects(spec, 20, 3), gen_random_effects(spec, 20, 3))

    def test_sample_covariance(self, scenario):
        spec = scenario("study1").re_spec
        n = 100000
        draws = gen_random_effects(spec, n, seed=11)
        psi = build_psi(spec)
        sample = np.cov(draws, rowvar=False)
        mc_se = np.sqrt((np.outer(np.diag(psi), np.diag(psi)) + psi ** 2) / n)
        assert np.all(np.abs(sample - psi) < 4 * mc_se)


class TestIntervalsWithMemory:

    def test_deterministic_intervals(self):
        draws = gen_intervals_memory(_interval_params(), None, 10, seed=0)
        np.testing.assert_array_equal(draws.n_visits, np.full(10, 5))
        np.testing.assert_array_equal(draws.u_sum, np.full(10, 250.0))
        for s, t in zip(draws.intervals, draws.visit_times):
            np.testing.assert_array_equal(s, [50.0] * 5)
            np.testing.assert_array_equal(t, [0.0, 50.0, 100.0, 150.0, 200.0])

    def test_short_intervals_sit_at_the_floor(self):
        draws = gen_intervals_memory(_interval_params(alpha0=3.0), None, 4, seed=0)
        for s in draws.intervals:
            assert np.all(s == 7.0)

    def test_floor_applies_per_draw(self):
        params = _interval_params(alpha0=20.0, gamma0=-1.0, sigma_eta=5.0, sd=10.0)
        draws = gen_intervals_memory(params, None, 500, seed=4)
        flat = np.concatenate(draws.intervals)
        assert flat.min() == 7.0
        assert np.all(flat >= 7.0)

    def test_sum_passes_tau(self):
        params = _interval_params(alpha0=200.0 / 3.0, gamma0=-1.0, sigma_eta=1.0, sd=math.sqrt(2.0))
        draws = gen_intervals_memory(params, None, 300, seed=2)
        assert np.all(draws.u_sum > 200.0)
        for t in draws.visit_times:
            assert t[-1] <= 200.0

    def test_mean_count_near_tau_over_alpha(self):
        params = _interval_params(alpha0=200.0 / 3.0, gamma0=-1.0, sigma_eta=1.0, sd=math.sqrt(2.0))
        draws = gen_intervals_memory(params, None, 5000, seed=5)
        # N includes the interval that passes tau: three or four draws, each half the time
        assert set(np.unique(draws.n_visits)) == {3, 4}
        assert abs(np.mean(draws.n_visits) - 3.5) < 0.05

    def test_subject_streams_do_not_depend_on_population_size(self):
        params = _interval_params(alpha0=40.0, gamma0=-1.0, sigma_eta=2.0, sd=3.0)
        small = gen_intervals_memory(params, None, 5, seed=9)
        large = gen_intervals_memory(params, None, 50, seed=9)
        for i in range(5):
            np.testing.assert_array_equal(small.intervals[i], large.intervals[i])

    def test_gamma_length_checked(self):
        with pytest.raises(ValueError):
            MemoryIntervalParams(alpha=(1.0,), gamma=(1.0, 0.0), sigma_eta=1.0,
                                 re_spec=RandomEffectSpec(names=("b0",), sds=(1.0,)), tau=10.0)


class TestMemorylessVisits:

    def test_zero_probability(self):
        visits = gen_visits_memoryless(lambda t: np.full_like(t, -np.inf), [0.0], np.zeros((5, 1)), 1.0, 100.0, 0)
        assert all(len(v) == 0 for v in visits)

    def test_certain_visit(self):
        visits = gen_visits_memoryless(lambda t: np.zeros_like(t), [0.0], np.zeros((3, 1)), 1.0, 100.0, 0)
        for v in visits:
            np.testing.assert_array_equal(v, np.arange(1.0, 101.0))

    def test_binomial_mean(self):
        n = 10000
        visits = gen_visits_memoryless(lambda t: np.full_like(t, math.log(0.1)), [0.0], np.zeros((n, 1)),
                                       1.0, 100.0, 3)
        counts = np.array([len(v) for v in visits])
        mc_se = math.sqrt(100 * 0.1 * 0.9 / n)
        assert abs(counts.mean() - 10.0) < 3 * mc_se


class TestAdherence:

    def test_weibull_mean(self):
        draws = gen_adherence(np.ones(1000000), 10.0, seed=0)
        expected = gamma_fn(1.1)
        sd = math.sqrt(gamma_fn(1.2) - expected ** 2)
        assert abs(draws.mean() - expected) < 3 * sd / 1000.0

    def test_large_shape_concentrates(self):
        draws = gen_adherence(np.full(10000, 0.5), 1e4, seed=1)
        assert draws.std() < 1e-3
        assert draws.mean() == pytest.approx(0.5, abs=1e-3)

    def test_same_seed_same_draw(self):
        assert gen_adherence(0.3, 10.0, seed=8) == gen_adherence(0.3, 10.0, seed=8)

    @pytest.mark.parametrize("r", [0.0, -1.0])
    def test_non_positive_interval_rejected(self, r):
        with pytest.raises(ValueError):
            gen_adherence(r, 10.0, seed=0)


class TestStudySimulation:

    @pytest.mark.parametrize("name", ["study1", "study2", "study3", "joint", "decoupled",
                                      "intercept_only", "binary_baseline", "random_slope"])
    def test_simulated_data_is_valid(self, scenario, name):
        ds = simulate_study(scenario(name), 20, seed=1)
        report = validate_dataset(ds)
        assert report.is_valid, report.messages()
        assert ds.has_s

    def test_determinism(self, scenario):
        sc = scenario("study1")
        pd.testing.assert_frame_equal(simulate_study(sc, 10, 7).to_frame(), simulate_study(sc, 10, 7).to_frame())

    def test_recommended_interval_floor(self, scenario):
        sc = scenario("study1")
        ds = simulate_study(sc, 30, 2)
        assert min(min(s.r) for s in ds) >= sc.r_floor

    def test_binary_baseline_covariate(self, scenario):
        ds = simulate_study(scenario("binary_baseline"), 200, 3)
        x = np.array([s.baseline["x"] for s in ds])
        assert set(np.unique(x)) == {0.0, 1.0}

    def test_vary_knobs(self, scenario):
        sc = scenario("study1")
        varied = sc.vary({"tau": 4.0, "corr_b1_u1": -0.3, "beta.beta1": 0.2})
        assert varied.tau == 4.0
        assert varied.re_spec.corr[1, 3] == -0.3
        assert varied.coefficient("beta1") == 0.2
        assert sc.tau == 2.0

    def test_unknown_knob(self, scenario):
        with pytest.raises(KeyError):
            scenario("study1").vary({"gamma9": 1.0})

    @pytest.mark.slow
    def test_study1_visit_rate(self, scenario):
        ds = simulate_study(scenario("study1"), 2000, 0)
        assert abs(ds.visit_counts().mean() - 5.2) < 0.3

    @pytest.mark.slow
    def test_study2_visit_rate_by_arm(self, scenario):
        ds = simulate_study(scenario("study2"), 2000, 0)
        treated = np.array([s.baseline["treatment"] for s in ds]) == 1.0
        counts = ds.visit_counts()
        assert abs(counts[treated].mean() - 18.7) < 0.5
        assert abs(counts[~treated].mean() - 4.8) < 0.5

    @pytest.mark.slow
    def test_study3_visit_rate(self, scenario):
        ds = simulate_study(scenario("study3"), 2000, 0)
        assert abs(ds.visit_counts().mean() - 3.7) < 0.3

    def test_residual_lag_correlation(self, scenario):
        sc = scenario("study1")
        sc = replace(sc, re_spec=RandomEffectSpec(names=sc.re_spec.names, sds=(0.0,) * 4))
        spec = sc.residual
        ds = simulate_study(sc, 3000, 5)
        # first two visits: E[e0 e1 | e0, gap] = rho(gap) e0^2
        terms, products = [], []
        for s in ds:
            if s.n_visits < 2:
                continue
            t = np.asarray(s.visit_times[:2])
            e = np.asarray(s.y[:2]) - (sc.beta["beta0"] + sc.beta["beta1"] * t)
            rho = (1.0 - spec.nugget_c0) * math.exp(-(t[1] - t[0]) / spec.range_d)
            products.append(e[0] * e[1])
            terms.append(e[0] * e[1] - rho * e[0] ** 2)
        terms = np.asarray(terms)
        assert np.mean(products) > 0.1
        assert abs(terms.mean()) < 3 * terms.std(ddof=1) / math.sqrt(len(terms))
