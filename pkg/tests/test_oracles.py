import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtcrl.oracles import (BayesParams, LinearRegProblem, OracleError,
                           SpuriousNotIdentifiableError,
                           UnsupportedExtremeError, bayes_logit,
                           bayes_posterior, bayes_weight_extremes,
                           enumerated_posterior, generalization_gap,
                           lstsq_spurious_weight, make_problem,
                           minnorm_spurious_weight, oracle_check,
                           overparam_spurious_weight,
                           underparam_spurious_weight)


def random_params(seed, m_c, d=3):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=d), 1.0 + rng.random(), rng.normal(size=d),
            1.0 + rng.random(), m_c)


class TestBayesPosterior:
    def test_symmetric_at_origin(self):
        for m_c in (0.1, 0.5, 0.9, 1.0):
            params = BayesParams([1.0, -2.0], [0.5, 0.5], m_c)
            assert bayes_posterior(np.zeros(2), np.zeros(2), params) == 0.5

    def test_matches_enumeration(self):
        mu_a, sa, mu_b, sb, m_c = random_params(0, 0.8)
        params = BayesParams.from_moments(mu_a, sa, mu_b, sb, m_c)
        rng = np.random.default_rng(1)
        f_a, f_b = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
        closed = bayes_posterior(f_a, f_b, params)
        brute = enumerated_posterior(f_a, f_b, mu_a, sa, mu_b, sb, m_c)
        np.testing.assert_allclose(closed, brute, atol=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6), st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]))
    def test_label_flip_symmetry(self, seed, m_c):
        mu_a, sa, mu_b, sb, _ = random_params(seed, m_c)
        params = BayesParams.from_moments(mu_a, sa, mu_b, sb, m_c)
        rng = np.random.default_rng(seed + 1)
        f_a, f_b = rng.normal(size=3), rng.normal(size=3)
        total = (bayes_posterior(f_a, f_b, params)
                 + bayes_posterior(-f_a, -f_b, params))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_monotone_along_causal_mean(self):
        mu_a = np.array([0.8, -0.4, 0.2])
        params = BayesParams.from_moments(mu_a, 1.0, np.ones(3), 1.0, 0.7)
        f_b = np.array([0.3, 0.1, -0.2])
        posts = [bayes_posterior(alpha * mu_a, f_b, params)
                 for alpha in np.linspace(-2, 2, 9)]
        assert np.all(np.diff(posts) > 0)

    def test_half_coupling_ignores_second_factor_exactly(self):
        params = BayesParams.from_moments(*random_params(5, 0.5)[:4], 0.5)
        rng = np.random.default_rng(6)
        f_a = rng.normal(size=3)
        base = bayes_posterior(f_a, rng.normal(size=3), params)
        for _ in range(5):
            assert bayes_posterior(f_a, rng.normal(size=3), params) == base

    def test_params_validation(self):
        with pytest.raises(OracleError):
            BayesParams([np.inf], [0.0], 0.5)
        with pytest.raises(OracleError):
            BayesParams([1.0], [0.0], 1.5)


class TestExtremeWeights:
    def test_full_coupling_weights(self):
        mu_a, sa, mu_b, sb, _ = random_params(7, 1.0)
        params = BayesParams.from_moments(mu_a, sa, mu_b, sb, 1.0)
        w = bayes_weight_extremes(params)
        np.testing.assert_array_equal(w[:3], 2 * params.beta_a)
        np.testing.assert_array_equal(w[3:], 2 * params.beta_b)
        rng = np.random.default_rng(8)
        f_a, f_b = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        linear = f_a @ w[:3] + f_b @ w[3:]
        np.testing.assert_allclose(bayes_logit(f_a, f_b, params), linear,
                                   atol=1e-12)

    def test_half_coupling_weights(self):
        mu_a, sa, mu_b, sb, _ = random_params(9, 0.5)
        params = BayesParams.from_moments(mu_a, sa, mu_b, sb, 0.5)
        w = bayes_weight_extremes(params)
        np.testing.assert_array_equal(w[3:], 0.0)
        rng = np.random.default_rng(10)
        f_a, f_b = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        np.testing.assert_allclose(bayes_logit(f_a, f_b, params),
                                   f_a @ w[:3], atol=1e-12)

    def test_intermediate_coupling_rejected(self):
        params = BayesParams([1.0], [1.0], 0.7)
        with pytest.raises(UnsupportedExtremeError):
            bayes_weight_extremes(params)


class TestUnderparam:
    def test_noiseless_recovers_zero(self):
        p = make_problem(n=40, d=6, sigma=0.0, seed=0)
        assert underparam_spurious_weight(p) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_matches_pseudo_inverse(self, seed):
        p = make_problem(n=50, d=5, sigma=0.7, seed=seed)
        assert underparam_spurious_weight(p) == pytest.approx(
            lstsq_spurious_weight(p), abs=1e-8)

    def test_orthogonal_spurious_with_aligned_noise(self):
        rng = np.random.default_rng(3)
        c = rng.normal(size=(30, 4))
        # build s orthogonal to col(c)
        s = rng.normal(size=30)
        s -= c @ np.linalg.lstsq(c, s, rcond=None)[0]
        eps = 0.3 * s
        p = LinearRegProblem(c, s, rng.normal(size=4), eps)
        expected = (eps @ s) / (s @ s)
        assert underparam_spurious_weight(p) == pytest.approx(expected,
                                                              rel=1e-9)
        assert lstsq_spurious_weight(p) == pytest.approx(expected, rel=1e-9)

    def test_spurious_in_causal_span_rejected(self):
        rng = np.random.default_rng(4)
        c = rng.normal(size=(20, 3))
        s = c @ np.array([1.0, -2.0, 0.5])
        p = LinearRegProblem(c, s, np.ones(3), np.zeros(20))
        with pytest.raises(SpuriousNotIdentifiableError):
            underparam_spurious_weight(p)

    def test_mode_precondition(self):
        p = make_problem(n=5, d=10, sigma=0.1, seed=0)
        with pytest.raises(OracleError, match="under-parametrized"):
            underparam_spurious_weight(p)


class TestOverparam:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_matches_min_norm(self, seed):
        p = make_problem(n=10, d=50, sigma=0.7, seed=seed)
        assert overparam_spurious_weight(p) == pytest.approx(
            minnorm_spurious_weight(p), abs=1e-8)

    def test_zero_targets(self):
        p = make_problem(n=8, d=30, sigma=0.0, seed=1)
        p.theta_star[:] = 0.0
        assert overparam_spurious_weight(p) == 0.0

    def test_absent_spurious_column(self):
        p = make_problem(n=8, d=30, sigma=0.5, seed=2)
        p.spurious[:] = 0.0
        assert overparam_spurious_weight(p) == 0.0

    def test_mode_precondition(self):
        p = make_problem(n=30, d=5, sigma=0.1, seed=0)
        with pytest.raises(OracleError, match="over-parametrized"):
            overparam_spurious_weight(p)


class TestGeneralizationGap:
    def test_noiseless_gap_vanishes(self):
        p = make_problem(n=40, d=6, sigma=0.0, seed=0)
        l_s, l_c = generalization_gap(p, n_test=200, draws=5, seed=1)
        assert l_s == pytest.approx(0.0, abs=1e-20)
        assert l_c == pytest.approx(0.0, abs=1e-20)

    def test_spurious_column_never_helps_under_noise(self):
        p = make_problem(n=30, d=8, sigma=1.0, seed=2)
        l_s, l_c = generalization_gap(p, n_test=500, draws=150, seed=3)
        assert l_s >= l_c

    def test_gap_grows_with_noise(self):
        gaps = []
        for sigma in (0.1, 0.5, 1.0):
            p = make_problem(n=30, d=8, sigma=sigma, seed=4)
            l_s, l_c = generalization_gap(p, n_test=500, draws=150, seed=5)
            gaps.append(l_s - l_c)
        assert gaps[0] < gaps[-1]


def test_oracle_check_all_pass():
    rows = oracle_check(n_seeds=20)
    assert rows and all(r["passed"] for r in rows)
