import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesid.core import (
    Dataset,
    GaussianBelief,
    LtiModel,
    NumericalError,
    PreconditionError,
    simulate,
    spectral_radius,
)
from bayesid.filtering import (
    UkfConfig,
    io_log_likelihood,
    kalman_log_marginal_likelihood,
    kalman_loglik_batch,
    log_likelihood,
    loglik_batch,
    ukf_log_marginal_likelihood,
    ukf_loglik_batch,
    unscented_propagate,
)
from bayesid.models import build_logistic_model, build_pendulum_model, pendulum_theta, pendulum_truth


def random_lti(r, dx, du, dy, rho=0.9, x0=None):
    A = r.normal(size=(dx, dx))
    A *= r.uniform(0.1, rho) / spectral_radius(A)
    Ms = r.normal(size=(dx, dx))
    Mg = r.normal(size=(dy, dy))
    return LtiModel(A, r.normal(size=(dx, du)), r.normal(size=(dy, dx)), r.normal(size=(dy, du)),
                    0.1 * Ms @ Ms.T + 0.01 * np.eye(dx), 0.1 * Mg @ Mg.T + 0.05 * np.eye(dy), x0)


def scalar_loglik(y, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (y - mean) ** 2 / var)


class TestKalman:
    def test_scalar_hand_computed(self):
        # x0 = 0, A = 1, Sigma = 1, Gamma = 1, H = 1: y_0 ~ N(0, 1), then update
        m = LtiModel([[1.0]], [[0.0]], [[1.0]], [[0.0]], [[1.0]], [[1.0]])
        d = Dataset([0.0, 1.0], np.zeros(2), [0.5, -0.2])
        # step 0: S = 1, no state uncertainty so the gain is zero
        # step 1: P = 1, S = 2
        expected = scalar_loglik(0.5, 0.0, 1.0) + scalar_loglik(-0.2, 0.0, 2.0)
        assert kalman_log_marginal_likelihood(m, d).log_likelihood == pytest.approx(expected, rel=1e-14)

    def test_prior_covariance_used(self):
        m = LtiModel([[0.5]], [[0.0]], [[2.0]], [[0.0]], [[0.0]], [[1.0]], GaussianBelief([1.0], [[3.0]]))
        d = Dataset([0.0], [0.0], [1.5])
        expected = scalar_loglik(1.5, 2.0, 4.0 * 3.0 + 1.0)
        assert kalman_log_marginal_likelihood(m, d).log_likelihood == pytest.approx(expected, rel=1e-14)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
    def test_matches_io_oracle(self, seed, dx, du, dy):
        r = np.random.default_rng(seed)
        m = random_lti(r, dx, du, dy)
        d = simulate(m, r.normal(size=(15, du)), rng=r, stochastic=True)
        kf = kalman_log_marginal_likelihood(m, d).log_likelihood
        io = io_log_likelihood(m, d)
        assert abs(kf - io) <= 1e-8 * abs(kf)

    def test_matches_io_oracle_nonzero_initial_state(self, rng):
        m = random_lti(rng, 3, 2, 2, x0=GaussianBelief(np.array([1.0, -2.0, 0.5]), 0.3 * np.eye(3)))
        d = simulate(m, rng.normal(size=(12, 2)), rng=rng, stochastic=True)
        assert kalman_log_marginal_likelihood(m, d).log_likelihood == pytest.approx(
            io_log_likelihood(m, d), rel=1e-10)

    def test_masked_outputs_skipped(self, rng):
        m = random_lti(rng, 2, 1, 1)
        d = simulate(m, rng.normal(size=(10, 1)), rng=rng, stochastic=True)
        mask = np.ones(10, dtype=bool)
        mask[[2, 5]] = False
        dm = Dataset(d.times, d.inputs, d.outputs, mask)
        res = kalman_log_marginal_likelihood(m, dm)
        assert res.innovations[2] is None and res.innovations[5] is None
        assert res.log_likelihood == pytest.approx(io_log_likelihood(m, dm), rel=1e-10)

    def test_accumulators_sum(self, rng):
        m = random_lti(rng, 3, 1, 2)
        d = simulate(m, rng.normal(size=(30, 1)), rng=rng, stochastic=True)
        r = kalman_log_marginal_likelihood(m, d)
        assert abs(r.quad_term + r.logdet_term + r.const_term - r.log_likelihood) <= 1e-12 * abs(r.log_likelihood)
        assert r.const_term == pytest.approx(-0.5 * 30 * 2 * np.log(2 * np.pi))
        assert r.quad_term <= 0

    def test_recorded_beliefs(self, rng):
        m = random_lti(rng, 2, 1, 1)
        d = simulate(m, rng.normal(size=(8, 1)), rng=rng, stochastic=True)
        r = kalman_log_marginal_likelihood(m, d)
        assert len(r.predicted) == len(r.updated) == len(r.innovations) == 8
        for b in r.updated:
            assert np.all(np.linalg.eigvalsh(b.cov) >= -1e-12)

    def test_batch_agrees_with_single(self, rng):
        models = [random_lti(rng, 2, 1, 1) for _ in range(4)]
        d = simulate(models[0], rng.normal(size=(20, 1)), rng=rng, stochastic=True)
        stack = lambda name: np.array([getattr(m, name) for m in models])
        ll = kalman_loglik_batch(stack("A"), stack("B"), stack("H"), stack("D"), stack("Sigma"),
                                 stack("Gamma"), np.zeros(2), np.zeros((2, 2)), d)
        single = [kalman_log_marginal_likelihood(m, d).log_likelihood for m in models]
        assert np.allclose(ll, single, rtol=1e-13)

    def test_singular_innovation_raises(self):
        m = LtiModel([[1.0]], [[0.0]], [[1.0]], [[0.0]], [[0.0]], [[0.0]])
        d = Dataset([0.0, 1.0], [0.0, 0.0], [1.0, 1.0])
        with pytest.raises(NumericalError):
            kalman_log_marginal_likelihood(m, d)

    def test_batch_flags_failures(self):
        d = Dataset([0.0, 1.0], [0.0, 0.0], [1.0, 1.0])
        Gam = np.array([[[0.0]], [[1.0]]])
        ll = kalman_loglik_batch([[1.0]], [[0.0]], [[1.0]], [[0.0]], [[0.0]], Gam, [0.0], [[0.0]], d)
        assert ll[0] == -np.inf and np.isfinite(ll[1])

    def test_dimension_mismatch(self, rng):
        m = random_lti(rng, 2, 1, 2)
        d = Dataset([0.0, 1.0], np.zeros(2), np.zeros(2))
        with pytest.raises(PreconditionError):
            kalman_log_marginal_likelihood(m, d)


class TestUnscented:
    def test_matches_kalman_on_linear_model(self, rng):
        truth = pendulum_truth(0.1, 1e-2)
        theta = pendulum_theta(truth, (1e-3, 2e-3), 1e-2, x0=(0.3, -0.1))
        linear = build_pendulum_model(theta)
        nonlinear = dataclasses.replace(linear, linear=None)
        d = simulate(truth, rng.normal(0, 0.3, (60, 1)), rng=rng, stochastic=True)
        kf = log_likelihood(linear, d).log_likelihood
        uk = ukf_log_marginal_likelihood(nonlinear, d).log_likelihood
        assert abs(kf - uk) <= 1e-8 * abs(kf)

    def test_weights_reproduce_mean_and_cov_of_linear_map(self):
        cfg = UkfConfig()
        model = build_pendulum_model(np.r_[0, 0, 0.9, 0.1, -0.2, 0.8, 0, 0, 1, 0, 0, 0, 1.0])
        mean = np.array([0.4, -1.0])
        cov = np.array([[0.5, 0.1], [0.1, 0.2]])
        m, P = unscented_propagate(model, model.theta, mean, cov, np.zeros((1, 1)), cfg)
        A = np.array([[0.9, -0.2], [0.1, 0.8]])
        assert np.allclose(m, A @ mean, atol=1e-12)
        assert np.allclose(P, A @ cov @ A.T, atol=1e-10)

    def test_quadratic_map_mean_exact(self):
        # E[r x (1 - x)] = r (m - m^2 - v) for x ~ N(m, v)
        model = build_logistic_model(3.0, sigma=0.0)
        m, P = unscented_propagate(model, model.theta, [0.3], [[0.01]], np.zeros((1, 1)))
        assert m[0] == pytest.approx(3.0 * (0.3 - 0.09 - 0.01), rel=1e-9)

    def test_batch_rows_independent(self, rng):
        model = build_logistic_model(3.2, sigma=1e-4, gamma=1e-3)
        d = simulate(model, np.zeros((25, 1)))
        th = np.tile(model.theta, (3, 1))
        th[:, 1] = [2.9, 3.2, 3.5]
        batch = ukf_loglik_batch(model, th, d)
        single = [ukf_log_marginal_likelihood(model.with_theta(t), d).log_likelihood for t in th]
        assert np.allclose(batch, single, rtol=1e-12)

    def test_invalid_alpha(self):
        with pytest.raises(PreconditionError):
            UkfConfig(alpha=0.0)


class TestDispatch:
    def test_linear_family_uses_kalman(self, rng):
        truth = pendulum_truth(0.2, 1e-2)
        theta = pendulum_theta(truth, (1e-4, 1e-4), 1e-2)
        model = build_pendulum_model(theta)
        d = simulate(truth, rng.normal(size=(30, 1)), rng=rng, stochastic=True)
        lti = LtiModel(truth.A, truth.B, truth.H, truth.D, np.diag([1e-4, 1e-4]), [[1e-2]])
        assert log_likelihood(model, d).log_likelihood == pytest.approx(
            kalman_log_marginal_likelihood(lti, d).log_likelihood, rel=1e-13)
        assert loglik_batch(model, theta[None], d)[0] == pytest.approx(
            kalman_log_marginal_likelihood(lti, d).log_likelihood, rel=1e-13)

    def test_negative_variance_gives_minus_inf(self, rng):
        theta = pendulum_theta(pendulum_truth(0.2), (1e-4, 1e-4), 1e-2)
        bad = theta.copy()
        bad[12] = -1.0
        d = simulate(pendulum_truth(0.2), rng.normal(size=(10, 1)))
        ll = loglik_batch(build_pendulum_model(theta), np.vstack([theta, bad]), d)
        assert np.isfinite(ll[0]) and ll[1] == -np.inf
