import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bayesid.core import (
    Dataset,
    DivergenceError,
    GaussianBelief,
    HalfNormal,
    ImproperUniform,
    LtiModel,
    Normal,
    PreconditionError,
    PriorSpec,
    log_prior,
    psd_factor,
    simulate,
    spectral_radius,
)


def _lti(dx=2, du=1, dy=1, rho=0.5, seed=0, noise=0.1):
    r = np.random.default_rng(seed)
    A = r.normal(size=(dx, dx))
    A *= rho / spectral_radius(A)
    return LtiModel(A, r.normal(size=(dx, du)), r.normal(size=(dy, dx)), r.normal(size=(dy, du)),
                    noise * np.eye(dx), noise * np.eye(dy))


class TestLtiModel:
    def test_dimensions(self):
        m = _lti(3, 2, 4)
        assert (m.dx, m.du, m.dy) == (3, 2, 4)
        assert m.x0.mean.shape == (3,)
        assert not np.any(m.x0.cov)

    def test_rejects_indefinite_noise(self):
        with pytest.raises(PreconditionError):
            LtiModel(np.eye(2), np.ones((2, 1)), np.ones((1, 2)), [[0.0]], -np.eye(2), [[1.0]])

    def test_rejects_asymmetric_noise(self):
        with pytest.raises(PreconditionError):
            LtiModel(np.eye(2), np.ones((2, 1)), np.ones((1, 2)), [[0.0]], [[1.0, 0.5], [0.0, 1.0]], [[1.0]])

    def test_noiseless_zeroes_covariances(self):
        m = _lti().noiseless()
        assert not np.any(m.Sigma) and not np.any(m.Gamma)


class TestSpectralRadius:
    def test_diagonal(self):
        assert spectral_radius(np.diag([0.3, -0.9, 0.5])) == pytest.approx(0.9)

    def test_rotation(self):
        c, s = math.cos(0.3), math.sin(0.3)
        assert spectral_radius(0.7 * np.array([[c, -s], [s, c]])) == pytest.approx(0.7)

    def test_non_square(self):
        with pytest.raises(PreconditionError):
            spectral_radius(np.ones((2, 3)))


class TestPsdFactor:
    @given(hnp.arrays(float, (3, 3), elements=st.floats(-3, 3)))
    def test_reconstructs_psd(self, M):
        S = M @ M.T
        L = psd_factor(S)
        assert np.allclose(L @ L.T, S, atol=1e-8 * max(1.0, np.abs(S).max()))

    def test_zero(self):
        assert not np.any(psd_factor(np.zeros((2, 2))))


class TestSimulate:
    def test_noiseless_matches_recursion(self):
        m = _lti(2, 1, 1)
        U = np.arange(6, dtype=float)[:, None] / 6
        d = simulate(m, U)
        x = np.zeros(2)
        for k in range(6):
            assert d.outputs[k] == pytest.approx(m.H @ x + m.D @ U[k])
            x = m.A @ x + m.B @ U[k]

    def test_stochastic_needs_rng(self):
        with pytest.raises(PreconditionError):
            simulate(_lti(), np.zeros((3, 1)), stochastic=True)

    def test_seeded_reproducible(self):
        m = _lti()
        a = simulate(m, np.ones((20, 1)), rng=np.random.default_rng(4), stochastic=True)
        b = simulate(m, np.ones((20, 1)), rng=np.random.default_rng(4), stochastic=True)
        assert np.array_equal(a.outputs, b.outputs)

    def test_divergence_reports_step(self):
        m = LtiModel([[1e200]], [[0.0]], [[1.0]], [[0.0]], [[0.0]], [[0.0]],
                     GaussianBelief.point([1e200]))
        with pytest.raises(DivergenceError) as exc:
            simulate(m, np.zeros((5, 1)))
        assert exc.value.step is not None

    def test_input_width_checked(self):
        with pytest.raises(PreconditionError):
            simulate(_lti(du=2), np.zeros((4, 1)))


class TestDataset:
    def test_record_length(self):
        d = Dataset(np.arange(5.0), np.zeros((5, 1)), np.zeros((5, 2)))
        assert len(d) == 5 and d.n == 4 and d.dy == 2

    def test_times_must_increase(self):
        with pytest.raises(PreconditionError):
            Dataset([0.0, 1.0, 1.0], np.zeros(3), np.zeros(3))

    def test_mask_length(self):
        with pytest.raises(PreconditionError):
            Dataset([0.0, 1.0], np.zeros(2), np.zeros(2), mask=[True])

    def test_observed_default_all(self):
        d = Dataset([0.0, 1.0], np.zeros(2), np.zeros(2))
        assert d.observed().all()

    def test_slice_keeps_mask(self):
        d = Dataset(np.arange(4.0), np.zeros(4), np.arange(4.0), mask=[True, False, True, True])
        s = d.slice(1, 3)
        assert list(s.mask) == [False, True]
        assert list(s.outputs[:, 0]) == [1.0, 2.0]


class TestPriors:
    def test_improper_uniform(self):
        assert ImproperUniform().logpdf(1e300) == 0.0
        assert ImproperUniform(0, 1).logpdf(2.0) == -np.inf

    def test_normal_density(self):
        from scipy.stats import norm

        assert Normal(1.0, 4.0).logpdf(0.3) == pytest.approx(norm(1.0, 2.0).logpdf(0.3))

    def test_half_normal_density(self):
        from scipy.stats import halfnorm

        assert HalfNormal(2.0).logpdf(0.7) == pytest.approx(halfnorm(scale=math.sqrt(2.0)).logpdf(0.7))
        assert HalfNormal(2.0).logpdf(-0.1) == -np.inf

    def test_invalid_variance(self):
        with pytest.raises(PreconditionError):
            HalfNormal(0.0)

    def test_log_prior_sums(self):
        pri = PriorSpec([Normal(0, 1), HalfNormal(1)])
        assert log_prior(pri, [0.0, 1.0]) == pytest.approx(Normal(0, 1).logpdf(0) + HalfNormal(1).logpdf(1))
        assert log_prior(pri, [0.0, -1.0]) == -np.inf

    def test_length_mismatch(self):
        with pytest.raises(PreconditionError):
            log_prior(PriorSpec([Normal()]), [0.0, 1.0])
