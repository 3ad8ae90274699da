import numpy as np
import pytest

from bayesid.core import (
    HalfNormal,
    ImproperUniform,
    Normal,
    PreconditionError,
    PriorSpec,
    log_prior,
    simulate,
)
from bayesid.datasets import gen_pendulum
from bayesid.experiments import _mse_windows, _pendulum_predict, pendulum_fit
from bayesid.filtering import log_likelihood
from bayesid.inference import (
    Chain,
    DramConfig,
    EnsembleError,
    InitializationError,
    LogPosterior,
    MapOptions,
    StuckChainError,
    _dr_alpha,
    default_groups,
    dram_within_gibbs,
    map_estimate,
    posterior_predictive,
)
from bayesid.models import build_logistic_model, build_pendulum_model, pendulum_theta, pendulum_truth


def gaussian_logpdf(mean, cov):
    W = np.linalg.inv(cov)
    mean = np.asarray(mean)

    def f(x):
        r = np.asarray(x) - mean
        return -0.5 * r @ W @ r

    return f


class TestLogPosterior:
    def test_sum_of_likelihood_and_prior(self):
        m = build_logistic_model(3.2, x0=0.3, sigma=1e-4, gamma=1e-3)
        d = simulate(m.with_theta([0.3, 3.2, 0, 1e-3]), np.zeros((30, 1)))
        pri = PriorSpec([ImproperUniform(), Normal(3.0, 1.0), HalfNormal(1.0), HalfNormal(1.0)])
        lp = LogPosterior(m, d, pri)
        assert lp(m.theta) == pytest.approx(log_likelihood(m, d).log_likelihood + log_prior(pri, m.theta),
                                            rel=1e-12)

    def test_outside_support(self):
        m = build_logistic_model(3.2, sigma=1e-4, gamma=1e-3)
        d = simulate(m, np.zeros((10, 1)))
        pri = PriorSpec([ImproperUniform(), ImproperUniform(), HalfNormal(1.0), HalfNormal(1.0)])
        th = m.theta.copy()
        th[2] = -1.0
        assert LogPosterior(m, d, pri)(th) == -np.inf

    def test_prior_count_checked(self):
        m = build_logistic_model(3.2)
        with pytest.raises(PreconditionError):
            LogPosterior(m, simulate(m, np.zeros((5, 1))), PriorSpec([ImproperUniform()]))


class TestMap:
    def test_quadratic(self):
        res = map_estimate(lambda t: -(t[0] - 2.0) ** 2, [0.0])
        assert res.converged
        assert res.theta[0] == pytest.approx(2.0, abs=1e-6)

    def test_prior_only(self):
        pri = Normal(1.0, 0.5)
        res = map_estimate(lambda t: pri.logpdf(t[0]), [-3.0])
        assert res.theta[0] == pytest.approx(1.0, abs=1e-6)

    def test_log_coordinates_respect_positivity(self):
        res = map_estimate(lambda t: -(np.log(t[0]) - 1.0) ** 2 if t[0] > 0 else -np.inf, [0.1],
                           MapOptions(log_indices=(0,)))
        assert res.theta[0] == pytest.approx(np.e, rel=1e-5)

    def test_evaluation_cap(self):
        f = lambda t: -np.sum((t - np.arange(5.0)) ** 2 * np.arange(1.0, 6.0) ** 4)
        res = map_estimate(f, np.zeros(5), MapOptions(max_evals=20))
        assert not res.converged
        assert res.n_evals <= 20 + 11
        assert np.isfinite(res.log_post)

    def test_history_monotone(self):
        f = lambda t: -np.sum((t - 1.5) ** 4) - np.sum(t ** 2)
        res = map_estimate(f, np.full(3, -2.0))
        h = np.asarray(res.history)
        assert np.all(np.diff(h) >= 0)
        assert res.log_post == h[-1]

    def test_infeasible_start_without_sampler(self):
        with pytest.raises(InitializationError):
            map_estimate(lambda t: -np.inf, [0.0])

    def test_infeasible_start_resampled(self, rng):
        f = lambda t: -(t[0] - 3.0) ** 2 if t[0] > 1 else -np.inf
        res = map_estimate(f, [0.0], MapOptions(start_sampler=lambda r: r.uniform(1.5, 5.0, 1)), rng=rng)
        assert res.theta[0] == pytest.approx(3.0, abs=1e-5)

    def test_infeasible_start_gives_up(self, rng):
        with pytest.raises(InitializationError):
            map_estimate(lambda t: -np.inf, [0.0],
                         MapOptions(start_sampler=lambda r: r.normal(size=1), max_start_tries=5), rng=rng)

    def test_pendulum_beats_ls_era(self):
        data = gen_pendulum(0.1, 0.0, 0)
        n = data.meta["n_train"]
        est, theta, _ = pendulum_fit(data, 18, 0, 4000, np.random.default_rng(1))
        clean = data.meta["clean"]
        _, test_ls = _mse_windows(simulate(est, data.inputs).outputs, clean, n)
        _, test_map = _mse_windows(_pendulum_predict(theta, data.inputs), clean, n)
        assert test_map < test_ls


class TestDrAlpha:
    def test_single_stage_is_metropolis(self):
        W = [np.eye(1)]
        for lx, ly in [(0.0, -1.0), (-2.0, 0.5), (1.0, 1.0)]:
            a = _dr_alpha(([lx, ly], [0, 1]), [np.zeros(1), np.ones(1)], W, {})
            assert a == pytest.approx(min(1.0, np.exp(ly - lx)), rel=1e-14)

    def test_second_stage_formula(self, rng):
        W1 = np.linalg.inv(np.array([[1.0, 0.3], [0.3, 0.5]]))
        W2 = W1 * 25.0
        for _ in range(20):
            x, y1, y2 = rng.normal(size=(3, 2))
            lx, l1, l2 = rng.normal(size=3)
            # a second stage only runs after the first was rejected, so l1 < lx
            l1 = lx - abs(l1) - 1e-3
            a1 = lambda la, lb: min(1.0, np.exp(lb - la))
            q1 = lambda a, b: np.exp(-0.5 * (b - a) @ W1 @ (b - a))
            num = np.exp(l2) * q1(y2, y1) * (1 - a1(l2, l1))
            den = np.exp(lx) * q1(x, y1) * (1 - a1(lx, l1))
            expected = min(1.0, num / den)
            got = _dr_alpha(([lx, l1, l2], [0, 1, 2]), [x, y1, y2], [W1, W2], {})
            assert got == pytest.approx(expected, rel=1e-10, abs=1e-14)

    def test_non_finite_candidate_rejected(self):
        assert _dr_alpha(([0.0, -np.inf], [0, 1]), [np.zeros(1), np.ones(1)], [np.eye(1)], {}) == 0.0


class TestDram:
    def test_gaussian_target_moments(self):
        cov = np.array([[1.0, 0.6], [0.6, 2.0]])
        f = gaussian_logpdf([1.0, -1.0], cov)
        chain = dram_within_gibbs(f, [0.0, 0.0], DramConfig(n_samples=8000, burn_in=2000),
                                  rng=np.random.default_rng(3))
        kept = chain.kept()
        assert np.allclose(kept.mean(axis=0), [1.0, -1.0], atol=0.15)
        assert np.linalg.norm(np.cov(kept.T) - cov) / np.linalg.norm(cov) < 0.2

    def test_all_fixed(self):
        chain = dram_within_gibbs(lambda t: -t @ t, [0.5, 1.0], DramConfig(n_samples=50, burn_in=0),
                                  fixed=(0, 1), rng=np.random.default_rng(0))
        assert np.all(chain.samples == [0.5, 1.0])
        assert chain.groups == [] and chain.acceptance_rates.size == 0

    def test_fixed_indices_untouched(self):
        f = gaussian_logpdf(np.zeros(3), np.eye(3))
        chain = dram_within_gibbs(f, [0.1, 0.7, -0.2], DramConfig(n_samples=300, burn_in=0),
                                  fixed=(1,), rng=np.random.default_rng(0))
        assert np.all(chain.samples[:, 1] == 0.7)
        assert np.ptp(chain.samples[:, 0]) > 0

    def test_reproducible(self):
        f = gaussian_logpdf(np.zeros(2), np.eye(2))
        cfg = DramConfig(n_samples=400, burn_in=100)
        a = dram_within_gibbs(f, [0.3, 0.3], cfg, rng=np.random.default_rng(9))
        b = dram_within_gibbs(f, [0.3, 0.3], cfg, rng=np.random.default_rng(9))
        assert np.array_equal(a.samples, b.samples)

    def test_log_posts_recorded(self):
        f = gaussian_logpdf(np.zeros(2), np.eye(2))
        chain = dram_within_gibbs(f, [0.3, 0.3], DramConfig(n_samples=200, burn_in=0),
                                  groups=[[0], [1]], rng=np.random.default_rng(2))
        assert np.allclose(chain.log_posts, [f(s) for s in chain.samples], rtol=1e-12)
        assert chain.accept_counts.shape == (2,)

    def test_stuck_chain(self):
        f = lambda t: 0.0 if np.all(t == 0) else -np.inf
        with pytest.raises(StuckChainError):
            dram_within_gibbs(f, [0.0], DramConfig(n_samples=100, burn_in=0, stuck_limit=10),
                              rng=np.random.default_rng(0))

    def test_infinite_start(self):
        with pytest.raises(InitializationError):
            dram_within_gibbs(lambda t: -np.inf, [0.0], DramConfig(n_samples=10, burn_in=0))

    def test_groups_must_cover(self):
        with pytest.raises(PreconditionError):
            dram_within_gibbs(lambda t: 0.0, [0.0, 0.0], DramConfig(n_samples=10, burn_in=0), groups=[[0]])
        with pytest.raises(PreconditionError):
            dram_within_gibbs(lambda t: 0.0, [0.0, 0.0], DramConfig(n_samples=10, burn_in=0),
                              groups=[[0, 1], [1]])

    def test_config_validated(self):
        with pytest.raises(PreconditionError):
            DramConfig(n_samples=10, burn_in=10)
        with pytest.raises(PreconditionError):
            DramConfig(dr_stages=0)

    def test_default_groups(self):
        model = build_pendulum_model(pendulum_theta(pendulum_truth(0.1), (1e-3, 1e-3), 1e-2))
        g = default_groups(model, fixed=(0, 1))
        assert [list(x) for x in g] == [list(range(2, 8)), [10, 11, 12]]

    def test_csv_round_trip(self, tmp_path):
        f = gaussian_logpdf(np.zeros(2), np.eye(2))
        chain = dram_within_gibbs(f, [0.3, 0.3], DramConfig(n_samples=50, burn_in=10),
                                  rng=np.random.default_rng(2))
        chain.to_csv(tmp_path / "chain.csv")
        back = Chain.from_csv(tmp_path / "chain.csv")
        assert np.array_equal(back.samples, chain.samples)
        assert np.array_equal(back.log_posts, chain.log_posts)
        assert back.burn_in == 10


class TestPredictive:
    def _chain(self, theta, n=20):
        th = np.tile(theta, (n, 1))
        return Chain(th, np.zeros(n), [], np.zeros(0), np.zeros(0), burn_in=5)

    def test_identical_draws_identical_trajectories(self, rng):
        truth = pendulum_truth(0.1)
        theta = pendulum_theta(truth, (1e-4, 1e-4), 1e-2, x0=(0.2, 0.0))
        d = simulate(truth, rng.normal(size=(30, 1)))
        ens = posterior_predictive(self._chain(theta), build_pendulum_model, d, n_draws=5)
        assert ens.trajectories.shape == (5, 30, 1)
        assert np.all(ens.trajectories == ens.trajectories[0])
        assert np.allclose(ens.mean, _pendulum_predict(theta, d.inputs))

    def test_forecast_horizon(self, rng):
        truth = pendulum_truth(0.1)
        theta = pendulum_theta(truth, (1e-4, 1e-4), 1e-2)
        d = simulate(truth, rng.normal(size=(30, 1)))
        fut = rng.normal(size=(10, 1))
        ens = posterior_predictive(self._chain(theta), build_pendulum_model, d, horizon=10,
                                   future_inputs=fut, n_draws=3)
        full = _pendulum_predict(theta, np.vstack([d.inputs, fut]))
        assert np.allclose(ens.trajectories[0], full)
        with pytest.raises(PreconditionError):
            posterior_predictive(self._chain(theta), build_pendulum_model, d, horizon=10)

    def test_stochastic_mode_spread(self, rng):
        truth = pendulum_truth(0.1)
        theta = pendulum_theta(truth, (1e-3, 1e-3), 1e-2)
        d = simulate(truth, rng.normal(size=(30, 1)))
        ens = posterior_predictive(self._chain(theta), build_pendulum_model, d, mode="stochastic",
                                   n_draws=10, rng=rng)
        assert np.ptp(ens.trajectories[:, 5, 0]) > 0

    def test_diverging_ensemble(self):
        m = build_logistic_model(60.0, x0=0.9)
        d = simulate(build_logistic_model(3.0), np.zeros((80, 1)))
        with pytest.raises(EnsembleError):
            posterior_predictive(self._chain(m.theta), build_logistic_model_from_theta, d, n_draws=4)


def build_logistic_model_from_theta(theta):
    return build_logistic_model(theta[1], x0=theta[0], sigma=theta[2], gamma=theta[3])
