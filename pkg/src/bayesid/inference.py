"""MAP estimation, DRAM-within-Gibbs sampling and posterior prediction."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .core import (
    BayesIdError,
    NonlinearModel,
    NumericalError,
    PreconditionError,
    log_prior,
)
from .filtering import UkfConfig, log_likelihood, loglik_batch

log = logging.getLogger(__name__)


class InitializationError(BayesIdError):
    """No starting point with a finite log posterior was found."""


class StuckChainError(NumericalError):
    """Every proposal has been non-finite for too many consecutive sweeps."""


class EnsembleError(NumericalError):
    """Too many posterior-predictive draws diverged."""


# ---------------------------------------------------------------------------
# log posterior
# ---------------------------------------------------------------------------

class LogPosterior:
    """Filter log-likelihood plus log prior, with a batched entry point."""

    def __init__(self, model: NonlinearModel, data, priors, cfg: UkfConfig = UkfConfig()):
        if len(priors) != model.n_params:
            raise PreconditionError(f"{len(priors)} priors for {model.n_params} parameters")
        self.model = model
        self.data = data
        self.priors = priors
        self.cfg = cfg

    def prior(self, thetas):
        thetas = np.atleast_2d(thetas)
        return np.array([log_prior(self.priors, th) for th in thetas])

    def batch(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        lp = self.prior(thetas)
        ok = np.isfinite(lp)
        out = np.full(thetas.shape[0], -np.inf)
        if np.any(ok):
            ll = loglik_batch(self.model, thetas[ok], self.data, self.cfg)
            out[ok] = ll + lp[ok]
        out[np.isnan(out)] = -np.inf
        return out

    def __call__(self, theta):
        return float(self.batch(np.asarray(theta, dtype=float)[None])[0])


def _batch_eval(log_post, thetas):
    if hasattr(log_post, "batch"):
        return np.asarray(log_post.batch(thetas), dtype=float)
    return np.array([float(log_post(t)) for t in thetas])


# ---------------------------------------------------------------------------
# MAP
# ---------------------------------------------------------------------------

@dataclass
class MapOptions:
    """Settings for :func:`map_estimate`.

    Indices in ``log_indices`` are optimized as log(theta_i) with the
    lower bound log(``log_floor``).
    """

    max_evals: int = 10_000
    fd_step: float = 1e-6
    log_indices: Sequence[int] = ()
    log_floor: float = 1e-14
    max_start_tries: int = 100
    start_sampler: Optional[Callable] = None
    ftol: float = 1e-15
    gtol: float = 1e-10


@dataclass
class MapResult:
    theta: np.ndarray
    log_post: float
    converged: bool
    n_evals: int
    history: list = field(default_factory=list)
    message: str = ""

    def __iter__(self):
        yield self.theta
        yield self.log_post


class _Budget(Exception):
    pass


_BAD = 1e100


def map_estimate(log_post, theta0, opts: MapOptions = MapOptions(), rng=None) -> MapResult:
    """Maximize a log posterior by L-BFGS-B with central finite differences.

    Non-finite objective values are mapped to a large finite number. The
    best iterate seen is returned even when the evaluation cap stops the
    run early (then ``converged`` is False).
    """
    theta0 = np.asarray(theta0, dtype=float).ravel().copy()
    p = theta0.size
    logi = np.zeros(p, dtype=bool)
    logi[list(opts.log_indices)] = True
    rng = np.random.default_rng() if rng is None else rng

    lp0 = float(_batch_eval(log_post, theta0[None])[0])
    tries = 0
    while not np.isfinite(lp0) or (np.any(theta0[logi] <= 0)):
        if opts.start_sampler is None or tries >= opts.max_start_tries:
            raise InitializationError(f"no finite log posterior after {tries} start attempts")
        theta0 = np.asarray(opts.start_sampler(rng), dtype=float).ravel()
        lp0 = float(_batch_eval(log_post, theta0[None])[0])
        tries += 1

    floor = np.log(opts.log_floor)

    def to_theta(s):
        th = np.array(s, dtype=float, copy=True)
        th[..., logi] = np.exp(th[..., logi])
        return th

    s0 = theta0.copy()
    s0[logi] = np.maximum(np.log(theta0[logi]), floor)
    bounds = [(floor, None) if li else (None, None) for li in logi]

    state = {"evals": 0, "best": -np.inf, "best_s": s0.copy(), "history": []}

    def evaluate(S):
        S = np.atleast_2d(S)
        if state["evals"] >= opts.max_evals:
            raise _Budget
        vals = _batch_eval(log_post, to_theta(S))
        state["evals"] += S.shape[0]
        vals = np.where(np.isfinite(vals), vals, -np.inf)
        i = int(np.argmax(vals))
        if vals[i] > state["best"]:
            state["best"] = float(vals[i])
            state["best_s"] = S[i].copy()
        state["history"].append(state["best"])
        return vals

    def fun_grad(s):
        h = opts.fd_step * np.maximum(1.0, np.abs(s))
        E = np.diag(h)
        S = np.vstack([s[None], s + E, s - E])
        # respect lower bounds for the backward probes
        lower = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
        S[1 + p:] = np.maximum(S[1 + p:], lower)
        v = -evaluate(S)
        f0, fp, fm = v[0], v[1:1 + p], v[1 + p:]
        hm = s - S[1 + p:].diagonal()
        g = np.zeros(p)
        both = np.isfinite(fp) & np.isfinite(fm) & (hm > 0)
        g[both] = (fp[both] - fm[both]) / (h[both] + hm[both])
        fwd = np.isfinite(fp) & ~both & np.isfinite(f0)
        g[fwd] = (fp[fwd] - f0) / h[fwd]
        bwd = np.isfinite(fm) & ~both & ~fwd & np.isfinite(f0) & (hm > 0)
        g[bwd] = (f0 - fm[bwd]) / np.where(hm[bwd] > 0, hm[bwd], 1.0)
        if not np.isfinite(f0):
            return _BAD, np.zeros(p)
        return f0, g

    converged, message = False, ""
    try:
        res = minimize(fun_grad, s0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": opts.max_evals, "maxfun": opts.max_evals,
                                "ftol": opts.ftol, "gtol": opts.gtol})
        converged = bool(res.success)
        message = str(res.message)
    except _Budget:
        message = "evaluation cap reached"
    theta = to_theta(state["best_s"])
    return MapResult(theta, state["best"], converged, state["evals"], state["history"], message)


# ---------------------------------------------------------------------------
# DRAM within Gibbs
# ---------------------------------------------------------------------------

@dataclass
class DramConfig:
    n_samples: int = 20_000
    burn_in: int = 5_000
    adapt_interval: int = 100
    dr_stages: int = 2
    dr_scale: float = 5.0
    adapt_scale: Optional[float] = None
    adapt_epsilon: float = 1e-10
    init_proposal_cov: Optional[dict] = None
    init_scale: float = 0.1
    stuck_limit: int = 1000

    def __post_init__(self):
        if self.dr_stages < 1:
            raise PreconditionError("dr_stages must be at least 1")
        if not 0 <= self.burn_in < self.n_samples:
            raise PreconditionError("burn_in must be in [0, n_samples)")
        if self.adapt_interval < 1:
            raise PreconditionError("adapt_interval must be positive")


@dataclass
class Chain:
    samples: np.ndarray
    log_posts: np.ndarray
    groups: list
    accept_counts: np.ndarray
    proposal_counts: np.ndarray
    burn_in: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def acceptance_rates(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            r = self.accept_counts / self.proposal_counts
        return np.where(self.proposal_counts > 0, r, 1.0)

    def kept(self):
        return self.samples[self.burn_in:]

    def to_csv(self, path, extra_meta=None):
        d = self.samples.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "log_post"] + [f"theta_{i + 1}" for i in range(d)])
            for i, (lp, th) in enumerate(zip(self.log_posts, self.samples)):
                w.writerow([i, repr(float(lp))] + [repr(float(v)) for v in th])
        meta = {
            "burn_in": self.burn_in,
            "groups": [list(map(int, g)) for g in self.groups],
            "acceptance_rates": self.acceptance_rates.tolist(),
            **self.meta,
            **(extra_meta or {}),
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, default=str)

    @classmethod
    def from_csv(cls, path):
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        try:
            with open(str(path) + ".json") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            meta = {}
        groups = [np.asarray(g) for g in meta.get("groups", [])]
        rates = np.asarray(meta.get("acceptance_rates", [1.0] * len(groups)), dtype=float)
        return cls(raw[:, 2:], raw[:, 1], groups, rates, np.ones_like(rates),
                   int(meta.get("burn_in", 0)), meta)


def default_groups(model: NonlinearModel, fixed=()):
    """Initial state, dynamics, and noise-variance groups minus fixed indices."""
    fixed = set(int(i) for i in fixed)
    parts = [model.indices("x0"), model.indices("psi"),
             np.concatenate([model.indices("sigma"), model.indices("gamma")])]
    out = []
    for g in parts:
        g = np.array([i for i in g if i not in fixed], dtype=int)
        if g.size:
            out.append(g)
    return out


def _dr_alpha(path_lp, path_x, inv_covs, cache):
    """Acceptance probability of the last point on a delayed-rejection path.

    ``path_x[0]`` is the current state; stage-i proposals are centered at
    it with covariance inv(inv_covs[i - 1])^{-1}.
    """
    key = tuple(path_lp[1])
    if key in cache:
        return cache[key]
    lps, ids = path_lp
    s = len(ids) - 1
    if not np.isfinite(lps[-1]):
        cache[key] = 0.0
        return 0.0
    if not np.isfinite(lps[0]):
        cache[key] = 1.0
        return 1.0
    num, den = 1.0, 1.0
    for k in range(1, s):
        den *= 1.0 - _dr_alpha((lps[:k + 1], ids[:k + 1]), path_x, inv_covs, cache)
        rev = (lps[::-1][:k + 1], ids[::-1][:k + 1])
        num *= 1.0 - _dr_alpha(rev, path_x, inv_covs, cache)
        if num == 0.0:
            cache[key] = 0.0
            return 0.0
    logr = lps[-1] - lps[0]
    x0 = path_x[ids[0]]
    ys = path_x[ids[-1]]
    for i in range(1, s):
        W = inv_covs[i - 1]
        a = path_x[ids[s - i]] - ys
        b = path_x[ids[i]] - x0
        logr += -0.5 * (a @ W @ a - b @ W @ b)
    if den <= 0.0:
        cache[key] = 1.0
        return 1.0
    with np.errstate(over="ignore"):
        val = float(min(1.0, np.exp(min(logr, 700.0)) * num / den))
    cache[key] = val
    return val


def dram_within_gibbs(log_post, theta0, cfg: DramConfig = DramConfig(), fixed=(), groups=None,
                      rng=None, model: NonlinearModel = None, lp0=None) -> Chain:
    """Sample a log posterior with DRAM updates applied group by group.

    Each sweep updates every group in turn. A group update proposes
    from N(x, C), then on rejection tries up to ``dr_stages - 1`` further
    proposals with covariance C / dr_scale^(2 (stage - 1)). C is replaced
    every ``adapt_interval`` sweeps by s_d cov(history) + s_d eps I.
    """
    rng = np.random.default_rng() if rng is None else rng
    theta = np.asarray(theta0, dtype=float).ravel().copy()
    p = theta.size
    fixed = set(int(i) for i in fixed)
    if groups is None:
        if model is not None:
            groups = default_groups(model, fixed)
        else:
            free = [i for i in range(p) if i not in fixed]
            groups = [np.array(free, dtype=int)] if free else []
    groups = [np.asarray([i for i in g if int(i) not in fixed], dtype=int) for g in groups]
    groups = [g for g in groups if g.size]
    seen = np.concatenate(groups) if groups else np.array([], dtype=int)
    if len(set(seen.tolist())) != seen.size:
        raise PreconditionError("groups overlap")
    missing = set(range(p)) - fixed - set(seen.tolist())
    if missing:
        raise PreconditionError(f"indices {sorted(missing)} are neither fixed nor grouped")

    lp = float(log_post(theta)) if lp0 is None else float(lp0)
    if not np.isfinite(lp):
        raise InitializationError("log posterior is not finite at the starting point")

    G = len(groups)
    covs = []
    for gi, g in enumerate(groups):
        C = None
        if cfg.init_proposal_cov is not None:
            C = cfg.init_proposal_cov.get(gi)
        if C is None:
            scale = cfg.init_scale * np.maximum(np.abs(theta[g]), 1e-2)
            C = np.diag(scale ** 2)
        C = np.atleast_2d(np.asarray(C, dtype=float))
        np.linalg.cholesky(C)
        covs.append(C)

    n = cfg.n_samples
    samples = np.empty((n, p))
    lps = np.empty(n)
    accepts = np.zeros(G)
    proposals = np.zeros(G)
    stage_accepts = np.zeros((G, cfg.dr_stages))
    stuck = 0
    shrink = [cfg.dr_scale ** (-(i)) for i in range(cfg.dr_stages)]

    def factors(C):
        R = np.linalg.cholesky(C)
        W = np.linalg.inv(C)
        return [R * s for s in shrink], [W / s ** 2 for s in shrink]

    fac = [factors(C) for C in covs]
    for it in range(n):
        all_bad = G > 0
        for gi, g in enumerate(groups):
            Rs, Ws = fac[gi]
            x = theta[g].copy()
            pts = [x]
            vals = [lp]
            cache = {}
            proposals[gi] += 1
            for stage in range(cfg.dr_stages):
                y = x + Rs[stage] @ rng.standard_normal(g.size)
                cand = theta.copy()
                cand[g] = y
                ly = float(log_post(cand))
                if not np.isfinite(ly):
                    ly = -np.inf
                else:
                    all_bad = False
                pts.append(y)
                vals.append(ly)
                ids = list(range(len(pts)))
                a = _dr_alpha((vals, ids), pts, Ws, cache)
                if rng.random() < a:
                    theta[g] = y
                    lp = ly
                    accepts[gi] += 1
                    stage_accepts[gi, stage] += 1
                    break
        stuck = stuck + 1 if all_bad else 0
        if stuck >= cfg.stuck_limit:
            raise StuckChainError(f"all proposals non-finite for {stuck} consecutive sweeps", step=it)
        samples[it] = theta
        lps[it] = lp
        if (it + 1) % cfg.adapt_interval == 0 and it + 1 < n:
            for gi, g in enumerate(groups):
                hist = samples[: it + 1][:, g]
                C = np.atleast_2d(np.cov(hist, rowvar=False))
                if not np.any(C):
                    continue
                sd = cfg.adapt_scale if cfg.adapt_scale is not None else 2.38 ** 2 / g.size
                C = sd * C + sd * cfg.adapt_epsilon * np.eye(g.size)
                try:
                    fac[gi] = factors(C)
                    covs[gi] = C
                except np.linalg.LinAlgError:
                    log.debug("skipping adaptation of group %d: covariance not PD", gi)
    meta = {
        "dr_stages": cfg.dr_stages, "dr_scale": cfg.dr_scale,
        "adapt_interval": cfg.adapt_interval, "adapt_epsilon": cfg.adapt_epsilon,
        "fixed": sorted(fixed), "stage_accepts": stage_accepts.tolist(),
    }
    return Chain(samples, lps, groups, accepts, proposals, cfg.burn_in, meta)


# ---------------------------------------------------------------------------
# posterior predictive
# ---------------------------------------------------------------------------

@dataclass
class PredictiveEnsemble:
    trajectories: np.ndarray
    mean: np.ndarray
    draw_indices: np.ndarray
    n_diverged: int


def _draw_indices(chain: Chain, n_draws):
    kept = np.arange(chain.burn_in, chain.samples.shape[0])
    if kept.size == 0:
        raise PreconditionError("chain is no longer than its burn-in")
    n_draws = min(n_draws, kept.size)
    step = kept.size / n_draws
    return kept[(np.arange(n_draws) * step).astype(int)]


def _simulate_noiseless(model, x0, inputs):
    x = np.asarray(x0, dtype=float)
    out = np.empty((inputs.shape[0], model.dy))
    with np.errstate(all="ignore"):
        for k, u in enumerate(inputs):
            out[k] = np.asarray(model.observe(x, u)).reshape(-1)
            if k < inputs.shape[0] - 1:
                x = np.asarray(model.step(x, u)).reshape(-1)
    return out


def _simulate_filtered(model, data, future, rng):
    from .core import psd_factor

    res = log_likelihood(model, data)
    n1 = data.inputs.shape[0]
    dy, dx = model.dy, model.dx
    out = np.empty((n1 + future.shape[0], dy))
    for k in range(n1):
        inn = res.innovations[k]
        if inn is None:
            b = res.predicted[k]
            mu = np.asarray(model.observe(b.mean, data.inputs[k])).reshape(-1)
            out[k] = mu + psd_factor(model.Gamma()) @ rng.standard_normal(dy)
        else:
            mu, S = inn
            out[k] = mu + psd_factor(S) @ rng.standard_normal(dy)
    if future.shape[0]:
        last = res.updated[-1]
        x = last.mean + psd_factor(last.cov) @ rng.standard_normal(dx)
        Ls, Lg = psd_factor(model.Sigma()), psd_factor(model.Gamma())
        u_prev = data.inputs[-1]
        with np.errstate(all="ignore"):
            for j, u in enumerate(future):
                x = np.asarray(model.step(x, u_prev)).reshape(-1) + Ls @ rng.standard_normal(dx)
                out[n1 + j] = np.asarray(model.observe(x, u)).reshape(-1) + Lg @ rng.standard_normal(dy)
                u_prev = u
    return out


def posterior_predictive(chain: Chain, model_builder, data, horizon=0, mode="deterministic",
                         n_draws=100, rng=None, future_inputs=None) -> PredictiveEnsemble:
    """Simulate models built from regularly spaced post-burn-in samples.

    ``deterministic`` simulates each draw without noise from its initial
    state over the data inputs and ``future_inputs``. ``stochastic`` draws
    outputs from the filter's one-step predictive over the data window and
    then propagates with sampled process and measurement noise.
    """
    if mode not in ("deterministic", "stochastic"):
        raise PreconditionError(f"unknown mode {mode!r}")
    if horizon > 0:
        if future_inputs is None:
            raise PreconditionError("a forecast horizon needs future inputs")
        future = np.asarray(future_inputs, dtype=float).reshape(horizon, -1)
    else:
        future = np.zeros((0, data.du))
    rng = np.random.default_rng() if rng is None else rng
    idx = _draw_indices(chain, n_draws)
    trajs, used = [], []
    diverged = 0
    for i in idx:
        model = model_builder(chain.samples[i])
        try:
            if mode == "deterministic":
                inputs = np.vstack([data.inputs, future])
                x0 = model.initial_belief().mean
                y = _simulate_noiseless(model, x0, inputs)
            else:
                y = _simulate_filtered(model, data, future, rng)
        except (NumericalError, np.linalg.LinAlgError):
            diverged += 1
            continue
        if not np.all(np.isfinite(y)):
            diverged += 1
            continue
        trajs.append(y)
        used.append(i)
    if diverged > 0.5 * len(idx):
        raise EnsembleError(f"{diverged} of {len(idx)} draws diverged")
    T = np.asarray(trajs)
    return PredictiveEnsemble(T, T.mean(axis=0), np.asarray(used), diverged)
