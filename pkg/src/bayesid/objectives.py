"""Least-squares, multiple-shooting and joint-posterior objectives.

Segment convention: with starts l_1 = 0 < l_2 < ... < l_L and l_{L+1} = n,
segment 1 covers samples 0..l_2 and segment i >= 2 covers l_i + 1..l_{i+1}.
Every segment is simulated without noise from its own initial state z_i
placed at sample l_i. A single segment is the deterministic LS objective;
unit-length segments with data initial states are the propagator LS.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (
    NonlinearModel,
    NumericalError,
    PreconditionError,
    log_prior,
)
from .filtering import UkfConfig, loglik_batch, ukf_loglik_from, unscented_propagate

PENALTY_WEIGHT = 1e6
_LOG_2PI = math.log(2.0 * math.pi)


class DivergenceWarning(RuntimeWarning):
    """A simulated trajectory left the finite range; the objective is +inf."""


class ObjectiveValue(float):
    """Float objective value that also records where a simulation diverged."""

    diverged: bool
    segment: Optional[int]
    step: Optional[int]

    def __new__(cls, value, diverged=False, segment=None, step=None):
        obj = super().__new__(cls, value)
        obj.diverged = diverged
        obj.segment = segment
        obj.step = step
        return obj


@dataclass
class SegmentPlan:
    """Segment starts and initial states for multiple shooting."""

    starts: np.ndarray
    n: int
    ics: Optional[np.ndarray] = None
    horizon: Optional[int] = None

    def __post_init__(self):
        starts = np.asarray(self.starts, dtype=int).ravel()
        if starts.size == 0 or starts[0] != 0:
            raise PreconditionError("the first segment must start at sample 0")
        if np.any(np.diff(starts) <= 0):
            raise PreconditionError("segment starts must be strictly increasing")
        if starts[-1] >= max(self.n, 1):
            raise PreconditionError("every segment must contain at least one later sample")
        self.starts = starts
        if self.ics is not None:
            ics = np.asarray(self.ics, dtype=float)
            self.ics = ics.reshape(starts.size, -1)

    @classmethod
    def uniform(cls, T, n, ics=None):
        """Starts every ``T`` samples; T >= n gives a single segment."""
        if T < 1:
            raise PreconditionError("segment length must be at least 1")
        return cls(np.arange(0, max(n, 1), T), n, ics, horizon=T)

    @property
    def L(self):
        return self.starts.size

    @property
    def ends(self):
        """Last sample index of each segment."""
        return np.append(self.starts[1:], self.n)

    def with_ics(self, ics):
        return SegmentPlan(self.starts, self.n, ics, self.horizon)

    def with_data_ics(self, data, lift: Optional[Callable] = None):
        """Initial states from the outputs at the segment starts."""
        Y = data.outputs[self.starts]
        return self.with_ics(Y if lift is None else np.asarray([lift(y) for y in Y]))


def _lift_for(model, lift):
    if lift is not None:
        return lift
    if model.identity_observation:
        return None
    raise PreconditionError("observation map is not the identity; supply a lift from outputs to states")


def _rollout(model: NonlinearModel, thetas, z, U):
    """Noiseless outputs and final states for a batch of candidates.

    ``z`` has shape (N, dx). Returns (outputs (N, len(U), dy), final state
    after len(U) - 1 steps, first failing step per candidate or -1).
    """
    thetas = np.atleast_2d(thetas)
    th_psi = model.part("psi", thetas)
    th_h = model.part("h", thetas)
    N = thetas.shape[0]
    x = np.broadcast_to(np.asarray(z, dtype=float), (N, model.dx)).copy()
    out = np.empty((N, U.shape[0], model.dy))
    fail = np.full(N, -1)
    with np.errstate(all="ignore"):
        for k in range(U.shape[0]):
            out[:, k] = np.asarray(model.h(x, U[k], th_h)).reshape(N, model.dy)
            if k < U.shape[0] - 1:
                x = np.asarray(model.psi(x, U[k], th_psi)).reshape(N, model.dx)
            bad = (fail < 0) & ~(np.all(np.isfinite(x), axis=1) & np.all(np.isfinite(out[:, k]), axis=1))
            fail[bad] = k
    return out, x, fail


def _sq_resid(pred, Y, obs):
    r = (pred - Y[None]) * obs[None, :, None]
    with np.errstate(all="ignore"):
        return np.einsum("nki,nki->n", r, r)


def ms_objective_batch(model: NonlinearModel, thetas, data, plan: SegmentPlan,
                       constrained=False, penalty=PENALTY_WEIGHT):
    """Multiple-shooting objective for rows of ``thetas``.

    Returns (values, failing segment per row or -1). Diverged rows are +inf.
    """
    if plan.ics is None:
        raise PreconditionError("segment initial states are not set")
    if plan.n != data.n:
        raise PreconditionError(f"plan covers n={plan.n}, data has n={data.n}")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    N = thetas.shape[0]
    U, Y, obs = data.inputs, data.outputs, data.observed()
    total = np.zeros(N)
    fail_seg = np.full(N, -1)
    ends = plan.ends
    for i, (s, e) in enumerate(zip(plan.starts, ends)):
        pred, xend, fail = _rollout(model, thetas, plan.ics[i], U[s:e + 1])
        first = 0 if i == 0 else 1
        total += _sq_resid(pred[:, first:], Y[s + first:e + 1], obs[s + first:e + 1])
        if constrained and i + 1 < plan.L:
            gap = plan.ics[i + 1][None] - xend
            with np.errstate(all="ignore"):
                total += penalty * np.einsum("ni,ni->n", gap, gap)
        newly = (fail >= 0) & (fail_seg < 0)
        fail_seg[newly] = i
    total[fail_seg >= 0] = np.inf
    total[~np.isfinite(total)] = np.inf
    return total, fail_seg


def _single(values, fails, what):
    v, f = float(values[0]), int(fails[0])
    if f >= 0 or not np.isfinite(v):
        warnings.warn(f"{what}: simulation diverged in segment {max(f, 0)}", DivergenceWarning, stacklevel=3)
        return ObjectiveValue(np.inf, diverged=True, segment=max(f, 0))
    return ObjectiveValue(v)


def deterministic_ls(model: NonlinearModel, data, theta=None) -> ObjectiveValue:
    """Sum of squared output errors of one uninterrupted noiseless simulation."""
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    v, fail = _det_ls(model, theta[None], data)
    if fail[0] >= 0 or not np.isfinite(v[0]):
        warnings.warn(f"deterministic LS: simulation diverged at step {max(fail[0], 0)}",
                      DivergenceWarning, stacklevel=2)
        return ObjectiveValue(np.inf, diverged=True, segment=0, step=int(max(fail[0], 0)))
    return ObjectiveValue(float(v[0]))


def _det_ls(model, thetas, data):
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    Z = np.asarray(model.x0(model.part("x0", thetas)), dtype=float).reshape(len(thetas), model.dx)
    U, Y, obs = data.inputs, data.outputs, data.observed()
    pred, _, fail = _rollout(model, thetas, Z, U)
    v = _sq_resid(pred, Y, obs)
    v[(fail >= 0) | ~np.isfinite(v)] = np.inf
    return v, fail


def deterministic_ls_batch(model, thetas, data):
    return _det_ls(model, thetas, data)[0]


def propagator_ls(model: NonlinearModel, data, theta=None, lift=None) -> ObjectiveValue:
    """Sum over k = 1..n of squared one-step prediction errors from y_{k-1}."""
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    return ObjectiveValue(float(propagator_ls_batch(model, theta[None], data, lift)[0]))


def propagator_ls_batch(model, thetas, data, lift=None):
    lift = _lift_for(model, lift)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    N = thetas.shape[0]
    U, Y, obs = data.inputs, data.outputs, data.observed()
    X = Y if lift is None else np.asarray([lift(y) for y in Y], dtype=float)
    th_psi = model.part("psi", thetas)[:, None, :]
    th_h = model.part("h", thetas)[:, None, :]
    total = np.zeros(N)
    with np.errstate(all="ignore"):
        for k in range(1, data.n + 1):
            x1 = np.asarray(model.psi(X[k - 1][None, None, :], U[k - 1], th_psi)).reshape(N, 1, model.dx)
            y1 = np.asarray(model.h(x1, U[k], th_h)).reshape(N, model.dy)
            if obs[k]:
                r = y1 - Y[k]
                total += np.einsum("ni,ni->n", r, r)
    total[~np.isfinite(total)] = np.inf
    return total


def multiple_shooting(model: NonlinearModel, data, plan: SegmentPlan, constrained=False,
                      theta=None, penalty=PENALTY_WEIGHT) -> ObjectiveValue:
    """Multiple-shooting least squares, optionally with a continuity penalty.

    The penalty adds ``penalty * sum_i |z_{i+1} - Psi^{dl_i}(z_i)|^2``.
    """
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    return _single(*ms_objective_batch(model, theta[None], data, plan, constrained, penalty),
                   "multiple shooting")


def joint_log_posterior(model: NonlinearModel, data, plan: SegmentPlan, priors=None,
                        theta=None, cfg: UkfConfig = UkfConfig()):
    """Log posterior of parameters and segment initial states.

    Segment 1 is filtered from a point mass at z_1 (or N(z_1, x0_cov) when
    the model carries an initial covariance). Segment i >= 2 starts from
    N(Psi(z_i), Sigma) one step after l_i. Each z_i for i >= 2 is scored
    under the unscented push-forward of a point mass at z_{i-1} over the
    intervening steps. ``priors=None`` means an improper flat prior.
    """
    if plan.ics is None:
        raise PreconditionError("segment initial states are not set")
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    lp = 0.0 if priors is None else log_prior(priors, theta)
    if not np.isfinite(lp):
        return -np.inf
    Sig = np.asarray(model.Sigma(theta), dtype=float)
    try:
        np.linalg.cholesky(Sig)
    except np.linalg.LinAlgError:
        raise PreconditionError("the linking density needs a positive definite Sigma") from None
    dx = model.dx
    total = lp
    ends = plan.ends
    for i, (s, e) in enumerate(zip(plan.starts, ends)):
        seg = data.slice(s, e + 1)
        if i > 0:
            obs = seg.observed().copy()
            obs[0] = False
            seg.mask = obs
        P0 = np.zeros((dx, dx)) if (i > 0 or model.x0_cov is None) else model.x0_cov
        ll = ukf_loglik_from(model, theta[None], seg, plan.ics[i][None], P0[None], cfg)[0]
        total += float(ll[0])
        if i > 0:
            m, P = unscented_propagate(model, theta, plan.ics[i - 1], np.zeros((dx, dx)),
                                       data.inputs[plan.starts[i - 1]:s], cfg)
            total += _gauss_logpdf(plan.ics[i], m, P)
    return float(total) if np.isfinite(total) else -np.inf


def _gauss_logpdf(x, m, P):
    L = np.linalg.cholesky(P)
    z = np.linalg.solve(L, x - m)
    return float(-0.5 * (z @ z) - np.log(np.diag(L)).sum() - 0.5 * x.size * _LOG_2PI)


# ---------------------------------------------------------------------------
# landscapes
# ---------------------------------------------------------------------------

def count_local_minima(values):
    """Interior strict local minima; a flat run counts once if both sides rise."""
    v = np.asarray(values, dtype=float)
    # compress plateaus
    keep = np.ones(v.size, dtype=bool)
    keep[1:] = v[1:] != v[:-1]
    c = v[keep]
    if c.size < 3:
        return 0
    inner = c[1:-1]
    return int(np.sum((inner < c[:-2]) & (inner < c[2:])))


@dataclass
class LandscapeCurve:
    grid: np.ndarray
    values: np.ndarray
    anchor: float
    raw: np.ndarray = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_minima(self):
        # counted on raw values: rescaling near 1.0 can merge tiny differences
        return count_local_minima(self.values if self.raw is None else self.raw)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "value"])
            for g, v in zip(self.grid, self.values):
                w.writerow([repr(float(g)), repr(float(v))])
        sidecar = {"label": self.label, "anchor": self.anchor, "local_minima": self.n_minima,
                   "normalization": "affine: min -> 0, anchor -> 1", **self.meta}
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2)


def landscape_scan(objective, grid, anchor, vectorized=False, label=""):
    """Evaluate ``objective`` on ``grid`` and normalize so value(anchor) = 1.

    The normalization is affine, mapping the finite minimum to 0 and the
    anchor value to 1, so local-minimum structure is preserved. A constant
    curve is returned as all ones.
    """
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise PreconditionError("grid is empty")
    idx = np.flatnonzero(np.isclose(grid, anchor, rtol=0, atol=1e-12))
    if idx.size == 0:
        raise PreconditionError(f"anchor {anchor} is not on the grid")
    if vectorized:
        raw = np.asarray(objective(grid), dtype=float)
    else:
        raw = np.array([float(objective(g)) for g in grid])
    finite = np.isfinite(raw)
    if not np.any(finite):
        raise NumericalError("objective diverged at every grid point")
    a = raw[idx[0]]
    if not np.isfinite(a):
        raise NumericalError("objective is not finite at the anchor")
    lo = raw[finite].min()
    if a == lo:
        values = np.where(raw == a, 1.0, 1.0 + (raw - a))
    else:
        values = (raw - lo) / (a - lo)
    return LandscapeCurve(grid, values, float(grid[idx[0]]), raw, label)


def logistic_objective(kind, data, T=None, ratio=None, gamma=1e-16, x0=None, cfg=UkfConfig()):
    """Vectorized objective of the growth rate for the logistic-map study.

    ``kind`` is ``"det_ls"``, ``"ms"`` (true/data initial states every
    ``T`` samples) or ``"nll"`` (negative log marginal likelihood with
    Sigma = ratio * Gamma).
    """
    from .models import build_logistic_model

    x0 = float(data.outputs[0, 0]) if x0 is None else x0
    model = build_logistic_model(3.0, x0=x0, sigma=(ratio or 0.0) * gamma, gamma=gamma)

    def thetas(rates):
        rates = np.atleast_1d(rates)
        th = np.tile(model.theta, (rates.size, 1))
        th[:, 1] = rates
        return th

    if kind == "det_ls":
        return lambda r: deterministic_ls_batch(model, thetas(r), data)
    if kind == "ms":
        plan = SegmentPlan.uniform(T, data.n).with_data_ics(data)
        return lambda r: ms_objective_batch(model, thetas(r), data, plan)[0]
    if kind == "nll":
        return lambda r: -loglik_batch(model, thetas(r), data, cfg)
    raise PreconditionError(f"unknown objective kind {kind!r}")
