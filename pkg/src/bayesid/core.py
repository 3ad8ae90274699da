"""Domain types, simulation, priors and small linear-algebra helpers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np


class BayesIdError(Exception):
    """Base class for all package errors."""


class NumericalError(BayesIdError):
    """A factorization or eigensolve failed."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DivergenceError(NumericalError):
    """A trajectory or likelihood became non-finite."""


class PreconditionError(BayesIdError, ValueError):
    """Arguments violate an operation's preconditions."""


LOG_ZERO = -np.inf
_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# linear algebra helpers
# ---------------------------------------------------------------------------

def symmetrize(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def psd_factor(M, rel_jitter=1e-12):
    """Lower factor L with L L^T ~= M for a symmetric PSD matrix.

    A zero matrix gives a zero factor. Singular matrices get a jitter of
    ``rel_jitter * trace / d`` and, failing that, an eigenvalue square root.
    """
    M = symmetrize(np.asarray(M, dtype=float))
    d = M.shape[0]
    if not np.any(M):
        return np.zeros_like(M)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    jitter = rel_jitter * np.trace(M) / d
    try:
        return np.linalg.cholesky(M + jitter * np.eye(d))
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(M)
        return V * np.sqrt(np.clip(w, 0.0, None))


def spectral_radius(M):
    """Largest eigenvalue magnitude of a square matrix."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise PreconditionError(f"spectral_radius needs a square matrix, got {M.shape}")
    try:
        eig = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    return float(np.max(np.abs(eig))) if eig.size else 0.0


def _check_psd(name, M, tol=1e-10):
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max(initial=0.0))):
        raise PreconditionError(f"{name} is not symmetric")
    if M.size and np.linalg.eigvalsh(M).min() < -tol * max(1.0, np.abs(M).max()):
        raise PreconditionError(f"{name} is not positive semidefinite")


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of a Gaussian state belief."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float).reshape(mean.size, mean.size))

    @classmethod
    def point(cls, mean):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(mean, np.zeros((mean.size, mean.size)))


@dataclass(frozen=True)
class LtiModel:
    """Linear time-invariant model with additive Gaussian noise.

    x_{k+1} = A x_k + B u_k + xi_k,   xi_k ~ N(0, Sigma)
    y_k     = H x_k + D u_k + eta_k,  eta_k ~ N(0, Gamma)
    """

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    D: np.ndarray
    Sigma: np.ndarray
    Gamma: np.ndarray
    x0: Optional[GaussianBelief] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        dx = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(dx, -1)
        H = np.asarray(self.H, dtype=float).reshape(-1, dx)
        dy, du = H.shape[0], B.shape[1]
        D = np.asarray(self.D, dtype=float).reshape(dy, du)
        Sigma = np.asarray(self.Sigma, dtype=float).reshape(dx, dx)
        Gamma = np.asarray(self.Gamma, dtype=float).reshape(dy, dy)
        if A.shape != (dx, dx):
            raise PreconditionError(f"A must be square, got {A.shape}")
        _check_psd("Sigma", Sigma)
        _check_psd("Gamma", Gamma)
        x0 = self.x0 if self.x0 is not None else GaussianBelief.point(np.zeros(dx))
        if x0.mean.shape != (dx,) or x0.cov.shape != (dx, dx):
            raise PreconditionError("x0 belief dimension does not match A")
        _check_psd("x0 covariance", x0.cov)
        for name, val in dict(A=A, B=B, H=H, D=D, Sigma=Sigma, Gamma=Gamma, x0=x0).items():
            object.__setattr__(self, name, val)

    @property
    def dx(self):
        return self.A.shape[0]

    @property
    def du(self):
        return self.B.shape[1]

    @property
    def dy(self):
        return self.H.shape[0]

    def noiseless(self):
        return replace(self, Sigma=np.zeros_like(self.Sigma), Gamma=np.zeros_like(self.Gamma))


@dataclass(frozen=True)
class NonlinearModel:
    """Parameterized hidden Markov model with additive Gaussian noise.

    The maps are vectorized: ``psi(x, u, th)`` receives ``x`` of shape
    ``(..., dx)``, ``u`` of shape ``(du,)`` and ``th`` of shape ``(..., p)``
    with broadcastable leading dimensions. ``sigma``/``gamma``/``x0``
    likewise map ``(..., p)`` parameter blocks to batched arrays.

    ``slices`` names the sub-ranges of ``theta`` (keys ``x0``, ``psi``,
    ``h``, ``sigma``, ``gamma``); together they cover ``theta`` exactly once.
    ``linear``, when given, maps ``theta`` rows to ``(A, B, H, D)`` so that
    exact Kalman filtering can be used instead of the unscented filter.
    """

    dx: int
    du: int
    dy: int
    psi: Callable
    h: Callable
    sigma: Callable
    gamma: Callable
    x0: Callable
    slices: dict
    theta: np.ndarray
    x0_cov: Optional[np.ndarray] = None
    linear: Optional[Callable] = None
    identity_observation: bool = False
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        object.__setattr__(self, "theta", theta)
        covered = np.zeros(theta.size, dtype=int)
        for key in ("x0", "psi", "h", "sigma", "gamma"):
            if key not in self.slices:
                raise PreconditionError(f"missing parameter sub-range {key!r}")
            covered[self.slices[key]] += 1
        if not np.all(covered == 1):
            raise PreconditionError("parameter sub-ranges must cover theta exactly once")

    @property
    def n_params(self):
        return self.theta.size

    def part(self, key, theta=None):
        theta = self.theta if theta is None else np.asarray(theta, dtype=float)
        return theta[..., self.slices[key]]

    def with_theta(self, theta):
        return replace(self, theta=np.asarray(theta, dtype=float))

    def indices(self, key):
        return np.arange(self.n_params)[self.slices[key]]

    # convenience single-theta accessors
    def Sigma(self, theta=None):
        return np.asarray(self.sigma(self.part("sigma", theta)))

    def Gamma(self, theta=None):
        return np.asarray(self.gamma(self.part("gamma", theta)))

    def initial_belief(self, theta=None):
        mean = np.asarray(self.x0(self.part("x0", theta)), dtype=float)
        cov = np.zeros((self.dx, self.dx)) if self.x0_cov is None else np.asarray(self.x0_cov)
        return GaussianBelief(mean, cov)

    def step(self, x, u, theta=None):
        return self.psi(x, u, self.part("psi", theta))

    def observe(self, x, u, theta=None):
        return self.h(x, u, self.part("h", theta))


@dataclass
class Dataset:
    """Time grid with inputs U_{0:n} and outputs Y_{0:n}."""

    times: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    mask: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        n1 = self.times.size
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(n1, -1)
        self.outputs = np.asarray(self.outputs, dtype=float).reshape(n1, -1)
        if n1 == 0:
            raise PreconditionError("a dataset needs at least one timestep")
        if n1 > 1 and not np.all(np.diff(self.times) > 0):
            raise PreconditionError("times must be strictly increasing")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).ravel()
            if self.mask.size != n1:
                raise PreconditionError("mask length differs from the record length")

    def __len__(self):
        return self.times.size

    @property
    def n(self):
        """Index of the last sample (the record holds n + 1 points)."""
        return self.times.size - 1

    @property
    def du(self):
        return self.inputs.shape[1]

    @property
    def dy(self):
        return self.outputs.shape[1]

    def observed(self):
        return np.ones(len(self), dtype=bool) if self.mask is None else self.mask

    def slice(self, start, stop=None):
        sl = slice(start, stop)
        mask = None if self.mask is None else self.mask[sl]
        return Dataset(self.times[sl], self.inputs[sl], self.outputs[sl], mask, dict(self.meta))

    def to_csv(self, path):
        header = ["t"] + [f"u_{i + 1}" for i in range(self.du)] + [f"y_{i + 1}" for i in range(self.dy)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t, u, y in zip(self.times, self.inputs, self.outputs):
                writer.writerow([repr(float(v)) for v in (t, *u, *y)])


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _lti_maps(model):
    A, B, H, D = model.A, model.B, model.H, model.D
    return (lambda x, u: A @ x + B @ u), (lambda x, u: H @ x + D @ u)


def simulate(model, inputs, rng=None, stochastic=False, times=None):
    """Iterate the model over an input sequence and return the record.

    With ``stochastic=False`` the noise terms are zero and the initial state
    is the mean of the initial belief. Raises DivergenceError carrying the
    step index when the state stops being finite.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if inputs.shape[0] == 0:
        raise PreconditionError("inputs must be nonempty")
    if model.du != inputs.shape[1]:
        raise PreconditionError(f"model takes {model.du} inputs, got {inputs.shape[1]}")
    if stochastic and rng is None:
        raise PreconditionError("stochastic simulation needs an rng")

    if isinstance(model, LtiModel):
        step, observe = _lti_maps(model)
        x0, Sigma, Gamma = model.x0, model.Sigma, model.Gamma
    else:
        step = lambda x, u: np.asarray(model.step(x, u))
        observe = lambda x, u: np.asarray(model.observe(x, u))
        x0, Sigma, Gamma = model.initial_belief(), model.Sigma(), model.Gamma()

    n1 = inputs.shape[0]
    if stochastic:
        Ls, Lg, L0 = psd_factor(Sigma), psd_factor(Gamma), psd_factor(x0.cov)
        x = x0.mean + L0 @ rng.standard_normal(model.dx)
    else:
        x = np.array(x0.mean, dtype=float)
    Y = np.empty((n1, model.dy))
    with np.errstate(all="ignore"):
        for k in range(n1):
            if not np.all(np.isfinite(x)):
                raise DivergenceError("state diverged", step=k)
            y = observe(x, inputs[k])
            if stochastic:
                y = y + Lg @ rng.standard_normal(model.dy)
            Y[k] = y
            if k < n1 - 1:
                x = step(x, inputs[k])
                if stochastic:
                    x = x + Ls @ rng.standard_normal(model.dx)
    if not np.all(np.isfinite(Y)):
        bad = int(np.argmax(~np.all(np.isfinite(Y), axis=1)))
        raise DivergenceError("output diverged", step=bad)
    t = np.arange(n1, dtype=float) if times is None else np.asarray(times, dtype=float)
    return Dataset(t, inputs, Y)


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImproperUniform:
    lower: float = -np.inf
    upper: float = np.inf

    def logpdf(self, x):
        return 0.0 if self.lower <= x <= self.upper else LOG_ZERO


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    var: float = 1.0

    def __post_init__(self):
        if not self.var > 0:
            raise PreconditionError("Normal prior variance must be positive")

    @property
    def lower(self):
        return -np.inf

    def logpdf(self, x):
        return -0.5 * (_LOG_2PI + math.log(self.var) + (x - self.mean) ** 2 / self.var)


@dataclass(frozen=True)
class HalfNormal:
    """|z| with z ~ N(0, var); ``var`` follows the half-N(0, var) notation."""

    var: float = 1.0

    def __post_init__(self):
        if not self.var > 0:
            raise PreconditionError("HalfNormal prior variance must be positive")

    @property
    def lower(self):
        return 0.0

    def logpdf(self, x):
        if x < 0:
            return LOG_ZERO
        return math.log(2.0) - 0.5 * (_LOG_2PI + math.log(self.var) + x * x / self.var)


class PriorSpec(list):
    """One prior per parameter, in parameter order."""

    def lower_bounds(self):
        return np.array([getattr(p, "lower", -np.inf) for p in self], dtype=float)

    def describe(self):
        return [{"type": type(p).__name__, **p.__dict__} for p in self]


def log_prior(priors, theta):
    """Sum of per-parameter log densities; -inf outside the support."""
    theta = np.asarray(theta, dtype=float).ravel()
    if len(priors) != theta.size:
        raise PreconditionError(f"{len(priors)} priors for {theta.size} parameters")
    total = 0.0
    for p, x in zip(priors, theta):
        lp = p.logpdf(float(x))
        if lp == LOG_ZERO:
            return LOG_ZERO
        total += lp
    return total
