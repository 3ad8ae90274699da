"""Concrete model families and reference systems.

All parameterized maps are vectorized over leading batch axes so that the
unscented filter can evaluate every sigma point of every candidate in one
call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .core import (
    DivergenceError,
    HalfNormal,
    ImproperUniform,
    LtiModel,
    NonlinearModel,
    Normal,
    NumericalError,
    PreconditionError,
    PriorSpec,
)

N_HIDDEN = 15


class StiffnessError(NumericalError):
    """Adaptive step size collapsed below the representable resolution."""


# ---------------------------------------------------------------------------
# single-hidden-layer network with a linear skip connection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpLayout:
    """Index layout of a flattened network (A1, A2, b2, A3, b3), row-major."""

    d_in: int
    d_out: int
    n_h: int = N_HIDDEN

    @property
    def sizes(self):
        return (self.d_out * self.n_h, self.n_h * self.d_in, self.n_h,
                self.d_out * self.d_in, self.d_out)

    @property
    def count(self):
        return sum(self.sizes)

    def unpack(self, p):
        """Split ``p`` of shape (..., count) into the five weight arrays."""
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.count:
            raise PreconditionError(f"expected {self.count} network parameters, got {p.shape[-1]}")
        lead = p.shape[:-1]
        cuts = np.cumsum(self.sizes)[:-1]
        a1, a2, b2, a3, b3 = np.split(p, cuts, axis=-1)
        return (a1.reshape(lead + (self.d_out, self.n_h)),
                a2.reshape(lead + (self.n_h, self.d_in)),
                b2,
                a3.reshape(lead + (self.d_out, self.d_in)),
                b3)

    @staticmethod
    def pack(A1, A2, b2, A3, b3):
        parts = [np.asarray(a, dtype=float) for a in (A1, A2, b2, A3, b3)]
        lead = parts[2].shape[:-1]
        return np.concatenate([a.reshape(lead + (-1,)) for a in parts], axis=-1)


def mlp_param_count(d_in, d_out, n_h=N_HIDDEN):
    return MlpLayout(d_in, d_out, n_h).count


def mlp_forward(layout: MlpLayout, p, z):
    """A1 tanh(A2 z + b2) + A3 z + b3, broadcasting over leading axes."""
    A1, A2, b2, A3, b3 = layout.unpack(p)
    z = np.asarray(z, dtype=float)
    hidden = np.tanh((A2 @ z[..., None])[..., 0] + b2)
    return (A1 @ hidden[..., None])[..., 0] + (A3 @ z[..., None])[..., 0] + b3


def _concat_input(x, u):
    u = np.broadcast_to(np.asarray(u, dtype=float), x.shape[:-1] + (np.size(u),))
    return np.concatenate([x, u], axis=-1)


def _diag_cov(v):
    v = np.asarray(v, dtype=float)
    return v[..., :, None] * np.eye(v.shape[-1])


def build_mlp_model(dx, du, dy, theta=None, observation="mlp", gamma=None, x0_cov=None):
    """Neural state-space model with an MLP for the dynamics.

    ``observation="mlp"`` learns a second network for the outputs;
    ``observation="first"`` fixes the output to the first state component
    (then ``gamma`` may fix the measurement variance). Parameters are laid
    out as [x0, dynamics net, observation net, Sigma diag, Gamma diag].
    """
    dyn = MlpLayout(dx + du, dx)
    offs = 0
    slices = {}
    slices["x0"] = slice(offs, offs + dx)
    offs += dx
    slices["psi"] = slice(offs, offs + dyn.count)
    offs += dyn.count
    if observation == "mlp":
        obs = MlpLayout(dx + du, dy)
        slices["h"] = slice(offs, offs + obs.count)
        offs += obs.count

        def h(x, u, p):
            return mlp_forward(obs, p, _concat_input(x, u))
    elif observation == "first":
        if dy != 1:
            raise PreconditionError("fixed first-component observation needs d_y = 1")
        slices["h"] = slice(offs, offs)

        def h(x, u, p):
            return x[..., :1]
    else:
        raise PreconditionError(f"unknown observation kind {observation!r}")
    slices["sigma"] = slice(offs, offs + dx)
    offs += dx
    if gamma is None:
        slices["gamma"] = slice(offs, offs + dy)
        offs += dy
        gamma_map = _diag_cov
    else:
        fixed = np.atleast_2d(np.asarray(gamma, dtype=float))
        slices["gamma"] = slice(offs, offs)

        def gamma_map(p):
            return np.broadcast_to(fixed, p.shape[:-1] + fixed.shape)

    def psi(x, u, p):
        return mlp_forward(dyn, p, _concat_input(x, u))

    if theta is None:
        theta = np.zeros(offs)
    return NonlinearModel(
        dx=dx, du=du, dy=dy, psi=psi, h=h, sigma=_diag_cov, gamma=gamma_map,
        x0=lambda p: p, slices=slices, theta=theta, x0_cov=x0_cov,
    )


def mlp_priors(model: NonlinearModel, sigma_var, gamma_var, weight_var):
    """Half-normal priors on noise variances and Gaussian priors elsewhere."""
    priors = PriorSpec([Normal(0.0, weight_var)] * model.n_params)
    for i in model.indices("sigma"):
        priors[i] = HalfNormal(sigma_var)
    for i in model.indices("gamma"):
        priors[i] = HalfNormal(gamma_var)
    return priors


# ---------------------------------------------------------------------------
# damped pendulum and its 13-parameter linear family
# ---------------------------------------------------------------------------

def pendulum_truth(dt, noise_var=0.0):
    """Discretized damped pendulum with unit length and mass, position output."""
    A = expm(np.array([[0.0, 1.0], [-9.81, -1.0]]) * dt)
    return LtiModel(A, [[0.0], [1.0]], [[1.0, 0.0]], [[0.0]],
                    np.zeros((2, 2)), [[noise_var]])


def _pendulum_linear(theta):
    th = np.asarray(theta, dtype=float)
    lead = th.shape[:-1]
    A = np.stack([np.stack([th[..., 2], th[..., 4]], -1),
                  np.stack([th[..., 3], th[..., 5]], -1)], -2)
    B = th[..., 6:8][..., None]
    H = th[..., 8:10][..., None, :]
    D = np.zeros(lead + (1, 1))
    return A, B, H, D


def build_pendulum_model(theta) -> NonlinearModel:
    """Two-state linear model with 13 free parameters.

    theta = (x0[2], A[0,0], A[1,0], A[0,1], A[1,1], B[2], H[2],
    Sigma diagonal[2], Gamma).
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != 13:
        raise PreconditionError(f"pendulum model takes 13 parameters, got {theta.size}")
    if np.any(theta[10:13] < 0):
        raise PreconditionError("noise variances must be nonnegative")

    def psi(x, u, p):
        A = np.stack([np.stack([p[..., 0], p[..., 2]], -1),
                      np.stack([p[..., 1], p[..., 3]], -1)], -2)
        return (A @ x[..., None])[..., 0] + p[..., 4:6] * np.asarray(u).reshape(-1)[0]

    def h(x, u, p):
        return (p[..., None, :] @ x[..., None])[..., 0]

    slices = {"x0": slice(0, 2), "psi": slice(2, 8), "h": slice(8, 10),
              "sigma": slice(10, 12), "gamma": slice(12, 13)}
    return NonlinearModel(
        dx=2, du=1, dy=1, psi=psi, h=h, sigma=_diag_cov, gamma=_diag_cov,
        x0=lambda p: p, slices=slices, theta=theta, linear=_pendulum_linear,
        names=["x0_1", "x0_2", "a11", "a21", "a12", "a22", "b1", "b2",
               "h1", "h2", "sigma_1", "sigma_2", "gamma"],
    )


def pendulum_theta(model: LtiModel, sigma_diag=(0.0, 0.0), gamma=None, x0=(0.0, 0.0)):
    """Parameter vector of the 13-parameter family matching an LTI model."""
    A, B, H = model.A, model.B.ravel(), model.H.ravel()
    g = float(model.Gamma[0, 0]) if gamma is None else gamma
    return np.array([x0[0], x0[1], A[0, 0], A[1, 0], A[0, 1], A[1, 1],
                     B[0], B[1], H[0], H[1], sigma_diag[0], sigma_diag[1], g])


def pendulum_priors():
    return PriorSpec([ImproperUniform()] * 10
                     + [HalfNormal(1e-6), HalfNormal(1e-6), HalfNormal(1.0)])


# ---------------------------------------------------------------------------
# generic LTI family (every entry free)
# ---------------------------------------------------------------------------

def build_lti_family(dx, du, dy, theta=None, noise="scalar_std", x0=None):
    """LTI model with free A, B, H, D and noise parameters.

    ``noise="scalar_std"`` uses two standard deviations (process,
    measurement) with Sigma = s_xi^2 I and Gamma = s_eta^2 I. The initial
    state is fixed at ``x0`` (zero by default).
    """
    nA, nB, nH, nD = dx * dx, dx * du, dy * dx, dy * du
    if noise != "scalar_std":
        raise PreconditionError(f"unknown noise parameterization {noise!r}")
    p_dyn = nA + nB
    p_obs = nH + nD
    fixed_x0 = np.zeros(dx) if x0 is None else np.asarray(x0, dtype=float)

    def unpack_dyn(p):
        lead = p.shape[:-1]
        return p[..., :nA].reshape(lead + (dx, dx)), p[..., nA:].reshape(lead + (dx, du))

    def unpack_obs(p):
        lead = p.shape[:-1]
        return p[..., :nH].reshape(lead + (dy, dx)), p[..., nH:].reshape(lead + (dy, du))

    def psi(x, u, p):
        A, B = unpack_dyn(p)
        return (A @ x[..., None])[..., 0] + (B @ np.asarray(u, dtype=float))

    def h(x, u, p):
        H, D = unpack_obs(p)
        return (H @ x[..., None])[..., 0] + (D @ np.asarray(u, dtype=float))

    def linear(theta):
        th = np.asarray(theta, dtype=float)
        A, B = unpack_dyn(th[..., :p_dyn])
        H, D = unpack_obs(th[..., p_dyn:p_dyn + p_obs])
        return A, B, H, D

    offs = p_dyn + p_obs
    slices = {"x0": slice(0, 0), "psi": slice(0, p_dyn), "h": slice(p_dyn, offs),
              "sigma": slice(offs, offs + 1), "gamma": slice(offs + 1, offs + 2)}
    if theta is None:
        theta = np.zeros(offs + 2)
    return NonlinearModel(
        dx=dx, du=du, dy=dy, psi=psi, h=h,
        sigma=lambda s: s[..., :, None] ** 2 * np.eye(dx),
        gamma=lambda s: s[..., :, None] ** 2 * np.eye(dy),
        x0=lambda p: np.broadcast_to(fixed_x0, p.shape[:-1] + (dx,)),
        slices=slices, theta=theta, linear=linear,
    )


def lti_family_theta(model: LtiModel, s_xi, s_eta):
    return np.concatenate([model.A.ravel(), model.B.ravel(), model.H.ravel(),
                           model.D.ravel(), [s_xi, s_eta]])


# ---------------------------------------------------------------------------
# logistic map
# ---------------------------------------------------------------------------

def logistic_map_step(theta, y):
    """theta * y * (1 - y)."""
    return theta * y * (1.0 - y)


def build_logistic_model(rate, x0=0.5, sigma=0.0, gamma=1e-16) -> NonlinearModel:
    """Fully observed logistic map with a single (unused) input channel.

    theta = (x0, rate, Sigma, Gamma).
    """

    def psi(x, u, p):
        return logistic_map_step(p, x)

    slices = {"x0": slice(0, 1), "psi": slice(1, 2), "h": slice(2, 2),
              "sigma": slice(2, 3), "gamma": slice(3, 4)}
    return NonlinearModel(
        dx=1, du=1, dy=1, psi=psi, h=lambda x, u, p: x,
        sigma=lambda p: p[..., None], gamma=lambda p: p[..., None],
        x0=lambda p: p, slices=slices, theta=[x0, rate, sigma, gamma],
        identity_observation=True, names=["x0", "rate", "sigma", "gamma"],
    )


# ---------------------------------------------------------------------------
# Duffing oscillator and ODE integration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DuffingParams:
    alpha: float = 1.0
    delta: float = -0.3
    beta: float = -1.0
    omega: float = 1.2
    gamma: float = 0.65


def duffing_rhs(state, t, p: DuffingParams = DuffingParams()):
    """(x', alpha x + delta x' + beta x^3 + gamma cos(omega t))."""
    x, v = state[0], state[1]
    return np.array([v, p.alpha * x + p.delta * v + p.beta * x ** 3 + p.gamma * np.cos(p.omega * t)])


def _solve(rhs, x0, t0, t1, rtol, atol, t_eval=None):
    x0 = np.asarray(x0, dtype=float)
    if t1 < t0:
        raise PreconditionError("t1 must not precede t0")
    if t1 == t0:
        return x0.copy()[:, None] if t_eval is not None else x0.copy()

    def f(t, x):
        return np.asarray(rhs(x, t), dtype=float)

    with np.errstate(all="ignore"):
        sol = solve_ivp(f, (t0, t1), x0, method="RK45", rtol=rtol, atol=atol, t_eval=t_eval)
    if sol.status == -1:
        if sol.y.size and not np.all(np.isfinite(sol.y)):
            raise DivergenceError(f"integration diverged: {sol.message}")
        raise StiffnessError(f"integration failed at t={sol.t[-1]:g}: {sol.message}")
    if not np.all(np.isfinite(sol.y)):
        raise DivergenceError("integration produced non-finite states")
    return sol.y if t_eval is not None else sol.y[:, -1]


def rk45_integrate(rhs, x0, t0, t1, rtol=1e-8, atol=1e-10):
    """State at ``t1`` of x' = rhs(x, t) by adaptive Dormand-Prince 4(5)."""
    return _solve(rhs, x0, t0, t1, rtol, atol)


def rk45_trajectory(rhs, x0, times, rtol=1e-8, atol=1e-10):
    """States at each entry of ``times`` (the first entry is the start time)."""
    times = np.asarray(times, dtype=float)
    return _solve(rhs, x0, times[0], times[-1], rtol, atol, t_eval=times).T


# ---------------------------------------------------------------------------
# forced Allen-Cahn equation on [-1, 1] by finite differences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AllenCahnGrid:
    n_vertices: int = 257
    diffusion: float = 1e-2
    forcing_lo: float = -0.5
    forcing_hi: float = 0.2

    @property
    def xi(self):
        return np.linspace(-1.0, 1.0, self.n_vertices)

    @property
    def indicator(self):
        xi = self.xi
        return ((xi >= self.forcing_lo) & (xi <= self.forcing_hi)).astype(float)


def allen_cahn_rhs(grid: AllenCahnGrid, u):
    """Method-of-lines right-hand side with reflecting (Neumann) ends."""
    h2 = (2.0 / (grid.n_vertices - 1)) ** 2
    chi = grid.indicator * u

    def rhs(w, t):
        lap = np.empty_like(w)
        lap[1:-1] = w[2:] - 2.0 * w[1:-1] + w[:-2]
        lap[0] = 2.0 * (w[1] - w[0])
        lap[-1] = 2.0 * (w[-2] - w[-1])
        return grid.diffusion * lap / h2 + w * (1.0 - w ** 2) + chi

    return rhs


def allen_cahn_qoi(w):
    """Mean of w^2 over the vertices."""
    w = np.asarray(w, dtype=float)
    return np.mean(w ** 2, axis=-1)
