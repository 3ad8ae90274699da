"""Marginal likelihood of state-space models by recursive filtering.

The Kalman and unscented filters are written over a leading batch axis of
parameter candidates, so finite-difference gradients and grid scans cost one
pass over the record. Single-model entry points return a full
:class:`FilterResult`; the ``*_batch`` functions return log-likelihoods only
and report failed candidates as ``-inf`` instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import (
    DivergenceError,
    GaussianBelief,
    LtiModel,
    NonlinearModel,
    NumericalError,
    PreconditionError,
    symmetrize,
)

_LOG_2PI = math.log(2.0 * math.pi)
_JITTER = 1e-10
_JITTER_TRIES = 3


@dataclass
class FilterResult:
    """Output of one filtering pass.

    ``quad_term + logdet_term + const_term == log_likelihood``; each term
    already carries the factor -1/2.
    """

    log_likelihood: float
    quad_term: float
    logdet_term: float
    const_term: float
    predicted: List[GaussianBelief] = field(default_factory=list)
    updated: List[GaussianBelief] = field(default_factory=list)
    innovations: List[Optional[Tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)


@dataclass(frozen=True)
class UkfConfig:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise PreconditionError("UKF alpha must be positive")

    def weights(self, dx):
        """Return (c, w0_mean, w0_cov, w_i) for 2*dx + 1 sigma points."""
        lam = self.alpha ** 2 * (dx + self.kappa) - dx
        scale = dx + lam
        if not scale > 0:
            raise PreconditionError("UKF scaling dx + lambda must be positive")
        wi = 1.0 / (2.0 * scale)
        w0m = lam / scale
        w0c = w0m + 1.0 - self.alpha ** 2 + self.beta
        return math.sqrt(scale), w0m, w0c, wi


# ---------------------------------------------------------------------------
# batched factorization with jitter escalation
# ---------------------------------------------------------------------------

def _chol_batch(S, step, strict, ok, zero_ok=False):
    """Cholesky factors of a stack of symmetric matrices.

    Failing members get up to three jitters of 1e-10 * trace / d with 10x
    escalation. Returns (L, S_used); members that still fail are flagged in
    ``ok`` (or raise when ``strict``).
    """
    finite = np.all(np.isfinite(S), axis=(-2, -1))
    if not np.all(finite):
        if strict:
            raise DivergenceError("non-finite covariance", step=step)
        ok &= finite
        S = np.where(finite[:, None, None], S, np.eye(S.shape[-1]))
    try:
        return np.linalg.cholesky(S), S
    except np.linalg.LinAlgError:
        pass
    d = S.shape[-1]
    L = np.zeros_like(S)
    S = S.copy()
    eye = np.eye(d)
    for i in range(S.shape[0]):
        Si = S[i]
        if zero_ok and not np.any(Si):
            continue
        try:
            L[i] = np.linalg.cholesky(Si)
            continue
        except np.linalg.LinAlgError:
            pass
        base = max(np.trace(Si) / d, 0.0)
        jitter = _JITTER * base
        for _ in range(_JITTER_TRIES):
            try:
                L[i] = np.linalg.cholesky(Si + jitter * eye)
                S[i] = Si + jitter * eye
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
        else:
            if strict:
                raise NumericalError("covariance not positive definite after jitter", step=step)
            ok[i] = False
            L[i] = eye
            S[i] = eye
    return L, S


def _gauss_terms(r, S, step, strict, ok):
    """Quadratic form, log-det and Cholesky-solved S^{-1} for innovations."""
    L, S = _chol_batch(S, step, strict, ok)
    z = _tri_solve(L, r[..., None], step, strict, ok)[..., 0]
    quad = np.einsum("ni,ni->n", z, z)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    return quad, logdet, L


def _tri_solve(L, M, step, strict, ok):
    """Solve L X = M per batch item; unsolvable items are zeroed and flagged."""
    try:
        return np.linalg.solve(L, M)
    except np.linalg.LinAlgError:
        pass
    out = np.zeros(L.shape[:-1] + M.shape[-1:])
    for i in range(L.shape[0]):
        try:
            out[i] = np.linalg.solve(L[i], M[i])
        except np.linalg.LinAlgError:
            if strict:
                raise NumericalError("singular innovation covariance", step=step) from None
            ok[i] = False
    return out


def _chol_gain_t(L, M, step, strict, ok):
    """S^{-1} M from the Cholesky factor L of S."""
    W = _tri_solve(L, M, step, strict, ok)
    return _tri_solve(np.swapaxes(L, -1, -2), W, step, strict, ok)


def _prepare(data, du, dy):
    if data.du != du or data.dy != dy:
        raise PreconditionError(
            f"model expects du={du}, dy={dy}; data has du={data.du}, dy={data.dy}")
    return data.inputs, data.outputs, data.observed()


# ---------------------------------------------------------------------------
# Kalman filter
# ---------------------------------------------------------------------------

def _kalman_core(A, B, H, D, Sig, Gam, m0, P0, U, Y, obs, record=False, strict=False):
    N, dx = m0.shape
    dy = H.shape[1]
    n1 = U.shape[0]
    quad = np.zeros(N)
    logdet = np.zeros(N)
    const = np.zeros(N)
    ok = np.ones(N, dtype=bool)
    m, P = m0.copy(), symmetrize(P0.copy())
    pred, upd, innov = [], [], []
    HT = np.swapaxes(H, -1, -2)
    AT = np.swapaxes(A, -1, -2)
    eye = np.eye(dx)
    with np.errstate(all="ignore"):
        for k in range(n1):
            u = U[k]
            if record:
                pred.append(GaussianBelief(m[0].copy(), P[0].copy()))
            if obs[k]:
                mu = np.einsum("nij,nj->ni", H, m) + D @ u
                S = symmetrize(H @ P @ HT + Gam)
                r = Y[k] - mu
                q, ld, Lc = _gauss_terms(r, S, k, strict, ok)
                quad += q
                logdet += ld
                const += dy * _LOG_2PI
                if record:
                    innov.append((mu[0].copy(), S[0].copy()))
                # gain K = P H^T S^{-1}; Joseph-form covariance update
                KT = _chol_gain_t(Lc, H @ P, k, strict, ok)
                K = np.swapaxes(KT, -1, -2)
                m = m + np.einsum("nij,nj->ni", K, r)
                IKH = eye - K @ H
                P = symmetrize(IKH @ P @ np.swapaxes(IKH, -1, -2) + K @ Gam @ KT)
            elif record:
                innov.append(None)
            if record:
                upd.append(GaussianBelief(m[0].copy(), P[0].copy()))
            if k < n1 - 1:
                m = np.einsum("nij,nj->ni", A, m) + B @ u
                P = symmetrize(A @ P @ AT + Sig)
            bad = ~(np.all(np.isfinite(m), axis=1) & np.all(np.isfinite(P), axis=(1, 2)))
            if np.any(bad):
                if strict:
                    raise DivergenceError("filter state diverged", step=k)
                ok &= ~bad
                m[bad] = 0.0
                P[bad] = eye
    q, ld, c = -0.5 * quad, -0.5 * logdet, -0.5 * const
    ll = q + ld + c
    ll[~ok] = -np.inf
    return ll, q, ld, c, pred, upd, innov


def _stack(x, N, shape):
    x = np.asarray(x, dtype=float)
    if x.ndim == len(shape):
        x = np.broadcast_to(x, (N,) + x.shape)
    return np.ascontiguousarray(x.reshape((N,) + shape))


def kalman_loglik_batch(A, B, H, D, Sigma, Gamma, m0, P0, data):
    """Log marginal likelihoods for a stack of LTI models.

    Each argument is either a single matrix or a stack with a leading batch
    axis. Candidates whose filter fails get ``-inf``.
    """
    A = np.asarray(A, dtype=float)
    N = max(np.asarray(a).shape[0] if np.asarray(a).ndim == 3 else 1
            for a in (A, B, H, D, Sigma, Gamma))
    dx = A.shape[-1]
    H = np.asarray(H, dtype=float)
    dy = H.shape[-2]
    du = np.asarray(B).shape[-1]
    U, Y, obs = _prepare(data, du, dy)
    args = (
        _stack(A, N, (dx, dx)), _stack(B, N, (dx, du)), _stack(H, N, (dy, dx)),
        _stack(D, N, (dy, du)), _stack(Sigma, N, (dx, dx)), _stack(Gamma, N, (dy, dy)),
        _stack(m0, N, (dx,)), _stack(P0, N, (dx, dx)),
    )
    return _kalman_core(*args, U, Y, obs)[0]


def kalman_log_marginal_likelihood(model: LtiModel, data) -> FilterResult:
    """Exact log marginal likelihood of an LTI model by Kalman filtering.

    Raises NumericalError when an innovation covariance stays indefinite
    after jitter and DivergenceError when the recursion goes non-finite.
    """
    U, Y, obs = _prepare(data, model.du, model.dy)
    ll, q, ld, c, pred, upd, innov = _kalman_core(
        model.A[None], model.B[None], model.H[None], model.D[None],
        model.Sigma[None], model.Gamma[None], model.x0.mean[None], model.x0.cov[None],
        U, Y, obs, record=True, strict=True,
    )
    if not np.isfinite(ll[0]):
        raise DivergenceError("log-likelihood is not finite")
    return FilterResult(float(ll[0]), float(q[0]), float(ld[0]), float(c[0]), pred, upd, innov)


# ---------------------------------------------------------------------------
# input-output (joint Gaussian) oracle
# ---------------------------------------------------------------------------

def io_log_likelihood(model: LtiModel, data) -> float:
    """Log-likelihood of the stacked outputs as one joint Gaussian.

    Builds the dense covariance of all noise contributions and evaluates
    N(vec(Y); vec(G U) + H A^k x0, Lambda) directly. Intended as an
    independent check of the Kalman recursion for modest record lengths.
    """
    from .markov import build_lambda, markov_from_statespace

    U, Y, obs = _prepare(data, model.du, model.dy)
    n = data.n
    dy = model.dy
    G = markov_from_statespace(model, n).G
    mean = np.zeros((n + 1, dy))
    for k in range(n + 1):
        for i in range(k + 1):
            mean[k] += G[i] @ U[k - i]
    # initial-state contribution: H A^k x0 with its covariance
    HAk = np.empty((n + 1, dy, model.dx))
    M = model.H.copy()
    for k in range(n + 1):
        HAk[k] = M
        M = M @ model.A
    mean += np.einsum("kij,j->ki", HAk, model.x0.mean)
    Lam = build_lambda(model, n, full=True).assembled()
    Obs = HAk.reshape((n + 1) * dy, model.dx)
    Lam = Lam + Obs @ model.x0.cov @ Obs.T
    keep = np.repeat(obs, dy)
    r = (Y - mean).ravel()[keep]
    Lam = symmetrize(Lam[np.ix_(keep, keep)])
    ok = np.ones(1, dtype=bool)
    quad, logdet, _ = _gauss_terms(r[None], Lam[None], None, True, ok)
    return float(-0.5 * (quad[0] + logdet[0] + r.size * _LOG_2PI))


# ---------------------------------------------------------------------------
# unscented Kalman filter
# ---------------------------------------------------------------------------

def _sigma_points(m, P, c, step, strict, ok):
    L, _ = _chol_batch(P, step, strict, ok, zero_ok=True)
    cL = c * np.swapaxes(L, -1, -2)  # rows are scaled columns of L
    return np.concatenate([m[:, None], m[:, None] + cL, m[:, None] - cL], axis=1)


def _unscented_moments(F, wi, wdiff):
    """Mean, deviations from the central image, and correction vector.

    Written around the central sigma point so that the large alternating
    weights of small-alpha transforms never multiply absolute values.
    """
    D = F[:, 1:] - F[:, :1]
    delta = wi * D.sum(axis=1)
    mean = F[:, 0] + delta
    return mean, D, delta


def _ut_cov(Da, da, Db, db, wi, wdiff):
    return wi * np.einsum("nsi,nsj->nij", Da, Db) + wdiff * np.einsum("ni,nj->nij", da, db)


def _ukf_core(model, thetas, U, Y, obs, cfg, record=False, strict=False, m0=None, P0=None):
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    N = thetas.shape[0]
    dx, dy = model.dx, model.dy
    c, _, _, wi = cfg.weights(dx)
    wdiff = cfg.beta - cfg.alpha ** 2
    th_psi = model.part("psi", thetas)[:, None, :]
    th_h = model.part("h", thetas)[:, None, :]
    Sig = _stack(model.sigma(model.part("sigma", thetas)), N, (dx, dx))
    Gam = _stack(model.gamma(model.part("gamma", thetas)), N, (dy, dy))
    if m0 is None:
        m0 = model.x0(model.part("x0", thetas))
    if P0 is None:
        P0 = np.zeros((dx, dx)) if model.x0_cov is None else model.x0_cov
    m = _stack(m0, N, (dx,)).copy()
    P = _stack(P0, N, (dx, dx)).copy()
    quad = np.zeros(N)
    logdet = np.zeros(N)
    const = np.zeros(N)
    ok = np.ones(N, dtype=bool)
    pred, upd, innov = [], [], []
    n1 = U.shape[0]
    eye = np.eye(dx)
    with np.errstate(all="ignore"):
        for k in range(n1):
            u = U[k]
            if record:
                pred.append(GaussianBelief(m[0].copy(), P[0].copy()))
            if obs[k]:
                X = _sigma_points(m, P, c, k, strict, ok)
                Fy = np.asarray(model.h(X, u, th_h), dtype=float).reshape(N, -1, dy)
                mu, Dy, dly = _unscented_moments(Fy, wi, wdiff)
                S = symmetrize(_ut_cov(Dy, dly, Dy, dly, wi, wdiff) + Gam)
                Dx = X[:, 1:] - X[:, :1]
                C = _ut_cov(Dx, wi * Dx.sum(axis=1), Dy, dly, wi, wdiff)
                r = Y[k] - mu
                q, ld, Lc = _gauss_terms(r, S, k, strict, ok)
                quad += q
                logdet += ld
                const += dy * _LOG_2PI
                if record:
                    innov.append((mu[0].copy(), S[0].copy()))
                KT = _chol_gain_t(Lc, np.swapaxes(C, -1, -2), k, strict, ok)
                K = np.swapaxes(KT, -1, -2)
                m = m + np.einsum("nij,nj->ni", K, r)
                P = symmetrize(P - K @ (Lc @ np.swapaxes(Lc, -1, -2)) @ KT)
            elif record:
                innov.append(None)
            if record:
                upd.append(GaussianBelief(m[0].copy(), P[0].copy()))
            if k < n1 - 1:
                X = _sigma_points(m, P, c, k, strict, ok)
                Fx = np.asarray(model.psi(X, u, th_psi), dtype=float).reshape(N, -1, dx)
                m, Dx, dlx = _unscented_moments(Fx, wi, wdiff)
                P = symmetrize(_ut_cov(Dx, dlx, Dx, dlx, wi, wdiff) + Sig)
            bad = ~(np.all(np.isfinite(m), axis=1) & np.all(np.isfinite(P), axis=(1, 2)))
            if np.any(bad):
                if strict:
                    raise DivergenceError("filter state diverged", step=k)
                ok &= ~bad
                m[bad] = 0.0
                P[bad] = eye
    q, ld, cst = -0.5 * quad, -0.5 * logdet, -0.5 * const
    ll = q + ld + cst
    ll[~ok] = -np.inf
    return ll, q, ld, cst, pred, upd, innov


def ukf_loglik_batch(model: NonlinearModel, thetas, data, cfg: UkfConfig = UkfConfig()):
    """Approximate log marginal likelihoods for rows of ``thetas``."""
    U, Y, obs = _prepare(data, model.du, model.dy)
    return _ukf_core(model, thetas, U, Y, obs, cfg)[0]


def ukf_loglik_from(model: NonlinearModel, thetas, data, m0, P0, cfg: UkfConfig = UkfConfig(),
                    strict=False):
    """Unscented log-likelihoods starting from the belief N(m0, P0) at the first sample.

    Returns the triple of accumulators (quadratic, log-det, constant), each
    already scaled by -1/2, with failed candidates at ``-inf``.
    """
    U, Y, obs = _prepare(data, model.du, model.dy)
    ll, q, ld, c, *_ = _ukf_core(model, thetas, U, Y, obs, cfg, strict=strict, m0=m0, P0=P0)
    return ll, q, ld, c


def unscented_propagate(model: NonlinearModel, theta, mean, cov, inputs, cfg: UkfConfig = UkfConfig()):
    """Push N(mean, cov) through len(inputs) noisy dynamics steps.

    Each step applies the unscented transform of the dynamics and adds
    Sigma. Returns the final (mean, cov).
    """
    theta = np.asarray(theta, dtype=float)
    dx = model.dx
    c, _, _, wi = cfg.weights(dx)
    wdiff = cfg.beta - cfg.alpha ** 2
    th_psi = model.part("psi", theta)[None, None, :]
    Sig = np.asarray(model.Sigma(theta), dtype=float).reshape(1, dx, dx)
    m = np.asarray(mean, dtype=float).reshape(1, dx).copy()
    P = np.asarray(cov, dtype=float).reshape(1, dx, dx).copy()
    ok = np.ones(1, dtype=bool)
    for k, u in enumerate(np.asarray(inputs, dtype=float)):
        X = _sigma_points(m, P, c, k, True, ok)
        Fx = np.asarray(model.psi(X, u, th_psi), dtype=float).reshape(1, -1, dx)
        m, Dx, dlx = _unscented_moments(Fx, wi, wdiff)
        P = symmetrize(_ut_cov(Dx, dlx, Dx, dlx, wi, wdiff) + Sig)
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(P))):
            raise DivergenceError("propagated belief diverged", step=k)
    return m[0], P[0]


def ukf_log_marginal_likelihood(model: NonlinearModel, data, cfg: UkfConfig = UkfConfig()) -> FilterResult:
    """Unscented-filter approximation of the log marginal likelihood."""
    U, Y, obs = _prepare(data, model.du, model.dy)
    ll, q, ld, c, pred, upd, innov = _ukf_core(
        model, model.theta[None], U, Y, obs, cfg, record=True, strict=True)
    if not np.isfinite(ll[0]):
        raise DivergenceError("log-likelihood is not finite")
    return FilterResult(float(ll[0]), float(q[0]), float(ld[0]), float(c[0]), pred, upd, innov)


def lti_from_model(model: NonlinearModel, theta=None) -> LtiModel:
    """Materialize a linear-family NonlinearModel as an LtiModel."""
    if model.linear is None:
        raise PreconditionError("model has no linear structure")
    theta = model.theta if theta is None else np.asarray(theta, dtype=float)
    A, B, H, D = (np.asarray(a) for a in model.linear(theta))
    x0 = model.initial_belief(theta)
    return LtiModel(A, B, H, D, model.Sigma(theta), model.Gamma(theta), x0)


def loglik_batch(model: NonlinearModel, thetas, data, cfg: UkfConfig = UkfConfig()):
    """Log-likelihood of many parameter vectors, exact for linear families."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if model.linear is None:
        return ukf_loglik_batch(model, thetas, data, cfg)
    A, B, H, D = model.linear(thetas)
    N = thetas.shape[0]
    dx = model.dx
    Sig = model.sigma(model.part("sigma", thetas))
    Gam = model.gamma(model.part("gamma", thetas))
    m0 = model.x0(model.part("x0", thetas))
    P0 = np.zeros((dx, dx)) if model.x0_cov is None else model.x0_cov
    # reject candidates with indefinite noise covariances before filtering
    out = np.full(N, -np.inf)
    Sig = _stack(Sig, N, (dx, dx))
    Gam = _stack(Gam, N, (model.dy, model.dy))
    valid = (np.linalg.eigvalsh(Sig).min(axis=-1) >= 0) & (np.linalg.eigvalsh(Gam).min(axis=-1) >= 0)
    if np.any(valid):
        du, dy = model.du, model.dy
        A = _stack(A, N, (dx, dx))[valid]
        B = _stack(B, N, (dx, du))[valid]
        H = _stack(H, N, (dy, dx))[valid]
        D = _stack(D, N, (dy, du))[valid]
        out[valid] = kalman_loglik_batch(
            A, B, H, D, Sig[valid], Gam[valid],
            _stack(m0, N, (dx,))[valid], _stack(P0, N, (dx, dx))[valid], data)
    return out


def log_likelihood(model: NonlinearModel, data, cfg: UkfConfig = UkfConfig()) -> FilterResult:
    """Single-model dispatch: Kalman for linear families, UKF otherwise."""
    if model.linear is not None:
        return kalman_log_marginal_likelihood(lti_from_model(model), data)
    return ukf_log_marginal_likelihood(model, data, cfg)
