"""Markov-parameter estimators and the output-noise covariance blocks.

For an LTI model the output at step k is

    y_k = H A^k x_0 + sum_{i=0}^{k} G_i u_{k-i} + nu_k,

with G_0 = D, G_i = H A^{i-1} B and correlated noise nu_k whose covariance
blocks are assembled by :func:`build_lambda`.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import PreconditionError, symmetrize

PINV_RCOND = 1e-12


class IllPosedWarning(UserWarning):
    """The regression matrix is rank deficient; the estimate is not unique."""


@dataclass
class MarkovSequence:
    """Impulse-response blocks G_0..G_m, each d_y x d_u."""

    G: np.ndarray
    ill_posed: bool = False
    rank: Optional[int] = None

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        if G.ndim != 3:
            raise PreconditionError("G must have shape (m + 1, d_y, d_u)")
        self.G = G

    def __len__(self):
        return self.G.shape[0]

    @property
    def dy(self):
        return self.G.shape[1]

    @property
    def du(self):
        return self.G.shape[2]

    def hstack(self):
        """Horizontal concatenation [G_0 G_1 ... G_m]."""
        return np.concatenate(list(self.G), axis=1)

    def to_json(self):
        return json.dumps({"d_y": self.dy, "d_u": self.du, "G": self.G.tolist()})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        G = np.asarray(obj["G"], dtype=float).reshape(-1, obj["d_y"], obj["d_u"])
        return cls(G)


def markov_from_statespace(model, m) -> MarkovSequence:
    """G_0 = D and G_k = H A^{k-1} B for k = 1..m."""
    if m < 0:
        raise PreconditionError("m must be nonnegative")
    G = np.empty((m + 1, model.dy, model.du))
    G[0] = model.D
    AkB = model.B.copy()
    for k in range(1, m + 1):
        G[k] = model.H @ AkB
        AkB = model.A @ AkB
    return MarkovSequence(G)


@dataclass
class LambdaBlocks:
    """Covariance blocks of the stacked output noise.

    ``diag[k]`` is Lambda_k. ``blocks[j, k]`` (when built) holds every
    block Lambda_{j,k} including the diagonal.
    """

    diag: np.ndarray
    blocks: Optional[np.ndarray] = None

    @property
    def n(self):
        return self.diag.shape[0] - 1

    def block(self, j, k):
        if j == k:
            return self.diag[k]
        if self.blocks is None:
            raise PreconditionError("off-diagonal blocks were not built")
        return self.blocks[j, k]

    def assembled(self):
        if self.blocks is None:
            raise PreconditionError("off-diagonal blocks were not built")
        n1, _, dy, _ = self.blocks.shape
        return symmetrize(self.blocks.transpose(0, 2, 1, 3).reshape(n1 * dy, n1 * dy))


def build_lambda(model, n, full=True) -> LambdaBlocks:
    """Noise covariance blocks of the input-output form up to step n.

    Lambda_0 = Gamma, Lambda_k = sum_{i=1}^{k} H A^{i-1} Sigma (H A^{i-1})^T
    + Gamma, and for 0 < j < k the cross term Lambda_{j,k} =
    H P_j (A^{k-j})^T H^T where P_j is the accumulated process covariance.
    Blocks with j = 0 vanish. With ``full=False`` only the diagonal is built.
    """
    if n < 0:
        raise PreconditionError("n must be nonnegative")
    A, H, Sig, Gam = model.A, model.H, model.Sigma, model.Gamma
    dx, dy = model.dx, model.dy
    diag = np.empty((n + 1, dy, dy))
    diag[0] = Gam
    P = np.zeros((dx, dx))
    Ps = [P]
    for k in range(1, n + 1):
        P = symmetrize(A @ P @ A.T + Sig)
        Ps.append(P)
        diag[k] = symmetrize(H @ P @ H.T + Gam)
    if not full:
        return LambdaBlocks(diag)
    blocks = np.zeros((n + 1, n + 1, dy, dy))
    for j in range(n + 1):
        blocks[j, j] = diag[j]
        if j == 0:
            continue
        W = Ps[j] @ H.T
        for k in range(j + 1, n + 1):
            W = A @ W
            blocks[j, k] = (H @ W).T
            blocks[k, j] = blocks[j, k].T
    return LambdaBlocks(diag, blocks)


def _check_rank(M, need, what):
    rank = int(np.linalg.matrix_rank(M))
    if rank < need:
        warnings.warn(f"{what} has rank {rank} < {need}; the estimate is not unique",
                      IllPosedWarning, stacklevel=3)
    return rank


def input_toeplitz(U):
    """Block upper-triangular U_{0:n} with u_{j-i} in block (i, j)."""
    U = np.asarray(U, dtype=float)
    n1, du = U.shape
    T = np.zeros((n1 * du, n1))
    for i in range(n1):
        T[i * du:(i + 1) * du, i:] = U[: n1 - i].T
    return T


def mle_markov(data, lam: LambdaBlocks) -> MarkovSequence:
    """Generalized least-squares estimate of G_0..G_n under the full Lambda.

    Solves vec(G) = (V^T Lambda^{-1} V)^+ V^T Lambda^{-1} vec(Y) with
    V = U_{0:n}^T kron I by whitening with a Cholesky factor of Lambda and
    taking the minimum-norm least-squares solution.
    """
    U, Y = data.inputs, data.outputs
    n1, du = U.shape
    dy = Y.shape[1]
    if lam.n != n1 - 1:
        raise PreconditionError("Lambda size does not match the record")
    V = np.kron(input_toeplitz(U).T, np.eye(dy))
    L = _whitener(lam.assembled())
    Vw = np.linalg.solve(L, V)
    yw = np.linalg.solve(L, Y.ravel())
    sol, _, rank, _ = np.linalg.lstsq(Vw, yw, rcond=PINV_RCOND)
    ill = rank < V.shape[1]
    # vec stacks columns of G_{0:n} (dy x n1*du)
    G = sol.reshape(n1 * du, dy).T.reshape(dy, n1, du).transpose(1, 0, 2)
    return MarkovSequence(G, ill_posed=ill, rank=int(rank))


def _whitener(M):
    """Lower factor of a covariance, jittered or eigen-based when singular."""
    M = symmetrize(M)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(M)
        floor = PINV_RCOND * max(w.max(), 0.0)
        w = np.clip(w, floor, None)
        if not w.max() > 0:
            raise PreconditionError("covariance is identically zero")
        # Q R of (V sqrt(w))^T gives a triangular factor of the same matrix
        R = np.linalg.qr((V * np.sqrt(w)).T, mode="r")
        return R.T


def subtraj_input_matrix(U, nbar):
    """Stacked-input matrix with column k = [u_k; u_{k-1}; ...; u_{k-nbar+1}].

    Columns run over k = nbar..n, rows over lags 0..nbar-1.
    """
    U = np.asarray(U, dtype=float)
    n = U.shape[0] - 1
    cols = [np.concatenate([U[k - i] for i in range(nbar)]) for k in range(nbar, n + 1)]
    return np.array(cols).T


def _check_nbar(data, nbar):
    n1, du = data.inputs.shape
    if nbar < 1:
        raise PreconditionError("nbar must be at least 1")
    if not nbar * du < n1:
        raise PreconditionError(
            f"nbar={nbar} violates nbar < (n + 1) / d_u = {n1 / du:g}")


def _unstack(Gflat, nbar, dy, du):
    return Gflat.reshape(dy, nbar, du).transpose(1, 0, 2)


def ls_markov_subtraj(data, nbar) -> MarkovSequence:
    """Single-rollout least-squares estimate of G_0..G_{nbar-1}.

    Drops the first ``nbar`` outputs and returns Y_{nbar:n} Ubar^+.
    """
    _check_nbar(data, nbar)
    Ubar = subtraj_input_matrix(data.inputs, nbar)
    Ys = data.outputs[nbar:].T
    rank = _check_rank(Ubar, nbar * data.du, "stacked input matrix")
    Gflat = Ys @ np.linalg.pinv(Ubar, rcond=PINV_RCOND)
    return MarkovSequence(_unstack(Gflat, nbar, data.dy, data.du),
                          ill_posed=rank < nbar * data.du, rank=rank)


def gls_markov_subtraj(data, nbar, lam: LambdaBlocks) -> MarkovSequence:
    """Like :func:`ls_markov_subtraj` but each residual weighted by Lambda_k^{-1}."""
    _check_nbar(data, nbar)
    n = data.n
    if lam.n < n:
        raise PreconditionError("Lambda_k must be available up to k = n")
    Ubar = subtraj_input_matrix(data.inputs, nbar)
    rank = _check_rank(Ubar, nbar * data.du, "stacked input matrix")
    dy = data.dy
    p = nbar * data.du
    rows, rhs = [], []
    for col, k in enumerate(range(nbar, n + 1)):
        Li = _whitener(lam.diag[k])
        W = np.linalg.inv(Li)
        # residual y_k - G ubar_k with vec(G ubar_k) = (ubar_k^T kron I) vec(G)
        rows.append(np.kron(Ubar[:, col][None, :], W))
        rhs.append(W @ data.outputs[k])
    M = np.vstack(rows)
    sol = np.linalg.lstsq(M, np.concatenate(rhs), rcond=PINV_RCOND)[0]
    Gflat = sol.reshape(p, dy).T
    return MarkovSequence(_unstack(Gflat, nbar, dy, data.du),
                          ill_posed=rank < p, rank=rank)


def markov_error(est: MarkovSequence, truth: MarkovSequence) -> float:
    """Spectral norm of [G^_0 - G_0, ..., G^_m - G_m]."""
    if est.G.shape != truth.G.shape:
        raise PreconditionError(f"shape mismatch {est.G.shape} vs {truth.G.shape}")
    return float(np.linalg.norm(est.hstack() - truth.hstack(), 2))


def subtraj_objective(data, G: MarkovSequence) -> float:
    """Single-rollout LS objective sum_k ||y_k - sum_{i<nbar} G_i u_{k-i}||^2, k = nbar..n."""
    nbar = len(G)
    _check_nbar(data, nbar)
    Ubar = subtraj_input_matrix(data.inputs, nbar)
    R = data.outputs[nbar:].T - G.hstack() @ Ubar
    return float(np.sum(R * R))


def full_convolution_objective(data, G: MarkovSequence, start=0) -> float:
    """Unit-weighted conditionally independent objective over k = start..n.

    Uses every block G_0..G_k in the convolution, so ``G`` must hold at
    least n + 1 blocks.
    """
    U, Y = data.inputs, data.outputs
    n1 = U.shape[0]
    if len(G) < n1:
        raise PreconditionError(f"need {n1} Markov blocks, got {len(G)}")
    total = 0.0
    for k in range(start, n1):
        pred = np.einsum("kij,kj->i", G.G[: k + 1], U[k::-1])
        total += float(np.sum((Y[k] - pred) ** 2))
    return total
