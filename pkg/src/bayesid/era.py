"""Eigensystem realization from Markov parameters."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import LtiModel, NumericalError, PreconditionError
from .markov import MarkovSequence, ls_markov_subtraj, markov_from_statespace

__all__ = [
    "HankelShape",
    "default_shape",
    "hankel_matrix",
    "era",
    "ls_era",
    "markov_from_statespace",
    "realization_to_json",
    "realization_from_json",
]

RANK_TOL = 1e-10


class RankDeficientError(NumericalError):
    """Requested order exceeds the numerical rank of the Hankel matrix."""


@dataclass(frozen=True)
class HankelShape:
    """Block rows ``d1`` and block columns ``d2`` of the Hankel matrix."""

    d1: int
    d2: int

    def __post_init__(self):
        if self.d1 < 1 or self.d2 < 1:
            raise PreconditionError("Hankel block counts must be positive")

    def check(self, dx, dy, du, available=None):
        if min(dy * self.d1, du * self.d2) < dx:
            raise PreconditionError(
                f"shape ({self.d1}, {self.d2}) cannot hold order {dx}: need "
                f"d_y*d1 >= {dx} and d_u*d2 >= {dx}")
        if available is not None and self.d1 + self.d2 > available:
            raise PreconditionError(
                f"shape ({self.d1}, {self.d2}) needs {self.d1 + self.d2} blocks, "
                f"only {available} available")


def default_shape(n_blocks, dx, dy, du):
    """Most balanced (d1, d2) with d1 + d2 = n_blocks fitting order ``dx``.

    Minimizes |d_y d1 - d_u d2|; ties go to the larger d1.
    """
    best = None
    for d1 in range(1, n_blocks):
        d2 = n_blocks - d1
        if min(dy * d1, du * d2) < dx:
            continue
        key = (abs(dy * d1 - du * d2), -d1)
        if best is None or key < best[0]:
            best = (key, d1, d2)
    if best is None:
        raise PreconditionError(f"{n_blocks} Markov blocks cannot support order {dx}")
    return HankelShape(best[1], best[2])


def hankel_matrix(G: MarkovSequence, d1, d2, first=1):
    """Block Hankel matrix with block (i, j) = G_{first+i+j}, i < d1, j < d2."""
    need = first + d1 + d2 - 1
    if len(G) < need:
        raise PreconditionError(f"need G_0..G_{need - 1}, got {len(G)} blocks")
    dy, du = G.dy, G.du
    E = np.empty((d1 * dy, d2 * du))
    for i in range(d1):
        for j in range(d2):
            E[i * dy:(i + 1) * dy, j * du:(j + 1) * du] = G.G[first + i + j]
    return E


def era(G: MarkovSequence, dx, shape: HankelShape = None, hankel_from="G1", return_spectrum=False):
    """Realize an order-``dx`` state-space model from Markov parameters.

    Block column j of the data Hankel matrix holds G_{s+j}..G_{s+j+d1-1}
    with s = 1 (``hankel_from="G1"``) or s = 0 (``"G0"``). The unshifted
    and shifted matrices use block columns 0..d2-1 and 1..d2. The output
    is a noiseless :class:`LtiModel` with D taken as G_0.
    """
    if hankel_from not in ("G0", "G1"):
        raise PreconditionError("hankel_from must be 'G0' or 'G1'")
    first = 1 if hankel_from == "G1" else 0
    dy, du = G.dy, G.du
    if shape is None:
        shape = default_shape(len(G) - first, dx, dy, du)
    shape.check(dx, dy, du, available=len(G) - first)
    d1, d2 = shape.d1, shape.d2
    E = hankel_matrix(G, d1, d2 + 1, first=first)
    Em, Ep = E[:, : d2 * du], E[:, du:]
    Uf, s, Vt = np.linalg.svd(Em, full_matrices=False)
    if s.size < dx or not s[dx - 1] >= RANK_TOL * s[0] or s[0] == 0:
        raise RankDeficientError(
            f"order {dx} exceeds the numerical rank of the Hankel matrix "
            f"(singular values {s[:dx + 1]})")
    root = np.sqrt(s[:dx])
    O = Uf[:, :dx] * root
    C = root[:, None] * Vt[:dx]
    A = (Uf[:, :dx] / root).T @ Ep @ (Vt[:dx].T / root)
    B = C[:, :du]
    H = O[:dy]
    model = LtiModel(A, B, H, G.G[0], np.zeros((dx, dx)), np.zeros((dy, dy)))
    if return_spectrum:
        return model, s
    return model


def ls_era(data, dx, nbar, shape: HankelShape = None, hankel_from="G1"):
    """Subtrajectory least squares for G_0..G_{nbar-1} followed by :func:`era`."""
    G = ls_markov_subtraj(data, nbar)
    return era(G, dx, shape, hankel_from=hankel_from)


def realization_to_json(model: LtiModel):
    return json.dumps({
        "d_x": model.dx, "d_u": model.du, "d_y": model.dy,
        "A": model.A.tolist(), "B": model.B.tolist(),
        "H": model.H.tolist(), "D": model.D.tolist(),
    })


def realization_from_json(text):
    obj = json.loads(text)
    dx, du, dy = obj["d_x"], obj["d_u"], obj["d_y"]
    return LtiModel(np.reshape(obj["A"], (dx, dx)), np.reshape(obj["B"], (dx, du)),
                    np.reshape(obj["H"], (dy, dx)), np.reshape(obj["D"], (dy, du)),
                    np.zeros((dx, dx)), np.zeros((dy, dy)))
