"""Synthetic data generators and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import BayesIdError, Dataset, PreconditionError, simulate
from .models import (
    AllenCahnGrid,
    DuffingParams,
    StiffnessError,
    allen_cahn_qoi,
    allen_cahn_rhs,
    build_logistic_model,
    duffing_rhs,
    pendulum_truth,
    rk45_integrate,
    rk45_trajectory,
)


class IngestionError(BayesIdError):
    """A CSV record could not be turned into a Dataset."""

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


def _n_steps(span, dt):
    """Whole steps of ``dt`` that fit in ``span`` (tolerant to rounding)."""
    return int(np.floor(span / dt + 1e-9))


def gen_pendulum(dt, noise_ratio, seed, t_train=20.0, t_test=20.0) -> Dataset:
    """Damped pendulum record over a training then a testing window.

    Inputs are N(0, dt). Output noise has standard deviation
    ``noise_ratio * max(x[1])`` with the maximum over the training window.
    ``meta`` carries the clean output, the training length and the truth.
    """
    if not dt > 0:
        raise PreconditionError("dt must be positive")
    rng = np.random.default_rng(seed)
    n = _n_steps(t_train, dt)
    n_total = n + _n_steps(t_test, dt) + 1
    truth = pendulum_truth(dt)
    u = rng.normal(0.0, np.sqrt(dt), size=(n_total, 1))
    clean = simulate(truth, u).outputs
    noise_sd = noise_ratio * float(np.max(clean[: n + 1, 0]))
    y = clean + noise_sd * rng.standard_normal(clean.shape)
    times = dt * np.arange(n_total)
    meta = {"clean": clean, "n_train": n, "noise_sd": noise_sd, "dt": dt,
            "noise_ratio": noise_ratio, "seed": seed, "n_total": n_total}
    return Dataset(times, u, y, meta=meta)


def gen_logistic(rate=3.78, y0=0.5, n_points=200) -> Dataset:
    """Noiseless logistic-map record with a zero input channel."""
    model = build_logistic_model(rate, x0=y0, sigma=0.0, gamma=0.0)
    d = simulate(model, np.zeros((n_points, 1)))
    d.meta.update({"rate": rate, "y0": y0})
    return d


def gen_duffing(seed, dt=0.25, n_train=1200, n_test=0, spinup=600.0, noise_sd=1e-3,
                params: DuffingParams = DuffingParams()) -> Dataset:
    """Position samples of the forced Duffing oscillator after a spin-up.

    Starts at rest at t = 0, discards ``spinup`` seconds, then samples
    every ``dt``. The exogenous input is u_k = cos(omega t_k).
    """
    rng = np.random.default_rng(seed)
    n_total = n_train + n_test
    t0 = spinup
    x_start = rk45_integrate(lambda x, t: duffing_rhs(x, t, params), [0.0, 0.0], 0.0, t0)
    times = t0 + dt * np.arange(n_total)
    states = rk45_trajectory(lambda x, t: duffing_rhs(x, t, params), x_start, times)
    u = np.cos(params.omega * times)[:, None]
    y = states[:, :1] + noise_sd * rng.standard_normal((n_total, 1))
    meta = {"clean": states[:, :1].copy(), "velocity": states[:, 1].copy(), "n_train": n_train - 1,
            "noise_sd": noise_sd, "seed": seed, "dt": dt}
    return Dataset(times, u, y, meta=meta)


def gen_allen_cahn(seed, n_cells=256, dt=0.1, t_spinup=20.0, t_train=10.0, t_test=10.0,
                   input_var=1e-2, noise_sd=0.2, diffusion=1e-2, w0=None, substeps=1,
                   rtol=1e-8, atol=1e-10) -> Dataset:
    """Second moment of a forced Allen-Cahn field sampled every ``dt``.

    Inputs are drawn on the ``dt`` grid and held constant in between
    (including during spin-up). ``substeps`` splits each hold interval for
    the integrator without changing the input signal.
    """
    if n_cells < 16:
        raise PreconditionError("need at least 16 cells")
    rng = np.random.default_rng(seed)
    grid = AllenCahnGrid(n_vertices=n_cells + 1, diffusion=diffusion)
    n_spin = _n_steps(t_spinup, dt)
    n = _n_steps(t_train, dt)
    n_total = n + _n_steps(t_test, dt) + 1
    u_all = rng.normal(0.0, np.sqrt(input_var), size=n_spin + n_total) if input_var > 0 \
        else np.zeros(n_spin + n_total)
    w = np.zeros(n_cells + 1) if w0 is None else np.broadcast_to(np.asarray(w0, dtype=float),
                                                                    (n_cells + 1,)).copy()
    qoi = np.empty(n_total)
    h = dt / substeps
    t = 0.0
    try:
        for k in range(n_spin + n_total):
            if k >= n_spin:
                qoi[k - n_spin] = allen_cahn_qoi(w)
            if k == n_spin + n_total - 1:
                break
            rhs = allen_cahn_rhs(grid, u_all[k])
            for _ in range(substeps):
                w = rk45_integrate(rhs, w, t, t + h, rtol=rtol, atol=atol)
                t += h
    except StiffnessError as exc:
        raise StiffnessError(f"{exc}; try fewer cells (n_cells={n_cells})") from exc
    y = qoi + noise_sd * rng.standard_normal(n_total)
    times = t_spinup + dt * np.arange(n_total)
    meta = {"clean": qoi[:, None].copy(), "n_train": n, "noise_sd": noise_sd, "seed": seed,
            "diffusion": diffusion, "n_cells": n_cells, "dt": dt}
    return Dataset(times, u_all[n_spin:, None], y[:, None], meta=meta)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass
class Normalization:
    """Per-channel affine map to zero mean and unit standard deviation."""

    u_mean: np.ndarray
    u_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, data: Dataset):
        def stats(a):
            m = a.mean(axis=0)
            s = a.std(axis=0)
            return m, np.where(s > 0, s, 1.0)

        return cls(*stats(data.inputs), *stats(data.outputs))

    def apply(self, data: Dataset) -> Dataset:
        meta = dict(data.meta)
        meta["normalization"] = self.to_dict()
        return Dataset(data.times, (data.inputs - self.u_mean) / self.u_std,
                       (data.outputs - self.y_mean) / self.y_std, data.mask, meta)

    def invert_outputs(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def invert(self, data: Dataset) -> Dataset:
        return Dataset(data.times, data.inputs * self.u_std + self.u_mean,
                       self.invert_outputs(data.outputs), data.mask, dict(data.meta))

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("u_mean", "u_std", "y_mean", "y_std")}


def ingest_csv(path, du, dy, normalize=False, column_map=None) -> Dataset:
    """Read a ``t,u_1..,y_1..`` CSV (or columns named by ``column_map``).

    ``column_map`` maps ``"t"``, ``"u"`` and ``"y"`` to a column name or a
    list of column names. With ``normalize`` the returned dataset is
    standardized and ``meta["normalization"]`` holds the inverse map.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError("file is empty")
    header = [h.strip() for h in rows[0]]
    if column_map is None:
        want_t = ["t"]
        want_u = [f"u_{i + 1}" for i in range(du)]
        want_y = [f"y_{i + 1}" for i in range(dy)]
    else:
        def names(key, count):
            v = column_map.get(key, [])
            v = [v] if isinstance(v, str) else list(v)
            if len(v) != count:
                raise IngestionError(f"column map for {key!r} names {len(v)} columns, need {count}")
            return v

        want_t = names("t", 1)
        want_u = names("u", du)
        want_y = names("y", dy)
    try:
        cols = [header.index(c) for c in want_t + want_u + want_y]
    except ValueError as exc:
        raise IngestionError(f"header {header} lacks a required column ({exc})", row=0) from None
    data = np.empty((len(rows) - 1, len(cols)))
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise IngestionError(f"expected {len(header)} fields, got {len(row)}", row=r)
        try:
            vals = [float(row[c]) for c in cols]
        except ValueError as exc:
            raise IngestionError(str(exc), row=r) from None
        if not np.all(np.isfinite(vals)):
            raise IngestionError("non-finite value", row=r)
        data[r - 1] = vals
    if data.shape[0] == 0:
        raise IngestionError("no data rows")
    if data.shape[0] > 1:
        bad = np.flatnonzero(np.diff(data[:, 0]) <= 0)
        if bad.size:
            raise IngestionError("times are not strictly increasing", row=int(bad[0]) + 2)
    d = Dataset(data[:, 0], data[:, 1:1 + du], data[:, 1 + du:], meta={"source": str(path)})
    if normalize:
        d = Normalization.fit(d).apply(d)
    return d
