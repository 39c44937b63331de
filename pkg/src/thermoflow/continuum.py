"""Macroscopic prediction with the learned (or analytic) gradient flow.

The semi-discrete system is ``M rho' = -K(rho) Q(rho)`` on the periodic FE
grid.  ``K`` is tridiagonal with zero row sums, so it is applied in flux
form ``(K Q)_i = K1_{i-1} (Q_{i-1} - Q_i) + K1_i (Q_{i+1} - Q_i)``, which
annihilates constants and conserves mass by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fem import FeBasis, solve_mass
from .models import calibrate

log = logging.getLogger(__name__)

DEFAULT_DT = 8e-5
GRID_POINTS = 201


def apply_operator(k1, q) -> np.ndarray:
    """``K Q`` for right-edge entries ``k1`` along the last axis."""
    k1 = np.asarray(k1, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return (np.roll(k1, 1, axis=-1) * (np.roll(q, 1, axis=-1) - q)
            + k1 * (np.roll(q, -1, axis=-1) - q))


def flux_rhs(rho, k1, q, basis: FeBasis) -> np.ndarray:
    """``-M^{-1} K Q`` along the last axis (any leading batch shape)."""
    kq = apply_operator(k1, q)
    flat = kq.reshape(-1, kq.shape[-1]).T
    return -solve_mass(basis, flat).T.reshape(kq.shape)


def edges_of(rho) -> np.ndarray:
    """Right-edge pairs ``(rho_i, rho_{i+1})`` with shape ``rho.shape + (2,)``."""
    rho = np.asarray(rho, dtype=np.float64)
    return np.stack([rho, np.roll(rho, -1, axis=-1)], axis=-1)


@dataclass
class OdeSystem:
    basis: FeBasis
    k1_fn: Callable      # edges (..., 2) -> K1 (...)
    q_fn: Callable       # rho (...) -> Q (...)
    dt: float = DEFAULT_DT

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def k1(self, rho):
        e = edges_of(rho)
        return np.asarray(self.k1_fn(e.reshape(-1, 2))).reshape(e.shape[:-1])

    def q(self, rho):
        rho = np.asarray(rho, dtype=np.float64)
        return np.asarray(self.q_fn(rho.reshape(-1))).reshape(rho.shape)

    def rhs(self, rho):
        return flux_rhs(rho, self.k1(rho), self.q(rho), self.basis)

    def operator(self, rho) -> np.ndarray:
        from .fem import assemble_operator
        return assemble_operator(self.k1(rho))

    def integrate(self, rho0, t_end, out_times=None):
        return rk4_integrate(self.rhs, rho0, t_end, self.dt, out_times)


def rhs(rho, system: OdeSystem):
    return system.rhs(rho)


def rk4_integrate(f, y0, t_end: float, dt: float = DEFAULT_DT, out_times=None):
    """Classical RK4; returns ``(times, states)`` at ``out_times`` (default: t_end).

    Each interval between output times is split into equal steps no longer
    than ``dt`` so outputs fall exactly on the requested times.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    times = np.atleast_1d(np.asarray(t_end if out_times is None else out_times, dtype=np.float64))
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("output times must be non-negative and increasing")
    y = np.array(y0, dtype=np.float64)
    out = np.empty((times.size,) + y.shape)
    t = 0.0
    for k, tk in enumerate(times):
        span = tk - t
        n = int(np.ceil(span / dt - 1e-9)) if span > 0 else 0
        h = span / n if n else 0.0
        for _ in range(n):
            k1 = f(y)
            k2 = f(y + 0.5 * h * k1)
            k3 = f(y + 0.5 * h * k2)
            k4 = f(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = tk
        out[k] = y
    return times, out


def calibrate_f(f_fn, q_fn, rho_r0: float = 0.5, rho_r1: float = 0.5):
    """Calibrated ``(f_bar, Q_bar)``; see :func:`thermoflow.models.calibrate`."""
    return calibrate(f_fn, q_fn, rho_r0, rho_r1)


# --------------------------------------------------------------------------- #
# Grid caches


def unit_grid(points: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, 1.0, points)


def _locate(x, points):
    s = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * (points - 1)
    # non-finite inputs index cell 0 and keep a NaN weight, so they propagate
    i = np.minimum(np.where(np.isfinite(s), s, 0.0).astype(np.intp), points - 2)
    return i, s - i


def interp_1d(values, x):
    """Linear interpolation of tables (..., G) on the unit grid.

    ``values`` may carry leading batch axes matching those of ``x``.
    """
    values = np.asarray(values)
    g = values.shape[-1]
    i, t = _locate(x, g)
    if values.ndim == 1:
        return (1 - t) * values[i] + t * values[i + 1]
    lead = np.arange(values.shape[0]).reshape((-1,) + (1,) * (np.ndim(x) - 1))
    return (1 - t) * values[lead, i] + t * values[lead, i + 1]


def interp_2d(values, a, b):
    """Bilinear interpolation of tables (..., G, G) at pairs ``(a, b)``."""
    values = np.asarray(values)
    g = values.shape[-1]
    i, s = _locate(a, g)
    j, t = _locate(b, g)
    if values.ndim == 2:
        v = values
        return ((1 - s) * ((1 - t) * v[i, j] + t * v[i, j + 1])
                + s * ((1 - t) * v[i + 1, j] + t * v[i + 1, j + 1]))
    lead = np.arange(values.shape[0]).reshape((-1,) + (1,) * (np.ndim(a) - 1))
    v = values
    return ((1 - s) * ((1 - t) * v[lead, i, j] + t * v[lead, i, j + 1])
            + s * ((1 - t) * v[lead, i + 1, j] + t * v[lead, i + 1, j + 1]))


def edge_grid(points: int = GRID_POINTS) -> np.ndarray:
    g = unit_grid(points)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


@dataclass
class GridModel:
    """Tabulated K1 (..., G, G) and Q (..., G) on the unit grid."""
    k1: np.ndarray
    q: np.ndarray
    f: np.ndarray | None = None

    def k1_at(self, rho):
        e = edges_of(rho)
        return interp_2d(self.k1, e[..., 0], e[..., 1])

    def q_at(self, rho):
        return interp_1d(self.q, rho)

    def rhs(self, rho, basis):
        return flux_rhs(rho, self.k1_at(rho), self.q_at(rho), basis)


def tabulate(k1_fn, f_fn, points: int = GRID_POINTS) -> GridModel:
    """Grid cache of deterministic functions (``f_fn`` returns ``(f, Q)``)."""
    g = unit_grid(points)
    k1 = np.asarray(k1_fn(edge_grid(points))).reshape(points, points)
    f, q = f_fn(g)
    return GridModel(k1, np.asarray(q), np.asarray(f))


# --------------------------------------------------------------------------- #
# Ensembles


@dataclass
class EnsembleResult:
    times: np.ndarray
    trajectories: np.ndarray    # (n_real, T, N_gamma)
    excluded: int = 0

    @property
    def mean(self):
        return self.trajectories.mean(axis=0)

    @property
    def std(self):
        return self.trajectories.std(axis=0)

    @property
    def ci(self):
        lo, hi = np.percentile(self.trajectories, [2.5, 97.5], axis=0)
        return lo, hi

    def table(self) -> np.ndarray:
        """Rows ``time, node, mean, std, ci_lo, ci_hi``."""
        lo, hi = self.ci
        mean, std = self.mean, self.std
        t_idx, nodes = np.meshgrid(np.arange(self.times.size), np.arange(mean.shape[1]), indexing="ij")
        return np.column_stack([self.times[t_idx.ravel()], nodes.ravel(), mean.ravel(), std.ravel(),
                                lo.ravel(), hi.ravel()])


def integrate_grids(grid: GridModel, basis: FeBasis, rho0, out_times, dt: float = DEFAULT_DT):
    """Integrate one or many tabulated systems; ``rho0`` is broadcast over the batch."""
    batch = grid.q.shape[:-1]
    y0 = np.broadcast_to(np.asarray(rho0, dtype=np.float64), batch + (basis.num_nodes,))
    return rk4_integrate(lambda r: grid.rhs(r, basis), y0, out_times[-1], dt, out_times)


def ensemble_predict(enn_k1, enn_f, basis: FeBasis, rho0, out_times, n_real: int = 2000,
                     rng: np.random.Generator | None = None, points: int = GRID_POINTS,
                     dt: float = DEFAULT_DT, chunk: int = 250, max_excluded: float = 0.01,
                     phis=None) -> EnsembleResult:
    """Trajectories of ``n_real`` function samples, each with one fixed index pair.

    Base predictions and features are tabulated once; the epinet corrections
    are tabulated per index.  ``phis`` may pass explicit ``(phi_K1, phi_f)``.
    """
    from .epinet import sample_indices
    from .models import g_transform

    rng = np.random.default_rng(0) if rng is None else rng
    d = enn_k1.epinet.spec.index_dim
    if phis is None:
        rk, rf = rng.spawn(2)
        phis = (sample_indices(n_real, d, rk), sample_indices(n_real, d, rf))
    phk, phf = phis
    g = unit_grid(points)
    raw, feats = enn_k1.base_terms(edge_grid(points))
    s_raw = enn_k1.base.raw.std
    f0, q0, hf, hft = enn_f.base_terms(g)
    out_times = np.atleast_1d(np.asarray(out_times, dtype=np.float64))
    traj = np.empty((n_real, out_times.size, basis.num_nodes))
    for start in range(0, n_real, chunk):
        sl = slice(start, min(start + chunk, n_real))
        k1 = g_transform(raw[None, :] + s_raw * enn_k1.epinet.many(feats, phk[sl]))
        q = np.empty((k1.shape[0], points))
        for k, ph in enumerate(phf[sl]):
            q[k] = q0 + enn_f.epinet.with_tangent(hf, hft, ph)[1]
        grid = GridModel(k1.reshape(-1, points, points), q)
        _, y = integrate_grids(grid, basis, rho0, out_times, dt)
        traj[sl] = np.moveaxis(y, 0, 1)
    ok = np.all(np.isfinite(traj), axis=(1, 2))
    bad = int((~ok).sum())
    if bad:
        log.warning("%d of %d realizations produced non-finite fields and were excluded", bad, n_real)
        if bad > max_excluded * n_real:
            raise RuntimeError(f"{bad} of {n_real} realizations failed")
    return EnsembleResult(out_times, traj[ok], bad)


def free_energy(rho, f_fn, basis: FeBasis):
    """``sum_j dx f(rho_j)`` (nodal quadrature)."""
    rho = np.asarray(rho, dtype=np.float64)
    return basis.spacing * np.asarray(f_fn(rho.reshape(-1))).reshape(rho.shape).sum(axis=-1)
