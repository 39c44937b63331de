"""Analytic long-range model (mean-field continuum limit of the lattice gas).

Free energy ``f = rho ln rho + (1 - rho) ln(1 - rho) - rho (J * rho) / 2``,
mobility ``m = D rho (1 - rho) exp(-J * rho)`` and driving force
``Q = ln(rho / (1 - rho)) - J * rho``.  On the finite-element grid the
convolution ``J * rho`` is a periodic stencil over nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .continuum import flux_rhs, rk4_integrate
from .fem import FeBasis
from .lattice import LatticeConfig


@dataclass(frozen=True)
class LrmConfig:
    diffusion: float
    kernel: np.ndarray          # stencil weights over node offsets -L..L

    def __post_init__(self):
        k = np.atleast_1d(np.asarray(self.kernel, dtype=np.float64))
        if k.size % 2 == 0:
            raise ValueError("kernel stencil needs odd length")
        if not np.allclose(k, k[::-1]):
            raise ValueError("kernel must be symmetric")
        if not self.diffusion > 0:
            raise ValueError("diffusion coefficient must be positive")
        object.__setattr__(self, "kernel", k)

    @property
    def strength(self) -> float:
        """Total interaction ``sum J``; the local limit of ``J * rho`` is ``strength * rho``."""
        return float(self.kernel.sum())


def kernel_stencil(cfg: LatticeConfig, basis: FeBasis) -> np.ndarray:
    """Node weights of the lattice kernel applied to the piecewise-linear field.

    ``(J * rho)(x_i) = sum_r betaJ(r) rho_h(x_i + r / N)`` with ``rho_h`` the
    nodal interpolant; the weights are exact for that interpolant.
    """
    c = basis.cell_size(cfg.num_sites)
    table = cfg.interaction
    reach = int(np.ceil(cfg.interaction_range / c))
    w = np.zeros(2 * reach + 1)
    for r in range(1, cfg.interaction_range + 1):
        for s in (r, -r):
            q, rem = divmod(s, c)          # s = q c + rem with 0 <= rem < c
            t = rem / c
            w[reach + q] += table[r] * (1.0 - t)
            if rem:
                w[reach + q + 1] += table[r] * t
    return w


def from_lattice(cfg: LatticeConfig, basis: FeBasis) -> LrmConfig:
    return LrmConfig(cfg.diffusion_coefficient, kernel_stencil(cfg, basis))


def local_config(cfg: LatticeConfig) -> LrmConfig:
    """Local limit: the kernel collapses to its total strength at offset zero."""
    return LrmConfig(cfg.diffusion_coefficient, np.array([cfg.interaction_strength]))


def convolve(rho, kernel) -> np.ndarray:
    """Periodic stencil sum along the last axis."""
    rho = np.asarray(rho, dtype=np.float64)
    reach = kernel.size // 2
    out = np.zeros_like(rho)
    for k, w in enumerate(kernel):
        if w:
            out += w * np.roll(rho, reach - k, axis=-1)
    return out


def _xlogx(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


def free_energy_density(rho, conv) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    return _xlogx(rho) + _xlogx(1.0 - rho) - 0.5 * rho * np.asarray(conv)


def driving_force(rho, conv) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    return np.log(rho) - np.log1p(-rho) - np.asarray(conv)


def mobility(rho, conv, diffusion: float) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    return diffusion * rho * (1.0 - rho) * np.exp(-np.asarray(conv))


def local_free_energy(rho, strength: float):
    return free_energy_density(rho, strength * np.asarray(rho, dtype=np.float64))


def local_driving_force(rho, strength: float):
    return driving_force(rho, strength * np.asarray(rho, dtype=np.float64))


def local_k1(edges, strength: float, diffusion: float, dx: float) -> np.ndarray:
    """``K1`` of the local model at the edge midpoint density."""
    e = np.asarray(edges, dtype=np.float64).reshape(-1, 2)
    mid = e.mean(axis=1)
    return -mobility(mid, strength * mid, diffusion) / dx


def operator_k1(rho, lrm: LrmConfig, basis: FeBasis) -> np.ndarray:
    """Right-edge entries ``K[i, i+1] = -m(midpoint) / dx`` along the last axis."""
    rho = np.asarray(rho, dtype=np.float64)
    conv = convolve(rho, lrm.kernel)
    mid = 0.5 * (rho + np.roll(rho, -1, axis=-1))
    cmid = 0.5 * (conv + np.roll(conv, -1, axis=-1))
    return -mobility(mid, cmid, lrm.diffusion) / basis.spacing


def operator_entries(rho, lrm: LrmConfig, basis: FeBasis):
    """``(K0, K1)`` per node / right edge."""
    k1 = operator_k1(rho, lrm, basis)
    return -k1 - np.roll(k1, 1, axis=-1), k1


def force(rho, lrm: LrmConfig) -> np.ndarray:
    return driving_force(rho, convolve(rho, lrm.kernel))


def total_free_energy(rho, lrm: LrmConfig, basis: FeBasis) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    return basis.spacing * free_energy_density(rho, convolve(rho, lrm.kernel)).sum(axis=-1)


def rhs(rho, lrm: LrmConfig, basis: FeBasis) -> np.ndarray:
    return flux_rhs(rho, operator_k1(rho, lrm, basis), force(rho, lrm), basis)


def evolve(lrm: LrmConfig, basis: FeBasis, rho0, t_end: float, dt: float = 8e-5, out_times=None):
    """Reference trajectory ``(times, rho)`` by RK4."""
    return rk4_integrate(lambda r: rhs(r, lrm, basis), rho0, t_end, dt, out_times)
