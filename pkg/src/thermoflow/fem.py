"""Piecewise-linear finite elements on the periodic unit interval.

Coarse-graining of lattice snapshots, the fluctuation estimator of the
tridiagonal dissipative operator and the training dataset assembly.

Node ``i`` sits at ``x = i * dx`` and lattice site ``k`` at ``x = k * eps``,
so with ``N / N_gamma = c`` node ``i`` coincides with site ``c * i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import KmcTrajectory, SamplingSchedule, TrajectoryEnsemble


@dataclass(frozen=True)
class FeBasis:
    num_nodes: int

    def __post_init__(self):
        if self.num_nodes < 3:
            raise ValueError("need at least 3 finite element nodes")

    @property
    def spacing(self) -> float:
        return 1.0 / self.num_nodes

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.num_nodes) * self.spacing

    def cell_size(self, num_sites: int) -> int:
        if num_sites % self.num_nodes:
            raise ValueError(f"{num_sites} sites not divisible by {self.num_nodes} nodes")
        return num_sites // self.num_nodes

    def hat(self, i: int, x) -> np.ndarray:
        """gamma_i(x) on the periodic interval."""
        d = np.abs(np.asarray(x, dtype=float) - i * self.spacing)
        d = np.minimum(d % 1.0, 1.0 - d % 1.0)
        return np.clip(1.0 - d / self.spacing, 0.0, None)

    def hat_matrix(self, num_sites: int) -> np.ndarray:
        """``H[i, k] = gamma_i(x_k)`` for lattice sites ``x_k = k / N``."""
        x = np.arange(num_sites) / num_sites
        return np.stack([self.hat(i, x) for i in range(self.num_nodes)])

    def projection_matrix(self, num_sites: int) -> np.ndarray:
        """Box averaging weights ``P[i, k]``; each row sums to one.

        The cell centred on node ``i`` spans ``c + 1`` sites with half weight
        on the two shared boundary sites, so cells tile the ring exactly.
        """
        c = self.cell_size(num_sites)
        p = np.zeros((self.num_nodes, num_sites))
        half = c // 2
        for i in range(self.num_nodes):
            centre = i * c
            if c % 2 == 0:
                offs = np.arange(-half, half + 1)
                w = np.ones(offs.size)
                w[0] = w[-1] = 0.5
            else:
                offs = np.arange(-half, half + 1)
                w = np.ones(offs.size)
            np.add.at(p[i], (centre + offs) % num_sites, w)
        return p / c


def mass_matrix(basis: FeBasis) -> np.ndarray:
    """Consistent mass matrix ``M_ij = <gamma_i, gamma_j>`` (periodic)."""
    n, dx = basis.num_nodes, basis.spacing
    m = np.zeros((n, n))
    idx = np.arange(n)
    m[idx, idx] = 2.0 * dx / 3.0
    m[idx, (idx + 1) % n] = dx / 6.0
    m[idx, (idx - 1) % n] = dx / 6.0
    return m


def solve_periodic_tridiagonal(lower, diag, upper, rhs):
    """Solve a cyclic tridiagonal system (Sherman-Morrison + Thomas).

    Row ``i`` reads ``lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1]``
    with periodic wrap.  ``rhs`` may carry trailing batch dimensions.
    """
    a = np.asarray(lower, float)
    b = np.asarray(diag, float).copy()
    c = np.asarray(upper, float)
    d = np.asarray(rhs, float)
    n = b.size
    gamma = -b[0]
    b[0] -= gamma
    b[-1] -= a[0] * c[-1] / gamma
    u = np.zeros(n)
    u[0], u[-1] = gamma, c[-1]
    x = _thomas(a, b, c, d)
    q = _thomas(a, b, c, u)
    vq = q[0] + a[0] / gamma * q[-1]
    vx = x[0] + a[0] / gamma * x[-1]
    factor = vx / (1.0 + vq)
    if d.ndim > 1:
        return x - np.multiply.outer(q, np.ones(d.shape[1:])) * factor
    return x - q * factor


def _thomas(a, b, c, d):
    n = b.size
    cp = np.empty(n)
    dp = np.empty_like(d, dtype=float)
    cp[0] = c[0] / b[0]
    dp[0] = d[0] / b[0]
    for i in range(1, n):
        m = b[i] - a[i] * cp[i - 1]
        cp[i] = c[i] / m
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m
    x = np.empty_like(dp)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


def solve_mass(basis: FeBasis, rhs) -> np.ndarray:
    """``M^{-1} rhs`` along the first axis."""
    n, dx = basis.num_nodes, basis.spacing
    off = np.full(n, dx / 6.0)
    return solve_periodic_tridiagonal(off, np.full(n, 2 * dx / 3.0), off, rhs)


def project(snapshot, basis: FeBasis) -> np.ndarray:
    """Cell-averaged density; works on a state, one snapshot or a stack ``(..., N)``."""
    occ = getattr(snapshot, "occupation", snapshot)
    occ = np.asarray(occ, dtype=np.float64)
    p = basis.projection_matrix(occ.shape[-1])
    return occ @ p.T


# --------------------------------------------------------------------------- #
# Fluctuation estimator


@dataclass(frozen=True)
class OperatorSample:
    z_left: float
    z_mid: float
    z_right: float
    k0: float
    k1: float


def _snapshots(trajectories) -> np.ndarray:
    if isinstance(trajectories, TrajectoryEnsemble):
        return trajectories.snapshots
    if isinstance(trajectories, np.ndarray):
        return trajectories
    trajs = list(trajectories)
    if not trajs:
        raise ValueError("no trajectories")
    if isinstance(trajs[0], KmcTrajectory):
        return np.stack([t.snapshots for t in trajs])
    return np.asarray(trajs)


def _weak_values(snaps: np.ndarray, basis: FeBasis) -> np.ndarray:
    """``<eta, gamma_i>_eps = eps * sum_k eta_k gamma_i(x_k)``, shape (R, T, N_gamma)."""
    n = snaps.shape[-1]
    h = basis.hat_matrix(n) / n
    return snaps.astype(np.float64) @ h.T


def _covariation(v: np.ndarray, h: float, eps: float) -> np.ndarray:
    """K-hat from weak values ``v`` (R, N_h + 1, N_gamma)."""
    r, steps = v.shape[0], v.shape[1] - 1
    dv = np.diff(v, axis=1)
    dy = (dv - dv.mean(axis=0)) / np.sqrt(eps)
    prod = np.einsum("rti,rtj->ij", dy, dy)
    return prod / ((r - 1) * steps * 2.0 * h)


def estimate_operator_matrix(trajectories, basis: FeBasis, schedule: SamplingSchedule):
    """Return ``(z0, K)``: mean field at ``t0`` and the full estimated matrix."""
    snaps = _snapshots(trajectories)
    if snaps.shape[0] < 2:
        raise ValueError("at least 2 realizations are needed for a covariation estimate")
    if schedule.n_intervals < 1:
        raise ValueError("need at least one fluctuation interval")
    sl = schedule.fluctuation_slice
    window = snaps[:, sl]
    eps = 1.0 / snaps.shape[-1]
    v = _weak_values(window, basis)
    z0 = project(window[:, 0], basis).mean(axis=0)
    return z0, _covariation(v, schedule.h, eps)


def operator_samples(z0: np.ndarray, k: np.ndarray) -> list[OperatorSample]:
    n = z0.size
    out = []
    for i in range(n):
        out.append(OperatorSample(float(z0[i - 1]), float(z0[i]), float(z0[(i + 1) % n]),
                                  float(k[i, i]), float(k[i, (i + 1) % n])))
    return out


def estimate_operator(trajectories, basis: FeBasis, schedule: SamplingSchedule) -> list[OperatorSample]:
    """One sample per node: diagonal entry and the right-edge off-diagonal entry.

    The matrix is symmetric by construction, so the left edge of node ``i``
    is the right edge of node ``i - 1``.
    """
    z0, k = estimate_operator_matrix(trajectories, basis, schedule)
    return operator_samples(z0, k)


def bootstrap_operator(trajectories, basis: FeBasis, schedule: SamplingSchedule,
                       resamples: int = 200, rng: np.random.Generator | None = None) -> np.ndarray:
    """Bootstrap (over realizations) standard error of every matrix entry."""
    rng = np.random.default_rng(0) if rng is None else rng
    snaps = _snapshots(trajectories)
    v = _weak_values(snaps[:, schedule.fluctuation_slice], basis)
    eps = 1.0 / snaps.shape[-1]
    r = v.shape[0]
    draws = np.empty((resamples,) + (v.shape[-1],) * 2)
    for b in range(resamples):
        draws[b] = _covariation(v[rng.integers(0, r, r)], schedule.h, eps)
    return draws.std(axis=0, ddof=1)


def tridiagonal_rows(k: np.ndarray) -> np.ndarray:
    """``(K[j, j-1], K[j, j], K[j, j+1])`` per node, shape (N_gamma, 3)."""
    n = k.shape[0]
    j = np.arange(n)
    return np.stack([k[j, (j - 1) % n], k[j, j], k[j, (j + 1) % n]], axis=1)


# --------------------------------------------------------------------------- #
# Macroscopic evolution


def macroscopic_fields(trajectories, basis: FeBasis, schedule: SamplingSchedule):
    """Mean projected fields ``(z(t0), z(t0 + dt))``."""
    snaps = _snapshots(trajectories)
    if schedule.macro_dt <= 0:
        raise ValueError("schedule has no macroscopic record")
    k = schedule.macro_index
    if snaps.shape[1] <= k:
        raise ValueError("trajectories lack the t0 + dt snapshot")
    z0 = project(snaps[:, 0], basis).mean(axis=0)
    z1 = project(snaps[:, k], basis).mean(axis=0)
    return z0, z1


def macroscopic_rate(trajectories, basis: FeBasis, schedule: SamplingSchedule) -> np.ndarray:
    """``(z(t0 + dt) - z(t0)) / dt`` per node."""
    z0, z1 = macroscopic_fields(trajectories, basis, schedule)
    return (z1 - z0) / schedule.macro_dt


# --------------------------------------------------------------------------- #
# Datasets


@dataclass
class DatasetK1:
    z: np.ndarray   # (n, 3) stencil (z_left, z_mid, z_right)
    k0: np.ndarray
    k1: np.ndarray

    def __len__(self):
        return self.k1.size

    @property
    def edges(self) -> np.ndarray:
        """Right-edge stencils ``(z_mid, z_right)``."""
        return self.z[:, 1:]

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0))


@dataclass
class DatasetF:
    node: np.ndarray      # (n,) int
    b: np.ndarray         # mass-weighted rate
    k_rows: np.ndarray    # (n, 3) operator row K[j, j-1], K[j, j], K[j, j+1]
    zf: np.ndarray        # (n, 3) field at nodes j-1, j, j+1
    upsilon: np.ndarray   # (n, 3) diffusion target at nodes j-1, j, j+1

    def __len__(self):
        return self.b.size

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 3)),
                   np.zeros((0, 3)), np.zeros((0, 3)))


def neighbour_stencil(z: np.ndarray) -> np.ndarray:
    return np.stack([np.roll(z, 1), z, np.roll(z, -1)], axis=1)


def build_datasets(operator_samples_per_profile, rates, fields, basis: FeBasis):
    """Flatten per-profile results, ordered by (profile, node).

    ``fields[p]`` are the nodal values used as ``Z^f``; operator rows come
    from the estimated samples and can be swapped later (see
    :func:`with_operator_rows`).
    """
    m = mass_matrix(basis)
    zs, k0s, k1s = [], [], []
    nodes, bs, rows, zfs = [], [], [], []
    for samples, rate, field in zip(operator_samples_per_profile, rates, fields):
        n = len(samples)
        if n != basis.num_nodes:
            raise ValueError("operator samples do not match the basis")
        zs.append([[s.z_left, s.z_mid, s.z_right] for s in samples])
        k0 = np.array([s.k0 for s in samples])
        k1 = np.array([s.k1 for s in samples])
        k0s.append(k0)
        k1s.append(k1)
        nodes.append(np.arange(n))
        bs.append(m @ np.asarray(rate, float))
        rows.append(np.stack([np.roll(k1, 1), k0, k1], axis=1))
        zfs.append(neighbour_stencil(np.asarray(field, float)))
    if not zs:
        return DatasetK1.empty(), DatasetF.empty()
    b = np.concatenate(bs)
    dk = DatasetK1(np.concatenate([np.asarray(z, float) for z in zs]), np.concatenate(k0s),
                   np.concatenate(k1s))
    ups = np.concatenate([neighbour_stencil(v) for v in bs])
    df = DatasetF(np.concatenate(nodes), b, np.concatenate(rows), np.concatenate(zfs), ups)
    return dk, df


def with_operator_rows(df: DatasetF, rows: np.ndarray) -> DatasetF:
    return DatasetF(df.node.copy(), df.b.copy(), np.asarray(rows, float).copy(), df.zf.copy(),
                    df.upsilon.copy())


def assemble_operator(k1_edges: np.ndarray) -> np.ndarray:
    """Periodic tridiagonal operator from right-edge values ``K1[i] = K[i, i+1]``.

    The diagonal is minus the off-diagonal row sum, so rows sum to zero and
    negative off-diagonals give a positive semi-definite matrix.
    """
    k1 = np.asarray(k1_edges, float)
    n = k1.size
    k = np.zeros((n, n))
    i = np.arange(n)
    k[i, (i + 1) % n] += k1
    k[(i + 1) % n, i] += k1
    k[i, i] = -(k1 + np.roll(k1, 1))
    return k
