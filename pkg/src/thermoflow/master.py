"""Exact master equation for tiny lattices (test oracle for the KMC engine)."""

from __future__ import annotations

from itertools import combinations
from math import comb

import numpy as np

from .lattice import LatticeConfig, jump_rate

MAX_STATES = 70


def enumerate_sector(num_sites: int, particles: int) -> np.ndarray:
    """All occupation vectors with the given particle count, lexicographic order."""
    out = []
    for sites in combinations(range(num_sites), particles):
        occ = np.zeros(num_sites, dtype=np.int8)
        occ[list(sites)] = 1
        out.append(occ)
    return np.array(out, dtype=np.int8).reshape(-1, num_sites)


def config_index(states: np.ndarray) -> dict:
    return {s.tobytes(): i for i, s in enumerate(states)}


def generator(cfg: LatticeConfig, particles: int):
    """Markov generator ``G`` (rows sum to zero) on the particle-number sector."""
    n = cfg.num_sites
    if comb(n, particles) > MAX_STATES:
        raise ValueError(f"sector C({n},{particles}) exceeds {MAX_STATES} states")
    states = enumerate_sector(n, particles)
    index = config_index(states)
    g = np.zeros((len(states), len(states)))
    for a, occ in enumerate(states):
        for x in range(n):
            if not occ[x]:
                continue
            for y in ((x - 1) % n, (x + 1) % n):
                r = jump_rate(occ, x, y, cfg)
                if r == 0.0:
                    continue
                new = occ.copy()
                new[x], new[y] = 0, 1
                g[a, index[new.tobytes()]] += r
    g[np.diag_indices_from(g)] = -g.sum(axis=1)
    return states, g


def stationary_distribution(g: np.ndarray) -> np.ndarray:
    """Null vector of ``G^T`` normalised to a probability vector."""
    _, _, vt = np.linalg.svd(g.T)
    pi = np.abs(vt[-1])
    return pi / pi.sum()


def propagate(g: np.ndarray, p0: np.ndarray, t: float) -> np.ndarray:
    """``p0 @ expm(G t)`` by Taylor series with scaling and squaring."""
    a = g * t
    norm = np.abs(a).sum(axis=1).max()
    squarings = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0 else 0
    a = a / 2.0**squarings
    e = np.eye(len(g))
    term = np.eye(len(g))
    for k in range(1, 30):
        term = term @ a / k
        e = e + term
        if np.abs(term).max() < 1e-18:
            break
    for _ in range(squarings):
        e = e @ e
    return np.asarray(p0) @ e


def master_equation_oracle(cfg: LatticeConfig, particles: int, p0=None, t: float = 0.0):
    """Return ``(states, stationary, propagated)``.

    ``propagated`` is the distribution at microscopic time ``t`` started from
    ``p0`` (defaults to all mass on the first state).
    """
    states, g = generator(cfg, particles)
    pi = stationary_distribution(g)
    if p0 is None:
        p0 = np.zeros(len(states))
        p0[0] = 1.0
    return states, pi, propagate(g, p0, t)
