"""Rejection-free (BKL) kinetic Monte Carlo for the 1D Arrhenius lattice gas.

Particles on a periodic ring of ``N`` sites hop to empty nearest neighbours
with rate

    d * eta(x) * (1 - eta(y)) * exp(-beta*U0 - sum_{chi != x} betaJ(x - chi) eta(chi))

The engine clock runs in microscopic time (rates as above).  Sampling
schedules are given in macroscopic time under diffusive scaling,
``t_macro = t_micro / N**2``, so that the coarse-grained density obeys a
diffusion equation with coefficient ``D = d * exp(-beta*U0)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit

# --------------------------------------------------------------------------- #
# Configuration types


@dataclass(frozen=True)
class LatticeConfig:
    """Lattice and rate parameters.

    ``interaction[r]`` holds the dimensionless pair energy ``beta*J(r)`` for
    ``r = 1..L_int``; entry 0 is ignored (a site never interacts with itself).
    Symmetry ``J(r) = J(-r)`` is built in by storing only ``|r|``.
    """

    num_sites: int
    jump_frequency: float = 1.0
    binding_energy: float = 0.0
    inverse_temperature: float = 1.0
    interaction: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        table = np.ascontiguousarray(np.atleast_1d(np.asarray(self.interaction, dtype=np.float64)))
        if table.size == 0:
            table = np.zeros(1)
        table = table.copy()
        table[0] = 0.0
        object.__setattr__(self, "interaction", table)
        if self.num_sites < 2:
            raise ValueError("num_sites must be >= 2")
        if not self.jump_frequency > 0:
            raise ValueError("jump_frequency must be positive")
        if not 2 * self.interaction_range < self.num_sites:
            raise ValueError("interaction range must be < num_sites / 2")
        if not np.all(np.isfinite(table)):
            raise ValueError("interaction energies must be finite")

    @property
    def spacing(self) -> float:
        return 1.0 / self.num_sites

    @property
    def interaction_range(self) -> int:
        return int(self.interaction.size - 1)

    @property
    def rate_prefactor(self) -> float:
        return self.jump_frequency * math.exp(-self.inverse_temperature * self.binding_energy)

    @property
    def diffusion_coefficient(self) -> float:
        """Macroscopic D = d exp(-beta U0)."""
        return self.rate_prefactor

    @property
    def time_scale(self) -> float:
        """Microscopic time units per macroscopic time unit."""
        return float(self.num_sites) ** 2

    @property
    def interaction_strength(self) -> float:
        """Total dimensionless interaction ``sum_{r != 0} betaJ(r)``."""
        return 2.0 * float(self.interaction[1:].sum())


def non_interacting(num_sites: int, jump_frequency: float = 1.0) -> LatticeConfig:
    return LatticeConfig(num_sites=num_sites, jump_frequency=jump_frequency)


def long_range(num_sites: int, strength: float = 1.0, support: int | None = None,
               jump_frequency: float = 1.0) -> LatticeConfig:
    """Box (Kac-type) potential ``betaJ(r) = strength / (2L + 1)`` for ``|r| <= L``.

    The default support spans 10% of the lattice (``2L + 1 ~ N/10``).
    """
    if support is None:
        support = max(1, num_sites // 20)
    table = np.full(support + 1, strength / (2 * support + 1))
    return LatticeConfig(num_sites=num_sites, jump_frequency=jump_frequency, interaction=table)


def short_range(num_sites: int, strength: float, jump_frequency: float = 1.0) -> LatticeConfig:
    """Nearest-neighbour potential ``betaJ(+-1) = strength``."""
    return LatticeConfig(num_sites=num_sites, jump_frequency=jump_frequency,
                         interaction=np.array([0.0, strength]))


PRESETS = {
    "non-interacting": lambda n: non_interacting(n),
    "long-range": lambda n: long_range(n, strength=1.0),
    "short-range-weak": lambda n: short_range(n, strength=0.5),
    "short-range-strong": lambda n: short_range(n, strength=2.0),
}


@dataclass(frozen=True)
class InitialProfile:
    """Cosine density ``rho(x) = mean - amplitude * cos(4 pi frequency x)``."""

    frequency: int
    amplitude: float
    mean: float

    def __post_init__(self):
        if self.frequency < 0:
            raise ValueError("frequency must be non-negative")
        if not (0.0 <= self.mean - abs(self.amplitude) and self.mean + abs(self.amplitude) <= 1.0):
            raise ValueError(f"profile leaves [0, 1]: {self}")

    def density(self, x):
        return self.mean - self.amplitude * np.cos(4.0 * np.pi * self.frequency * np.asarray(x))


def standard_profiles() -> list[InitialProfile]:
    """The 28 training profiles (four groups of seven)."""
    out = []
    for i in range(1, 8):
        a = 0.05 + 0.03 * i
        out.append(InitialProfile(1, a, 0.5 - (-1) ** i * 0.6 * (0.5 - a)))
    for i in range(1, 8):
        out.append(InitialProfile(1, 0.31, 0.272 + 0.057 * i))
    for i in range(1, 8):
        a = 0.04 + 0.03 * i
        out.append(InitialProfile(2, a, 0.5 + (-1) ** i * 0.84 * (0.5 - a)))
    for i in range(1, 8):
        out.append(InitialProfile(2, 0.29, 0.272 + 0.057 * i))
    return out


@dataclass(frozen=True)
class SamplingSchedule:
    """Record times, in macroscopic units.

    Snapshots are taken at ``t0 = t_eq``, ``t0 + k h`` for ``k = 1..n_intervals``
    and at ``t0 + macro_dt``.  ``macro_dt = 0`` skips the macroscopic record.
    """

    t_eq: float
    h: float
    n_intervals: int
    macro_dt: float
    realizations: int = 1

    def __post_init__(self):
        if self.t_eq < 0:
            raise ValueError("t_eq must be >= 0")
        if not self.h > 0:
            raise ValueError("h must be > 0")
        if self.n_intervals < 0:
            raise ValueError("n_intervals must be >= 0")
        if self.macro_dt < 0 or (self.macro_dt > 0 and self.macro_dt < 10 * self.h):
            raise ValueError("macro_dt must be 0 or >= 10 h")
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")

    @classmethod
    def desk_default(cls, cfg: LatticeConfig, realizations: int = 1000) -> SamplingSchedule:
        # t_eq = 50 mean waiting times and h = 10 / (N d), both microscopic;
        # macro_dt is macroscopic (a microscopic 100 h is too short to resolve).
        micro = 1.0 / cfg.time_scale
        d = cfg.jump_frequency
        return cls(t_eq=50.0 / d * micro, h=10.0 / (cfg.num_sites * d) * micro, n_intervals=10,
                   macro_dt=1e-3, realizations=realizations)

    def record_times(self) -> np.ndarray:
        t = [self.t_eq + k * self.h for k in range(self.n_intervals + 1)]
        if self.macro_dt > 0:
            t.append(self.t_eq + self.macro_dt)
        return np.unique(np.asarray(t, dtype=np.float64))

    @property
    def fluctuation_slice(self) -> slice:
        return slice(0, self.n_intervals + 1)

    @property
    def macro_index(self) -> int:
        """Index of the ``t0 + macro_dt`` record."""
        times = self.record_times()
        return int(np.argmin(np.abs(times - (self.t_eq + self.macro_dt))))


@dataclass
class LatticeState:
    occupation: np.ndarray
    time: float = 0.0

    @property
    def particles(self) -> int:
        return int(self.occupation.sum())


@dataclass
class KmcTrajectory:
    """One realization: snapshot ``k`` is the occupation at ``times[k]`` (macroscopic)."""

    times: np.ndarray
    snapshots: np.ndarray  # (n_records, N) uint8
    events: int = 0


@dataclass
class TrajectoryEnsemble:
    """Stacked realizations of one initial profile."""

    times: np.ndarray
    snapshots: np.ndarray  # (R, n_records, N) uint8
    events: int = 0

    @property
    def realizations(self) -> int:
        return self.snapshots.shape[0]

    @classmethod
    def from_trajectories(cls, trajs: list[KmcTrajectory]) -> TrajectoryEnsemble:
        if not trajs:
            raise ValueError("empty trajectory list")
        times = trajs[0].times
        for tr in trajs[1:]:
            if tr.times.shape != times.shape or not np.array_equal(tr.times, times):
                raise ValueError("trajectories have different record times")
        return cls(times=times.copy(), snapshots=np.stack([t.snapshots for t in trajs]),
                   events=sum(t.events for t in trajs))


# --------------------------------------------------------------------------- #
# Random streams


def realization_rng(master_seed: int, profile_index: int, realization_index: int) -> np.random.Generator:
    """Independent counter-based (Philox) stream per realization."""
    ss = np.random.SeedSequence([int(master_seed), int(profile_index), int(realization_index)])
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------- #
# Kernels (numba or plain Python, see _accel)

DONE = 0
EXHAUSTED = 1
FROZEN = 2


@njit(cache=True)
def _pair(table, dist):
    if dist >= 1 and dist < table.shape[0]:
        return table[dist]
    return 0.0


@njit(cache=True)
def _ring_dist(a, b, n):
    d = a - b
    if d < 0:
        d = -d
    d = d % n
    if n - d < d:
        d = n - d
    return d


@njit(cache=True)
def _site_weight(occ, energy, x, n, prefactor):
    if occ[x] == 0:
        return 0.0
    left = x - 1 if x > 0 else n - 1
    right = x + 1 if x < n - 1 else 0
    empty = (1 - occ[left]) + (1 - occ[right])
    if empty == 0:
        return 0.0
    return prefactor * math.exp(-energy[x]) * empty


@njit(cache=True)
def _compute_energy(occ, table, n, energy):
    rng_ = table.shape[0] - 1
    for x in range(n):
        e = 0.0
        for r in range(1, rng_ + 1):
            e += table[r] * (occ[(x + r) % n] + occ[(x - r) % n])
        energy[x] = e


@njit(cache=True)
def _tree_fix(tree, leaf):
    k = leaf >> 1
    while k >= 1:
        tree[k] = tree[2 * k] + tree[2 * k + 1]
        k >>= 1


@njit(cache=True)
def _tree_build(tree, weights, p):
    for i in range(tree.shape[0]):
        tree[i] = 0.0
    for i in range(weights.shape[0]):
        tree[p + i] = weights[i]
    for k in range(p - 1, 0, -1):
        tree[k] = tree[2 * k] + tree[2 * k + 1]


@njit(cache=True)
def _tree_select(tree, p, target):
    k = 1
    while k < p:
        left = tree[2 * k]
        if target < left:
            k = 2 * k
        else:
            target -= left
            k = 2 * k + 1
    return k - p


@njit(cache=True)
def _rebuild(occ, energy, weights, tree, p, table, prefactor):
    n = occ.shape[0]
    _compute_energy(occ, table, n, energy)
    for x in range(n):
        weights[x] = _site_weight(occ, energy, x, n, prefactor)
    _tree_build(tree, weights, p)


@njit(cache=True)
def _refresh_site(occ, energy, weights, tree, p, prefactor, s, n):
    w = _site_weight(occ, energy, s, n, prefactor)
    if w != weights[s]:
        weights[s] = w
        tree[p + s] = w
        _tree_fix(tree, p + s)


@njit(cache=True)
def _execute(occ, energy, weights, tree, p, table, prefactor, x, y):
    """Move the particle x -> y and refresh the O(L) affected rates."""
    n = occ.shape[0]
    rng_ = table.shape[0] - 1
    occ[x] = 0
    occ[y] = 1
    base = x if y == (x + 1) % n else y
    span = 2 * rng_ + 4
    if span <= n:
        # sites base-L-1 .. base+L+2 are distinct; distances need no wrapping
        x_first = base == x
        for o in range(span):
            k = o - rng_ - 1
            dx = k if k >= 0 else -k
            k1 = k - 1
            dy = k1 if k1 >= 0 else -k1
            if not x_first:
                dx, dy = dy, dx
            s = base - rng_ - 1 + o
            if s < 0:
                s += n
            elif s >= n:
                s -= n
            if dy == 0:
                delta = -_pair(table, dx)
            elif dx == 0:
                delta = _pair(table, dy)
            else:
                delta = _pair(table, dy) - _pair(table, dx)
            if delta != 0.0:
                energy[s] += delta
                _refresh_site(occ, energy, weights, tree, p, prefactor, s, n)
            elif dx <= 1 or dy <= 1:
                _refresh_site(occ, energy, weights, tree, p, prefactor, s, n)
        return
    for s in range(n):
        dx = _ring_dist(s, x, n)
        dy = _ring_dist(s, y, n)
        if s == y:
            delta = -_pair(table, dx)
        elif s == x:
            delta = _pair(table, dy)
        else:
            delta = _pair(table, dy) - _pair(table, dx)
        if delta != 0.0:
            energy[s] += delta
        if delta != 0.0 or dx <= 1 or dy <= 1:
            _refresh_site(occ, energy, weights, tree, p, prefactor, s, n)


@njit(cache=True)
def _choose(occ, tree, weights, p, total, u_site, u_dir):
    n = occ.shape[0]
    x = _tree_select(tree, p, u_site * total)
    if x >= n or weights[x] <= 0.0:
        # rounding put the target on an empty leaf; take the nearest live one
        start = x if x < n else n - 1
        x = -1
        for k in range(start, -1, -1):
            if weights[k] > 0.0:
                x = k
                break
        if x < 0:
            for k in range(start, n):
                if weights[k] > 0.0:
                    x = k
                    break
    left = x - 1 if x > 0 else n - 1
    right = x + 1 if x < n - 1 else 0
    le = occ[left] == 0
    ri = occ[right] == 0
    if le and ri:
        y = left if u_dir < 0.5 else right
    elif le:
        y = left
    else:
        y = right
    return x, y


@njit(cache=True, nogil=True)
def _advance(occ, energy, weights, tree, p, table, prefactor, t, t_stop, u, pos):
    """Run BKL events until ``t_stop`` or until the uniform buffer runs out.

    Returns ``(t, pos, events, status)``.  When the next waiting time would
    cross ``t_stop`` the pending event is discarded (memorylessness) and the
    clock is set to ``t_stop``.
    """
    events = 0
    m = u.shape[0]
    while True:
        total = tree[1]
        if total <= 0.0:
            return t_stop, pos, events, FROZEN
        if pos + 3 > m:
            return t, pos, events, EXHAUSTED
        tau = -math.log(1.0 - u[pos]) / total
        if t + tau > t_stop:
            return t_stop, pos + 1, events, DONE
        t += tau
        x, y = _choose(occ, tree, weights, p, total, u[pos + 1], u[pos + 2])
        pos += 3
        _execute(occ, energy, weights, tree, p, table, prefactor, x, y)
        events += 1


# --------------------------------------------------------------------------- #
# Engine


class BklEngine:
    """Mutable BKL state: occupation, local energies, rates and the sum tree."""

    def __init__(self, cfg: LatticeConfig, occupation, rng: np.random.Generator,
                 buffer_size: int = 3 * 2**15):
        self.cfg = cfg
        n = cfg.num_sites
        self.occ = np.ascontiguousarray(np.asarray(occupation, dtype=np.int8)).copy()
        if self.occ.shape != (n,) or np.any((self.occ != 0) & (self.occ != 1)):
            raise ValueError("occupation must be a 0/1 vector of length num_sites")
        self.p = 1 << max(1, (n - 1).bit_length())
        self.energy = np.zeros(n)
        self.weights = np.zeros(n)
        self.tree = np.zeros(2 * self.p)
        self.table = cfg.interaction
        self.prefactor = cfg.rate_prefactor
        self.rng = rng
        self.buffer_size = buffer_size
        self.u = np.empty(0)
        self.pos = 0
        self.t = 0.0
        self.events = 0
        self.refresh()

    def refresh(self):
        _rebuild(self.occ, self.energy, self.weights, self.tree, self.p, self.table, self.prefactor)

    @property
    def total_rate(self) -> float:
        return float(self.tree[1])

    def _refill(self):
        rest = self.u[self.pos:]
        self.u = np.concatenate([rest, self.rng.random(self.buffer_size)])
        self.pos = 0

    def advance_to(self, t_stop: float) -> int:
        """Advance the microscopic clock to ``t_stop``; returns the final status."""
        while True:
            t, pos, ev, status = _advance(self.occ, self.energy, self.weights, self.tree, self.p,
                                          self.table, self.prefactor, self.t, t_stop, self.u,
                                          self.pos)
            self.t, self.pos = t, pos
            self.events += ev
            if status == EXHAUSTED:
                self._refill()
                continue
            return status

    def step(self):
        """Execute exactly one event. Returns ``((x, y), waiting_time)`` or ``None`` if frozen."""
        total = self.total_rate
        if total <= 0.0:
            return None
        if self.pos + 3 > self.u.shape[0]:
            self._refill()
        u = self.u
        tau = -math.log(1.0 - u[self.pos]) / total
        x, y = _choose(self.occ, self.tree, self.weights, self.p, total, u[self.pos + 1],
                       u[self.pos + 2])
        self.pos += 3
        _execute(self.occ, self.energy, self.weights, self.tree, self.p, self.table,
                 self.prefactor, x, y)
        self.t += tau
        self.events += 1
        return (int(x), int(y)), tau


# --------------------------------------------------------------------------- #
# Public operations


def jump_rate(state, x: int, y: int, cfg: LatticeConfig) -> float:
    """Rate of the hop ``x -> y`` (nearest neighbours only)."""
    occ = state.occupation if isinstance(state, LatticeState) else np.asarray(state)
    n = cfg.num_sites
    if _ring_dist(int(x), int(y), n) != 1:
        raise ValueError(f"sites {x} and {y} are not nearest neighbours")
    if occ[x] == 0 or occ[y] == 1:
        return 0.0
    e = 0.0
    for r in range(1, cfg.interaction_range + 1):
        e += cfg.interaction[r] * (occ[(x + r) % n] + occ[(x - r) % n])
    return cfg.rate_prefactor * math.exp(-e)


def site_positions(cfg: LatticeConfig) -> np.ndarray:
    """Lattice site k sits at x = k * eps; FE nodes coincide with sites."""
    return np.arange(cfg.num_sites) * cfg.spacing


def sample_initial(profile: InitialProfile, cfg: LatticeConfig, rng: np.random.Generator) -> LatticeState:
    """Independent Bernoulli occupation with the profile's local density."""
    rho = profile.density(site_positions(cfg))
    occ = (rng.random(cfg.num_sites) < rho).astype(np.int8)
    return LatticeState(occupation=occ, time=0.0)


def bkl_step(state: LatticeState, cfg: LatticeConfig, rng: np.random.Generator):
    """One BKL event on ``state`` (modified in place).

    Returns ``((x, y), waiting_time)`` with the waiting time in microscopic
    units, or ``None`` when no jump is possible (frozen state).
    """
    eng = BklEngine(cfg, state.occupation, rng, buffer_size=3)
    res = eng.step()
    if res is not None:
        state.occupation[:] = eng.occ
        state.time += res[1]
    return res


def simulate(cfg: LatticeConfig, occupation, record_times_micro, rng: np.random.Generator):
    """Snapshots at the given microscopic times (non-decreasing, starting >= 0).

    Returns ``(snapshots uint8 (n_records, N), events)``.
    """
    times = np.asarray(record_times_micro, dtype=np.float64)
    if times.size and (times[0] < 0 or np.any(np.diff(times) < 0)):
        raise ValueError("record times must be non-negative and sorted")
    eng = BklEngine(cfg, occupation, rng)
    snaps = np.empty((times.size, cfg.num_sites), dtype=np.uint8)
    for k, t in enumerate(times):
        eng.advance_to(float(t))
        # guards against drift of the incrementally updated energies
        eng.refresh()
        snaps[k] = eng.occ
    return snaps, eng.events


def run_realization(cfg: LatticeConfig, profile, schedule: SamplingSchedule,
                    rng: np.random.Generator) -> KmcTrajectory:
    """Sample an initial state, equilibrate to ``t_eq`` and record the schedule."""
    if isinstance(profile, LatticeState):
        occ = profile.occupation
    else:
        occ = sample_initial(profile, cfg, rng).occupation
    times = schedule.record_times()
    snaps, events = simulate(cfg, occ, times * cfg.time_scale, rng)
    return KmcTrajectory(times=times, snapshots=snaps, events=events)


def run_profile(cfg: LatticeConfig, profile: InitialProfile, schedule: SamplingSchedule,
                master_seed: int = 0, profile_index: int = 0, realizations: int | None = None,
                threads: int = 1, record_times: np.ndarray | None = None) -> TrajectoryEnsemble:
    """All realizations of one profile; results do not depend on ``threads``.

    ``record_times`` (macroscopic) overrides the schedule's record points, used
    for long validation runs.
    """
    r = schedule.realizations if realizations is None else realizations
    times = schedule.record_times() if record_times is None else np.asarray(record_times, float)
    out = np.empty((r, times.size, cfg.num_sites), dtype=np.uint8)
    events = np.zeros(r, dtype=np.int64)

    def one(k):
        rng = realization_rng(master_seed, profile_index, k)
        occ = sample_initial(profile, cfg, rng).occupation
        out[k], events[k] = simulate(cfg, occ, times * cfg.time_scale, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(r)))
    else:
        for k in range(r):
            one(k)
    return TrajectoryEnsemble(times=times, snapshots=out, events=int(events.sum()))
