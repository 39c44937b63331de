"""Run configuration as flat ``section.key = value`` text.

Every key has a type and a default.  A config file only lists overrides;
unknown keys are an error.  Hashes of section subsets key the stage caches.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lattice as L
from .epinet import EpinetSpec
from .fem import FeBasis
from .models import BaselineConfig, DiffusionTrainConfig

DESK_PROFILES = (5, 6, 7, 13, 19, 20, 23, 25)
VALIDATION_PROFILE = 10

# key -> (type, default); ``None`` means "derive from the lattice"
SCHEMA = {
    "scenario": (str, "desk"),
    "seed": (int, 1),
    "lattice.preset": (str, "long-range"),
    "lattice.num_sites": (int, 400),
    "lattice.strength": (float, 1.0),
    "lattice.jump_frequency": (float, 1.0),
    "lattice.support": (int, 0),
    "data.profiles": (str, ",".join(map(str, DESK_PROFILES))),
    "data.realizations": (int, 1000),
    "schedule.t_eq": (float, None),
    "schedule.h": (float, None),
    "schedule.n_intervals": (int, 10),
    "schedule.macro_dt": (float, 1e-3),
    "basis.num_nodes": (int, 25),
    "k1.epochs": (int, 20000),
    "k1.lr": (float, 1e-4),
    "k1.steps": (int, 50),
    "k1.hidden": (str, "50,50,50"),
    "f.epochs": (int, 20000),
    "f.lr": (float, 1e-3),
    "f.steps": (int, 50),
    "f.hidden": (str, "50,50,50"),
    "epinet.index_dim": (int, 4),
    "epinet.prior_scale": (float, 1.0),
    "epinet.prior_hidden": (str, "16,16"),
    "epinet.learn_hidden": (str, "16,16"),
    "epinet.epochs": (int, 10000),
    "epinet.lr": (float, 1e-4),
    "epinet.indices_per_epoch": (int, 8),
    "baseline.k1_epochs": (int, 6000),
    "baseline.f_epochs": (int, 2000),
    "baseline.lr": (float, 1e-2),
    "baseline.hidden": (str, "20,20"),
    "predict.profile": (int, VALIDATION_PROFILE),
    "predict.times": (str, "0.008,0.02,0.04,0.06"),
    "predict.realizations": (int, 2000),
    "predict.dt": (float, 8e-5),
    "predict.grid_points": (int, 201),
    "predict.chunk": (int, 250),
    "validation.realizations": (int, 1000),
    "validation.seed": (int, 99),
    "evaluate.grid_points": (int, 201),
}

PRESETS = {
    "desk": {},
    "full": {"lattice.num_sites": 2000, "data.profiles": "all", "data.realizations": 10000},
    # the reduced-data scenarios carry their own tuned hyperparameters
    "scarcer": {"lattice.num_sites": 2000, "data.profiles": "0,1,2,3", "data.realizations": 10000,
                "f.epochs": 10000, "f.hidden": "15,15,15",
                "epinet.epochs": 8000, "epinet.index_dim": 2, "epinet.prior_hidden": "5,5",
                "epinet.learn_hidden": "10,10"},
    "noisier": {"lattice.num_sites": 2000, "data.profiles": "all", "data.realizations": 1000,
                "f.epochs": 30000, "f.lr": 1e-4, "epinet.epochs": 8000, "baseline.f_epochs": 2500},
}

# which keys each stage's outputs depend on (upstream stages are folded in)
STAGE_KEYS = {
    "simulate": ("seed", "lattice.", "data.", "schedule."),
    "coarse-grain": ("basis.",),
    "k1": ("k1.",),
    "f": ("f.",),
    "epinets": ("epinet.",),
    "baseline": ("baseline.",),
    "predict": ("predict.",),
    "validate": ("predict.", "validation."),
    "evaluate": ("evaluate.",),
}
STAGE_PARENTS = {
    "simulate": (), "coarse-grain": ("simulate",), "k1": ("coarse-grain",), "f": ("k1",),
    "epinets": ("f",), "baseline": ("coarse-grain",), "predict": ("epinets", "baseline"),
    "validate": ("simulate",), "evaluate": ("predict", "validate"),
}


class ConfigError(ValueError):
    pass


def _parse(key, text):
    typ, _ = SCHEMA[key]
    text = text.strip()
    if text.lower() in ("auto", "none") and SCHEMA[key][1] is None:
        return None
    try:
        return typ(float(text)) if typ is int and "e" in text.lower() else typ(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from exc


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    # -- construction ---------------------------------------------------- #
    @classmethod
    def preset(cls, name: str = "desk") -> RunConfig:
        if name not in PRESETS:
            raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(PRESETS)}")
        cfg = cls()
        cfg.update(PRESETS[name])
        cfg.values["scenario"] = name
        return cfg

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        pairs = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in SCHEMA:
                raise ConfigError(f"line {n}: unknown key {k!r}")
            pairs[k] = v
        cfg = cls.preset(pairs.pop("scenario", "desk").strip())
        cfg.update({k: _parse(k, v) for k, v in pairs.items()})
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_text(Path(path).read_text())

    def update(self, overrides: dict):
        for k, v in overrides.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            self.values[k] = _parse(k, v) if isinstance(v, str) and SCHEMA[k][0] is not str else v
        return self

    def __getitem__(self, key):
        return self.values[key]

    def to_text(self) -> str:
        return "".join(f"{k} = {'auto' if v is None else _text(v)}\n" for k, v in self.values.items())

    def save(self, path):
        Path(path).write_text(self.to_text())

    # -- hashing --------------------------------------------------------- #
    def section_hash(self, prefixes) -> str:
        keys = sorted(k for k in self.values if any(k == p or k.startswith(p) for p in prefixes))
        blob = "".join(f"{k}={_text(self.values[k])}\n" for k in keys)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stage_hash(self, stage: str) -> str:
        parts = [self.section_hash(STAGE_KEYS[stage])]
        parts += [self.stage_hash(p) for p in STAGE_PARENTS[stage]]
        return hashlib.sha256("|".join([stage] + parts).encode()).hexdigest()[:16]

    # -- typed views ----------------------------------------------------- #
    def lattice(self) -> L.LatticeConfig:
        n, preset = self["lattice.num_sites"], self["lattice.preset"]
        s, d = self["lattice.strength"], self["lattice.jump_frequency"]
        if preset == "long-range":
            return L.long_range(n, strength=s, support=self["lattice.support"] or None, jump_frequency=d)
        if preset == "non-interacting":
            return L.non_interacting(n, jump_frequency=d)
        if preset in ("short-range", "short-range-weak", "short-range-strong"):
            return L.short_range(n, strength=s, jump_frequency=d)
        raise ConfigError(f"unknown lattice preset {preset!r}")

    def profile_indices(self) -> tuple:
        text = self["data.profiles"].strip()
        n = len(L.standard_profiles())
        idx = tuple(range(n)) if text == "all" else _ints(text)
        if not idx or any(not 0 <= i < n for i in idx):
            raise ConfigError(f"profile indices must lie in 0..{n - 1}")
        return idx

    def schedule(self, cfg: L.LatticeConfig | None = None) -> L.SamplingSchedule:
        cfg = self.lattice() if cfg is None else cfg
        base = L.SamplingSchedule.desk_default(cfg, self["data.realizations"])
        t_eq = base.t_eq if self["schedule.t_eq"] is None else self["schedule.t_eq"]
        h = base.h if self["schedule.h"] is None else self["schedule.h"]
        return L.SamplingSchedule(t_eq=t_eq, h=h, n_intervals=self["schedule.n_intervals"],
                                  macro_dt=self["schedule.macro_dt"], realizations=self["data.realizations"])

    def basis(self) -> FeBasis:
        return FeBasis(self["basis.num_nodes"])

    def k1_train(self) -> DiffusionTrainConfig:
        return DiffusionTrainConfig(self["k1.epochs"], self["k1.lr"], self["k1.steps"], _ints(self["k1.hidden"]))

    def f_train(self) -> DiffusionTrainConfig:
        return DiffusionTrainConfig(self["f.epochs"], self["f.lr"], self["f.steps"], _ints(self["f.hidden"]))

    def epinet_spec(self) -> EpinetSpec:
        return EpinetSpec(self["epinet.index_dim"], self["epinet.prior_scale"], _ints(self["epinet.prior_hidden"]),
                          _ints(self["epinet.learn_hidden"]), self["epinet.epochs"], self["epinet.lr"],
                          self["epinet.indices_per_epoch"])

    def baseline(self) -> BaselineConfig:
        return BaselineConfig(self["baseline.k1_epochs"], self["baseline.f_epochs"], self["baseline.lr"],
                              _ints(self["baseline.hidden"]))

    def predict_times(self) -> np.ndarray:
        t = np.asarray(_floats(self["predict.times"]))
        if t.size == 0 or np.any(t <= 0) or np.any(np.diff(t) <= 0):
            raise ConfigError("predict.times must be positive and increasing")
        return t

    def rng(self, stage: str) -> np.random.Generator:
        """Stage stream: independent of the other stages, fixed by the seed."""
        tag = int(hashlib.sha256(stage.encode()).hexdigest()[:8], 16)
        return np.random.default_rng(np.random.SeedSequence([self["seed"], tag]))

    # -- validation ------------------------------------------------------ #
    def validate(self) -> RunConfig:
        if self["scenario"] not in PRESETS:
            raise ConfigError(f"unknown scenario {self['scenario']!r}")
        if self["seed"] < 0:
            raise ConfigError("seed must be non-negative")
        try:
            cfg = self.lattice()
            basis = self.basis()
            basis.cell_size(cfg.num_sites)
            self.schedule(cfg)
            self.k1_train(), self.f_train(), self.epinet_spec(), self.baseline()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.profile_indices()
        self.predict_times()
        if not 0 <= self["predict.profile"] < len(L.standard_profiles()):
            raise ConfigError("predict.profile out of range")
        for k in ("predict.realizations", "validation.realizations", "predict.chunk"):
            if self[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self["validation.realizations"] < 2:
            raise ConfigError("validation.realizations must be >= 2")
        if self["predict.grid_points"] < 2 or self["evaluate.grid_points"] < 2:
            raise ConfigError("grid sizes must be >= 2")
        if not self["predict.dt"] > 0:
            raise ConfigError("predict.dt must be positive")
        return self


def _text(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
