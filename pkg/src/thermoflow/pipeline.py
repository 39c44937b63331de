"""Stage orchestration with on-disk caching.

Stages run in the order simulate, coarse-grain, k1, f, epinets, baseline,
predict, validate, evaluate.  Each writes into ``<out>/<stage>/`` and
finishes by writing ``stage.hash``; a stage whose stored hash matches the
current config is loaded instead of recomputed.  A stage reads its inputs
back from its parents' directories, so any prefix of the pipeline can be
resumed from disk.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import continuum as C
from . import fem
from . import io as tio
from . import lattice as L
from . import lrm
from . import metrics as mt
from . import models as M
from .config import RunConfig
from .epinet import EnnF, EnnK1, init_epinet, train_epinets

log = logging.getLogger(__name__)

STAGES = ("simulate", "coarse-grain", "k1", "f", "epinets", "baseline", "predict", "validate", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class Pipeline:
    config: RunConfig
    out: Path
    threads: int = 1
    raw_csv: bool = False
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        self.config.validate()
        self.out = Path(self.out)
        self.lattice = self.config.lattice()
        self.schedule = self.config.schedule(self.lattice)
        self.basis = self.config.basis()
        self._memo = {}

    # ------------------------------------------------------------------ #
    # caching

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def is_fresh(self, stage: str) -> bool:
        f = self.stage_dir(stage) / "stage.hash"
        return f.exists() and f.read_text().strip() == self.config.stage_hash(stage)

    def _run(self, stage, compute, load):
        if stage in self._memo:
            return self._memo[stage]
        d = self.stage_dir(stage)
        if self.is_fresh(stage):
            log.info("%s: cached", stage)
            try:
                result = load(d)
            except Exception as exc:
                raise StageError(stage, f"cannot read cached artifacts: {exc}") from exc
            self.timings[stage] = float((d / "runtime").read_text())
        else:
            stale = d / "stage.hash"
            if stale.exists():
                log.info("%s: config changed, recomputing", stage)
                stale.unlink()
            d.mkdir(parents=True, exist_ok=True)
            log.info("%s: running", stage)
            t0 = time.perf_counter()
            try:
                result = compute(d)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
            dt = time.perf_counter() - t0
            (d / "runtime").write_text(repr(dt))
            (d / "stage.hash").write_text(self.config.stage_hash(stage))
            self.timings[stage] = dt
        self._memo[stage] = result
        return result

    # ------------------------------------------------------------------ #
    # stages

    def simulate(self):
        """Raw KMC snapshots per training profile (dict index -> (R, T, N) uint8)."""
        idx = self.config.profile_indices()
        profs = L.standard_profiles()

        def compute(d):
            out = {}
            for k in idx:
                ens = L.run_profile(self.lattice, profs[k], self.schedule, master_seed=self.config["seed"],
                                    profile_index=k, threads=self.threads)
                out[k] = ens.snapshots
                np.save(d / f"profile_{k}.npy", ens.snapshots)
                tio.write_snapshots(d / f"projected_{k}.csv", ens.times,
                                    fem.project(ens.snapshots, self.basis), projected=True)
                if self.raw_csv:
                    tio.write_snapshots(d / f"snapshots_{k}.csv", ens.times, ens.snapshots)
                log.info("simulate: profile %d, %d events", k, ens.events)
            return out

        return self._run("simulate", compute, lambda d: {k: np.load(d / f"profile_{k}.npy") for k in idx})

    def coarse_grain(self):
        """Training sets ``(D_K1, D_f)``; ``D_f`` holds the estimated operator rows."""

        def compute(d):
            snaps = self.simulate()
            samples, rates, fields = [], [], []
            for k, s in snaps.items():
                z0, kmat = fem.estimate_operator_matrix(s, self.basis, self.schedule)
                za, zb = fem.macroscopic_fields(s, self.basis, self.schedule)
                samples.append(fem.operator_samples(z0, kmat))
                rates.append((zb - za) / self.schedule.macro_dt)
                fields.append(0.5 * (za + zb))
            dk, df = fem.build_datasets(samples, rates, fields, self.basis)
            tio.write_dataset_k1(d / "dataset_k1.csv", dk)
            tio.write_dataset_f(d / "dataset_f.csv", df)
            return dk, df

        return self._run("coarse-grain", compute,
                         lambda d: (tio.read_dataset_k1(d / "dataset_k1.csv"), tio.read_dataset_f(d / "dataset_f.csv")))

    def train_k1(self) -> M.K1Model:
        def compute(d):
            dk, _ = self.coarse_grain()
            m = M.train_k1(dk, self.config.k1_train(), self.config.rng("k1"))
            tio.save_k1_model(d / "k1.ckpt", m)
            return m

        return self._run("k1", compute, lambda d: tio.load_k1_model(d / "k1.ckpt"))

    def f_dataset(self) -> fem.DatasetF:
        """``D_f`` with operator rows from the trained K1 model."""
        _, df = self.coarse_grain()
        return fem.with_operator_rows(df, M.operator_rows(self.train_k1().predict, df.zf))

    def train_f(self) -> M.FModel:
        def compute(d):
            m = M.train_f(self.f_dataset(), self.config.f_train(), self.config.rng("f"))
            tio.save_f_model(d / "f.ckpt", m)
            return m

        return self._run("f", compute, lambda d: tio.load_f_model(d / "f.ckpt"))

    def train_epinets(self):
        """``(EnnK1, EnnF)`` after distillation."""
        spec = self.config.epinet_spec()

        def compute(d):
            km, fm = self.train_k1(), self.train_f()
            dk, _ = self.coarse_grain()
            r_init, r_train = self.config.rng("epinets").spawn(2)
            hk = km.params.spec.widths[-2] + 2
            hf = fm.params.spec.widths[-2] + 1
            ek = EnnK1(km, init_epinet(hk, spec, r_init))
            ef = EnnF(fm, init_epinet(hf, spec, r_init))
            hist = train_epinets(ek, ef, dk, self.f_dataset(), r_train)
            tio.save_epinet(d / "epinet_k1.ckpt", ek.epinet)
            tio.save_epinet(d / "epinet_f.ckpt", ef.epinet)
            tio.save_checkpoint(d / "history.ckpt", {"loss": hist.loss, "k1": hist.k1, "f": hist.f})
            return ek, ef

        def load(d):
            return (EnnK1(self.train_k1(), tio.load_epinet(d / "epinet_k1.ckpt")),
                    EnnF(self.train_f(), tio.load_epinet(d / "epinet_f.ckpt")))

        return self._run("epinets", compute, load)

    def train_baseline(self) -> M.BaselineModel:
        def compute(d):
            dk, df = self.coarse_grain()
            m = M.train_statpinns_baseline(dk, df, self.config.baseline(), realizations=self.schedule.realizations,
                                           dt=self.schedule.macro_dt, eps=self.lattice.spacing,
                                           rng=self.config.rng("baseline"))
            tio.save_baseline(d / "baseline.ckpt", m)
            return m

        return self._run("baseline", compute, lambda d: tio.load_baseline(d / "baseline.ckpt"))

    def initial_density(self) -> np.ndarray:
        p = L.standard_profiles()[self.config["predict.profile"]]
        return p.density(self.basis.nodes)

    def lrm_reference(self, local: bool = False):
        """Analytic trajectory at the prediction times (nonlocal stencil unless ``local``)."""
        model = lrm.local_config(self.lattice) if local else lrm.from_lattice(self.lattice, self.basis)
        t = self.config.predict_times()
        return lrm.evolve(model, self.basis, self.initial_density(), t[-1], self.config["predict.dt"], t)[1]

    def predict(self):
        """Dict with the ensemble summary and deterministic trajectories (T, N_gamma)."""
        cfg = self.config
        t = cfg.predict_times()
        files = ("ensemble", "base", "baseline", "lrm")

        def compute(d):
            ek, ef = self.train_epinets()
            bl = self.train_baseline()
            rho0 = self.initial_density()
            pts, dt = cfg["predict.grid_points"], cfg["predict.dt"]
            res = C.ensemble_predict(ek, ef, self.basis, rho0, t, n_real=cfg["predict.realizations"],
                                     rng=cfg.rng("predict"), points=pts, dt=dt, chunk=cfg["predict.chunk"])
            lo, hi = res.ci
            tio.write_trajectory(d / "ensemble.csv", t, res.mean, res.std, lo, hi)
            base = C.integrate_grids(C.tabulate(ek.base.predict, ef.base.predict, pts), self.basis, rho0, t, dt)[1]
            with np.errstate(all="ignore"):
                blt = C.integrate_grids(C.tabulate(bl.predict_k1, bl.predict_f, pts), self.basis, rho0, t, dt)[1]
            tio.write_trajectory(d / "base.csv", t, base)
            tio.write_trajectory(d / "baseline.csv", t, blt)
            tio.write_trajectory(d / "lrm.csv", t, self.lrm_reference())
            (d / "excluded").write_text(str(res.excluded))
            return load(d)

        def load(d):
            out = {k: tio.read_trajectory(d / f"{k}.csv") for k in files}
            out["excluded"] = int((d / "excluded").read_text())
            return out

        return self._run("predict", compute, load)

    def validate(self):
        """Held-out KMC run from the prediction profile, started at ``t = 0``."""
        cfg = self.config
        t = cfg.predict_times()

        def compute(d):
            k = cfg["predict.profile"]
            ens = L.run_profile(self.lattice, L.standard_profiles()[k], self.schedule,
                                master_seed=cfg["validation.seed"], profile_index=k,
                                realizations=cfg["validation.realizations"], threads=self.threads,
                                record_times=t)
            z = fem.project(ens.snapshots, self.basis)
            mean, sd = z.mean(axis=0), z.std(axis=0, ddof=1)
            se = sd / np.sqrt(z.shape[0])
            tio.write_trajectory(d / "validation.csv", t, mean, sd, mean - 1.96 * se, mean + 1.96 * se)
            return tio.read_trajectory(d / "validation.csv")

        return self._run("validate", compute, lambda d: tio.read_trajectory(d / "validation.csv"))

    def evaluate(self) -> dict:
        def compute(d):
            rep = evaluate_models(self)
            tio.write_metrics(d / "metrics.txt", rep)
            return rep

        rep = self._run("evaluate", compute, lambda d: tio.read_metrics(d / "metrics.txt"))
        runtimes = {f"runtime.{s}": self.timings[s] for s in STAGES if s in self.timings}
        tio.write_metrics(self.out / "metrics.txt", {**rep, **runtimes})
        return {**rep, **runtimes}

    def run(self, until: str = "evaluate") -> dict:
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        self.config.save(self.out / "config.txt")
        steps = {"simulate": self.simulate, "coarse-grain": self.coarse_grain, "k1": self.train_k1,
                 "f": self.train_f, "epinets": self.train_epinets, "baseline": self.train_baseline,
                 "predict": self.predict, "validate": self.validate, "evaluate": self.evaluate}
        for s in STAGES[:STAGES.index(until) + 1]:
            steps[s]()
        return self.evaluate() if until == "evaluate" else dict(self.timings)


# ---------------------------------------------------------------------- #
# metrics


def density_grid(dk: fem.DatasetK1, points: int) -> np.ndarray:
    """Evaluation densities spanning the training data (kept inside (0.02, 0.98))."""
    lo, hi = max(float(dk.z.min()), 0.02), min(float(dk.z.max()), 0.98)
    return np.linspace(lo, hi, points)


def k1_error(k1_fn, lattice: L.LatticeConfig, basis: fem.FeBasis, grid) -> float:
    """RL2E of a learned ``K1(rho, rho)`` against the local analytic value."""
    e = np.column_stack([grid, grid])
    ref = lrm.local_k1(e, lattice.interaction_strength, lattice.diffusion_coefficient, basis.spacing)
    return mt.relative_l2(np.asarray(k1_fn(e)), ref)


def f_error(f_fn, q_fn, lattice: L.LatticeConfig, grid) -> float:
    """RL2E of the calibrated free energy against the calibrated local analytic one."""
    j = lattice.interaction_strength
    fb, _ = M.calibrate(lambda r: lrm.local_free_energy(r, j), lambda r: lrm.local_driving_force(r, j))
    fl, _ = M.calibrate(f_fn, q_fn)
    return mt.relative_l2(fl(grid), fb(grid))


def _safe_max_rl2e(pred, ref) -> float:
    v = mt.max_relative_l2(pred, ref)
    return v if np.isfinite(v) else float("inf")


def evaluate_models(p: Pipeline) -> dict:
    cfg = p.config
    dk, _ = p.coarse_grain()
    km, fm, bl = p.train_k1(), p.train_f(), p.train_baseline()
    grid = density_grid(dk, cfg["evaluate.grid_points"])
    pred, val = p.predict(), p.validate()
    ref = pred["lrm"]["mean"]
    ens = pred["ensemble"]
    f_of = lambda fn: (lambda r: fn(r)[0], lambda r: fn(r)[1])  # noqa: E731
    rep = {
        "scenario": cfg["scenario"],
        "k1_rl2e": k1_error(km.predict, p.lattice, p.basis, grid),
        "f_rl2e": f_error(*f_of(fm.predict), p.lattice, grid),
        "dynamics_max_rl2e": _safe_max_rl2e(ens["mean"], ref),
        "base_dynamics_max_rl2e": _safe_max_rl2e(pred["base"]["mean"], ref),
        "baseline_k1_rl2e": k1_error(bl.predict_k1, p.lattice, p.basis, grid),
        "baseline_f_rl2e": f_error(*f_of(bl.predict_f), p.lattice, grid),
        "baseline_dynamics_max_rl2e": _safe_max_rl2e(pred["baseline"]["mean"], ref),
        "ci_coverage": mt.ci_coverage(ens["ci_lo"], ens["ci_hi"], val["mean"]),
        "lrm_ci_coverage": mt.ci_coverage(ens["ci_lo"], ens["ci_hi"], ref),
        "kmc_vs_lrm_max_rl2e": _safe_max_rl2e(val["mean"], ref),
        "excluded_realizations": pred["excluded"],
    }
    return rep
