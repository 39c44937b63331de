import filecmp

import numpy as np
import pytest

from thermoflow import cli
from thermoflow import io as tio
from thermoflow.config import RunConfig
from thermoflow.pipeline import STAGES, Pipeline, StageError

TINY = """
lattice.num_sites = 100
data.profiles = 5,6
data.realizations = 40
k1.epochs = 40
f.epochs = 40
epinet.epochs = 10
baseline.k1_epochs = 20
baseline.f_epochs = 20
predict.realizations = 12
predict.grid_points = 31
validation.realizations = 10
"""


def tiny(**kw):
    return RunConfig.from_text(TINY).update(kw)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    p = Pipeline(tiny(), out)
    return p, p.run()


def test_artifacts(run):
    p, rep = run
    d = p.out
    for s in STAGES:
        assert (d / s / "stage.hash").exists()
    for f in ("simulate/projected_5.csv", "coarse-grain/dataset_k1.csv", "coarse-grain/dataset_f.csv",
              "k1/k1.ckpt", "f/f.ckpt", "epinets/epinet_k1.ckpt", "epinets/epinet_f.ckpt",
              "baseline/baseline.ckpt", "predict/ensemble.csv", "predict/lrm.csv", "validate/validation.csv",
              "metrics.txt", "config.txt"):
        assert (d / f).exists(), f
    assert tio.read_metrics(d / "metrics.txt") == rep
    assert 0 <= rep["ci_coverage"] <= 1
    for k in ("k1_rl2e", "f_rl2e", "dynamics_max_rl2e", "baseline_dynamics_max_rl2e"):
        assert rep[k] >= 0
    assert all(rep[f"runtime.{s}"] >= 0 for s in STAGES)
    ens = tio.read_trajectory(d / "predict" / "ensemble.csv")
    assert ens["mean"].shape == (4, 25)
    assert np.all(ens["ci_lo"] <= ens["ci_hi"])


def test_determinism(run, tmp_path):
    p, rep = run
    p2 = Pipeline(tiny(), tmp_path)
    rep2 = p2.run()
    strip = lambda r: {k: v for k, v in r.items() if not k.startswith("runtime.")}  # noqa: E731
    assert strip(rep) == strip(rep2)
    for f in ("coarse-grain/dataset_f.csv", "k1/k1.ckpt", "epinets/epinet_f.ckpt",
              "predict/ensemble.csv", "validate/validation.csv", "evaluate/metrics.txt"):
        assert filecmp.cmp(p.out / f, tmp_path / f, shallow=False), f


def test_cache_and_invalidation(run, tmp_path):
    p, _ = run
    # a fresh process reuses every stage
    again = Pipeline(tiny(), p.out)
    assert all(again.is_fresh(s) for s in STAGES)
    again.run()
    # changing the epinet only invalidates downstream stages
    changed = Pipeline(tiny(**{"epinet.lr": 3e-4}), p.out)
    fresh = {s: changed.is_fresh(s) for s in STAGES}
    assert fresh["k1"] and fresh["f"] and fresh["baseline"] and fresh["validate"]
    assert not fresh["epinets"] and not fresh["predict"] and not fresh["evaluate"]


def test_stage_error(tmp_path):
    p = Pipeline(tiny(), tmp_path)
    (tmp_path / "simulate").mkdir(parents=True)
    (tmp_path / "simulate" / "stage.hash").write_text(p.config.stage_hash("simulate"))
    (tmp_path / "simulate" / "runtime").write_text("0.0")
    with pytest.raises(StageError, match="simulate"):
        p.simulate()


def test_resume_from_partial(tmp_path):
    p = Pipeline(tiny(), tmp_path)
    p.run(until="k1")
    assert (tmp_path / "k1" / "stage.hash").exists() and not (tmp_path / "f").exists()
    q = Pipeline(tiny(), tmp_path)
    q.run(until="f")
    assert q.is_fresh("k1") and q.is_fresh("f")


class TestCli:
    def _write(self, tmp_path):
        c = tmp_path / "tiny.txt"
        c.write_text(TINY)
        return c

    def test_subcommands(self, tmp_path, capsys):
        c = self._write(tmp_path)
        out = tmp_path / "run"
        base = ["--config", str(c), "--out", str(out)]
        assert cli.main(["simulate", *base, "--raw-csv"]) == 0
        t, s = tio.read_snapshots(out / "simulate" / "snapshots_5.csv")
        assert s.shape == (40, t.size, 100)
        assert cli.main(["coarse-grain", *base]) == 0
        for stage in ("k1", "f", "epinets", "baseline"):
            assert cli.main(["train", "--stage", stage, *base]) == 0
        assert cli.main(["predict", *base]) == 0
        assert cli.main(["lrm", *base, "--local"]) == 0
        assert (out / "lrm" / "lrm_local.csv").exists()
        assert cli.main([*base, "evaluate"]) == 0
        printed = capsys.readouterr().out
        assert "dynamics_max_rl2e = " in printed and "ci_coverage = " in printed

    def test_seed_flag(self, tmp_path):
        c = self._write(tmp_path)
        assert cli.main(["simulate", "--config", str(c), "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
        assert RunConfig.load(tmp_path / "a" / "config.txt")["seed"] == 5

    def test_errors(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("lattice.num_sites = 410\n")
        assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
        assert "configuration" in capsys.readouterr().err
        c = self._write(tmp_path)
        out = tmp_path / "y"
        assert cli.main(["simulate", "--config", str(c), "--out", str(out)]) == 0
        (out / "simulate" / "profile_5.npy").unlink()
        assert cli.main(["coarse-grain", "--config", str(c), "--out", str(out)]) == 1
        assert "stage 'simulate' failed" in capsys.readouterr().err
        with pytest.raises(SystemExit):
            cli.main(["train", "--stage", "nope"])
