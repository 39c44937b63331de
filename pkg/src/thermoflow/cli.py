"""Command line entry point: ``thermoflow <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io as tio
from .config import PRESETS, ConfigError, RunConfig
from .pipeline import Pipeline, StageError

TRAIN_STAGES = {"k1": "train_k1", "f": "train_f", "epinets": "train_epinets", "baseline": "train_baseline"}


def _common(suppress: bool) -> argparse.ArgumentParser:
    """Global flags; the subcommand copy must not overwrite values given before it."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=d(None), help="flat 'section.key = value' config file")
    common.add_argument("--scenario", choices=sorted(PRESETS), default=d(None),
                        help="preset used when no config file is given")
    common.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=d(Path("runs/desk")), help="output directory")
    common.add_argument("--threads", type=int, default=d(1), help="worker threads for KMC realizations")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thermoflow", description=__doc__, parents=[_common(False)])
    common = _common(True)
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="KMC snapshots for the training profiles")
    s.add_argument("--raw-csv", action="store_true", help="also write raw occupations as CSV")
    sub.add_parser("coarse-grain", parents=[common], help="operator estimates and training sets")
    t = sub.add_parser("train", parents=[common], help="train one model stage")
    t.add_argument("--stage", choices=sorted(TRAIN_STAGES), required=True)
    sub.add_parser("predict", parents=[common], help="ensemble and deterministic trajectories")
    lr = sub.add_parser("lrm", parents=[common], help="analytic long-range model trajectory")
    lr.add_argument("--local", action="store_true", help="use the local (zero-range) kernel")
    sub.add_parser("evaluate", parents=[common], help="metrics report (runs missing stages)")
    sub.add_parser("pipeline", parents=[common], help="all stages")
    return ap


def load_config(args) -> RunConfig:
    if args.config is not None:
        cfg = RunConfig.load(args.config)
        if args.scenario and args.scenario != cfg["scenario"]:
            raise ConfigError("--scenario conflicts with the config file")
    else:
        cfg = RunConfig.preset(args.scenario or "desk")
    if args.seed is not None:
        cfg.update({"seed": args.seed})
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        pipe = Pipeline(cfg, args.out, threads=args.threads, raw_csv=getattr(args, "raw_csv", False))
        args.out.mkdir(parents=True, exist_ok=True)
        cfg.save(args.out / "config.txt")
        cmd = args.command
        if cmd == "simulate":
            pipe.simulate()
            print(pipe.stage_dir("simulate"))
        elif cmd == "coarse-grain":
            pipe.coarse_grain()
            print(pipe.stage_dir("coarse-grain"))
        elif cmd == "train":
            getattr(pipe, TRAIN_STAGES[args.stage])()
            print(pipe.stage_dir(args.stage))
        elif cmd == "predict":
            pipe.predict()
            print(pipe.stage_dir("predict"))
        elif cmd == "lrm":
            path = args.out / "lrm" / ("lrm_local.csv" if args.local else "lrm.csv")
            tio.write_trajectory(path, cfg.predict_times(), pipe.lrm_reference(local=args.local))
            print(path)
        else:
            rep = pipe.run()
            for k, v in rep.items():
                print(f"{k} = {v}")
    except ConfigError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
