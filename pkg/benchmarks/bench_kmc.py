"""Compare the numba and pure-Python KMC kernels on the same workload.

Each backend runs in a fresh interpreter because the choice is made at
import time from THERMOFLOW_DISABLE_NUMBA.  Both runs must produce the same
snapshots; the script prints events per second and the speed-up.

    python benchmarks/bench_kmc.py [--sites 400] [--realizations 4] [--t-end 2e-3]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import hashlib, json, sys, time
import numpy as np
from thermoflow import _accel, lattice as L
sites, reals, t_end = int(sys.argv[1]), int(sys.argv[2]), float(sys.argv[3])
cfg = L.long_range(sites)
prof = L.standard_profiles()[5]
sched = L.SamplingSchedule(t_eq=0.0, h=t_end / 10, n_intervals=10, macro_dt=0.0, realizations=reals)
# warm-up compiles the numba kernels outside the timed region
L.run_profile(cfg, prof, sched, master_seed=0, realizations=1, record_times=np.array([t_end / 100]))
t0 = time.perf_counter()
ens = L.run_profile(cfg, prof, sched, master_seed=0)
dt = time.perf_counter() - t0
print(json.dumps({"backend": _accel.backend_name(), "seconds": dt, "events": ens.events,
                  "digest": hashlib.sha256(ens.snapshots.tobytes()).hexdigest()}))
"""


def run(disable: bool, args) -> dict:
    env = dict(os.environ)
    if disable:
        env["THERMOFLOW_DISABLE_NUMBA"] = "1"
    else:
        env.pop("THERMOFLOW_DISABLE_NUMBA", None)
    out = subprocess.run([sys.executable, "-c", WORKER, str(args.sites), str(args.realizations), str(args.t_end)],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sites", type=int, default=400)
    ap.add_argument("--realizations", type=int, default=4)
    ap.add_argument("--t-end", type=float, default=2e-3, help="macroscopic time per realization")
    args = ap.parse_args(argv)
    fast, slow = run(False, args), run(True, args)
    for r in (fast, slow):
        print(f"{r['backend']:>7}: {r['events']:>9d} events in {r['seconds']:8.3f} s "
              f"({r['events'] / r['seconds']:.3e} events/s)")
    if fast["backend"] == "numba":
        print(f"speed-up: {slow['seconds'] / fast['seconds']:.1f}x")
    same = fast["digest"] == slow["digest"]
    print("identical snapshots:", same)
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
