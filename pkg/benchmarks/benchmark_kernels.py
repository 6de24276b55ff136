#!/usr/bin/env python3
"""Throughput comparison of the compiled kernels vs the pure-Python fallback.

The fallback runs the exact same code uncompiled; it is selected by the
EVGNN_NO_NUMBA=1 environment flag, which must be set before the package is
imported. This script therefore measures each mode in a fresh subprocess.

Usage: python3 benchmarks/benchmark_kernels.py [--events N] [--repeats K]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

_WORKER = r"""
import json, sys, time
import evgnn.kernels as kernels
from evgnn import engine, event_io, model

n_events, repeats = int(sys.argv[1]), int(sys.argv[2])
stream = event_io.gen_synthetic(
    "moving_dot",
    {"width": 120, "height": 100, "count": n_events, "duration_us": 100_000},
    seed=11)
m = model.calibration_model()

# warm-up triggers JIT compilation in compiled mode; excluded from timing
engine.run_stream(m, stream)

best_build = best_fwd = float("inf")
for _ in range(repeats):
    t0 = time.perf_counter()
    adj = engine.build_adjacency(stream, m)
    t1 = time.perf_counter()
    engine.run_stream(m, stream, adjacency=adj)
    t2 = time.perf_counter()
    best_build = min(best_build, t1 - t0)
    best_fwd = min(best_fwd, t2 - t1)

print(json.dumps({
    "numba": kernels.USE_NUMBA,
    "events": n_events,
    "build_s": best_build,
    "forward_s": best_fwd,
    "build_ev_s": n_events / best_build,
    "forward_ev_s": n_events / best_fwd,
}))
"""


def run_mode(no_numba: bool, n_events: int, repeats: int) -> dict:
    env = dict(os.environ, EVGNN_NO_NUMBA="1" if no_numba else "0")
    out = subprocess.run(
        [sys.executable, "-c", _WORKER, str(n_events), str(repeats)],
        env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--events", type=int, default=20_000)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    compiled = run_mode(False, args.events, args.repeats)
    fallback = run_mode(True, args.events, args.repeats)

    print(f"{args.events} events, best of {args.repeats} runs "
          f"(calibration model, moving-dot stream)\n")
    print(f"{'stage':<12} {'compiled ev/s':>14} {'fallback ev/s':>14} "
          f"{'speedup':>9}")
    for stage, key in (("graph build", "build_ev_s"),
                       ("gnn forward", "forward_ev_s")):
        c, f = compiled[key], fallback[key]
        print(f"{stage:<12} {c:>14,.0f} {f:>14,.0f} {c / f:>8.1f}x")


if __name__ == "__main__":
    main()
