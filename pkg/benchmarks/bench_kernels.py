"""Compare the compiled and pure-Python waypoint kernels.

    python benchmarks/bench_kernels.py [--repeat 3] [--json out.json]

Workloads: bare kernel calls, motions through the environment, full
fixed-parameter episodes (the BO objective), and a short slice of bt-sac
training where the networks dominate.
"""
from __future__ import annotations

import argparse
import json
import time
from contextlib import contextmanager

import numpy as np

from btadapt import kernels
from btadapt.bt_engine import build_chain_bt
from btadapt.env2d import Context, EnvConfig, ObstacleEnv, State2D, execute_motion
from btadapt.hrl_driver import BtSacLearner, run_fixed_params, train_run
from btadapt.sac_learner import SacConfig
from btadapt.sampling_eval import latin_hypercube


@contextmanager
def backend(name: str):
    impl = kernels.get_backend(name)
    saved = kernels.trace_motion, kernels.rect_distance
    kernels.trace_motion, kernels.rect_distance = impl.trace_motion, impl.rect_distance
    try:
        yield
    finally:
        kernels.trace_motion, kernels.rect_distance = saved


def kernel_calls(n: int = 5000) -> None:
    out = np.empty((60, 4))
    rng = np.random.default_rng(2)
    pts = rng.uniform([0.0, 0.45, 0.0, 0.45], [1.0, 0.8, 1.0, 0.8], size=(n, 4))
    fn = kernels.trace_motion
    for x0, z0, tx, tz in pts:
        fn(x0, z0, tx, tz, 56, 0.4, 0.1, 0.2, False, 0.1, 0.95, 0.05, 0.02, 200, 0, 0.1, 0.3, 0.05, out)


def motions(n: int = 5000) -> None:
    cfg = EnvConfig()
    rng = np.random.default_rng(0)
    c = Context(0.2, 0.1, 0.4)
    starts = rng.uniform([0.0, 0.45], [1.0, 0.8], size=(n, 2))
    deltas = rng.uniform(-0.4, 0.4, size=(n, 2))
    for (x, z), d in zip(starts, deltas):
        execute_motion(cfg, c, State2D(float(x), float(z)), d)


def episodes(n: int = 2000) -> None:
    cfg = EnvConfig()
    env, tree = ObstacleEnv(cfg), build_chain_bt(3, cfg.goal)
    rng = np.random.default_rng(1)
    cs = latin_hypercube(20, cfg.context_ranges, seed=0)
    for k in range(n):
        run_fixed_params(env, tree, rng.uniform(-0.4, 0.4, 6), cs[k % 20])


def training(n: int = 200) -> None:
    cfg = EnvConfig()
    learner = BtSacLearner(cfg, SacConfig(warmup=100), 3, seed=0)
    train_run(learner, latin_hypercube(5, cfg.context_ranges, seed=0), n, 10, np.random.default_rng(0))


WORKLOADS = {
    "kernel x5000": kernel_calls,
    "motions x5000": motions,
    "episodes x2000": episodes,
    "training 200 ep": training,
}


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="write the timings here as well")
    args = ap.parse_args(argv)
    try:
        kernels.get_backend("compiled")
    except ImportError:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rows = []
    for name, fn in WORKLOADS.items():
        timing = {}
        for b in ("python", "compiled"):
            with backend(b):
                timing[b] = best_of(fn, args.repeat)
        rows.append({"workload": name, **timing, "speedup": timing["python"] / timing["compiled"]})
    print(f"{'workload':<18}{'python [s]':>12}{'compiled [s]':>14}{'speedup':>9}")
    for r in rows:
        print(f"{r['workload']:<18}{r['python']:>12.3f}{r['compiled']:>14.3f}{r['speedup']:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
