#!/usr/bin/env python3
"""Compare the compiled kernels with the numpy fallback.

Times each kernel on planner-sized batches, checks that both backends agree, and
times one full car planning step under each backend.

Usage:
  python benchmarks/bench_kernels.py
  python benchmarks/bench_kernels.py --samples 1024 --horizon 15 --repeat 20 --json bench.json
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from resmppi import _pykernels
from resmppi.envs import CarTrack

try:
    from resmppi import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases(n_points, rng):
    track = CarTrack.oval()
    g = track._seg
    seg = tuple(g[k] for k in ("starts", "deltas", "seg_len2", "seg_len", "cum_s", "hw_start", "hw_end"))
    pts = rng.uniform([-20, -20], [60, 20], size=(n_points, 2))
    x = np.column_stack([pts, rng.uniform(-np.pi, np.pi, n_points), rng.uniform(0, 15, n_points)])
    u = np.column_stack([rng.uniform(-0.4, 0.4, n_points), rng.uniform(-3, 3, n_points)])
    z = rng.normal(scale=3.0, size=(n_points, 64))
    return {
        "project_points": lambda k: k.project_points(pts, *seg),
        "bicycle_step": lambda k: k.bicycle_step(x, u, 2.5, 0.1),
        "mish_forward": lambda k: k.mish_forward(z),
    }


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(p) - np.asarray(q)))) for p, q in zip(a, b))


def plan_step_time(backend, samples, horizon, repeat):
    """Time a car planning step in a fresh interpreter with the given backend forced."""
    code = (
        "import timeit, numpy as np\n"
        "from resmppi import kernels\n"
        "from resmppi.envs import make_env\n"
        "from resmppi.priors import pure_pursuit_policy\n"
        "from resmppi.planner import Planner, PlannerConfig\n"
        "env = make_env('car')\n"
        "prior = pure_pursuit_policy(env.track, [0.05, 0.5])\n"
        f"pl = Planner(PlannerConfig('residual', {samples}, {horizon}, [0.05, 0.5], 100.0, 0.9, 1.0), env, prior)\n"
        "x = env.reset()\n"
        f"t = min(timeit.repeat(lambda: pl.plan(x), repeat={repeat}, number=1))\n"
        "print(kernels.BACKEND, t)\n"
    )
    env = dict(os.environ)
    env["RESMPPI_PURE_PYTHON"] = "1" if backend == "python" else "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    name, t = out.stdout.split()
    return name, float(t)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=256, help="planner samples K")
    ap.add_argument("--horizon", type=int, default=15, help="planner horizon T")
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None, help="also write the results to this file")
    args = ap.parse_args()

    n = (args.samples + 1) * args.horizon
    cases = kernel_cases(n, np.random.default_rng(args.seed))
    results = {"points": n, "kernels": {}, "plan_step": {}}
    print(f"batch of {n} points (K={args.samples}+1 nominal, T={args.horizon})")
    print(f"{'kernel':>16s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, call in cases.items():
        t_py = best_of(lambda: call(_pykernels), args.repeat, 5) * 1e3
        row = {"python_ms": t_py}
        if _ckernels is not None:
            t_c = best_of(lambda: call(_ckernels), args.repeat, 5) * 1e3
            diff = max_diff(call(_pykernels), call(_ckernels))
            row.update(cython_ms=t_c, speedup=t_py / t_c, max_abs_diff=diff)
            print(f"{name:>16s} {t_py:12.3f} {t_c:12.3f} {t_py / t_c:8.1f} {diff:11.2e}")
        else:
            print(f"{name:>16s} {t_py:12.3f} {'n/a':>12s}")
        results["kernels"][name] = row

    for backend in ("python", "cython"):
        name, t = plan_step_time(backend, args.samples, args.horizon, args.repeat)
        results["plan_step"][name] = t * 1e3
        print(f"car plan() step, {name:>6s} backend: {t * 1e3:8.2f} ms")

    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
