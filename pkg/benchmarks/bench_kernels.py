#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --grids 64 128 256 --steps 200
    python benchmarks/bench_kernels.py --output results.json

The active backend is controlled by VER_DISABLE_NUMBA; this script always
times both implementations directly.
"""

import argparse
import json
import time

import numpy as np

from ver import _kernels


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_stepper(name, numba_fn, numpy_fn, make_args, grids, steps, repeats):
    rows = []
    print(f"\n{name}")
    print(f"{'grid':>6} {'numba (s)':>12} {'numpy (s)':>12} {'speedup':>9}")
    for grid in grids:
        args = make_args(grid)

        def run(fn, args=args):
            state = [np.array(a, copy=True) for a in args[0]]
            for _ in range(steps):
                state = list(fn(*state, *args[1]))

        t_numba = _time(lambda: run(numba_fn), repeats) \
            if numba_fn is not None else float("nan")
        t_numpy = _time(lambda: run(numpy_fn), repeats)
        speedup = t_numpy / t_numba if t_numba == t_numba else float("nan")
        print(f"{grid:>6} {t_numba:>12.4f} {t_numpy:>12.4f} {speedup:>8.1f}x")
        rows.append({"grid": grid, "numba_s": t_numba, "numpy_s": t_numpy,
                     "speedup": speedup})
    return rows


def bench_renderer(resolutions, n_discs, repeats):
    rows = []
    print("\ndisc rasterizer")
    print(f"{'res':>6} {'numba (s)':>12} {'numpy (s)':>12} {'speedup':>9}")
    rng = np.random.default_rng(0)
    for res in resolutions:
        centers = rng.uniform(20, res - 20, size=(n_discs, 2))

        def run(fn):
            frame = np.zeros((res, res))
            for cx, cy in centers:
                fn(frame, cx, cy, 8.0, 1.0)

        t_numba = _time(lambda: run(_kernels.fill_disc_numba), repeats) \
            if _kernels.fill_disc_numba is not None else float("nan")
        t_numpy = _time(lambda: run(_kernels.fill_disc_numpy), repeats)
        speedup = t_numpy / t_numba if t_numba == t_numba else float("nan")
        print(f"{res:>6} {t_numba:>12.4f} {t_numpy:>12.4f} {speedup:>8.1f}x")
        rows.append({"resolution": res, "numba_s": t_numba,
                     "numpy_s": t_numpy, "speedup": speedup})
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--grids", type=int, nargs="+",
                        default=[32, 64, 128])
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--output", help="write results as JSON")
    args = parser.parse_args()

    if _kernels.NUMBA_ENABLED:
        print("warming up JIT compilation...")
        _kernels.warmup()
    else:
        print("numba backend disabled; timing numpy only")

    rng = np.random.default_rng(1)
    results = {"backend": _kernels.BACKEND}

    results["lo_step"] = bench_stepper(
        "lambda-omega step", _kernels.lo_step_numba, _kernels.lo_step_numpy,
        lambda g: ((rng.standard_normal((g, g)),
                    rng.standard_normal((g, g))),
                   (0.1, 0.1, 1.0, 0.01, (g / 20.0) ** 2)),
        args.grids, args.steps, args.repeats)

    results["bruss_step"] = bench_stepper(
        "brusselator step", _kernels.bruss_step_numba,
        _kernels.bruss_step_numpy,
        lambda g: ((1.0 + 0.1 * rng.standard_normal((g, g)),
                    3.0 + 0.1 * rng.standard_normal((g, g))),
                   (1.0, 0.1, 1.0, 3.0, 0.005, (g / 64.0) ** 2)),
        args.grids, args.steps, args.repeats)

    results["water_step"] = bench_stepper(
        "shallow-water step", _kernels.water_step_numba,
        _kernels.water_step_numpy,
        lambda g: ((1.0 + 0.1 * rng.random((g, g)),
                    np.zeros((g, g)), np.zeros((g, g))),
                   (1.0, 0.002, g / 5.0)),
        args.grids, args.steps, args.repeats)

    results["fill_disc"] = bench_renderer([250, 500], 200, args.repeats)

    if args.output:
        with open(args.output, "w") as fh:
            json.dump(results, fh, indent=2)
        print(f"\nwrote {args.output}")


if __name__ == "__main__":
    main()
