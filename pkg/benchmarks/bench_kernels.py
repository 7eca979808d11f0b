#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Times both variants of every hot kernel directly (no env var needed), then
times a full unroll + reverse pass under whichever backend this process was
started with (set FARZI_BACKEND=numpy to compare against a second run).

Usage:
    python benchmarks/bench_kernels.py [--size 100000] [--reps 200] [--steps 100]
"""

import argparse
import time

import numpy as np

from farzi import kernels
from farzi.backend import backend_name


def best_of(fn, reps):
    fn()  # warm-up (numba compilation, caches)
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(size, reps):
    rng = np.random.default_rng(0)
    w, m, g = (rng.normal(size=size) for _ in range(3))
    v = rng.random(size) + 0.01
    dm, dw = rng.normal(size=size), rng.normal(size=size)
    ow, om, ov = (np.empty(size) for _ in range(3))
    u, ou = rng.normal(size=size), np.empty(size)

    cases = [
        ("adam_forward",
         dict(numba=kernels._adam_forward_loop, numpy=kernels._adam_forward_numpy),
         (w, m, v, g, 10, 1e-3, 0.9, 0.999, 1e-8, ow, om, ov)),
        ("adam_reconstruct_w",
         dict(numba=kernels._adam_reconstruct_loop, numpy=kernels._adam_reconstruct_numpy),
         (w, m, v, 10, 1e-3, 0.9, 0.999, 1e-8, ow)),
        ("adam_reverse_mv",
         dict(numba=kernels._adam_reverse_mv_loop, numpy=kernels._adam_reverse_mv_numpy),
         (m, v, g, 0.9, 0.999, om, ov)),
        ("adam_dm_accum",
         dict(numba=kernels._adam_dm_accum_loop, numpy=kernels._adam_dm_accum_numpy),
         (dm.copy(), m, v, g, dw, 1e-3, 1e-8, 0.1)),
        ("sgd_forward",
         dict(numba=kernels._sgd_forward_loop, numpy=kernels._sgd_forward_numpy),
         (w, u, g, 0.01, 0.9, ow, ou)),
    ]

    print("kernel micro-benchmarks (n=%d, best of %d):" % (size, reps))
    print("  %-20s %10s %10s %8s" % ("kernel", "numba", "numpy", "speedup"))
    for name, variants, args in cases:
        times = {}
        for backend, fn in variants.items():
            if backend == "numba" and backend_name() != "numba":
                times[backend] = float("nan")
                continue
            times[backend] = best_of(lambda: fn(*args), reps)
        speedup = times["numpy"] / times["numba"]
        print("  %-20s %9.1fus %9.1fus %7.2fx"
              % (name, 1e6 * times["numba"], 1e6 * times["numpy"], speedup))


def bench_reverse_pass(steps, reps):
    from farzi.gradcheck import make_problem
    from farzi.optim import CheckpointPolicy, adam_reverse, adam_unroll

    prob = make_problem(0, T=steps)
    final, ckpts = adam_unroll(prob.theta0, prob.loss_fn, prob.data, steps,
                               prob.hyper, CheckpointPolicy(25), prob.schedule)
    dwT = final.w.map(np.ones_like)

    def run():
        adam_reverse(final, dwT, prob.loss_fn, prob.data, steps, prob.hyper,
                     ckpts, prob.schedule)

    t = best_of(run, reps)
    print("\nfull reverse pass, T=%d [%s backend]: %.1f ms  (%.2f ms/step)"
          % (steps, backend_name(), 1e3 * t, 1e3 * t / steps))
    print("rerun with FARZI_BACKEND=numpy to compare the fallback path")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=100_000,
                    help="flat parameter vector length for kernel timings")
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--steps", type=int, default=100,
                    help="inner horizon for the end-to-end reverse pass")
    args = ap.parse_args()
    print("active backend: %s\n" % backend_name())
    bench_kernels(args.size, args.reps)
    bench_reverse_pass(args.steps, max(5, args.reps // 10))


if __name__ == "__main__":
    main()
