"""Compare the compiled and numpy kernel backends on the hot loops.

    python benchmarks/bench_kernels.py [--repeat 5]

Cases: the grid objective, objective plus gradient (one optimizer step),
and the ML metric over an estimator grid. Prints best-of-N wall time per
backend and the speed-up.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from crbmo import kernels
from crbmo.combiner import partially_connected_mask
from crbmo.crb import AngleGrid, gamma_scale, grid_a_stack
from crbmo.geometry import UpaGeometry, steering_stack
from crbmo.manifold import random_feasible_init

CASES = [
    # (label, P, Q, n_rf, N, J, K)
    ("desk 8x8, grid 30x30", 8, 8, 4, 4, 30, 30),
    ("16x16, grid 60x60", 16, 16, 4, 4, 60, 60),
    ("paper 16x32, grid 45x45", 16, 32, 4, 4, 45, 45),
]


def _setup(p, q, n_rf, n, j, k):
    geom = UpaGeometry(p, q)
    grid = AngleGrid(-np.pi / 3, np.pi / 3, 5 * np.pi / 12, 7 * np.pi / 12, j, k)
    comb = random_feasible_init(partially_connected_mask(geom.n_bs, n_rf, n), np.random.default_rng(0))
    A = grid_a_stack(geom, grid)
    S = steering_stack(geom, *grid.points())
    y = np.random.default_rng(1).standard_normal(n_rf * n) + 0j
    return comb, A, S, y, gamma_scale(n_rf, geom.n_bs, 1.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'case':28s} {'kernel':14s} " + " ".join(f"{n:>10s}" for n in impls) + "   speed-up")
    for label, *shape in CASES:
        comb, A, S, y, g = _setup(*shape)
        jobs = {
            "objective": lambda impl: kernels.crb_batch(A, comb.rows, comb.vals, g, False, impl=impl),
            "obj+grad": lambda impl: kernels.crb_batch(A, comb.rows, comb.vals, g, True, impl=impl),
            "ml_metric": lambda impl: kernels.ml_metric_batch(S, comb.rows, comb.vals, y, impl=impl),
        }
        for kname, fn in jobs.items():
            times = {}
            for name, impl in impls.items():
                fn(impl)  # warm-up
                times[name] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
            speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
            cells = " ".join(f"{1e3 * t:8.2f}ms" for t in times.values())
            print(f"{label:28s} {kname:14s} {cells}   {speed:6.1f}x")


if __name__ == "__main__":
    main()
