"""Compiled vs numpy kernels on typical problem sizes.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on identical inputs under both backends; the script
prints the best wall time of ``--repeat`` runs and checks the outputs agree.
"""

import argparse
import timeit

import numpy as np

from relaxmfc import _kernels_py

try:
    from relaxmfc import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def cases(rng):
    k = 2000
    pos = np.sort(rng.random(2 * k))
    mass = np.concatenate([np.full(k, 1.0 / k), np.full(k, -1.0 / k)])[rng.permutation(2 * k)]
    yield "circle_w1_sorted (4000 atoms)", "circle_w1_sorted", (pos, mass)

    v = np.ascontiguousarray(rng.normal(size=(32 * 512, 7)))
    yield "project_simplex_rows (16384 x 7)", "project_simplex_rows", (v,)

    G, A = 256, 36
    drift = np.ascontiguousarray(rng.normal(size=(G, A)))
    cost = np.ascontiguousarray(rng.random((G, A)))
    mom = rng.random(A)
    yield "dp_backup (256 x 36, no budget)", "dp_backup", (np.ascontiguousarray(rng.random((G, 1))), drift, cost,
                                                             mom, 1 / 32, 1.0, 1.0)
    B = 128
    yield "dp_backup (256 x 128 x 36)", "dp_backup", (np.ascontiguousarray(rng.random((G, B))), drift, cost, mom,
                                                       1 / 32, 1.0 / (B - 1), 1.0)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    fin = np.isfinite(a) & np.isfinite(b)
    return bool(np.array_equal(np.isfinite(a), np.isfinite(b)) and np.allclose(a[fin], b[fin], rtol=1e-12, atol=1e-14))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speedup':>8s}  agree")
    for label, name, inputs in cases(rng):
        fp = getattr(_kernels_py, name)
        tp = min(timeit.repeat(lambda: fp(*inputs), number=1, repeat=args.repeat))
        if _kernels_c is None:
            print(f"{label:36s} {1e3 * tp:12.3f} {'n/a':>12s}")
            continue
        fc = getattr(_kernels_c, name)
        tc = min(timeit.repeat(lambda: fc(*inputs), number=1, repeat=args.repeat))
        ok = _same(fp(*inputs), fc(*inputs))
        print(f"{label:36s} {1e3 * tp:12.3f} {1e3 * tc:12.3f} {tp / tc:8.1f}  {ok}")


if __name__ == "__main__":
    main()
