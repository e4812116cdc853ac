#!/usr/bin/env python3
"""Benchmark the numba-JIT kernels against the pure-numpy reference.

Run:  python benchmarks/bench_kernels.py [--repeats N]
The same comparison can be forced package-wide with MUDET_NUMBA=0.
"""

import argparse
import time

import numpy as np

from mudet.kernels import _numpy as np_impl

try:
    from mudet.kernels import _numba as nb_impl
except ImportError:
    nb_impl = None


def timeit(fn, args, repeats):
    fn(*args)  # warm-up (JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats * 1000.0


def cases(rng):
    x = rng.normal(size=(16, 128, 128))
    yield "im2col 3x3 (16,128,128)", "im2col", (x, 3, 1, 1)

    cols = np_impl.im2col(x, 3, 1, 1)
    yield "col2im 3x3 (16,128,128)", "col2im", (cols, 16, 128, 128, 3, 1, 1)

    n = 2000
    boxes = np.column_stack([rng.uniform(0, 100, n), rng.uniform(0, 100, n),
                             rng.uniform(2, 14, n), rng.uniform(2, 14, n),
                             rng.uniform(-90, 90, n)])
    other = np.column_stack([rng.uniform(0, 100, n), rng.uniform(0, 100, n),
                             rng.uniform(2, 14, n), rng.uniform(2, 14, n),
                             rng.uniform(-90, 90, n)])
    yield f"rotrect_intersection ({n} pairs)", "rotrect_intersection", (boxes, other)

    m = 400
    dense = np.column_stack([rng.uniform(0, 60, m), rng.uniform(0, 60, m),
                             rng.uniform(4, 16, m), rng.uniform(4, 16, m),
                             rng.uniform(-90, 90, m)])
    yield f"nms_keep ({m} boxes)", "nms_keep", (dense, 0.45)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<38} {'numpy ms':>10} {'numba ms':>10} {'speedup':>9}")
    for label, name, fn_args in cases(rng):
        t_np = timeit(getattr(np_impl, name), fn_args, args.repeats)
        if nb_impl is None:
            print(f"{label:<38} {t_np:>10.3f} {'n/a':>10} {'n/a':>9}")
            continue
        t_nb = timeit(getattr(nb_impl, name), fn_args, args.repeats)
        print(f"{label:<38} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
