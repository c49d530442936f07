"""Compare the numba and pure-numpy selective-scan backends.

    python benchmarks/bench_kernels.py [--lengths 64,257,1025] [--repeats 5]

Prints one CSV row per (backend, L, direction) with the median wall time.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from brainmt.kernels import available_backends, scan_backward, scan_forward


def _median_time(fn, repeats: int) -> float:
    fn()  # compile / warm caches
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lengths", default="64,257,1025")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--d-inner", type=int, default=64)
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    print("backend,L,direction,median_s,max_abs_diff_vs_numpy")
    for L in (int(v) for v in args.lengths.split(",")):
        shape = (args.batch, L, args.d_inner)
        u = rng.normal(size=shape)
        delta = rng.uniform(1e-3, 0.1, size=shape)
        A = -np.tile(np.arange(1.0, args.state + 1), (args.d_inner, 1))
        B = rng.normal(size=(args.batch, L, args.state))
        C = rng.normal(size=(args.batch, L, args.state))
        gy = rng.normal(size=shape)
        ref_f = scan_forward(u, delta, A, B, C, backend="numpy")
        ref_b = scan_backward(u, delta, A, B, C, gy, backend="numpy")
        for name in available_backends():
            f = scan_forward(u, delta, A, B, C, backend=name)
            b = scan_backward(u, delta, A, B, C, gy, backend=name)
            diff_f = float(np.max(np.abs(f - ref_f)))
            diff_b = max(float(np.max(np.abs(x - y))) for x, y in zip(b, ref_b))
            t_f = _median_time(lambda: scan_forward(u, delta, A, B, C, backend=name), args.repeats)
            t_b = _median_time(lambda: scan_backward(u, delta, A, B, C, gy, backend=name), args.repeats)
            print(f"{name},{L},forward,{t_f:.6f},{diff_f:.3e}")
            print(f"{name},{L},backward,{t_b:.6f},{diff_b:.3e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
