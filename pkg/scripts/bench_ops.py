#!/usr/bin/env python3
"""Throughput sweep for a few generated elementwise kernels.

Builds each kernel once (subsequent runs hit the compile cache), times the
best of several repetitions at each size, and prints element rates.

  python3 scripts/bench_ops.py
  python3 scripts/bench_ops.py --sizes 1000,100000,10000000 --repeats 9
"""

import argparse
import time

import numpy as np

from rtcg import elementwise, ndarray

OPS = {
    "double": ("float *x, float *z", "z[i] = 2 * x[i]"),
    "lincomb": ("float a, float *x, float b, float *y, float *z",
                "z[i] = a * x[i] + b * y[i]"),
    "mul": ("double *x, double *y, double *z", "z[i] = x[i] * y[i]"),
}


def parse_ints(text):
    return tuple(int(tok) for tok in text.split(","))


def best_of(run, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=parse_ints,
                    default=(10**3, 10**4, 10**5, 10**6))
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    pool = ndarray.MemoryPool()
    rng = np.random.default_rng(0)
    print(f"{'op':<10} {'n':>10} {'best':>12} {'rate':>16}")

    for name, (signature, operation) in OPS.items():
        kernel = elementwise.make_elementwise(signature, operation,
                                              f"bench_{name}")
        f32 = name in ("double", "lincomb")
        dtype = ndarray.float32 if f32 else ndarray.float64
        npd = np.float32 if f32 else np.float64
        for n in args.sizes:
            x = ndarray.from_host(pool, dtype,
                                  rng.uniform(-1, 1, n).astype(npd))
            y = ndarray.from_host(pool, dtype,
                                  rng.uniform(-1, 1, n).astype(npd))
            z = pool.alloc(dtype, (n,))
            call = {"double": (x, z), "mul": (x, y, z),
                    "lincomb": (2.0, x, -3.0, y, z)}[name]
            kernel(*call, n=n)  # warm the code path
            seconds = best_of(lambda: kernel(*call, n=n), args.repeats)
            rate = n / seconds / 1e6 if seconds else float("inf")
            print(f"{name:<10} {n:>10} {seconds * 1e3:>10.3f}ms "
                  f"{rate:>12.1f} Me/s")
            for a in (x, y, z):
                a.free()

    stats = pool.stats()
    print(f"\npool: {stats['pool_hits']}/{stats['allocations_served']} hits, "
          f"{stats['bytes_from_system'] / 1e6:.1f} MB from system")


if __name__ == "__main__":
    main()
