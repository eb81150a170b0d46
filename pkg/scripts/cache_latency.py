#!/usr/bin/env python3
"""Cold vs warm compile latency for a batch of distinct kernels.

Generates --count structurally identical kernels with distinct constants,
compiles each twice against the same cache, and prints the latency
distributions.  The warm pass should be orders of magnitude faster: it only
hashes the source, verifies the stored binary, and re-loads it.

  python3 scripts/cache_latency.py --count 40
"""

import argparse
import statistics
import tempfile
import time

from rtcg import elementwise, jit


def timed_compile(source, toolchain, cache):
    t0 = time.perf_counter()
    module = jit.compile(source, toolchain, cache)
    return time.perf_counter() - t0, module.provenance.cache_hit


def percentile(values, q):
    ordered = sorted(values)
    return ordered[min(len(ordered) - 1, int(q * len(ordered)))]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=40)
    args = ap.parse_args()

    toolchain = jit.ToolchainConfig.from_env()
    signature = elementwise.parse_signature("double *x, double *z")
    sources = [
        elementwise.generate(signature, f"z[i] = {k} * x[i] + {k + 1}",
                             f"affine_{k}",
                             elementwise.VariantParams(unroll=4, workers=1))
        for k in range(args.count)
    ]

    with tempfile.TemporaryDirectory() as root:
        cache = jit.CacheStore(root)
        cold, warm = [], []
        for source in sources:
            seconds, hit = timed_compile(source, toolchain, cache)
            assert not hit
            cold.append(seconds)
        for source in sources:
            seconds, hit = timed_compile(source, toolchain, cache)
            assert hit
            warm.append(seconds)
        entries = cache.info()["entries"]

    for label, values in (("cold", cold), ("warm", warm)):
        print(f"{label}: median {statistics.median(values) * 1e3:8.3f} ms   "
              f"p90 {percentile(values, 0.9) * 1e3:8.3f} ms   "
              f"max {max(values) * 1e3:8.3f} ms")
    speedup = statistics.median(cold) / statistics.median(warm)
    print(f"median speedup: {speedup:.0f}x over {entries} cache entries")


if __name__ == "__main__":
    main()
