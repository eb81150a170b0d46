#!/usr/bin/env python3
"""Tune the linear-combination kernel over the unroll/workers grid.

Runs the campaign twice with a persistent store: the first pass measures
every surviving variant, the second returns the stored result without
compiling or timing anything.  Prints the measurement table and the chosen
variant for this machine.

  python3 scripts/tune_lincomb.py --n 1000000
  python3 scripts/tune_lincomb.py --n 65536 --no-prune --unroll 1,2,4,8,16
"""

import argparse
import time

from rtcg import autotune, jit


def parse_ints(text):
    return tuple(int(tok) for tok in text.split(","))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10**6)
    ap.add_argument("--unroll", type=parse_ints, default=(1, 2, 4, 8))
    ap.add_argument("--workers", type=parse_ints, default=(1, 2, 4))
    ap.add_argument("--no-prune", action="store_true")
    args = ap.parse_args()

    signature = "float a, float *x, float b, float *y, float *z"
    operation = "z[i] = a * x[i] + b * y[i]"
    axes = {"unroll": args.unroll, "workers": args.workers}
    store = autotune.TuneStore()

    for label in ("cold", "warm"):
        t0 = time.perf_counter()
        result = autotune.tune_elementwise(
            signature, operation, "lincomb", args.n, axes,
            store=store, prune=not args.no_prune)
        wall = time.perf_counter() - t0
        print(f"[{label}] campaign took {wall:.2f}s "
              f"(from_store={result.from_store})")

    print(f"\n{'variant':<28} {'status':<10} {'time':>12}")
    for entry in result.table:
        stat = (f"{entry.stat_seconds * 1e3:.3f} ms"
                if entry.stat_seconds is not None else "-")
        print(f"{autotune.assignment_text(entry.as_dict()):<28} "
              f"{entry.status:<10} {stat:>12}")
    print(f"\nbest for n={args.n}: "
          f"{autotune.assignment_text(result.best_assignment)}")
    print(f"platform: {jit.fingerprint().digest()[:16]}")


if __name__ == "__main__":
    main()
