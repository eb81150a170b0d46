"""Command-line surface: cache administration, source inspection, demos,
benchmarks, and tuning campaigns.

Every subcommand honors ``--format json`` and emits a stable document
(schema version ``CLI_SCHEMA`` where applicable; ``bench`` output is the
fixed five-field record documented below).  Human-readable output is for
eyes only.  Exit codes: 0 success, 1 operational failure (oracle mismatch,
compile failure, no variant survived), 2 usage error.

Configuration precedence: command-line flags, then environment
(``RTCG_CACHE_DIR``, ``RTCG_CC``, ``RTCG_CFLAGS``), then built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autotune, csyntax, elementwise, jit, ndarray, reduction
from ._version import TOOLKIT_VERSION

CLI_SCHEMA = 1

# name -> (signature, operation); the demo/bench/tune elementwise recipes
RECIPES = {
    "double": ("float *x, float *z", "z[i] = 2 * x[i]"),
    "lincomb": ("float a, float *x, float b, float *y, float *z",
                "z[i] = a * x[i] + b * y[i]"),
}


class UsageError(Exception):
    """Bad arguments discovered after parsing; maps to exit code 2."""


@dataclass(frozen=True)
class CliConfig:
    """Effective per-invocation settings after flag/env/default resolution."""

    cache_root: Path
    toolchain: jit.ToolchainConfig
    fmt: str
    verbose: bool

    def describe(self) -> str:
        return (f"# cache_root: {self.cache_root}\n"
                f"# cc: {self.toolchain.cc}\n"
                f"# flags: {' '.join(self.toolchain.flags)}\n"
                f"# format: {self.fmt}\n"
                f"# toolkit: {TOOLKIT_VERSION}")


def _resolve_config(args: argparse.Namespace) -> CliConfig:
    cache_root = Path(args.cache_dir) if args.cache_dir \
        else jit.default_cache_root()
    toolchain = jit.ToolchainConfig.from_env()
    if args.cc:
        toolchain = replace(toolchain, cc=args.cc)
    return CliConfig(cache_root=cache_root, toolchain=toolchain,
                     fmt=args.format, verbose=args.verbose)


def _emit(cfg: CliConfig, doc: dict, human: str) -> None:
    if cfg.fmt == "json":
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(human)


_DURATION = re.compile(r"^(\d+)(s|m|h|d)$")
_DURATION_UNIT = {"s": 1, "m": 60, "h": 3600, "d": 86400}


def parse_duration(text: str) -> int:
    """``30s`` / ``15m`` / ``2h`` / ``7d`` -> seconds."""
    m = _DURATION.match(text.strip())
    if not m:
        raise UsageError(
            f"bad duration {text!r}: expected <integer><s|m|h|d>, e.g. 30m")
    return int(m.group(1)) * _DURATION_UNIT[m.group(2)]


# --- cache -------------------------------------------------------------------


def cmd_cache(cfg: CliConfig, args: argparse.Namespace) -> int:
    store = jit.CacheStore(cfg.cache_root)
    if args.cache_cmd == "info":
        info = store.info()
        doc = {"schema": CLI_SCHEMA, **info}
        lines = [f"root: {info['root']}",
                 f"entries: {info['entries']}",
                 f"bytes: {info['bytes']}"]
        for label in ("oldest_unix", "newest_unix"):
            if info[label] is not None:
                stamp = time.strftime("%Y-%m-%d %H:%M:%S",
                                      time.localtime(info[label]))
                lines.append(f"{label.split('_')[0]}: {stamp}")
        _emit(cfg, doc, "\n".join(lines))
        return 0
    if args.cache_cmd == "clear":
        removed = store.clear()
        _emit(cfg, {"schema": CLI_SCHEMA, "removed": removed},
              f"removed: {removed}")
        return 0
    if args.cache_cmd == "prune":
        seconds = parse_duration(args.older_than)
        removed = store.prune(seconds)
        _emit(cfg, {"schema": CLI_SCHEMA, "removed": removed,
                    "older_than_seconds": seconds},
              f"removed: {removed}")
        return 0
    raise UsageError("choose a cache subcommand: info, clear, prune")


# --- codegen dump ------------------------------------------------------------


def _variant_from_args(args: argparse.Namespace) -> elementwise.VariantParams:
    try:
        return elementwise.VariantParams(unroll=args.unroll,
                                         workers=args.workers,
                                         chunking=args.chunking)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_codegen(cfg: CliConfig, args: argparse.Namespace) -> int:
    if args.kind == "unrolled-add":
        if args.unroll < 1:
            raise UsageError("--unroll must be >= 1")
        if args.method == "template":
            source = csyntax.unrolled_add_template(args.unroll)
        else:
            source = csyntax.emit(csyntax.unrolled_add_ast(args.unroll))
    elif args.kind == "elementwise":
        if not args.signature or not args.operation:
            raise UsageError(
                "--kind elementwise needs --signature and --operation")
        try:
            sig = elementwise.parse_signature(args.signature)
            source = elementwise.generate(sig, args.operation, args.name,
                                          _variant_from_args(args))
        except (elementwise.ParseError, elementwise.UnknownType,
                ValueError) as exc:
            raise UsageError(str(exc)) from exc
    else:  # reduction
        if not (args.signature and args.out_dtype and args.neutral
                and args.reduce):
            raise UsageError("--kind reduction needs --signature, "
                             "--out-dtype, --neutral and --reduce")
        out = ndarray.BY_NAME.get(args.out_dtype)
        if out is None:
            raise UsageError(f"unknown dtype {args.out_dtype!r} "
                             f"(one of {', '.join(sorted(ndarray.BY_NAME))})")
        try:
            spec = reduction.ReductionSpec(args.signature, out, args.neutral,
                                           args.reduce, args.map)
            source = reduction.generate_reduction_source(
                spec, args.name, _variant_from_args(args))
        except (elementwise.ParseError, elementwise.UnknownType,
                reduction.NonScalarResult, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    sys.stdout.write(source)
    return 0


# --- demo and bench ----------------------------------------------------------


def _run_recipe(cfg: CliConfig, op: str, n: int, repeats: int):
    """Build the named kernel, run it, check against the host oracle.

    Returns (pass, best_seconds, max_abs_error).  Timing covers kernel
    invocation only; the compile lands in the warm cache beforehand.
    """
    pool = ndarray.MemoryPool()
    cache = jit.CacheStore(cfg.cache_root)
    kwargs = {"config": cfg.toolchain, "cache": cache}
    rng = np.random.default_rng(0)
    f32 = ndarray.float32

    if op in RECIPES:
        signature, operation = RECIPES[op]
        # recipe names are CLI-facing; "double" is a C keyword, so the
        # kernel symbol gets a prefix
        kernel = elementwise.make_elementwise(signature, operation,
                                              f"k_{op}", **kwargs)
        x = rng.uniform(-1.0, 1.0, size=n).astype(np.float32)
        if op == "double":
            arrays = [ndarray.from_host(pool, f32, x)]
            call = [arrays[0], None]
            expected = np.float32(2) * x
        else:
            y = rng.uniform(-1.0, 1.0, size=n).astype(np.float32)
            a, b = 2.0, -3.0
            arrays = [ndarray.from_host(pool, f32, x),
                      ndarray.from_host(pool, f32, y)]
            call = [a, arrays[0], b, arrays[1], None]
            expected = np.float32(a) * x + np.float32(b) * y
        out = pool.alloc(f32, (n,))
        call[call.index(None)] = out

        def run():
            kernel(*call, n=n)

        run()
        best = min(_timed(run) for _ in range(repeats))
        got = out.to_host()
        err = float(np.max(np.abs(got - expected))) if n else 0.0
        ok = bool(np.array_equal(got, expected))
        return ok, best, err

    if op == "dot":
        f64 = ndarray.float64
        kernel = reduction.dot_kernel(f64, **kwargs)
        x = rng.uniform(-1.0, 1.0, size=n)
        y = rng.uniform(-1.0, 1.0, size=n)
        ax = ndarray.from_host(pool, f64, x)
        ay = ndarray.from_host(pool, f64, y)

        value = kernel(ax, ay, n=n)
        best = min(_timed(lambda: kernel(ax, ay, n=n)) for _ in range(repeats))
        acc = np.float64(0)
        for i in range(n):
            acc += x[i] * y[i]
        err = abs(float(value) - float(acc))
        scale = max(abs(float(acc)), 1.0)
        return err / scale <= 1e-9, best, err

    raise UsageError(f"unknown op {op!r} (one of double, lincomb, dot)")


def _timed(run) -> float:
    t0 = time.perf_counter()
    run()
    return time.perf_counter() - t0


def cmd_demo(cfg: CliConfig, args: argparse.Namespace) -> int:
    n = args.n if args.n is not None else 16
    ok, seconds, err = _run_recipe(cfg, args.which, n, repeats=3)
    verdict = "PASS" if ok else "FAIL"
    shape = " (4x4)" if args.which == "double" and n == 16 else ""
    _emit(cfg, {"schema": CLI_SCHEMA, "demo": args.which, "n": n,
                "seconds": seconds, "max_abs_error": err, "pass": ok},
          f"demo: {args.which}\nn: {n}{shape}\n"
          f"kernel: {seconds * 1e3:.3f} ms\n"
          f"max |error|: {err:g}\n{verdict}")
    return 0 if ok else 1


def cmd_bench(cfg: CliConfig, args: argparse.Namespace) -> int:
    ok, seconds, _ = _run_recipe(cfg, args.op, args.n, repeats=5)
    doc = {"op": args.op, "n": args.n, "seconds": seconds,
           "gitless_fingerprint": jit.fingerprint(cfg.toolchain).digest(),
           "pass": ok}
    rate = args.n / seconds / 1e6 if seconds > 0 else float("inf")
    _emit(cfg, doc,
          f"op: {args.op}\nn: {args.n}\nseconds: {seconds:.6f}\n"
          f"rate: {rate:.1f} M elements/s\n{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


# --- tune --------------------------------------------------------------------

_AXIS_FLAG = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)=(.+)$")


def parse_axis(text: str) -> tuple[str, tuple]:
    """``unroll=1,2,4`` -> ("unroll", (1, 2, 4)); non-integers stay strings."""
    m = _AXIS_FLAG.match(text.strip())
    if not m:
        raise UsageError(f"bad --axis {text!r}: expected name=v1,v2,...")
    name, raw = m.group(1), m.group(2)
    values = []
    for token in raw.split(","):
        token = token.strip()
        if not token:
            raise UsageError(f"bad --axis {text!r}: empty value")
        values.append(int(token) if re.fullmatch(r"-?\d+", token) else token)
    return name, tuple(values)


def cmd_tune(cfg: CliConfig, args: argparse.Namespace) -> int:
    if args.kernel not in RECIPES:
        raise UsageError(f"unknown kernel {args.kernel!r} "
                         f"(one of {', '.join(sorted(RECIPES))})")
    axes = dict(parse_axis(a) for a in args.axis) if args.axis else None
    signature, operation = RECIPES[args.kernel]
    store = autotune.TuneStore(cfg.cache_root)
    cache = jit.CacheStore(cfg.cache_root)
    try:
        result = autotune.tune_elementwise(
            signature, operation, f"k_{args.kernel}", args.n, axes,
            store=store, config=cfg.toolchain, cache=cache,
            prune=not args.no_prune, sample=args.sample)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    doc = json.loads(result.to_json())
    doc["cached"] = result.from_store
    lines = [f"kernel: {args.kernel}", f"n: {args.n}",
             f"cached: {'true' if result.from_store else 'false'}", ""]
    lines.append(f"{'assignment':<32} {'status':<10} {'time':>12}")
    for entry in result.table:
        stat = (f"{entry.stat_seconds * 1e3:.3f} ms"
                if entry.stat_seconds is not None else "-")
        lines.append(f"{autotune.assignment_text(entry.as_dict()):<32} "
                     f"{entry.status:<10} {stat:>12}")
    lines += ["", f"best: {autotune.assignment_text(result.best_assignment)}"]
    _emit(cfg, doc, "\n".join(lines))
    return 0


# --- parser and dispatch -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtcg",
        description="Run-time C code generation toolkit: generate, cache, "
                    "run, and tune compiled kernels.")
    parser.add_argument("--format", choices=("human", "json"),
                        default="human", help="output format")
    parser.add_argument("--cache-dir", metavar="PATH",
                        help="compile-cache root (default: RTCG_CACHE_DIR "
                             "or the user cache dir)")
    parser.add_argument("--cc", metavar="CC",
                        help="C compiler (default: RTCG_CC, CC, or cc)")
    parser.add_argument("--verbose", action="store_true",
                        help="print the resolved configuration to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    cache = sub.add_parser("cache", help="inspect or edit the compile cache")
    cache_sub = cache.add_subparsers(dest="cache_cmd", required=True)
    cache_sub.add_parser("info", help="entry count, bytes, age range")
    cache_sub.add_parser("clear", help="remove every cache entry")
    prune = cache_sub.add_parser("prune", help="remove old cache entries")
    prune.add_argument("--older-than", required=True, metavar="DUR",
                       help="age cutoff like 30s, 15m, 2h, 7d")

    dump = sub.add_parser("codegen", help="inspect generated C source")
    dump_sub = dump.add_subparsers(dest="codegen_cmd", required=True)
    d = dump_sub.add_parser("dump", help="print a kernel's C source")
    d.add_argument("--kind", required=True,
                   choices=("elementwise", "reduction", "unrolled-add"))
    d.add_argument("--method", choices=("template", "ast"),
                   default="template",
                   help="generation strategy for --kind unrolled-add")
    d.add_argument("--signature", help="C-style parameter list")
    d.add_argument("--operation", help="per-element statement(s)")
    d.add_argument("--out-dtype", help="reduction result dtype name")
    d.add_argument("--neutral", help="reduction neutral element literal")
    d.add_argument("--reduce", help="combine expression over a and b")
    d.add_argument("--map", help="optional per-element map expression")
    d.add_argument("--name", default="kernel", help="kernel symbol name")
    d.add_argument("--unroll", type=int, default=4)
    d.add_argument("--workers", type=int, default=None)
    d.add_argument("--chunking", choices=elementwise.CHUNKINGS,
                   default="contiguous-blocks")

    demo = sub.add_parser("demo", help="run a known kernel against its oracle")
    demo.add_argument("which", choices=("double", "lincomb", "dot"))
    demo.add_argument("--n", type=int, default=None,
                      help="element count (default 16)")

    bench = sub.add_parser("bench", help="time one kernel at one size")
    bench.add_argument("--op", required=True,
                       choices=("double", "lincomb", "dot"))
    bench.add_argument("--n", type=int, required=True)

    tune = sub.add_parser("tune", help="run a tuning campaign")
    tune.add_argument("--kernel", required=True,
                      help="kernel recipe name (double, lincomb)")
    tune.add_argument("--n", type=int, required=True)
    tune.add_argument("--axis", action="append", metavar="NAME=V1,V2,...",
                      help="candidate values for one variant axis; "
                           "repeatable (default: unroll and workers grids)")
    tune.add_argument("--sample", type=int, default=None,
                      help="measure only a seeded random subset")
    tune.add_argument("--no-prune", action="store_true",
                      help="disable the slow-axis pruning heuristic")
    return parser


_COMMANDS = {
    "cache": cmd_cache,
    "codegen": cmd_codegen,
    "demo": cmd_demo,
    "bench": cmd_bench,
    "tune": cmd_tune,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = _resolve_config(args)
    if cfg.verbose:
        print(cfg.describe(), file=sys.stderr)
    try:
        n = getattr(args, "n", None)
        if n is not None and n < 0:
            raise UsageError("--n must be >= 0")
        return _COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except autotune.AllVariantsFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (jit.CompileError, jit.LoadError, jit.CacheCorrupt,
            ndarray.OutOfMemory) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
