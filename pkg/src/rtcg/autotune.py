"""Empirical variant selection: time candidate kernels, keep the fastest.

The search is brute force over a small explicit parameter space, with two
optional work-savers: uniform subsampling of the space, and a pruning
heuristic that stops visiting axis values whose measured assignments are
all far slower than the current best.  Results persist per (platform
fingerprint, problem key), so a tuned machine answers repeat questions
without running anything.

Timing uses a monotonic clock around whole runnable invocations; the clock
is injectable, which is also how tests drive the tuner with synthetic
costs.  Crashing or over-budget variants are recorded and skipped, never
fatal unless every variant fails.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import re
import statistics
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import jit
from ._version import TOOLKIT_VERSION

log = logging.getLogger(__name__)

TUNE_SCHEMA = 1
PRUNE_FACTOR = 3.0


class EmptySpace(Exception):
    """Constraints eliminated every assignment."""


class VariantTimeout(Exception):
    """A variant exceeded the per-variant measurement budget."""


class VariantCrashed(Exception):
    """A variant raised while being built or run."""


class AllVariantsFailed(Exception):
    """No variant produced a measurement; ``reasons`` maps assignment
    (as a canonical string) to what went wrong."""

    def __init__(self, reasons: dict[str, str]) -> None:
        lines = "\n".join(f"  {k}: {v}" for k, v in reasons.items())
        super().__init__(f"every variant failed:\n{lines}")
        self.reasons = reasons


# --- parameter space ---------------------------------------------------------


def assignment_text(assignment: dict) -> str:
    """Canonical one-line spelling, e.g. ``unroll=4,workers=2``."""
    return ",".join(f"{k}={assignment[k]}" for k in sorted(assignment))


@dataclass(frozen=True)
class ParamSpace:
    """Named axes with ordered candidate values, plus constraint predicates.

    Axes are traversed in name order and candidates in their given order,
    so enumeration (and therefore tie-breaking) is deterministic.
    Constraints are pure functions of a full assignment dict.
    """

    axes: tuple[tuple[str, tuple], ...]
    constraints: tuple = ()

    @classmethod
    def make(cls, axes: dict, constraints=()) -> "ParamSpace":
        return cls(tuple(sorted((name, tuple(values))
                                for name, values in axes.items())),
                   tuple(constraints))

    def enumerate(self) -> list[dict]:
        """Every assignment passing the constraints, axis-lexicographic.

        Raises :class:`EmptySpace` when nothing survives.
        """
        names = [name for name, _ in self.axes]
        if not names:
            raise EmptySpace("parameter space has no axes")
        out: list[dict] = []

        def walk(k: int, partial: dict) -> None:
            if k == len(self.axes):
                if all(c(partial) for c in self.constraints):
                    out.append(dict(partial))
                return
            name, values = self.axes[k]
            for v in values:
                partial[name] = v
                walk(k + 1, partial)
            del partial[name]

        walk(0, {})
        if not out:
            raise EmptySpace("constraints eliminated every assignment")
        return out


# --- measurement -------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementProtocol:
    """How one variant is timed: warmup runs, timed repetitions, the
    aggregate statistic, and a per-variant wall budget."""

    warmup: int = 1
    repeats: int = 5
    statistic: str = "minimum"
    timeout_seconds: float = 30.0

    def __post_init__(self) -> None:
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.statistic not in ("minimum", "median"):
            raise ValueError("statistic must be 'minimum' or 'median'")
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")

    def aggregate(self, samples) -> float:
        if self.statistic == "median":
            return statistics.median(samples)
        return min(samples)


@dataclass(frozen=True)
class Measurement:
    seconds: float
    samples: tuple[float, ...]


def measure(runnable, protocol: MeasurementProtocol,
            clock=time.perf_counter) -> Measurement:
    """Time ``runnable()`` per the protocol.

    The timeout is enforced between repetitions (a kernel stuck inside C
    cannot be interrupted); exceeding it raises :class:`VariantTimeout`.
    Exceptions out of the runnable surface as :class:`VariantCrashed`.
    """
    began = clock()

    def run_once() -> float:
        t0 = clock()
        try:
            runnable()
        except Exception as exc:
            raise VariantCrashed(f"{type(exc).__name__}: {exc}") from exc
        t1 = clock()
        if t1 - began > protocol.timeout_seconds:
            raise VariantTimeout(
                f"variant exceeded {protocol.timeout_seconds:g} s budget")
        return t1 - t0

    for _ in range(protocol.warmup):
        run_once()
    samples = tuple(run_once() for _ in range(protocol.repeats))
    return Measurement(protocol.aggregate(samples), samples)


# --- results and persistence --------------------------------------------------


@dataclass(frozen=True)
class TableEntry:
    assignment: tuple[tuple[str, object], ...]  # sorted (axis, value) pairs
    status: str  # "ok" | "crashed" | "timeout" | "pruned" | "unsampled"
    stat_seconds: float | None = None
    samples: int = 0
    reason: str = ""

    def as_dict(self) -> dict:
        return dict(self.assignment)


@dataclass(frozen=True)
class TuneResult:
    """Outcome of one tuning campaign, storable and reloadable.

    Carries enough context (axes, protocol, fingerprint, toolkit version)
    to judge later whether a stored result still applies.  Constraint
    predicates are code and are not persisted.
    """

    problem_key: str
    best: tuple[tuple[str, object], ...]
    table: tuple[TableEntry, ...]
    axes: tuple[tuple[str, tuple], ...]
    protocol: MeasurementProtocol
    fingerprint: jit.PlatformFingerprint
    toolkit_version: str
    # when it ran and whether it was loaded rather than measured: context,
    # not identity, so two identical campaigns compare equal
    created_unix: int = field(compare=False)
    from_store: bool = field(default=False, compare=False)

    @property
    def best_assignment(self) -> dict:
        return dict(self.best)

    def to_json(self) -> str:
        return jit.canonical_json({
            "schema": TUNE_SCHEMA,
            "problem_key": self.problem_key,
            "best": dict(self.best),
            "table": [{
                "assignment": e.as_dict(),
                "status": e.status,
                "stat_seconds": e.stat_seconds,
                "samples": e.samples,
                "reason": e.reason,
            } for e in self.table],
            "space": {name: list(values) for name, values in self.axes},
            "protocol": {
                "warmup": self.protocol.warmup,
                "repeats": self.protocol.repeats,
                "statistic": self.protocol.statistic,
                "timeout_seconds": self.protocol.timeout_seconds,
            },
            "fingerprint": self.fingerprint.as_dict(),
            "toolkit_version": self.toolkit_version,
            "created_unix": self.created_unix,
        })

    @classmethod
    def from_json(cls, text: str) -> "TuneResult":
        data = json.loads(text)
        if data.get("schema") != TUNE_SCHEMA:
            raise ValueError(f"unsupported tuning schema {data.get('schema')}")
        table = tuple(TableEntry(
            assignment=tuple(sorted(e["assignment"].items())),
            status=e["status"], stat_seconds=e["stat_seconds"],
            samples=e["samples"], reason=e["reason"]) for e in data["table"])
        return cls(
            problem_key=data["problem_key"],
            best=tuple(sorted(data["best"].items())),
            table=table,
            axes=tuple(sorted((name, tuple(values))
                              for name, values in data["space"].items())),
            protocol=MeasurementProtocol(**data["protocol"]),
            fingerprint=jit.PlatformFingerprint.from_dict(data["fingerprint"]),
            toolkit_version=data["toolkit_version"],
            created_unix=data["created_unix"],
        )


_KEY_SAFE = re.compile(r"[^A-Za-z0-9._-]+")


def _safe_key(problem_key: str) -> str:
    safe = _KEY_SAFE.sub("-", problem_key)
    if safe != problem_key:
        safe += "-" + hashlib.sha256(problem_key.encode()).hexdigest()[:8]
    return safe


class TuneStore:
    """Tuning results on disk: ``<root>/tune/<fingerprint>/<problem>.json``.

    Keyed by the full platform fingerprint digest, so any change in
    hardware, toolchain, or toolkit version starts a fresh shelf.
    """

    def __init__(self, cache_root: Path | str | None = None) -> None:
        root = Path(cache_root) if cache_root is not None \
            else jit.default_cache_root()
        self.root = root / "tune"

    def _path(self, fp: jit.PlatformFingerprint, problem_key: str) -> Path:
        return self.root / fp.digest() / (_safe_key(problem_key) + ".json")

    def load(self, fp: jit.PlatformFingerprint,
             problem_key: str) -> TuneResult | None:
        path = self._path(fp, problem_key)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError:
            return None
        try:
            result = TuneResult.from_json(text)
        except (ValueError, KeyError) as exc:
            log.warning("discarding unreadable tuning record %s: %s", path, exc)
            return None
        return replace(result, from_store=True)

    def save(self, result: TuneResult) -> Path:
        path = self._path(result.fingerprint, result.problem_key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp-{uuid.uuid4().hex[:8]}")
        tmp.write_text(result.to_json(), encoding="utf-8")
        os.replace(tmp, path)
        return path


# --- the tuner ----------------------------------------------------------------


def tune(factory, space: ParamSpace,
         protocol: MeasurementProtocol | None = None,
         *, store: TuneStore | None = None, problem_key: str | None = None,
         fp: jit.PlatformFingerprint | None = None,
         prune: bool = True, prune_factor: float = PRUNE_FACTOR,
         sample: int | None = None, seed: int = 0,
         clock=time.perf_counter) -> TuneResult:
    """Measure every (surviving) assignment and return the argmin.

    ``factory(assignment)`` builds a runnable for one variant; building and
    measuring failures are recorded per variant and tuning continues.  With
    a ``store`` and ``problem_key``, a persisted result for this platform
    fingerprint is returned directly, with zero builds and zero
    measurements; a fresh result is persisted on the way out.

    ``sample`` keeps a uniform random subset of the assignments (seeded,
    deterministic).  ``prune`` drops assignments sharing an axis value
    whose completed measurements are all worse than ``prune_factor`` times
    the current best; the returned best is therefore never worse than
    ``prune_factor`` times the true minimum.  Ties on the timing statistic
    resolve to the earliest assignment in axis-lexicographic order.
    """
    protocol = protocol or MeasurementProtocol()
    if store is not None and problem_key is None:
        raise ValueError("a store requires a problem_key")
    if fp is None:
        fp = jit.fingerprint()
    if store is not None:
        hit = store.load(fp, problem_key)
        if hit is not None:
            log.debug("tuning store hit for %s", problem_key)
            return hit

    assignments = space.enumerate()
    chosen = set(range(len(assignments)))
    if sample is not None and sample < len(assignments):
        rng = random.Random(seed)
        chosen = set(rng.sample(range(len(assignments)), sample))

    entries: list[TableEntry] = []
    best_stat = math.inf
    best_idx: int | None = None
    condemned: set[tuple[str, object]] = set()
    measured: list[tuple[dict, float]] = []

    for idx, assignment in enumerate(assignments):
        frozen = tuple(sorted(assignment.items()))
        if idx not in chosen:
            entries.append(TableEntry(frozen, "unsampled"))
            continue
        if prune and any((axis, value) in condemned
                         for axis, value in assignment.items()):
            entries.append(TableEntry(frozen, "pruned",
                                      reason="axis value condemned"))
            continue
        try:
            runnable = factory(assignment)
        except Exception as exc:
            entries.append(TableEntry(frozen, "crashed",
                                      reason=f"{type(exc).__name__}: {exc}"))
            continue
        try:
            m = measure(runnable, protocol, clock=clock)
        except VariantTimeout as exc:
            entries.append(TableEntry(frozen, "timeout", reason=str(exc)))
            continue
        except VariantCrashed as exc:
            entries.append(TableEntry(frozen, "crashed", reason=str(exc)))
            continue
        entries.append(TableEntry(frozen, "ok", m.seconds, len(m.samples)))
        measured.append((assignment, m.seconds))
        if m.seconds < best_stat:
            best_stat = m.seconds
            best_idx = len(entries) - 1
        if prune:
            condemned = _condemned_values(space, measured, best_stat,
                                          prune_factor)

    if best_idx is None:
        reasons = {assignment_text(e.as_dict()): e.reason or e.status
                   for e in entries}
        raise AllVariantsFailed(reasons)

    result = TuneResult(
        problem_key=problem_key or "",
        best=entries[best_idx].assignment,
        table=tuple(entries),
        axes=space.axes,
        protocol=protocol,
        fingerprint=fp,
        toolkit_version=TOOLKIT_VERSION,
        created_unix=int(time.time()),
    )
    if store is not None:
        store.save(result)
    return result


def _condemned_values(space: ParamSpace, measured, best_stat: float,
                      factor: float) -> set[tuple[str, object]]:
    doomed: set[tuple[str, object]] = set()
    for axis, values in space.axes:
        for value in values:
            stats = [s for a, s in measured if a[axis] == value]
            if stats and min(stats) > factor * best_stat:
                doomed.add((axis, value))
    return doomed


# --- elementwise glue ----------------------------------------------------------

DEFAULT_AXES = {"unroll": (1, 2, 4, 8), "workers": (1, 2, 4)}


def elementwise_problem_key(signature: str, operation: str, name: str,
                            n: int, axes: dict) -> str:
    ident = hashlib.sha256(jit.canonical_json({
        "signature": signature, "operation": operation, "name": name,
        "axes": {k: list(v) for k, v in sorted(axes.items())},
    }).encode()).hexdigest()[:16]
    return f"{name}-{ident}-n{n}"


def tune_elementwise(signature: str, operation: str, name: str, n: int,
                     axes: dict | None = None, *, constraints=(),
                     protocol: MeasurementProtocol | None = None,
                     store: TuneStore | None = None,
                     config=None, cache=None, pool=None,
                     prune: bool = True, sample: int | None = None,
                     seed: int = 0) -> TuneResult:
    """Tune one elementwise kernel over variant axes at a given problem size.

    Synthesizes deterministic nonzero argument data of the right dtypes,
    builds one compiled kernel per assignment (compile time stays outside
    the timed region), and runs the generic tuner.  Axes default to unroll
    and workers; a ``chunking`` axis may be added with the documented
    tokens.
    """
    import numpy as np

    from . import elementwise as ew
    from . import ndarray as nd

    axes = dict(axes or DEFAULT_AXES)
    unknown = set(axes) - {"unroll", "workers", "chunking"}
    if unknown:
        raise ValueError(f"unknown variant axes: {sorted(unknown)}")
    sig = ew.parse_signature(signature)
    pool = pool or nd.MemoryPool()
    rng = np.random.default_rng(seed)

    call_args = []
    for p in sig.params:
        if p.is_vector:
            host = rng.uniform(1.0, 2.0, size=n)
            call_args.append(nd.from_host(pool, p.dtype, host.astype(p.dtype.np)))
        else:
            call_args.append(3 if p.dtype.kind in "iu" else 1.5)

    def factory(assignment):
        variant = ew.VariantParams(**assignment)
        kernel = ew.make_elementwise(signature, operation, name,
                                     variant=variant, config=config,
                                     cache=cache)
        return lambda: kernel(*call_args, n=n)

    space = ParamSpace.make(axes, constraints)
    key = elementwise_problem_key(signature, operation, name, n, axes)
    fp = jit.fingerprint(config) if config is not None else jit.fingerprint()
    try:
        return tune(factory, space, protocol, store=store,
                    problem_key=key, fp=fp, prune=prune,
                    sample=sample, seed=seed)
    finally:
        for arg in call_args:
            if isinstance(arg, nd.NdArray):
                pool.free(arg)
