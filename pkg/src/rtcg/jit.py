"""Compile C source at run time into a content-addressed cache of shared libraries.

The pipeline is: hash (source, flags, toolchain identity, platform
fingerprint) into a cache key; return the cached binary when the key is
present and its recorded digest matches; otherwise run the system C compiler
once, store the result atomically, and load it.  The expense of compilation
is therefore paid once per distinct (source, environment) pair, also across
processes sharing a cache directory.

Compiled kernels follow a fixed ABI so the driver never needs per-kernel
ctypes prototypes:

    void name(void **args, long start, long end);

``args`` carries one slot per parameter: vector parameters point at the
array storage, scalar parameters point at an 8-byte widened value (int64,
uint64, or double by kind).
"""

from __future__ import annotations

import ctypes
import hashlib
import json
import logging
import os
import platform
import shlex
import shutil
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from ._version import TOOLKIT_VERSION

log = logging.getLogger(__name__)

CACHE_SCHEMA = 1
DEFAULT_FLAGS = ("-O2", "-ffp-contract=off")
DEFAULT_COMPILE_TIMEOUT = 60.0

_META_NAME = "meta.json"
_SOURCE_NAME = "source.c"
_BINARY_NAME = "module.bin"


class CompileError(Exception):
    """The compiler failed; carries its diagnostics and the numbered source."""

    def __init__(self, message: str, diagnostics: str = "", source: str = "",
                 command: tuple[str, ...] = ()) -> None:
        listing = _numbered(source) if source else ""
        full = message
        if diagnostics.strip():
            full += "\n--- compiler diagnostics ---\n" + diagnostics.rstrip()
        if listing:
            full += "\n--- source ---\n" + listing
        super().__init__(full)
        self.diagnostics = diagnostics
        self.source = source
        self.command = tuple(command)


class LoadError(Exception):
    """A compiled library exists but the dynamic loader rejected it."""


class CacheCorrupt(Exception):
    """Stored cache metadata failed validation; the entry is quarantined."""


class SymbolNotFound(Exception):
    def __init__(self, name: str) -> None:
        super().__init__(f"kernel symbol {name!r} not found in module")
        self.name = name


def _numbered(source: str) -> str:
    return "\n".join(f"{k + 1:4d} | {line}"
                     for k, line in enumerate(source.splitlines()))


def default_cache_root() -> Path:
    """RTCG_CACHE_DIR if set, else the platform cache dir plus ``rtcg-kit``."""
    env = os.environ.get("RTCG_CACHE_DIR")
    if env:
        return Path(env).expanduser()
    if sys.platform == "darwin":
        base = Path.home() / "Library" / "Caches"
    else:
        base = Path(os.environ.get("XDG_CACHE_HOME", "") or (Path.home() / ".cache"))
    return base / "rtcg-kit"


# --- toolchain --------------------------------------------------------------

_identity_lock = threading.Lock()
_identity_cache: dict[tuple[str, int, int], str] = {}


def _query_identity(cc: str) -> str:
    """Compiler name and version as reported by the compiler itself.

    Memoized on (resolved path, size, mtime) so a swapped-out compiler
    binary is noticed, but repeated fingerprinting stays cheap.
    """
    resolved = shutil.which(cc)
    if resolved is None:
        return "unknown"
    try:
        st = os.stat(resolved)
        memo_key = (resolved, st.st_size, st.st_mtime_ns)
    except OSError:
        memo_key = None
    if memo_key is not None:
        with _identity_lock:
            cached = _identity_cache.get(memo_key)
        if cached is not None:
            return cached
    try:
        proc = subprocess.run([resolved, "--version"], capture_output=True,
                              text=True, timeout=10)
        first = (proc.stdout or proc.stderr).splitlines()
        identity = first[0].strip() if first else "unknown"
    except (OSError, subprocess.SubprocessError):
        identity = "unknown"
    if memo_key is not None:
        with _identity_lock:
            _identity_cache[memo_key] = identity
    return identity


@dataclass(frozen=True)
class ToolchainConfig:
    """Compiler path, code generation flags, and the compiler's identity.

    ``identity`` defaults to the first line of ``cc --version``; tests may
    inject a fixed string.  Configs hash into cache keys, so two configs that
    differ in any field compile into distinct cache entries.
    """

    cc: str = "cc"
    flags: tuple[str, ...] = DEFAULT_FLAGS
    identity: str | None = None

    @classmethod
    def from_env(cls) -> "ToolchainConfig":
        cc = os.environ.get("RTCG_CC") or os.environ.get("CC") or "cc"
        flags = list(DEFAULT_FLAGS)
        extra = os.environ.get("RTCG_CFLAGS")
        if extra:
            flags.extend(shlex.split(extra))
        return cls(cc=cc, flags=tuple(flags))

    def resolved_identity(self) -> str:
        return self.identity if self.identity is not None else _query_identity(self.cc)


# --- platform fingerprint ---------------------------------------------------


def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo", encoding="utf-8", errors="replace") as f:
            for line in f:
                if line.lower().startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or "unknown"


@dataclass(frozen=True)
class PlatformFingerprint:
    """Identifying information about hardware, software, and their versions.

    Cached binaries and tuning results are keyed on this, so a change in any
    field invalidates them and triggers recompilation or re-tuning.
    """

    os: str
    cpu: str
    cores: int
    toolchain: str
    toolkit_version: str

    def as_dict(self) -> dict:
        return {
            "os": self.os,
            "cpu": self.cpu,
            "cores": self.cores,
            "toolchain": self.toolchain,
            "toolkit_version": self.toolkit_version,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlatformFingerprint":
        return cls(os=data["os"], cpu=data["cpu"], cores=data["cores"],
                   toolchain=data["toolchain"],
                   toolkit_version=data["toolkit_version"])

    def canonical(self) -> str:
        return canonical_json(self.as_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def canonical_json(obj: object) -> str:
    """One byte encoding per value: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(config: ToolchainConfig | None = None) -> PlatformFingerprint:
    """Gather live platform identity; unknown fields come back as "unknown"."""
    config = config or ToolchainConfig.from_env()
    return PlatformFingerprint(
        os=platform.platform(),
        cpu=_cpu_model(),
        cores=os.cpu_count() or 0,
        toolchain=config.resolved_identity(),
        toolkit_version=TOOLKIT_VERSION,
    )


def cache_key(source: str, config: ToolchainConfig,
              fp: PlatformFingerprint) -> str:
    """256-bit content hash binding source text to its build environment."""
    payload = canonical_json({
        "schema": CACHE_SCHEMA,
        "source": source,
        "flags": list(config.flags),
        "toolchain": config.resolved_identity(),
        "fingerprint": fp.as_dict(),
    })
    return hashlib.sha256(payload.encode()).hexdigest()


# --- on-disk store ----------------------------------------------------------


@dataclass
class CacheEntryInfo:
    key: str
    path: Path
    bytes: int
    created_unix: int | None


class CacheStore:
    """Directory of compiled modules, fanned out on the first two key hex digits.

    Entry layout: ``<root>/<key[:2]>/<key>/{source.c, module.bin, meta.json}``.
    Entries are created by building a temporary directory and renaming it into
    place, so concurrent writers race safely and readers never observe torn
    files.  There is no automatic eviction.
    """

    def __init__(self, root: Path | str | None = None) -> None:
        self.root = Path(root) if root is not None else default_cache_root()

    def entry_dir(self, key: str) -> Path:
        return self.root / key[:2] / key

    def load_binary(self, key: str) -> Path | None:
        """Path of a validated cached binary, or None on a clean miss.

        Raises :class:`CacheCorrupt` when the entry exists but its metadata
        or binary digest fails validation.
        """
        entry = self.entry_dir(key)
        meta_path = entry / _META_NAME
        if not entry.is_dir():
            return None
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CacheCorrupt(f"unreadable metadata for {key}: {exc}") from exc
        required = {"schema", "key", "source_digest", "flags", "toolchain_id",
                    "fingerprint", "binary_digest", "created_unix"}
        if not required.issubset(meta):
            raise CacheCorrupt(f"metadata for {key} is missing fields")
        if meta["schema"] != CACHE_SCHEMA:
            raise CacheCorrupt(f"metadata schema {meta['schema']} != {CACHE_SCHEMA}")
        if meta["key"] != key:
            raise CacheCorrupt("metadata key does not match entry directory")
        binary = entry / _BINARY_NAME
        try:
            digest = hashlib.sha256(binary.read_bytes()).hexdigest()
        except OSError as exc:
            raise CacheCorrupt(f"unreadable binary for {key}: {exc}") from exc
        if digest != meta["binary_digest"]:
            raise CacheCorrupt(f"binary digest mismatch for {key}")
        return binary

    def insert(self, key: str, build_dir: Path) -> Path:
        """Atomically publish a finished build directory as the entry for key.

        If another writer got there first, the temporary directory is
        discarded and the winner's entry is used.
        """
        final = self.entry_dir(key)
        final.parent.mkdir(parents=True, exist_ok=True)
        try:
            os.rename(build_dir, final)
        except OSError:
            shutil.rmtree(build_dir, ignore_errors=True)
            if not final.is_dir():
                raise
        return final / _BINARY_NAME

    def scratch_dir(self) -> Path:
        scratch = self.root / "tmp" / uuid.uuid4().hex
        scratch.mkdir(parents=True)
        return scratch

    def quarantine(self, key: str) -> None:
        """Move a failed entry aside so the key reads as a miss."""
        entry = self.entry_dir(key)
        dest = self.root / "quarantine" / f"{key}-{uuid.uuid4().hex[:8]}"
        dest.parent.mkdir(parents=True, exist_ok=True)
        try:
            os.rename(entry, dest)
            log.warning("quarantined corrupt cache entry %s", key)
        except OSError:
            # a concurrent quarantine or clear already moved it
            pass

    # -- maintenance, used by the command line tool --

    def iter_entries(self):
        if not self.root.is_dir():
            return
        for fan in sorted(self.root.iterdir()):
            if not (fan.is_dir() and len(fan.name) == 2):
                continue
            for entry in sorted(fan.iterdir()):
                if entry.is_dir():
                    yield entry

    def entry_info(self, entry: Path) -> CacheEntryInfo:
        total = sum(f.stat().st_size for f in entry.iterdir() if f.is_file())
        created = None
        try:
            meta = json.loads((entry / _META_NAME).read_text(encoding="utf-8"))
            created = int(meta["created_unix"])
        except (OSError, ValueError, KeyError):
            pass
        return CacheEntryInfo(key=entry.name, path=entry, bytes=total,
                              created_unix=created)

    def info(self) -> dict:
        entries = [self.entry_info(e) for e in self.iter_entries()]
        stamps = [e.created_unix for e in entries if e.created_unix is not None]
        return {
            "root": str(self.root),
            "entries": len(entries),
            "bytes": sum(e.bytes for e in entries),
            "oldest_unix": min(stamps) if stamps else None,
            "newest_unix": max(stamps) if stamps else None,
        }

    def _remove_entry(self, entry: Path) -> bool:
        doomed = entry.parent / f"{entry.name}.deleting-{uuid.uuid4().hex[:8]}"
        try:
            os.rename(entry, doomed)
        except OSError:
            return False
        shutil.rmtree(doomed, ignore_errors=True)
        return True

    def clear(self) -> int:
        """Remove every entry; loaded modules keep working through their
        open handles.  Returns the number of entries removed."""
        removed = 0
        for entry in list(self.iter_entries()):
            removed += self._remove_entry(entry)
        return removed

    def prune(self, older_than_seconds: float) -> int:
        """Remove entries created at least older_than_seconds ago."""
        cutoff = time.time() - older_than_seconds
        removed = 0
        for entry in list(self.iter_entries()):
            info = self.entry_info(entry)
            created = info.created_unix
            if created is None or created <= cutoff:
                removed += self._remove_entry(entry)
        return removed


# --- compilation ------------------------------------------------------------

_spawn_lock = threading.Lock()
_spawn_count = 0

_key_locks_guard = threading.Lock()
_key_locks: dict[str, threading.Lock] = {}


def compiler_spawn_count() -> int:
    """Number of compiler processes started by this process (test hook)."""
    with _spawn_lock:
        return _spawn_count


def _key_lock(key: str) -> threading.Lock:
    with _key_locks_guard:
        lock = _key_locks.get(key)
        if lock is None:
            lock = _key_locks[key] = threading.Lock()
        return lock


@dataclass(frozen=True)
class CompileRecord:
    """Provenance of one compile() call."""

    source: str
    flags: tuple[str, ...]
    toolchain: str
    wall_seconds: float
    cache_hit: bool
    diagnostics: str = ""


@dataclass
class CompiledModule:
    library: ctypes.CDLL
    path: Path
    key: str
    provenance: CompileRecord


def _load_library(path: Path) -> ctypes.CDLL:
    try:
        return ctypes.CDLL(str(path), mode=ctypes.RTLD_LOCAL)
    except OSError as exc:
        raise LoadError(f"cannot load {path}: {exc}") from exc


def _run_compiler(source: str, config: ToolchainConfig, build_dir: Path,
                  timeout: float) -> tuple[float, str]:
    global _spawn_count
    src_path = build_dir / _SOURCE_NAME
    out_path = build_dir / _BINARY_NAME
    src_path.write_text(source, encoding="utf-8")
    command = [config.cc, *config.flags, "-shared", "-fPIC",
               "-o", str(out_path), str(src_path)]
    with _spawn_lock:
        _spawn_count += 1
    started = time.perf_counter()
    try:
        proc = subprocess.run(command, capture_output=True, text=True,
                              timeout=timeout)
    except FileNotFoundError as exc:
        raise CompileError(f"compiler not found: {config.cc}",
                           command=tuple(command)) from exc
    except subprocess.TimeoutExpired as exc:
        raise CompileError(
            f"compiler timed out after {timeout:g} s (process killed)",
            source=source, command=tuple(command)) from exc
    wall = time.perf_counter() - started
    diagnostics = proc.stderr or ""
    if proc.returncode != 0:
        raise CompileError(
            f"compiler exited with status {proc.returncode}",
            diagnostics=diagnostics + (proc.stdout or ""),
            source=source, command=tuple(command))
    return wall, diagnostics


def compile(source: str, config: ToolchainConfig | None = None,
            cache: CacheStore | None = None,
            fp: PlatformFingerprint | None = None,
            timeout: float = DEFAULT_COMPILE_TIMEOUT) -> CompiledModule:
    """Return a loaded module for source, compiling only on a cache miss.

    Corrupt cache entries are quarantined and rebuilt instead of raised to
    the caller.  Within one process at most one compiler run happens per key;
    across processes sharing the cache, concurrent misses race and the first
    finished build wins.
    """
    config = config or ToolchainConfig.from_env()
    cache = cache or CacheStore()
    fp = fp or fingerprint(config)
    key = cache_key(source, config, fp)

    with _key_lock(key):
        try:
            binary = cache.load_binary(key)
        except CacheCorrupt as exc:
            log.warning("cache entry %s failed validation (%s); rebuilding",
                        key[:12], exc)
            cache.quarantine(key)
            binary = None
        if binary is not None:
            record = CompileRecord(source=source, flags=config.flags,
                                   toolchain=config.resolved_identity(),
                                   wall_seconds=0.0, cache_hit=True)
            return CompiledModule(_load_library(binary), binary, key, record)

        build_dir = cache.scratch_dir()
        try:
            wall, diagnostics = _run_compiler(source, config, build_dir, timeout)
            binary_digest = hashlib.sha256(
                (build_dir / _BINARY_NAME).read_bytes()).hexdigest()
            meta = {
                "schema": CACHE_SCHEMA,
                "key": key,
                "source_digest": hashlib.sha256(source.encode()).hexdigest(),
                "flags": list(config.flags),
                "toolchain_id": config.resolved_identity(),
                "fingerprint": fp.as_dict(),
                "binary_digest": binary_digest,
                "created_unix": int(time.time()),
            }
            (build_dir / _META_NAME).write_text(canonical_json(meta),
                                                encoding="utf-8")
        except Exception:
            shutil.rmtree(build_dir, ignore_errors=True)
            raise
        binary = cache.insert(key, build_dir)
        log.debug("compiled %s in %.0f ms", key[:12], wall * 1e3)
        record = CompileRecord(source=source, flags=config.flags,
                               toolchain=config.resolved_identity(),
                               wall_seconds=wall, cache_hit=False,
                               diagnostics=diagnostics)
        return CompiledModule(_load_library(binary), binary, key, record)


# --- kernel handles ---------------------------------------------------------

KERNEL_ARGTYPES = (ctypes.POINTER(ctypes.c_void_p), ctypes.c_long, ctypes.c_long)


@dataclass
class KernelHandle:
    """A callable symbol following the fixed kernel ABI.

    The handle holds its module, so the underlying library stays mapped for
    the handle's lifetime.  Calling over an empty range is a no-op.
    """

    name: str
    module: CompiledModule
    _fn: object = field(repr=False, default=None)

    def __call__(self, args_pack, start: int, end: int) -> None:
        self._fn(args_pack, start, end)


def get_kernel(module: CompiledModule, name: str) -> KernelHandle:
    try:
        fn = getattr(module.library, name)
    except AttributeError as exc:
        raise SymbolNotFound(name) from exc
    fn.restype = None
    fn.argtypes = list(KERNEL_ARGTYPES)
    return KernelHandle(name=name, module=module, _fn=fn)
