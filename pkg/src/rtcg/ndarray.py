"""Typed n-dimensional arrays on pooled host memory.

Arrays are contiguous, dtype-tagged buffers whose storage comes from a
:class:`MemoryPool` of power-of-two size classes, so repeated allocation of
similarly shaped arrays is served from free lists instead of the system
allocator.  Arithmetic between arrays is carried out by generated C kernels
(see :mod:`rtcg.elementwise`); this module only owns storage, dtypes, and the
dtype promotion rules.

Promotion favors precision over width economy: mixing 32-bit integers with
32-bit floats yields 64-bit floats, because float32 cannot represent every
int32 exactly.  The full table is spelled out in ``promote``'s docstring.
"""

from __future__ import annotations

import ctypes
import math
import threading
from dataclasses import dataclass

import numpy as np


class OutOfMemory(Exception):
    """The system allocator failed even after releasing all pooled blocks."""


class LengthMismatch(Exception):
    """Host data length differs from the array's element count."""


class ShapeMismatch(Exception):
    """Array shapes are not usable for the requested operation."""


class DivisionByZero(Exception):
    """Integer division by a scalar zero, rejected before kernel launch."""


# --- dtypes -----------------------------------------------------------------


@dataclass(frozen=True)
class Dtype:
    """An element type: name, C spelling, byte size, and kind (i/u/f)."""

    name: str
    cname: str
    size: int
    kind: str

    @property
    def np(self) -> np.dtype:
        return np.dtype(self.name)

    def __repr__(self) -> str:
        return f"dtype({self.name})"


int8 = Dtype("int8", "int8_t", 1, "i")
int16 = Dtype("int16", "int16_t", 2, "i")
int32 = Dtype("int32", "int32_t", 4, "i")
int64 = Dtype("int64", "int64_t", 8, "i")
uint8 = Dtype("uint8", "uint8_t", 1, "u")
uint16 = Dtype("uint16", "uint16_t", 2, "u")
uint32 = Dtype("uint32", "uint32_t", 4, "u")
uint64 = Dtype("uint64", "uint64_t", 8, "u")
float32 = Dtype("float32", "float", 4, "f")
float64 = Dtype("float64", "double", 8, "f")

DTYPES: tuple[Dtype, ...] = (int8, int16, int32, int64,
                             uint8, uint16, uint32, uint64,
                             float32, float64)

BY_NAME = {d.name: d for d in DTYPES}
BY_CNAME = {d.cname: d for d in DTYPES}

_SIGNED_BY_SIZE = {d.size: d for d in DTYPES if d.kind == "i"}

_CTYPES_BY_CNAME = {
    "int8_t": ctypes.c_int8, "int16_t": ctypes.c_int16,
    "int32_t": ctypes.c_int32, "int64_t": ctypes.c_int64,
    "uint8_t": ctypes.c_uint8, "uint16_t": ctypes.c_uint16,
    "uint32_t": ctypes.c_uint32, "uint64_t": ctypes.c_uint64,
    "float": ctypes.c_float, "double": ctypes.c_double,
}

for _d in DTYPES:
    # element sizes must agree with the C ABI we generate against
    assert ctypes.sizeof(_CTYPES_BY_CNAME[_d.cname]) == _d.size, _d
    assert _d.np.itemsize == _d.size, _d


def ctype_for(dtype: Dtype):
    """The ctypes scalar type matching a dtype."""
    return _CTYPES_BY_CNAME[dtype.cname]


def promote(a: Dtype, b: Dtype) -> Dtype:
    """The result dtype for combining values of dtypes *a* and *b*.

    Rules (commutative, idempotent):

    * same kind: the wider of the two;
    * signed with unsigned: the smallest signed type whose range contains
      both operand ranges, or float64 when none exists (uint64 mixed with
      any signed type);
    * integer with float: the smallest float type that represents every
      value of both operands exactly, so int16 + float32 stays float32 but
      int32 + float32 widens to float64.  int64 and uint64 exceed float64's
      53-bit mantissa; they still promote to float64, the documented
      best-effort exception.
    """
    if a == b:
        return a
    if a.kind == b.kind:
        return a if a.size >= b.size else b
    if "f" in (a.kind, b.kind):
        f, i = (a, b) if a.kind == "f" else (b, a)
        value_bits = i.size * 8 - (1 if i.kind == "i" else 0)
        if f.size == 4 and value_bits <= 24:
            return float32
        return float64
    s, u = (a, b) if a.kind == "i" else (b, a)
    needed = s.size if u.size < s.size else u.size * 2
    if needed > 8:
        return float64
    return _SIGNED_BY_SIZE[needed]


# --- memory pool ------------------------------------------------------------

MIN_CLASS_BYTES = 64
MAX_CLASS_BYTES = 1 << 30


def size_class(nbytes: int) -> int | None:
    """Power-of-two class serving nbytes, or None when the request bypasses
    the pool (larger than the 1 GiB top class)."""
    if nbytes <= 0:
        raise ValueError("size classes start at one byte")
    if nbytes > MAX_CLASS_BYTES:
        return None
    return max(MIN_CLASS_BYTES, 1 << (nbytes - 1).bit_length())


class _Block:
    __slots__ = ("buffer", "capacity", "address", "pooled")

    def __init__(self, buffer, capacity: int, pooled: bool) -> None:
        self.buffer = buffer
        self.capacity = capacity
        self.address = ctypes.addressof(buffer)
        self.pooled = pooled


def _system_alloc(nbytes: int):
    # zero-initialized; raises MemoryError on exhaustion
    return ctypes.create_string_buffer(nbytes)


class MemoryPool:
    """Free-list allocator over power-of-two size classes (64 B to 1 GiB).

    Freed blocks are retained on per-class free lists and handed back,
    zeroed, to later allocations of the same class; requests above the top
    class bypass the pool entirely.  When the system allocator fails, every
    pooled free block is released and the allocation is retried once before
    :class:`OutOfMemory` is raised.  All methods are thread-safe.

    Counters: ``allocations_served`` (every successful alloc), ``pool_hits``
    (allocs served from a free list), ``bytes_held`` (free-listed bytes),
    ``bytes_outstanding`` (bytes inside live arrays), ``bytes_from_system``
    (bytes currently obtained from the system allocator).  Conservation:
    ``bytes_held + bytes_outstanding == bytes_from_system`` at all times.
    """

    def __init__(self, system_alloc=None) -> None:
        self._system_alloc = system_alloc or _system_alloc
        self._free: dict[int, list[_Block]] = {}
        self._lock = threading.Lock()
        self.allocations_served = 0
        self.pool_hits = 0
        self.bytes_held = 0
        self.bytes_outstanding = 0
        self.bytes_from_system = 0

    def stats(self) -> dict:
        with self._lock:
            return {
                "allocations_served": self.allocations_served,
                "pool_hits": self.pool_hits,
                "bytes_held": self.bytes_held,
                "bytes_outstanding": self.bytes_outstanding,
                "bytes_from_system": self.bytes_from_system,
            }

    def alloc(self, dtype: Dtype, shape) -> "NdArray":
        """A zero-initialized array; storage reused from the pool when a
        block of the right size class is free."""
        shape = _normalize_shape(shape)
        count = math.prod(shape)
        nbytes = count * dtype.size
        if count == 0:
            return NdArray(dtype, shape, None, self)
        cls = size_class(nbytes)
        with self._lock:
            block = None
            if cls is not None:
                bucket = self._free.get(cls)
                if bucket:
                    block = bucket.pop()
                    self.pool_hits += 1
                    self.bytes_held -= block.capacity
                    ctypes.memset(block.address, 0, nbytes)
            if block is None:
                block = self._obtain_locked(cls if cls is not None else nbytes,
                                            pooled=cls is not None)
            self.allocations_served += 1
            self.bytes_outstanding += block.capacity
        return NdArray(dtype, shape, block, self)

    def _obtain_locked(self, nbytes: int, pooled: bool) -> _Block:
        try:
            buffer = self._system_alloc(nbytes)
        except MemoryError:
            self._release_free_locked()
            try:
                buffer = self._system_alloc(nbytes)
            except MemoryError:
                raise OutOfMemory(
                    f"system allocator refused {nbytes} bytes even after "
                    f"releasing all pooled blocks") from None
        self.bytes_from_system += nbytes
        return _Block(buffer, nbytes, pooled)

    def free(self, array: "NdArray") -> None:
        """Return an array's storage to the pool (or to the system for
        bypass-sized blocks).  Freeing twice is an error."""
        if array.pool is not self:
            raise ValueError("array belongs to a different pool")
        block = array._block
        if array._freed:
            raise ValueError("array was already freed")
        array._freed = True
        if block is None:  # empty array, nothing was allocated
            return
        with self._lock:
            self.bytes_outstanding -= block.capacity
            if block.pooled:
                self._free.setdefault(block.capacity, []).append(block)
                self.bytes_held += block.capacity
            else:
                self.bytes_from_system -= block.capacity
        array._block = None

    def release_free(self) -> int:
        """Drop every free-listed block back to the system; returns bytes
        released.  Live arrays are unaffected."""
        with self._lock:
            return self._release_free_locked()

    def _release_free_locked(self) -> int:
        released = self.bytes_held
        self._free.clear()
        self.bytes_held = 0
        self.bytes_from_system -= released
        return released


def _normalize_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(d) for d in shape)
    if any(d < 0 for d in shape):
        raise ShapeMismatch(f"negative dimension in shape {shape}")
    return shape


# --- arrays -----------------------------------------------------------------


class NdArray:
    """A contiguous, typed, shaped buffer owned by a memory pool.

    Kernel drivers consume ``address`` and ``size`` (flat element count);
    host code moves values in and out with :func:`from_host` / ``to_host``.
    Arithmetic operators run generated C kernels and allocate their results
    from the same pool; operands must match in shape, and result dtypes
    follow :func:`promote` (Python int scalars adopt the array's dtype,
    Python float scalars behave as float64 operands).
    """

    __slots__ = ("dtype", "shape", "size", "nbytes", "pool", "_block", "_freed")

    def __init__(self, dtype: Dtype, shape: tuple[int, ...],
                 block: _Block | None, pool: MemoryPool) -> None:
        self.dtype = dtype
        self.shape = shape
        self.size = math.prod(shape)
        self.nbytes = self.size * dtype.size
        self.pool = pool
        self._block = block
        self._freed = False

    def _require_live(self) -> None:
        if self._freed:
            raise ValueError("array was freed")

    @property
    def address(self) -> int:
        self._require_live()
        return self._block.address if self._block is not None else 0

    def to_host(self) -> np.ndarray:
        """Copy out as a host array of the matching numpy dtype."""
        self._require_live()
        if self.size == 0:
            return np.empty(self.shape, dtype=self.dtype.np)
        flat = np.frombuffer(self._block.buffer, dtype=self.dtype.np,
                             count=self.size)
        return flat.reshape(self.shape).copy()

    def copy_from_host(self, values) -> None:
        """Fill from host values of exactly ``size`` elements."""
        self._require_live()
        host = np.ascontiguousarray(values, dtype=self.dtype.np)
        if host.size != self.size:
            raise LengthMismatch(
                f"host data has {host.size} elements, array holds {self.size}")
        if self.size == 0:
            return
        flat = np.frombuffer(self._block.buffer, dtype=self.dtype.np,
                             count=self.size)
        flat[:] = host.reshape(-1)

    def free(self) -> None:
        self.pool.free(self)

    def __repr__(self) -> str:
        state = " freed" if self._freed else ""
        return f"<NdArray {self.dtype.name} shape={self.shape}{state}>"

    # -- arithmetic sugar, kernels generated on demand --

    def _binop(self, other, op: str, reverse: bool):
        from . import elementwise
        return elementwise.array_binary_op(self, other, op, reverse)

    def __add__(self, other): return self._binop(other, "add", False)
    def __radd__(self, other): return self._binop(other, "add", True)
    def __sub__(self, other): return self._binop(other, "sub", False)
    def __rsub__(self, other): return self._binop(other, "sub", True)
    def __mul__(self, other): return self._binop(other, "mul", False)
    def __rmul__(self, other): return self._binop(other, "mul", True)
    def __truediv__(self, other): return self._binop(other, "div", False)
    def __rtruediv__(self, other): return self._binop(other, "div", True)


def from_host(pool: MemoryPool, dtype: Dtype, values) -> NdArray:
    """Allocate an array shaped like *values* and copy them in."""
    host = np.ascontiguousarray(values, dtype=dtype.np)
    array = pool.alloc(dtype, host.shape)
    array.copy_from_host(host)
    return array


def to_host(array: NdArray) -> np.ndarray:
    return array.to_host()


def free(array: NdArray) -> None:
    array.pool.free(array)


def zeros_like(array: NdArray) -> NdArray:
    return array.pool.alloc(array.dtype, array.shape)
