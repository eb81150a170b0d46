"""Generated elementwise kernels over pooled arrays.

A kernel is described by a C-style parameter signature ("float a, float *x,
float *z"), a C statement over those parameters and the index ``i``, and a
code variant (unroll depth, worker count, chunking).  The source is built as
a syntax tree, compiled through the caching JIT, and driven over ``[0, n)``
split across worker threads.

Every variant computes elements in the same per-element order, so results
are bit-exact across unroll/worker/chunking choices; variants differ only
in speed.
"""

from __future__ import annotations

import ctypes
import os
import re
import threading
from dataclasses import dataclass

import numpy as np

from . import csyntax as cs
from . import jit
from . import ndarray as nd
from .ndarray import DivisionByZero, Dtype, NdArray, ShapeMismatch

__all__ = [
    "KernelParam", "KernelSignature", "VariantParams", "ElementwiseKernel",
    "ParseError", "UnknownType", "ArityMismatch", "DtypeMismatch",
    "parse_signature", "generate", "make_elementwise",
    "make_elementwise_adaptive", "array_binary_op", "build_arg_pack",
    "run_ranges", "worker_ranges",
]


class ParseError(Exception):
    """Malformed signature text; ``position`` is the character offset."""

    def __init__(self, message: str, position: int = 0) -> None:
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class UnknownType(Exception):
    def __init__(self, name: str) -> None:
        super().__init__(f"unknown C element type {name!r}")
        self.name = name


class ArityMismatch(Exception):
    pass


class DtypeMismatch(Exception):
    def __init__(self, param: str, message: str) -> None:
        super().__init__(f"parameter {param!r}: {message}")
        self.param = param


# --- signatures -------------------------------------------------------------

# Friendly spellings accepted in signature text, beyond the canonical
# fixed-width names.  "long" assumes LP64, which the fixed kernel ABI
# (long start/end) already requires.
_TYPE_ALIASES = {
    "short": nd.int16,
    "int": nd.int32,
    "long": nd.int64,
    **nd.BY_CNAME,
}

# "n" is the conventional element-count name at call sites, the rest would
# collide with identifiers the generated kernel already uses.
RESERVED_NAMES = frozenset({"i", "n", "args", "start", "end"})

_PARAM_RE = re.compile(
    r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*(\*?)\s*([A-Za-z_][A-Za-z0-9_]*)\s*\Z")


@dataclass(frozen=True)
class KernelParam:
    name: str
    dtype: Dtype
    is_vector: bool

    def render(self) -> str:
        star = "*" if self.is_vector else ""
        return f"{self.dtype.cname} {star}{self.name}"


@dataclass(frozen=True)
class KernelSignature:
    params: tuple[KernelParam, ...]

    def render(self) -> str:
        return ", ".join(p.render() for p in self.params)

    @property
    def vectors(self) -> tuple[KernelParam, ...]:
        return tuple(p for p in self.params if p.is_vector)


def parse_signature(text: str) -> KernelSignature:
    """Parse "ctype [*]name, ..." into a :class:`KernelSignature`.

    Element types are the fixed-width names plus short/int/long/float/double.
    Parameter names must be unique, non-reserved C identifiers, and at least
    one parameter must be a vector.
    """
    params: list[KernelParam] = []
    seen: set[str] = set()
    offset = 0
    for piece in text.split(","):
        if not piece.strip() and not params and text.strip() == "":
            break
        m = _PARAM_RE.match(piece)
        if m is None:
            raise ParseError(f"cannot parse parameter {piece.strip()!r}",
                             position=offset)
        ctype, star, name = m.groups()
        if ctype not in _TYPE_ALIASES:
            raise UnknownType(ctype)
        if name in RESERVED_NAMES:
            raise ParseError(f"parameter name {name!r} is reserved",
                             position=offset)
        if name in seen:
            raise ParseError(f"duplicate parameter name {name!r}",
                             position=offset)
        seen.add(name)
        params.append(KernelParam(name, _TYPE_ALIASES[ctype], star == "*"))
        offset += len(piece) + 1
    if not any(p.is_vector for p in params):
        raise ParseError("signature has no vector parameter")
    return KernelSignature(tuple(params))


# --- variants ---------------------------------------------------------------

UNROLL_CANDIDATES = (1, 2, 4, 8, 16)
CHUNKINGS = ("contiguous-blocks", "strided")


def _cores() -> int:
    return os.cpu_count() or 1


@dataclass(frozen=True)
class VariantParams:
    """One point in the code-variant space.

    ``workers=None`` means "logical core count, resolved at kernel build
    time".  ``chunking`` picks how [0, n) maps onto workers: contiguous
    blocks, or an interleaved stride equal to the worker count (the stride
    is baked into the generated source as a constant).
    """

    unroll: int = 4
    workers: int | None = None
    chunking: str = "contiguous-blocks"

    def __post_init__(self) -> None:
        if self.unroll not in UNROLL_CANDIDATES:
            raise ValueError(
                f"unroll must be one of {UNROLL_CANDIDATES}, got {self.unroll}")
        if self.workers is not None and not (
                1 <= self.workers <= _cores() * 4):
            raise ValueError(
                f"workers must be in [1, {_cores() * 4}], got {self.workers}")
        if self.chunking not in CHUNKINGS:
            raise ValueError(
                f"chunking must be one of {CHUNKINGS}, got {self.chunking!r}")

    def resolved(self) -> "VariantParams":
        if self.workers is not None:
            return self
        return VariantParams(self.unroll, _cores(), self.chunking)


# --- source generation ------------------------------------------------------

_WIDE_CNAME = {"i": "int64_t", "u": "uint64_t", "f": "double"}

_INDEX_RE = re.compile(r"\bi\b")


def _normalize_operation(operation: str) -> str:
    op = operation.strip()
    if not op.endswith(";"):
        op += ";"
    return op


def _op_statement(operation: str, offset_text: str) -> cs.Raw:
    body = _INDEX_RE.sub(offset_text, operation)
    # multi-statement snippets get their own scope so unrolled copies of a
    # local declaration cannot collide
    if body.rstrip(";").count(";") > 0:
        body = "{ " + body + " }"
    return cs.Raw(body)


def _unpack_decls(sig: KernelSignature) -> list[cs.CNode]:
    decls: list[cs.CNode] = []
    for k, p in enumerate(sig.params):
        if p.is_vector:
            decls.append(cs.Decl(cs.CType(p.dtype.cname, pointer=1), p.name,
                                 cs.Raw(f"({p.dtype.cname} *) args[{k}]")))
        else:
            wide = _WIDE_CNAME[p.dtype.kind]
            decls.append(cs.Decl(cs.CType(p.dtype.cname), p.name,
                                 cs.Raw(f"({p.dtype.cname}) "
                                        f"*(const {wide} *) args[{k}]")))
    return decls


def _loop_nodes(operation: str, unroll: int, stride: int) -> list[cs.CNode]:
    """Main loop (optionally unrolled) plus remainder; both walk the same
    per-element order, so unroll never changes results."""

    def at(j: int) -> str:
        step = j * stride
        return "i" if step == 0 else f"(i + {step})"

    plain_body = cs.Block((_op_statement(operation, "i"),))
    step_text = f"i += {stride}" if stride > 1 else "++i"
    if unroll == 1:
        return [cs.For(init=cs.Decl(cs.CType("long"), "i", cs.Ident("start")),
                       cond=cs.BinOp("<", cs.Ident("i"), cs.Ident("end")),
                       step=cs.Raw(step_text), body=plain_body)]
    # the unrolled block covers offsets i, i+stride, ..., i+(unroll-1)*stride
    last = (unroll - 1) * stride
    return [
        cs.Decl(cs.CType("long"), "i", cs.Ident("start")),
        cs.For(init=None,
               cond=cs.BinOp("<", cs.BinOp("+", cs.Ident("i"), cs.Lit(str(last))),
                             cs.Ident("end")),
               step=cs.Raw(f"i += {unroll * stride}"),
               body=cs.Block(tuple(_op_statement(operation, at(j))
                                   for j in range(unroll)))),
        cs.For(init=None,
               cond=cs.BinOp("<", cs.Ident("i"), cs.Ident("end")),
               step=cs.Raw(step_text), body=plain_body),
    ]


def generate(sig: KernelSignature, operation: str, name: str,
             variant: VariantParams) -> str:
    """Emit the C source of one elementwise kernel variant.

    The kernel follows the fixed ABI ``void name(void **args, long start,
    long end)``; scalars are fetched from 8-byte widened slots, vectors
    straight from their buffer pointers.
    """
    variant = variant.resolved()
    stride = variant.workers if variant.chunking == "strided" else 1
    body: list[cs.CNode] = []
    body.extend(_unpack_decls(sig))
    body.extend(_loop_nodes(_normalize_operation(operation),
                            variant.unroll, stride))
    fn = cs.FunctionDef(
        name=name,
        return_type=cs.CType("void"),
        params=(cs.Param(cs.CType("void", pointer=2), "args"),
                cs.Param(cs.CType("long"), "start"),
                cs.Param(cs.CType("long"), "end")),
        body=cs.Block(tuple(body)),
    )
    return cs.emit(cs.TranslationUnit((cs.Raw("#include <stdint.h>"), fn)))


# --- execution --------------------------------------------------------------


def run_ranges(handle: jit.KernelHandle, tasks) -> None:
    """Run (pack, start, end) tasks, one worker thread per task.

    Empty ranges are skipped; a single task runs on the calling thread.
    ctypes releases the GIL around kernel calls, so tasks overlap for real.
    """
    live = [(pack, start, end) for pack, start, end in tasks if start < end]
    if not live:
        return
    if len(live) == 1:
        pack, start, end = live[0]
        handle(pack, start, end)
        return
    failures: list[BaseException] = []

    def run(pack, start, end):
        try:
            handle(pack, start, end)
        except BaseException as exc:  # surfaced after join
            failures.append(exc)

    threads = [threading.Thread(target=run, args=task) for task in live]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise failures[0]


def worker_ranges(n: int, variant: VariantParams) -> list[tuple[int, int]]:
    """Disjoint [start, end) index ranges covering [0, n), one per worker."""
    w = variant.workers
    if variant.chunking == "strided":
        # worker k owns indices k, k+w, k+2w, ...; the stride is baked into
        # the kernel source, here we only pick each worker's first index
        return [(k, n) for k in range(w)]
    return [(k * n // w, (k + 1) * n // w) for k in range(w)]


def _scalar_slot(value, dtype: Dtype):
    if dtype.kind == "f":
        return ctypes.c_double(float(value))
    if dtype.kind == "u":
        return ctypes.c_uint64(int(value) & 0xFFFFFFFFFFFFFFFF)
    return ctypes.c_int64(int(value))


def build_arg_pack(signature: KernelSignature, args, n: int | None,
                   extra_slots: int = 0, kernel_name: str = "kernel"):
    """Marshal call arguments into a fixed-ABI argument pack.

    Vector arguments contribute their buffer address, scalars the address
    of an 8-byte widened staging value.  Returns (pack, keepalive, n) where
    keepalive must stay referenced for the duration of the kernel call and
    n was validated against (or inferred from) the vector arguments.
    ``extra_slots`` reserves trailing pack slots for driver-owned pointers.
    """
    params = signature.params
    if len(args) != len(params):
        raise ArityMismatch(
            f"kernel {kernel_name} takes {len(params)} arguments, "
            f"got {len(args)}")
    pack = (ctypes.c_void_p * (len(params) + extra_slots))()
    keepalive = []
    for k, (param, arg) in enumerate(zip(params, args)):
        if param.is_vector:
            if not isinstance(arg, NdArray):
                raise DtypeMismatch(
                    param.name, f"expected an NdArray, got {type(arg).__name__}")
            if arg.dtype != param.dtype:
                raise DtypeMismatch(
                    param.name, f"expected dtype {param.dtype.name}, "
                    f"got {arg.dtype.name}")
            if n is None:
                n = arg.size
            if arg.size < n:
                raise ShapeMismatch(
                    f"vector {param.name!r} holds {arg.size} elements, "
                    f"kernel span is {n}")
            pack[k] = arg.address
        else:
            if isinstance(arg, NdArray):
                raise DtypeMismatch(
                    param.name, "expected a scalar, got an NdArray")
            slot = _scalar_slot(arg, param.dtype)
            keepalive.append(slot)
            pack[k] = ctypes.addressof(slot)
    if n is None:
        raise ArityMismatch("cannot infer n: no vector arguments")
    return pack, keepalive, n


class ElementwiseKernel:
    """A compiled elementwise kernel bound to one code variant.

    Immutable after construction; one kernel object may be invoked from
    several threads at once.  Call as ``kernel(arg, ..., n=count)``; ``n``
    defaults to the first vector argument's element count.
    """

    def __init__(self, signature: KernelSignature | str, operation: str,
                 name: str = "kernel", variant: VariantParams | None = None,
                 *, config: jit.ToolchainConfig | None = None,
                 cache: jit.CacheStore | None = None,
                 result_dtype: Dtype | None = None) -> None:
        if isinstance(signature, str):
            signature = parse_signature(signature)
        self.signature = signature
        self.operation = _normalize_operation(operation)
        self.name = name
        self.variant = (variant or VariantParams()).resolved()
        self.result_dtype = result_dtype
        self.source = generate(signature, operation, name, self.variant)
        self.module = jit.compile(self.source, config, cache)
        self.handle = jit.get_kernel(self.module, name)

    def __repr__(self) -> str:
        return (f"<ElementwiseKernel {self.name} [{self.signature.render()}] "
                f"unroll={self.variant.unroll} workers={self.variant.workers} "
                f"chunking={self.variant.chunking}>")

    def __call__(self, *args, n: int | None = None) -> None:
        if n is not None and n < 0:
            raise ShapeMismatch(f"n must be non-negative, got {n}")
        pack, keepalive, n = build_arg_pack(self.signature, args, n,
                                            kernel_name=self.name)
        if n == 0:
            return
        tasks = [(pack, start, end)
                 for start, end in worker_ranges(n, self.variant)]
        run_ranges(self.handle, tasks)
        del keepalive


def make_elementwise(signature: KernelSignature | str, operation: str,
                     name: str = "kernel",
                     variant: VariantParams | None = None,
                     **kwargs) -> ElementwiseKernel:
    """Build (or fetch from cache) one elementwise kernel.

    ``variant`` pins the code variant; by default unroll=4 with one worker
    per logical core.  For empirically chosen variants, see
    :func:`rtcg.autotune.tune_elementwise`.
    """
    return ElementwiseKernel(signature, operation, name, variant, **kwargs)


# --- dtype-adaptive construction --------------------------------------------

_adaptive_lock = threading.Lock()
_adaptive_memo: dict[tuple, ElementwiseKernel] = {}
adaptive_generations = 0


def _scalar_dtype_of(value) -> Dtype:
    if isinstance(value, NdArray):
        raise TypeError("expected a scalar")
    if isinstance(value, np.generic):
        name = np.dtype(type(value)).name
        if name in nd.BY_NAME:
            return nd.BY_NAME[name]
    if isinstance(value, float):
        return nd.float64
    return nd.int64


def make_elementwise_adaptive(arg_arrays, operation_template: str,
                              name: str = "kernel",
                              variant: VariantParams | None = None,
                              **kwargs) -> ElementwiseKernel:
    """Build a kernel whose parameter types come from live argument values.

    ``arg_arrays`` is an ordered mapping (or list of pairs) of name to
    argument: arrays contribute vector parameters of their own dtype, plain
    scalars contribute scalar parameters.  The synthesized signature gains a
    trailing vector parameter ``out`` whose dtype defaults to the first
    array argument's dtype; scalar parameters adopt that dtype as well.
    ``operation_template`` is C text over the argument names, ``out``, and
    ``i``, e.g. ``"out[i] = a * x[i] + b * y[i]"``.

    One kernel is generated and compiled per distinct dtype combination;
    repeats are served from an in-process memo (and the on-disk compile
    cache below it).
    """
    global adaptive_generations
    items = list(arg_arrays.items()) if isinstance(arg_arrays, dict) \
        else list(arg_arrays)
    result_dtype: Dtype | None = None
    params: list[KernelParam] = []
    seen: set[str] = set()
    for pname, value in items:
        if (not pname.isidentifier() or pname in RESERVED_NAMES
                or pname == "out" or pname in seen):
            raise ParseError(f"bad adaptive parameter name {pname!r}")
        seen.add(pname)
        if isinstance(value, NdArray):
            if result_dtype is None:
                result_dtype = value.dtype
            params.append(KernelParam(pname, value.dtype, True))
        else:
            params.append((pname, value))  # dtype filled once result known
    if result_dtype is None:
        raise ParseError("adaptive construction needs at least one array")
    params = [p if isinstance(p, KernelParam)
              else KernelParam(p[0], result_dtype, False) for p in params]
    params.append(KernelParam("out", result_dtype, True))
    sig = KernelSignature(tuple(params))

    key = (name, operation_template,
           tuple((p.name, p.dtype.name, p.is_vector) for p in sig.params),
           (variant or VariantParams()).resolved())
    with _adaptive_lock:
        kernel = _adaptive_memo.get(key)
    if kernel is not None:
        return kernel
    kernel = ElementwiseKernel(sig, operation_template, name, variant,
                               result_dtype=result_dtype, **kwargs)
    with _adaptive_lock:
        adaptive_generations += 1
        _adaptive_memo[key] = kernel
    return kernel


# --- operator support for NdArray -------------------------------------------

_OP_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/"}

_op_lock = threading.Lock()
_op_memo: dict[tuple, ElementwiseKernel] = {}


def clear_kernel_memos() -> None:
    """Forget memoized operator/adaptive kernels (test hook)."""
    global adaptive_generations
    with _op_lock:
        _op_memo.clear()
    with _adaptive_lock:
        _adaptive_memo.clear()
        adaptive_generations = 0


def _op_kernel(key, build) -> ElementwiseKernel:
    with _op_lock:
        kernel = _op_memo.get(key)
    if kernel is None:
        kernel = build()
        with _op_lock:
            _op_memo[key] = kernel
    return kernel


def array_binary_op(array: NdArray, other, op: str, reverse: bool) -> NdArray:
    """z = x OP other (or other OP x when reversed), via a generated kernel.

    One kernel per (op, operand dtypes, orientation) is generated and then
    reused for the process lifetime.  Operand values are cast to the
    promoted result dtype before combining, so mixed-dtype arithmetic keeps
    the precision the promotion table promises.
    """
    symbol = _OP_SYMBOL[op]
    if isinstance(other, NdArray):
        if other.shape != array.shape:
            raise ShapeMismatch(
                f"operand shapes differ: {array.shape} vs {other.shape}")
        a, b = (other, array) if reverse else (array, other)
        rt = nd.promote(a.dtype, b.dtype)
        key = (op, "vv", a.dtype.name, b.dtype.name)
        kernel = _op_kernel(key, lambda: ElementwiseKernel(
            KernelSignature((
                KernelParam("x", a.dtype, True),
                KernelParam("y", b.dtype, True),
                KernelParam("z", rt, True),
            )),
            f"z[i] = ({rt.cname}) x[i] {symbol} ({rt.cname}) y[i]",
            name=f"ew_{op}_vv"))
        out = array.pool.alloc(rt, array.shape)
        kernel(a, b, out, n=array.size)
        return out

    sd = _scalar_dtype_of(other)
    if sd == nd.int64 and not isinstance(other, np.generic):
        # plain Python ints adopt the array's dtype instead of forcing a
        # 64-bit promotion
        sd = array.dtype
    rt = nd.promote(array.dtype, sd)
    if op == "div" and rt.kind != "f" and not reverse and int(other) == 0:
        raise DivisionByZero("integer division by scalar zero")
    expr = (f"z[i] = ({rt.cname}) s {symbol} ({rt.cname}) x[i]" if reverse
            else f"z[i] = ({rt.cname}) x[i] {symbol} ({rt.cname}) s")
    key = (op, "vs", array.dtype.name, sd.name, reverse)
    kernel = _op_kernel(key, lambda: ElementwiseKernel(
        KernelSignature((
            KernelParam("s", sd, False),
            KernelParam("x", array.dtype, True),
            KernelParam("z", rt, True),
        )),
        expr, name=f"ew_{op}_{'sv' if reverse else 'vs'}"))
    out = array.pool.alloc(rt, array.shape)
    kernel(other, array, out, n=array.size)
    return out
