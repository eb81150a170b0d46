"""Generated reduction kernels: sums, extrema, inner products, and kin.

A reduction is described like an elementwise kernel plus three pieces of C:
a ``map_expr`` producing one value per index ``i``, a binary ``reduce_expr``
over ``a`` and ``b``, and a ``neutral`` literal that is the fold's identity.
The operator is assumed commutative and associative; floating-point folds
are therefore reproducible only for a fixed configuration, and worker count
or chunking changes may shift float results within rounding.

Execution is two-stage.  Stage 1 folds each worker's disjoint index range
into one partial, in ascending index order per worker, starting from the
neutral.  Stage 2 folds the live workers' partials in ascending worker
order on the host thread, through a second compiled entry point built from
the same ``reduce_expr`` (the combiner is arbitrary C, so it cannot run in
Python).  Fixed (n, workers, chunking, unroll) means a bitwise-identical
result on every run.

Accumulation happens in the out dtype, except that float32 reductions
accumulate in float64 and round once at the end; partial sums would
otherwise carry worker-count-sized rounding error into the result.
"""

from __future__ import annotations

import ctypes
import re
from dataclasses import dataclass

from . import csyntax as cs
from . import jit
from . import ndarray as nd
from .elementwise import (
    KernelSignature,
    ParseError,
    VariantParams,
    _INDEX_RE,
    _unpack_decls,
    build_arg_pack,
    parse_signature,
    run_ranges,
    worker_ranges,
)
from .ndarray import Dtype


class NonScalarResult(Exception):
    """The map/reduce expressions cannot produce one value per element/pair."""


_A_OR_B = re.compile(r"\b([ab])\b")


def _accumulator_dtype(out_dtype: Dtype) -> Dtype:
    return nd.float64 if out_dtype == nd.float32 else out_dtype


@dataclass(frozen=True)
class ReductionSpec:
    """What to fold: parameter signature, out dtype, and the three C pieces.

    ``map_expr`` defaults to the first vector parameter's element.  The
    neutral literal is interpreted by the C compiler, never by Python, so
    spellings like ``INT64_MIN`` or ``-INFINITY`` work as written.
    """

    signature: KernelSignature
    out_dtype: Dtype
    neutral: str
    reduce_expr: str
    map_expr: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.signature, str):
            object.__setattr__(self, "signature", parse_signature(self.signature))
        for p in self.signature.params:
            if p.name in ("acc", "out", "partials", "result"):
                raise ParseError(
                    f"parameter name {p.name!r} collides with reduction "
                    f"driver identifiers")
        found = {m.group(1) for m in _A_OR_B.finditer(self.reduce_expr)}
        if found != {"a", "b"}:
            raise NonScalarResult(
                "reduce_expr must combine both operands a and b")
        if not self.mapped.strip():
            raise NonScalarResult("map_expr must produce a value per element")

    @property
    def mapped(self) -> str:
        if self.map_expr is not None:
            return self.map_expr
        return f"{self.signature.vectors[0].name}[i]"

    @property
    def acc_dtype(self) -> Dtype:
        return _accumulator_dtype(self.out_dtype)


def _fold_statement(spec: ReductionSpec, offset_text: str) -> cs.Raw:
    mapped = _INDEX_RE.sub(offset_text, spec.mapped)
    combined = _A_OR_B.sub(
        lambda m: "acc" if m.group(1) == "a" else f"({mapped})",
        spec.reduce_expr)
    return cs.Raw(f"acc = {combined};")


def _fold_loop(spec: ReductionSpec, unroll: int, stride: int) -> list[cs.CNode]:
    # same shape as the elementwise loop pair: unrolled main walk plus a
    # remainder, one shared accumulator so the fold order never changes
    def at(j: int) -> str:
        step = j * stride
        return "i" if step == 0 else f"(i + {step})"

    plain = cs.Block((_fold_statement(spec, "i"),))
    step_text = f"i += {stride}" if stride > 1 else "++i"
    if unroll == 1:
        return [cs.For(init=cs.Decl(cs.CType("long"), "i", cs.Ident("start")),
                       cond=cs.BinOp("<", cs.Ident("i"), cs.Ident("end")),
                       step=cs.Raw(step_text), body=plain)]
    last = (unroll - 1) * stride
    return [
        cs.Decl(cs.CType("long"), "i", cs.Ident("start")),
        cs.For(init=None,
               cond=cs.BinOp("<", cs.BinOp("+", cs.Ident("i"), cs.Lit(str(last))),
                             cs.Ident("end")),
               step=cs.Raw(f"i += {unroll * stride}"),
               body=cs.Block(tuple(_fold_statement(spec, at(j))
                                   for j in range(unroll)))),
        cs.For(init=None, cond=cs.BinOp("<", cs.Ident("i"), cs.Ident("end")),
               step=cs.Raw(step_text), body=plain),
    ]


def generate_reduction_source(spec: ReductionSpec, name: str,
                              variant: VariantParams) -> str:
    """Emit stage-1 and combine entry points as one translation unit.

    ``name`` folds map_expr over [start, end) into ``partial_out[0]`` (the
    hidden trailing pack slot); ``name_combine`` folds an array of partials
    over [start, end) into a result slot.  Both start from the neutral.
    """
    variant = variant.resolved()
    stride = variant.workers if variant.chunking == "strided" else 1
    acc = spec.acc_dtype.cname
    params = spec.signature.params

    stage1_body: list[cs.CNode] = list(_unpack_decls(spec.signature))
    stage1_body.append(cs.Decl(cs.CType(acc, pointer=1), "partial_out",
                               cs.Raw(f"({acc} *) args[{len(params)}]")))
    stage1_body.append(cs.Decl(cs.CType(acc), "acc", cs.Raw(spec.neutral)))
    stage1_body.extend(_fold_loop(spec, variant.unroll, stride))
    stage1_body.append(cs.Assign(cs.Index(cs.Ident("partial_out"), cs.Lit("0")),
                                 cs.Ident("acc")))

    combine_fold = _A_OR_B.sub(
        lambda m: "acc" if m.group(1) == "a" else "partials[i]",
        spec.reduce_expr)
    combine_body: tuple[cs.CNode, ...] = (
        cs.Decl(cs.CType(acc, pointer=1, const=True), "partials",
                cs.Raw(f"(const {acc} *) args[0]")),
        cs.Decl(cs.CType(acc, pointer=1), "result",
                cs.Raw(f"({acc} *) args[1]")),
        cs.Decl(cs.CType(acc), "acc", cs.Raw(spec.neutral)),
        cs.For(init=cs.Decl(cs.CType("long"), "i", cs.Ident("start")),
               cond=cs.BinOp("<", cs.Ident("i"), cs.Ident("end")),
               step=cs.Raw("++i"),
               body=cs.Block((cs.Raw(f"acc = {combine_fold};"),))),
        cs.Assign(cs.Index(cs.Ident("result"), cs.Lit("0")), cs.Ident("acc")),
    )

    abi_params = (cs.Param(cs.CType("void", pointer=2), "args"),
                  cs.Param(cs.CType("long"), "start"),
                  cs.Param(cs.CType("long"), "end"))
    unit = cs.TranslationUnit((
        cs.Raw("#include <stdint.h>"),
        cs.Raw("#include <math.h>"),
        cs.FunctionDef(name, cs.CType("void"), abi_params,
                       cs.Block(tuple(stage1_body))),
        cs.FunctionDef(f"{name}_combine", cs.CType("void"), abi_params,
                       cs.Block(combine_body)),
    ))
    return cs.emit(unit)


class ReductionKernel:
    """A compiled two-stage reduction; call as ``kernel(args..., n=count)``.

    Returns a numpy scalar of the out dtype.  An empty span returns the
    neutral, evaluated by the compiled code itself.
    """

    def __init__(self, spec: ReductionSpec, name: str = "reduce",
                 variant: VariantParams | None = None,
                 *, config: jit.ToolchainConfig | None = None,
                 cache: jit.CacheStore | None = None,
                 debug: bool = False) -> None:
        self.spec = spec
        self.name = name
        self.variant = (variant or VariantParams()).resolved()
        self.source = generate_reduction_source(spec, name, self.variant)
        self.module = jit.compile(self.source, config, cache)
        self.stage1 = jit.get_kernel(self.module, name)
        self.combine = jit.get_kernel(self.module, f"{name}_combine")
        self._acc_ctype = nd.ctype_for(spec.acc_dtype)
        if debug:
            self._check_neutral()

    def __repr__(self) -> str:
        return (f"<ReductionKernel {self.name} [{self.spec.signature.render()}]"
                f" -> {self.spec.out_dtype.name}>")

    def _combine_partials(self, partials, count: int):
        result = self._acc_ctype()
        pack = (ctypes.c_void_p * 2)(ctypes.addressof(partials),
                                     ctypes.addressof(result))
        self.combine(pack, 0, count)
        return result.value

    def _check_neutral(self) -> None:
        # fold([v]) starts from the neutral, so it must give back v exactly
        # for values the accumulator type represents without rounding
        if self.spec.acc_dtype.kind == "f":
            samples = [0.0, 1.5, -2.25, 7.0]
        elif self.spec.acc_dtype.kind == "u":
            samples = [0, 1, 7, 200]
        else:
            samples = [0, 1, -3, 99]
        for value in samples:
            partials = (self._acc_ctype * 1)(value)
            folded = self._combine_partials(partials, 1)
            if folded != partials[0]:
                raise ValueError(
                    f"neutral {self.spec.neutral!r} is not an identity for "
                    f"{self.spec.reduce_expr!r}: fold([{value!r}]) gave "
                    f"{folded!r}")

    def __call__(self, *args, n: int | None = None):
        if n is not None and n < 0:
            raise nd.ShapeMismatch(f"n must be non-negative, got {n}")
        pack, keepalive, n = build_arg_pack(self.spec.signature, args, n,
                                            extra_slots=1,
                                            kernel_name=self.name)
        out_np = self.spec.out_dtype.np.type
        if n == 0:
            empty = (self._acc_ctype * 1)()
            return out_np(self._combine_partials(empty, 0))
        ranges = worker_ranges(n, self.variant)
        live = [(k, r) for k, r in enumerate(ranges) if r[0] < r[1]]
        acc_size = ctypes.sizeof(self._acc_ctype)
        partials = (self._acc_ctype * len(live))()
        base = list(pack)[:-1]
        tasks = []
        for slot, (_, (start, end)) in enumerate(live):
            wpack = (ctypes.c_void_p * len(pack))(
                *base, ctypes.addressof(partials) + slot * acc_size)
            tasks.append((wpack, start, end))
        run_ranges(self.stage1, tasks)
        del keepalive
        return out_np(self._combine_partials(partials, len(live)))


def make_reduction(signature, out_dtype: Dtype, neutral: str,
                   reduce_expr: str, map_expr: str | None = None,
                   name: str = "reduce",
                   variant: VariantParams | None = None,
                   **kwargs) -> ReductionKernel:
    """Build a reduction kernel from the raw spec pieces."""
    spec = ReductionSpec(signature, out_dtype, neutral, reduce_expr, map_expr)
    return ReductionKernel(spec, name, variant, **kwargs)


# --- stock reductions --------------------------------------------------------

_MIN_LITERAL = {
    "i": lambda d: f"INT{d.size * 8}_MIN",
    "u": lambda d: "0",
    "f": lambda d: "-INFINITY",
}
_MAX_LITERAL = {
    "i": lambda d: f"INT{d.size * 8}_MAX",
    "u": lambda d: f"UINT{d.size * 8}_MAX",
    "f": lambda d: "INFINITY",
}


def sum_kernel(dtype: Dtype, variant: VariantParams | None = None,
               **kwargs) -> ReductionKernel:
    return make_reduction(f"{dtype.cname} *x", dtype, "0", "a + b",
                          name="sum_k", variant=variant, **kwargs)


def max_kernel(dtype: Dtype, variant: VariantParams | None = None,
               **kwargs) -> ReductionKernel:
    neutral = _MIN_LITERAL[dtype.kind](dtype)
    return make_reduction(f"{dtype.cname} *x", dtype, neutral,
                          "a > b ? a : b", name="max_k", variant=variant,
                          **kwargs)


def min_kernel(dtype: Dtype, variant: VariantParams | None = None,
               **kwargs) -> ReductionKernel:
    neutral = _MAX_LITERAL[dtype.kind](dtype)
    return make_reduction(f"{dtype.cname} *x", dtype, neutral,
                          "a < b ? a : b", name="min_k", variant=variant,
                          **kwargs)


def dot_kernel(dtype: Dtype, variant: VariantParams | None = None,
               **kwargs) -> ReductionKernel:
    """Inner product over two same-dtype vectors."""
    return make_reduction(f"{dtype.cname} *x, {dtype.cname} *y", dtype, "0",
                          "a + b", map_expr="x[i] * y[i]", name="dot_k",
                          variant=variant, **kwargs)
