"""C source construction: placeholders, a small template language, and a syntax tree.

Three ways to produce kernel source, in increasing order of structure:

* :func:`substitute` fills ``${name}`` placeholders in otherwise literal text.
* :func:`render` adds ``{% for v in a..b %}`` and ``{% if cond %}`` blocks on
  top of placeholder substitution.
* :func:`emit` walks a tree of :class:`CNode` values and prints C text.

All three are pure functions of their inputs: the same input always yields the
same bytes, so emitted source is safe to hash for compilation caching.
"""

from __future__ import annotations

import re
from dataclasses import dataclass


class TemplateError(Exception):
    """Base for text-template failures."""


class MalformedPlaceholder(TemplateError):
    """A ``${`` marker is unterminated or does not wrap an identifier."""


class UnboundPlaceholder(TemplateError):
    def __init__(self, name: str) -> None:
        super().__init__(f"placeholder ${{{name}}} has no binding")
        self.name = name


class UnboundVariable(TemplateError):
    def __init__(self, name: str) -> None:
        super().__init__(f"template variable {name!r} is not defined")
        self.name = name


class NonIntegerBound(TemplateError):
    """A loop bound did not resolve to an integer."""


class UnclosedBlock(TemplateError):
    """A ``{% for %}`` or ``{% if %}`` block is unterminated or mismatched."""


class IllFormedTree(Exception):
    """A CNode appears in a position where its kind is not allowed.

    ``path`` names the offending node, e.g.
    ``translation-unit/function-def[vadd]/block/stmt[2]``.
    """

    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def _text(value: object) -> str:
    # C-flavored spelling for booleans; everything else via str().
    if value is True:
        return "true"
    if value is False:
        return "false"
    return str(value)


def substitute(template: str, bindings: dict[str, object]) -> str:
    """Replace every ``${name}`` in *template* with ``bindings[name]``.

    Bytes outside placeholders are passed through untouched; in particular
    ``{% ... %}`` block markers are not interpreted here.  A missing binding
    raises :class:`UnboundPlaceholder`; an unterminated ``${`` or a
    non-identifier placeholder body raises :class:`MalformedPlaceholder`.
    """
    out: list[str] = []
    pos = 0
    while True:
        start = template.find("${", pos)
        if start < 0:
            out.append(template[pos:])
            return "".join(out)
        out.append(template[pos:start])
        end = template.find("}", start + 2)
        if end < 0:
            raise MalformedPlaceholder(
                f"unterminated placeholder at offset {start}"
            )
        name = template[start + 2 : end]
        if not _IDENT.match(name):
            raise MalformedPlaceholder(
                f"placeholder body {name!r} at offset {start} is not an identifier"
            )
        if name not in bindings:
            raise UnboundPlaceholder(name)
        out.append(_text(bindings[name]))
        pos = end + 1


# --- minimal template language ---------------------------------------------
#
# Grammar, on top of ${name} substitution:
#
#   {% for v in a..b %} body {% endfor %}     a..b is the half-open range [a, b)
#   {% if cond %} body {% endif %}            cond: true | false | variable
#
# Bounds are integer literals or variables; blocks nest arbitrarily.

_TOKEN = re.compile(r"\{%\s*(.*?)\s*%\}", re.DOTALL)


@dataclass(frozen=True)
class _Piece:
    kind: str  # "text" | "tag"
    value: str


def _tokenize(template: str) -> list[_Piece]:
    pieces = []
    pos = 0
    for m in _TOKEN.finditer(template):
        if m.start() > pos:
            pieces.append(_Piece("text", template[pos : m.start()]))
        pieces.append(_Piece("tag", m.group(1)))
        pos = m.end()
    if pos < len(template):
        pieces.append(_Piece("text", template[pos:]))
    return pieces


_FOR_TAG = re.compile(
    r"for\s+([A-Za-z_][A-Za-z0-9_]*)\s+in\s+(-?\w+)\s*\.\.\s*(-?\w+)\Z"
)
_IF_TAG = re.compile(r"if\s+(\S+)\Z")


def _parse_blocks(pieces: list[_Piece], start: int, closer: str | None):
    """Parse pieces[start:] until the matching end tag; return (nodes, next)."""
    nodes: list[tuple] = []
    i = start
    while i < len(pieces):
        piece = pieces[i]
        if piece.kind == "text":
            nodes.append(("text", piece.value))
            i += 1
            continue
        tag = piece.value
        if tag in ("endfor", "endif"):
            if closer != tag:
                raise UnclosedBlock(f"unexpected {{% {tag} %}}")
            return nodes, i + 1
        m = _FOR_TAG.match(tag)
        if m:
            body, i = _parse_blocks(pieces, i + 1, "endfor")
            nodes.append(("for", m.group(1), m.group(2), m.group(3), body))
            continue
        m = _IF_TAG.match(tag)
        if m:
            body, i = _parse_blocks(pieces, i + 1, "endif")
            nodes.append(("if", m.group(1), body))
            continue
        raise UnclosedBlock(f"malformed block tag {{% {tag} %}}")
    if closer is not None:
        raise UnclosedBlock(f"missing {{% {closer} %}}")
    return nodes, i


def _bound(token: str, env: dict[str, object]) -> int:
    try:
        return int(token)
    except ValueError:
        pass
    if token not in env:
        raise UnboundVariable(token)
    value = env[token]
    if isinstance(value, bool) or not isinstance(value, int):
        raise NonIntegerBound(f"loop bound {token!r} is {value!r}, not an integer")
    return value


def _condition(token: str, env: dict[str, object]) -> bool:
    if token == "true":
        return True
    if token == "false":
        return False
    if token not in env:
        raise UnboundVariable(token)
    return bool(env[token])


def _eval_blocks(nodes: list[tuple], env: dict[str, object], out: list[str]) -> None:
    for node in nodes:
        kind = node[0]
        if kind == "text":
            out.append(_substitute_env(node[1], env))
        elif kind == "for":
            _, var, lo_tok, hi_tok, body = node
            lo = _bound(lo_tok, env)
            hi = _bound(hi_tok, env)
            for value in range(lo, hi):
                _eval_blocks(body, {**env, var: value}, out)
        else:  # "if"
            _, cond, body = node
            if _condition(cond, env):
                _eval_blocks(body, env, out)


def _substitute_env(text: str, env: dict[str, object]) -> str:
    try:
        return substitute(text, env)
    except UnboundPlaceholder as exc:
        raise UnboundVariable(exc.name) from None


def render(template: str, context: dict[str, object] | None = None) -> str:
    """Expand block markers and placeholders against *context*.

    ``{% for v in a..b %}`` iterates the half-open integer range [a, b) with
    ``v`` visible to placeholders and nested bounds; ``{% if cond %}`` keeps its
    body when the condition (a ``true``/``false`` literal or a context
    variable, by truth value) holds.  Referencing an undefined variable raises
    :class:`UnboundVariable` even if the surrounding block is never taken at
    a different binding; bounds that are not integers raise
    :class:`NonIntegerBound`; unterminated or mismatched blocks raise
    :class:`UnclosedBlock`.
    """
    env = dict(context or {})
    nodes, _ = _parse_blocks(_tokenize(template), 0, None)
    out: list[str] = []
    _eval_blocks(nodes, env, out)
    return "".join(out)


# --- C syntax tree ----------------------------------------------------------


@dataclass(frozen=True)
class CType:
    """A scalar C type, possibly behind pointers: base, pointer depth, const."""

    base: str
    pointer: int = 0
    const: bool = False

    def render(self) -> str:
        text = f"const {self.base}" if self.const else self.base
        if self.pointer:
            text += " " + "*" * self.pointer
        return text

    def render_declarator(self, name: str) -> str:
        if self.pointer:
            return f"{self.render()}{name}"
        return f"{self.render()} {name}"


class CNode:
    """Base of all syntax-tree nodes."""

    __slots__ = ()


@dataclass(frozen=True)
class Raw(CNode):
    """Escape hatch: verbatim text, usable in statement or expression position."""

    text: str


@dataclass(frozen=True)
class Lit(CNode):
    text: str

    def __post_init__(self):
        # accept ints for convenience; store canonical text
        if isinstance(self.text, int):
            object.__setattr__(self, "text", str(self.text))


@dataclass(frozen=True)
class Ident(CNode):
    name: str


@dataclass(frozen=True)
class Index(CNode):
    base: CNode
    index: CNode


@dataclass(frozen=True)
class BinOp(CNode):
    op: str
    left: CNode
    right: CNode


@dataclass(frozen=True)
class Call(CNode):
    func: str
    args: tuple[CNode, ...] = ()


@dataclass(frozen=True)
class Assign(CNode):
    target: CNode
    value: CNode
    op: str = "="


@dataclass(frozen=True)
class Decl(CNode):
    ctype: CType
    name: str
    init: CNode | None = None


@dataclass(frozen=True)
class Block(CNode):
    stmts: tuple[CNode, ...] = ()


@dataclass(frozen=True)
class For(CNode):
    """A general C for loop; any of init/cond/step may be omitted."""

    init: CNode | None
    cond: CNode | None
    step: CNode | None
    body: Block


@dataclass(frozen=True)
class If(CNode):
    cond: CNode
    then: Block
    orelse: Block | None = None


@dataclass(frozen=True)
class Param(CNode):
    ctype: CType
    name: str


@dataclass(frozen=True)
class FunctionDef(CNode):
    name: str
    return_type: CType
    params: tuple[Param, ...]
    body: Block


@dataclass(frozen=True)
class TranslationUnit(CNode):
    items: tuple[CNode, ...] = ()


def counted_for(var: str, start: CNode, stop: CNode, body: Block,
                ctype: str = "int") -> For:
    """The common counted loop: ``for (<ctype> var = start; var < stop; ++var)``."""
    return For(
        init=Decl(CType(ctype), var, start),
        cond=BinOp("<", Ident(var), stop),
        step=Raw(f"++{var}"),
        body=body,
    )


_EXPR_KINDS = (Raw, Lit, Ident, Index, BinOp, Call)
_STMT_KINDS = (Raw, Assign, Decl, Call, For, If, Block)

_INDENT = "    "


class _Emitter:
    """Single emission path for every node kind; 4-space indent, one
    statement per line, deterministic output bytes."""

    def __init__(self) -> None:
        self.lines: list[str] = []

    # -- expressions --

    def expr(self, node: CNode, path: str) -> str:
        if not isinstance(node, _EXPR_KINDS):
            raise IllFormedTree(path, f"{_kind(node)} is not an expression")
        if isinstance(node, Raw):
            return node.text
        if isinstance(node, Lit):
            return node.text
        if isinstance(node, Ident):
            return node.name
        if isinstance(node, Index):
            base = self.expr(node.base, path + "/index-base")
            idx = self.expr(node.index, path + "/index")
            return f"{base}[{idx}]"
        if isinstance(node, Call):
            args = ", ".join(
                self.expr(a, f"{path}/arg[{k}]") for k, a in enumerate(node.args)
            )
            return f"{node.func}({args})"
        # BinOp: parenthesize operand sub-expressions that are themselves
        # binary, so emitted precedence never depends on C's.
        left = self.expr(node.left, path + "/left")
        right = self.expr(node.right, path + "/right")
        if isinstance(node.left, BinOp):
            left = f"({left})"
        if isinstance(node.right, BinOp):
            right = f"({right})"
        return f"{left} {node.op} {right}"

    # -- statements --

    def stmt(self, node: CNode, depth: int, path: str) -> None:
        pad = _INDENT * depth
        if not isinstance(node, _STMT_KINDS):
            raise IllFormedTree(path, f"{_kind(node)} is not a statement")
        if isinstance(node, Raw):
            for line in node.text.splitlines():
                self.lines.append(pad + line if line else line)
        elif isinstance(node, Assign):
            target = self.expr(node.target, path + "/target")
            value = self.expr(node.value, path + "/value")
            self.lines.append(f"{pad}{target} {node.op} {value};")
        elif isinstance(node, Decl):
            self.lines.append(pad + self._decl_text(node, path))
        elif isinstance(node, Call):
            self.lines.append(pad + self.expr(node, path) + ";")
        elif isinstance(node, Block):
            self.block(node, depth, path)
        elif isinstance(node, For):
            init = "" if node.init is None else self._for_init(node.init, path)
            cond = "" if node.cond is None else self.expr(node.cond, path + "/cond")
            step = "" if node.step is None else self.expr(node.step, path + "/step")
            self.lines.append(f"{pad}for ({init}; {cond}; {step}) {{")
            self.block(node.body, depth + 1, path + "/body")
            self.lines.append(pad + "}")
        else:  # If
            cond = self.expr(node.cond, path + "/cond")
            self.lines.append(f"{pad}if ({cond}) {{")
            self.block(node.then, depth + 1, path + "/then")
            if node.orelse is not None:
                self.lines.append(pad + "} else {")
                self.block(node.orelse, depth + 1, path + "/else")
            self.lines.append(pad + "}")

    def _decl_text(self, node: Decl, path: str) -> str:
        text = node.ctype.render_declarator(node.name)
        if node.init is not None:
            text += " = " + self.expr(node.init, path + "/init")
        return text + ";"

    def _for_init(self, node: CNode, path: str) -> str:
        # a for-loop init is a declaration or expression without the ';'
        if isinstance(node, Decl):
            return self._decl_text(node, path + "/init")[:-1]
        return self.expr(node, path + "/init")

    def block(self, node: CNode, depth: int, path: str) -> None:
        if not isinstance(node, Block):
            raise IllFormedTree(path, f"expected block, got {_kind(node)}")
        for k, stmt in enumerate(node.stmts):
            self.stmt(stmt, depth, f"{path}/stmt[{k}]")

    # -- top level --

    def unit(self, node: CNode) -> None:
        path = "translation-unit"
        if not isinstance(node, TranslationUnit):
            raise IllFormedTree(path, f"expected translation unit, got {_kind(node)}")
        first = True
        for item in node.items:
            if isinstance(item, FunctionDef):
                if not first:
                    self.lines.append("")
                self.function(item, f"{path}/function-def[{item.name}]")
            elif isinstance(item, (Raw, Decl)):
                self.stmt(item, 0, f"{path}/item")
            else:
                raise IllFormedTree(
                    path, f"{_kind(item)} is not allowed at file scope"
                )
            first = False

    def function(self, node: FunctionDef, path: str) -> None:
        params = ", ".join(
            p.ctype.render_declarator(p.name) if isinstance(p, Param)
            else _ill(f"{path}/param[{k}]", "expected parameter")
            for k, p in enumerate(node.params)
        )
        self.lines.append(f"{node.return_type.render()} {node.name}({params})")
        self.lines.append("{")
        self.block(node.body, 1, path + "/block")
        self.lines.append("}")


def _ill(path: str, reason: str):
    raise IllFormedTree(path, reason)


def _kind(node: object) -> str:
    return type(node).__name__


def emit(root: CNode) -> str:
    """Print a syntax tree as C source text.

    Accepts a :class:`TranslationUnit`, a bare :class:`FunctionDef`, or any
    statement/expression node (handy in tests).  Trees with a node in an
    illegal position raise :class:`IllFormedTree` naming the path to the
    offending node.  Output is deterministic byte-for-byte.
    """
    emitter = _Emitter()
    if isinstance(root, TranslationUnit):
        emitter.unit(root)
    elif isinstance(root, FunctionDef):
        emitter.function(root, f"function-def[{root.name}]")
    elif isinstance(root, _STMT_KINDS):
        emitter.stmt(root, 0, _kind(root).lower())
    elif isinstance(root, _EXPR_KINDS):
        return emitter.expr(root, _kind(root).lower())
    else:
        raise IllFormedTree("root", f"{_kind(root)} is not a CNode")
    return "\n".join(emitter.lines) + "\n"


# --- unrolled vector addition, both generation strategies -------------------

UNROLLED_ADD_TEMPLATE = """\
#include <stdint.h>

void ${name}(void **args, long start, long end)
{
    ${ctype} *x = (${ctype} *) args[0];
    ${ctype} *y = (${ctype} *) args[1];
    ${ctype} *z = (${ctype} *) args[2];
    long i = start;
{% if unrolled %}    for (; i + ${unroll} <= end; i += ${unroll}) {
{% for j in 0..unroll %}        z[i + ${j}] = x[i + ${j}] + y[i + ${j}];
{% endfor %}    }
{% endif %}    for (; i < end; ++i) {
        z[i] = x[i] + y[i];
    }
}
"""


def unrolled_add_template(unroll: int, ctype: str = "float",
                          name: str = "vadd_unrolled") -> str:
    """Unrolled vector addition rendered from the template language."""
    if unroll < 1:
        raise ValueError("unroll must be at least 1")
    return render(UNROLLED_ADD_TEMPLATE, {
        "name": name,
        "ctype": ctype,
        "unroll": unroll,
        "unrolled": unroll > 1,
    })


def _offset(var: str, j: int) -> CNode:
    return Ident(var) if j == 0 else BinOp("+", Ident(var), Lit(str(j)))


def unrolled_add_ast(unroll: int, ctype: str = "float",
                     name: str = "vadd_unrolled") -> TranslationUnit:
    """The same unrolled vector addition built as a syntax tree.

    ``emit(unrolled_add_ast(u))`` and :func:`unrolled_add_template` may differ
    in spelling but compile to kernels with identical behavior.
    """
    if unroll < 1:
        raise ValueError("unroll must be at least 1")
    ct = CType(ctype, pointer=1)

    def add_stmt(j: int) -> Assign:
        at = _offset("i", j)
        return Assign(
            Index(Ident("z"), at),
            BinOp("+", Index(Ident("x"), at), Index(Ident("y"), at)),
        )

    stmts: list[CNode] = [
        Decl(ct, "x", Raw(f"({ctype} *) args[0]")),
        Decl(ct, "y", Raw(f"({ctype} *) args[1]")),
        Decl(ct, "z", Raw(f"({ctype} *) args[2]")),
        Decl(CType("long"), "i", Ident("start")),
    ]
    if unroll > 1:
        stmts.append(For(
            init=None,
            cond=BinOp("<=", BinOp("+", Ident("i"), Lit(str(unroll))), Ident("end")),
            step=Raw(f"i += {unroll}"),
            body=Block(tuple(add_stmt(j) for j in range(unroll))),
        ))
    stmts.append(For(
        init=None,
        cond=BinOp("<", Ident("i"), Ident("end")),
        step=Raw("++i"),
        body=Block((add_stmt(0),)),
    ))
    fn = FunctionDef(
        name=name,
        return_type=CType("void"),
        params=(
            Param(CType("void", pointer=2), "args"),
            Param(CType("long"), "start"),
            Param(CType("long"), "end"),
        ),
        body=Block(tuple(stmts)),
    )
    return TranslationUnit((Raw("#include <stdint.h>"), fn))
