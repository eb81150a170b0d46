"""Three code generation strategies: substitution, templates, syntax trees."""

import re
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rtcg import csyntax as cs
from rtcg import jit

GOLDEN = Path(__file__).parent / "golden"


# --- keyword substitution ----------------------------------------------------


def test_substitute_direct_replacement():
    assert cs.substitute("${t} x = ${v};", {"t": "float", "v": "0"}) \
        == "float x = 0;"


def test_substitute_identity_without_placeholders():
    assert cs.substitute("x", {}) == "x"


def test_substitute_repeated_placeholder():
    assert cs.substitute("${a}${a}", {"a": "y"}) == "yy"


def test_substitute_accepts_non_string_values():
    assert cs.substitute("z[i] = ${k} * x[i];", {"k": 2}) == "z[i] = 2 * x[i];"


def test_substitute_unbound_names_the_placeholder():
    with pytest.raises(cs.UnboundPlaceholder) as err:
        cs.substitute("${t} x;", {})
    assert "t" in str(err.value)


def test_substitute_unterminated_marker():
    with pytest.raises(cs.MalformedPlaceholder):
        cs.substitute("x = ${oops", {"oops": "1"})


def test_substitute_non_identifier_body():
    with pytest.raises(cs.MalformedPlaceholder):
        cs.substitute("${not ok}", {"not ok": "1"})


def test_substitute_ignores_block_markers():
    text = "{% for j in 0..2 %}${x}{% endfor %}"
    assert cs.substitute(text, {"x": "q"}) == "{% for j in 0..2 %}q{% endfor %}"


_names = st.text(alphabet="abcdefgh", min_size=1, max_size=4)
_values = st.text(alphabet="xyz123 +", max_size=8)


@given(st.dictionaries(_names, _values, max_size=4),
       st.lists(st.sampled_from(["plain ", "${%s}", "; "]), max_size=8))
def test_substitute_idempotent_once_resolved(bindings, shape):
    # build a template whose placeholders all resolve; values are marker-free
    names = sorted(bindings)
    template = "".join(
        piece % names[i % len(names)] if piece == "${%s}" and names else
        piece.replace("${%s}", "")
        for i, piece in enumerate(shape))
    once = cs.substitute(template, bindings)
    assert cs.substitute(once, bindings) == once


# --- template language -------------------------------------------------------


def test_render_for_expands_half_open_range():
    text = "{% for i in 0..2 %}z[${i}]=x[${i}]+y[${i}];{% endfor %}"
    assert cs.render(text) == "z[0]=x[0]+y[0];z[1]=x[1]+y[1];"


def test_render_if_false_elides_body():
    assert cs.render("{% if false %}A{% endif %}B") == "B"


def test_render_if_true_keeps_body():
    assert cs.render("{% if true %}A{% endif %}B") == "AB"


def test_render_empty_template():
    assert cs.render("") == ""


def test_render_variable_bounds_and_condition():
    out = cs.render("{% if go %}{% for j in lo..hi %}<${j}>{% endfor %}{% endif %}",
                    {"go": True, "lo": 1, "hi": 4})
    assert out == "<1><2><3>"


def test_render_nested_loops():
    out = cs.render("{% for a in 0..2 %}{% for b in 0..2 %}${a}${b} {% endfor %}{% endfor %}")
    assert out == "00 01 10 11 "


def test_render_empty_range_yields_nothing():
    assert cs.render("{% for j in 3..3 %}X{% endfor %}") == ""


def test_render_unbound_variable_is_strict():
    with pytest.raises(cs.UnboundVariable):
        cs.render("{% if missing %}A{% endif %}")
    with pytest.raises(cs.UnboundVariable):
        cs.render("${missing}")


def test_render_non_integer_bound():
    with pytest.raises(cs.NonIntegerBound):
        cs.render("{% for j in 0..hi %}x{% endfor %}", {"hi": "many"})


def test_render_unclosed_block():
    with pytest.raises(cs.UnclosedBlock):
        cs.render("{% for j in 0..2 %}x")
    with pytest.raises(cs.UnclosedBlock):
        cs.render("{% if true %}x{% endfor %}")


@given(st.integers(0, 12), st.integers(0, 12))
def test_render_loop_matches_python_range(lo, hi):
    text = "{% for j in lo..hi %}${j},{% endfor %}"
    expected = "".join(f"{j}," for j in range(lo, hi))
    assert cs.render(text, {"lo": lo, "hi": hi}) == expected


@given(st.integers(0, 8))
def test_render_is_pure(n):
    text = "{% for j in 0..n %}${j}{% endfor %}"
    assert cs.render(text, {"n": n}) == cs.render(text, {"n": n})


# --- syntax trees ------------------------------------------------------------


def _vec_assign():
    at = cs.Ident("i")
    return cs.Assign(cs.Index(cs.Ident("z"), at),
                     cs.BinOp("+", cs.Index(cs.Ident("x"), at),
                              cs.Index(cs.Ident("y"), at)))


def test_emit_counted_for():
    loop = cs.counted_for("i", cs.Lit(0), cs.Ident("n"),
                          cs.Block((_vec_assign(),)))
    assert cs.emit(loop) == (
        "for (int i = 0; i < n; ++i) {\n"
        "    z[i] = x[i] + y[i];\n"
        "}\n")


def test_emit_empty_translation_unit():
    assert cs.emit(cs.TranslationUnit()) == "\n"


def test_emit_binop_nesting_is_parenthesized():
    expr = cs.BinOp("*", cs.BinOp("+", cs.Ident("a"), cs.Ident("b")),
                    cs.Ident("c"))
    assert cs.emit(expr) == "(a + b) * c"


def test_emit_deterministic():
    tree = cs.unrolled_add_ast(4)
    assert cs.emit(tree) == cs.emit(tree)


def test_emit_ill_formed_tree_names_path():
    # a statement (Assign) used in expression position
    bad = cs.Assign(cs.Ident("z"), cs.BinOp("+", _vec_assign(), cs.Lit(1)))
    with pytest.raises(cs.IllFormedTree) as err:
        cs.emit(bad)
    assert "left" in err.value.path
    assert "Assign" in err.value.reason


def test_emit_rejects_loop_at_file_scope_inside_expression():
    loop = cs.counted_for("i", cs.Lit(0), cs.Lit(3), cs.Block())
    bad = cs.TranslationUnit((loop,))
    with pytest.raises(cs.IllFormedTree):
        cs.emit(bad)


def test_ctype_rendering():
    assert cs.CType("float", pointer=1).render_declarator("x") == "float *x"
    assert cs.CType("long").render_declarator("i") == "long i"
    assert cs.CType("double", pointer=2, const=True).render() == "const double **"


def test_unroll_must_be_positive():
    with pytest.raises(ValueError):
        cs.unrolled_add_template(0)
    with pytest.raises(ValueError):
        cs.unrolled_add_ast(0)


# --- golden files ------------------------------------------------------------


@pytest.mark.parametrize("name, make", [
    ("unrolled_add_template_u2.c", lambda: cs.unrolled_add_template(2)),
    ("unrolled_add_template_u1.c", lambda: cs.unrolled_add_template(1)),
    ("unrolled_add_ast_u2.c", lambda: cs.emit(cs.unrolled_add_ast(2))),
])
def test_golden_source_is_stable(name, make):
    assert make() == (GOLDEN / name).read_text()


def test_golden_sources_have_no_residual_markers():
    for path in GOLDEN.glob("*.c"):
        text = path.read_text()
        assert "${" not in text and "{%" not in text


@pytest.mark.parametrize("path", sorted(GOLDEN.glob("*.c")),
                         ids=lambda p: p.name)
def test_golden_sources_compile_warning_free(path, toolchain, tmp_path):
    cache = jit.CacheStore(tmp_path / "cache")  # cold: diagnostics are live
    module = jit.compile(path.read_text(), toolchain, cache)
    assert not module.provenance.cache_hit
    assert module.provenance.diagnostics.strip() == ""


def test_unrolled_template_u2_has_offsets_zero_and_one():
    body = cs.unrolled_add_template(2)
    assert "z[i + 0] = x[i + 0] + y[i + 0];" in body
    assert "z[i + 1] = x[i + 1] + y[i + 1];" in body
