import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from granorm.grammar import (FIELD_END, MULTIPLE, OPTIONAL, SINGLE,
                             GrammarError, GrammarSpec, parse_grammar,
                             render_grammar)

from util import random_grammar

CALC = """
# a small calculator
root Expr
Expr = Num(token digits)
Expr = Add(Expr lhs, Expr rhs)
Expr = Neg(Expr arg)
Expr = Call(token fn, Expr* args, Expr? default)
"""


def test_parse_basics():
    g = parse_grammar(CALC)
    assert g.root_type == "Expr"
    assert [c.name for c in g.constructors] == ["Num", "Add", "Neg", "Call"]
    assert [c.id for c in g.constructors] == [0, 1, 2, 3]
    call = g.constructor_named("Call")
    assert [f.name for f in call.fields] == ["fn", "args", "default"]
    assert [f.cardinality for f in call.fields] == [SINGLE, MULTIPLE, OPTIONAL]
    assert call.fields[0].is_primitive
    assert not call.fields[1].is_primitive
    assert g.token_vocab == (FIELD_END,)


def test_constructor_lookup():
    g = parse_grammar(CALC)
    assert g.constructor(1).name == "Add"
    assert g.constructor_named("Neg").id == 2
    assert [c.name for c in g.constructors_of("Expr")] == ["Num", "Add", "Neg", "Call"]
    with pytest.raises(GrammarError, match="unknown constructor id"):
        g.constructor(99)
    with pytest.raises(GrammarError, match="unknown constructor"):
        g.constructor_named("Mul")
    with pytest.raises(GrammarError, match="primitive type"):
        g.constructors_of("token")
    with pytest.raises(GrammarError, match="unknown type"):
        g.constructors_of("Stmt")


def test_alternatives_and_comments():
    g = parse_grammar("""
    # leading comment
    root Kw

    Kw = A() | B() | C(token t)
    """)
    assert [c.name for c in g.constructors_of("Kw")] == ["A", "B", "C"]
    assert g.constructor_named("C").fields[0].type == "token"


def test_with_token_vocab():
    g = parse_grammar(CALC)
    g2 = g.with_token_vocab((FIELD_END, "x", "y"))
    assert g2.token_vocab == (FIELD_END, "x", "y")
    assert g2.constructors == g.constructors
    with pytest.raises(GrammarError, match="exactly once"):
        g.with_token_vocab(("x",))
    with pytest.raises(GrammarError, match="exactly once"):
        g.with_token_vocab((FIELD_END, FIELD_END))


@pytest.mark.parametrize(
    "text,fragment,line",
    [
        ("Expr = Num(token d)", "expected 'root", 1),
        ("root Expr\nroot Expr", "duplicate root", 2),
        ("root Expr\nExpr Num(token d)", "expected '<TypeName>", 2),
        ("root Expr\nExpr = Num(token d)\nExpr = Num()", "duplicate constructor name", 3),
        ("root Expr\nExpr = Num(token d, token d)", "duplicate field name", 2),
        ("root Expr\nExpr = Add(Stmt s)", "undeclared field type", 2),
        ("root Expr\nExpr = Num(token)", "bad field declaration", 2),
        ("root Expr\nExpr = 9Num(token d)", "bad constructor declaration", 2),
        ("root Expr\nStmt = Pass()", "has no constructors", None),
        ("# nothing here", "missing root", None),
    ],
)
def test_parse_errors(text, fragment, line):
    with pytest.raises(GrammarError, match=fragment) as info:
        parse_grammar(text)
    if line is not None:
        assert info.value.line == line
        assert f"line {line}" in str(info.value)


def test_duplicate_ctor_error_names_first_line():
    with pytest.raises(GrammarError, match="first declared on line 2"):
        parse_grammar("root A\nA = X()\nA = X()")


def test_render_round_trip():
    g = parse_grammar(CALC)
    text = render_grammar(g)
    assert parse_grammar(text) == g
    assert "Call(token fn, Expr* args, Expr? default)" in text


def test_render_round_trip_random():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        g = random_grammar(rng, n_types=int(rng.integers(1, 4)),
                           n_extra_ctors=int(rng.integers(0, 6)))
        structural = g.with_token_vocab((FIELD_END,))
        assert parse_grammar(render_grammar(structural)) == structural


_name = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,6}", fullmatch=True)


@settings(max_examples=60, deadline=None)
@given(root=_name, ctor=_name, n_tok=st.integers(0, 3))
def test_single_rule_round_trip(root, ctor, n_tok):
    fields = ", ".join(f"token f{i}" for i in range(n_tok))
    text = f"root {root}\n{root} = {ctor}({fields})"
    g = parse_grammar(text)
    assert parse_grammar(render_grammar(g)) == g


def test_spec_direct_construction_validates_vocab():
    with pytest.raises(GrammarError, match="exactly once"):
        GrammarSpec(root_type="A", constructors=(), token_vocab=())
