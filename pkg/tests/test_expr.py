import math

import hypothesis
import hypothesis.strategies as st
import numpy as np
import pytest

from conftest import bind
from flatdt.expr import (
    Add,
    Call,
    Const,
    Div,
    Mul,
    Neg,
    Param,
    ParseError,
    Pow,
    SingularEvaluation,
    Sub,
    UnboundSymbol,
    Var,
    VarRef,
    denominators,
    eval_expr,
    eval_with_jacobian,
    fold,
    free_vars,
    jacobian_at,
    parse_expr,
    substitute,
    to_text,
)


def test_parse_sum_with_parameter():
    e = parse_expr("x1 + T*u1", params=["T"])
    assert e == Add(Var("x1", 0), Mul(Param("T"), Var("u1", 0)))


def test_parse_backward_shift():
    e = parse_expr("x3 - x2*z1[-1]")
    assert e == Sub(Var("x3", 0), Mul(Var("x2", 0), Var("z1", -1)))


def test_parse_constant_zero():
    assert parse_expr("0") == Const(0.0)


@pytest.mark.parametrize(
    "text, expected",
    [
        ("-x^2", Neg(Pow(Var("x"), 2))),
        ("a - b - c", Sub(Sub(Var("a"), Var("b")), Var("c"))),
        ("a / b * c", Mul(Div(Var("a"), Var("b")), Var("c"))),
        ("2^3", Pow(Const(2.0), 3)),
        ("x^-2", Pow(Var("x"), -2)),
        ("sin(x[+1])", Call("sin", Var("x", 1))),
        ("-2*x", Mul(Const(-2.0), Var("x"))),
    ],
)
def test_precedence(text, expected):
    assert parse_expr(text) == expected


@pytest.mark.parametrize(
    "text, column",
    [
        ("x +", 4),
        ("x ^ 1.5", 5),
        ("foo(x)", 1),
        ("x[1.5]", 3),
        ("(x", 3),
        ("x $ y", 3),
    ],
)
def test_syntax_errors_carry_position(text, column):
    with pytest.raises(ParseError) as info:
        parse_expr(text)
    assert info.value.line == 1
    assert info.value.column == column


def test_parameter_cannot_be_shifted():
    with pytest.raises(ParseError):
        parse_expr("T[1]", params=["T"])


def test_eval_examples():
    assert eval_expr(parse_expr("x1 + T*u1", ["T"]), bind({"x1": 2, "u1": 5}, {"T": 1})) == 7
    assert eval_expr(parse_expr("y1[1] - y1[0]"), bind({("y1", 1): 2, ("y1", 0): 1})) == 1


def test_division_by_zero_names_subexpression():
    with pytest.raises(SingularEvaluation) as info:
        eval_expr(parse_expr("x1/x2"), bind({"x1": 1, "x2": 0}))
    assert info.value.expr == parse_expr("x1/x2")


@pytest.mark.parametrize("text", ["log(x)", "sqrt(x - 1)", "x^-1"])
def test_domain_errors(text):
    with pytest.raises(SingularEvaluation):
        eval_expr(parse_expr(text), bind({"x": 0}))


def test_unbound_symbols():
    with pytest.raises(UnboundSymbol):
        eval_expr(parse_expr("x + y"), bind({"x": 1}))
    with pytest.raises(UnboundSymbol):
        eval_expr(parse_expr("T*x", ["T"]), bind({"x": 1}))


def test_substitute_shift_of_first_output():
    e = parse_expr("x1 - T*z1[-1]", ["T"])
    rules = {VarRef("z1", -1): parse_expr("u1"), VarRef("x1"): parse_expr("x1 + T*u1", ["T"])}
    assert substitute(e, rules) == Var("x1")


def test_substitute_identity_and_simultaneity():
    e = parse_expr("a*b + c")
    assert substitute(e, {}) == e
    swapped = substitute(parse_expr("a*b"), {VarRef("a"): Var("b"), VarRef("b"): Var("a")})
    assert swapped == parse_expr("b*a")


def test_jacobian_of_product_dynamics():
    f = [parse_expr(t, ["T"]) for t in ("x1 + T*u1", "x2 + T*u2", "x3 + T*u1*u2")]
    refs = [VarRef(n) for n in ("x1", "x2", "x3", "u1", "u2")]
    b = bind(dict(zip(("x1", "x2", "x3", "u1", "u2"), (0.3, -1.0, 2.0, 1.5, -0.7))), {"T": 1})
    jac = jacobian_at(f, refs, b)
    expected = [[1, 0, 0, 1, 0], [0, 1, 0, 0, 1], [0, 0, 1, -0.7, 1.5]]
    assert np.array_equal(jac, expected)
    assert np.linalg.matrix_rank(jac) == 3


def test_small_jacobians():
    assert jacobian_at([parse_expr("x1")], [VarRef("x1")], bind({"x1": 4})).tolist() == [[1.0]]
    j = jacobian_at([parse_expr("x2*u1")], [VarRef("x2"), VarRef("u1")], bind({"x2": 3, "u1": 5}))
    assert j.tolist() == [[5.0, 3.0]]


def test_jacobian_propagates_singularity():
    with pytest.raises(SingularEvaluation):
        jacobian_at([parse_expr("1/(x - 1)")], [VarRef("x")], bind({"x": 1}))


def test_denominators_and_free_vars():
    e = parse_expr("a/(b - c) + 1/(b - c) + d/2")
    assert denominators(e) == [parse_expr("b - c")]
    assert free_vars(e) == {VarRef("a"), VarRef("b"), VarRef("c"), VarRef("d")}


# --------------------------------------------------------------------------
# property tests

NAMES = ["a", "b", "c"]
leaves = st.one_of(
    st.builds(Var, st.sampled_from(NAMES), st.integers(-2, 2)),
    st.builds(Const, st.integers(-5, 5).map(float) | st.sampled_from([0.5, -1.25, 3.75])),
    st.just(Param("T")),
)


def _extend(children):
    return st.one_of(
        st.builds(Add, children, children),
        st.builds(Sub, children, children),
        st.builds(Mul, children, children),
        st.builds(Div, children, children),
        st.builds(Neg, children),
        st.builds(Pow, children, st.integers(-2, 3)),
        st.builds(Call, st.sampled_from(["sin", "cos", "exp"]), children),
    )


exprs = st.recursive(leaves, _extend, max_leaves=12)


@hypothesis.given(exprs)
@hypothesis.settings(max_examples=300)
def test_print_parse_round_trip(e):
    assert parse_expr(to_text(e), ["T"]) == e


def _random_binding(e, rng):
    vals = {r: rng.uniform(-2, 2) for r in free_vars(e)}
    return bind({(r.name, r.shift): v for r, v in vals.items()}, {"T": 0.7})


@hypothesis.given(exprs, st.integers(0, 2**31))
@hypothesis.settings(max_examples=300, deadline=None)
def test_fold_preserves_value(e, seed):
    b = _random_binding(e, np.random.default_rng(seed))
    try:
        want = eval_expr(e, b)
    except SingularEvaluation:
        return
    hypothesis.assume(math.isfinite(want) and abs(want) < 1e8)
    got = eval_expr(fold(e), b)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


@hypothesis.given(exprs, st.integers(0, 2**31))
@hypothesis.settings(max_examples=200, deadline=None)
def test_jacobian_matches_central_differences(e, seed):
    refs = sorted(free_vars(e))
    hypothesis.assume(refs)
    b = _random_binding(e, np.random.default_rng(seed))
    try:
        val, jac = eval_with_jacobian([e], refs, b)
    except SingularEvaluation:
        return
    hypothesis.assume(abs(val[0]) < 1e4 and np.all(np.abs(jac) < 1e4))
    h = 1e-6
    for j, r in enumerate(refs):
        try:
            plus = eval_expr(e, b.with_values({r: b.values[r] + h}))
            minus = eval_expr(e, b.with_values({r: b.values[r] - h}))
        except SingularEvaluation:
            return
        fd = (plus - minus) / (2 * h)
        # curvature near poles spoils the difference quotient, not the dual number
        hypothesis.assume(abs(fd) < 1e4)
        assert jac[0, j] == pytest.approx(fd, rel=1e-4, abs=1e-4)


@hypothesis.given(exprs, exprs, st.integers(0, 2**31))
@hypothesis.settings(max_examples=200, deadline=None)
def test_substitute_agrees_with_evaluation(e, replacement, seed):
    target = VarRef("a", 0)
    out = substitute(e, {target: replacement})
    assert target not in free_vars(out) or target in free_vars(replacement)
    rng = np.random.default_rng(seed)
    b = _random_binding(Add(e, replacement), rng)
    try:
        inner = eval_expr(replacement, b)
        want = eval_expr(e, b.with_values({target: inner}))
    except SingularEvaluation:
        return
    hypothesis.assume(math.isfinite(want) and abs(want) < 1e8)
    try:
        got = eval_expr(out, b)
    except SingularEvaluation:
        return
    assert got == pytest.approx(want, rel=1e-8, abs=1e-8)
