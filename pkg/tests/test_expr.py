"""Tests for expression parsing, printing, differentiation and evaluation."""

import math

import numpy as np
import pytest

from app.exceptions.custom_exceptions import (
    EvaluationError,
    ExpressionSyntaxError,
    UnboundVariableError,
    UnknownIdentifierError,
)
from app.services import expr as ex

H_TEXT = "0.5*Omega1*I1^2 + 0.5*Omega2*I2^2"
PARAMS = ["Omega1", "Omega2"]


def test_parse_quadratic_rotator():
    """The rotator Hamiltonian parses into a sum of two quadratic terms."""
    tree = ex.parse(H_TEXT, PARAMS)
    assert isinstance(tree, ex.BinaryOp)
    assert tree.op == "+"
    for side in (tree.left, tree.right):
        assert side.op == "*"
    assert ex.free_variables(tree) == {"I1", "I2", "Omega1", "Omega2"}


def test_parse_constant_and_call():
    """Constants fold and function calls keep their argument."""
    assert ex.parse("0") == ex.Constant(0.0)
    tree = ex.parse("cos(q1) - 1")
    assert tree == ex.BinaryOp("-", ex.Call("cos", ex.Variable("q1")), ex.Constant(1.0))


def test_print_parse_idempotent():
    """Printing a parsed tree and parsing it again gives the same text."""
    for text in [H_TEXT, "cos(q1) - 1", "-(I1 - I2)^3/exp(t)", "a1*cos(q1)*sin(phi1 + 2*phi2)", "2^-1*I1"]:
        params = PARAMS + ["a1"]
        once = ex.to_text(ex.parse(text, params))
        assert ex.to_text(ex.parse(once, params)) == once


def test_syntax_error_offset():
    """A syntax error reports the byte offset of the offending token."""
    with pytest.raises(ExpressionSyntaxError) as info:
        ex.parse("I1 + * I2")
    assert info.value.offset == 5

    with pytest.raises(ExpressionSyntaxError):
        ex.parse("I1^1.5")
    with pytest.raises(ExpressionSyntaxError):
        ex.parse("")


def test_unknown_identifier():
    """Names that are neither variables nor parameters are rejected."""
    with pytest.raises(UnknownIdentifierError) as info:
        ex.parse("cosh(q1)")
    assert info.value.name == "cosh"
    with pytest.raises(UnknownIdentifierError):
        ex.parse("Omega1*I1")


def test_diff_examples():
    """Derivatives print in their simplest form."""
    assert ex.to_text(ex.diff(ex.parse("0.5*I1^2"), "I1")) == "I1"
    assert ex.to_text(ex.diff(ex.parse("cos(q1)"), "q1")) == "-sin(q1)"
    h = ex.parse(H_TEXT, PARAMS)
    dh = ex.diff(h, "I1")
    assert ex.evaluate(dh, {"I1": 1.0, "I2": 2.0, "Omega1": 1.0, "Omega2": 1.0}) == pytest.approx(1.0)


def test_evaluate_examples():
    """Evaluation of simple expressions."""
    assert ex.evaluate(ex.parse("0.5*I1^2"), {"I1": 2.0}) == 2.0
    h = ex.parse(H_TEXT, PARAMS)
    assert ex.evaluate(h, {"I1": 1.0, "I2": 2.0, "Omega1": 1.0, "Omega2": 1.0}) == pytest.approx(2.5)
    sech = ex.parse("2*exp(t)/(1 + exp(2*t))*2")
    assert ex.evaluate(sech, {"t": 0.0}) == pytest.approx(2.0)


def test_evaluate_errors():
    """Unbound variables and division by zero are reported."""
    with pytest.raises(UnboundVariableError):
        ex.evaluate(ex.parse("I1 + I2"), {"I1": 1.0})
    with pytest.raises(EvaluationError):
        ex.evaluate(ex.parse("1/(I1 - 1)"), {"I1": 1.0})
    with pytest.raises(EvaluationError):
        ex.evaluate(ex.parse("I1^-2"), {"I1": 0.0})


def test_diff_matches_central_differences(rng):
    """Symbolic derivatives agree with central differences at random points."""
    names = ["I1", "I2", "q1"]
    e = ex.parse("exp(I1/3)*cos(q1)^2 + I1*I2^3/(2 + sin(I2)) - 0.25*I2*q1")
    grads = ex.gradient(e, names)
    step = 1e-5
    for _ in range(100):
        point = rng.uniform(-1.0, 1.0, size=3)
        for name, g in zip(names, grads):
            at = dict(zip(names, point))
            plus = dict(at, **{name: at[name] + step})
            minus = dict(at, **{name: at[name] - step})
            numeric = (ex.evaluate(e, plus) - ex.evaluate(e, minus)) / (2 * step)
            exact = ex.evaluate(g, at)
            assert abs(exact - numeric) <= 1e-6 * max(1.0, abs(exact))


def test_diff_linearity(rng):
    """diff(a*e1 + b*e2) equals a*diff(e1) + b*diff(e2)."""
    e1 = ex.parse("sin(I1)*I2")
    e2 = ex.parse("exp(I2)^2 - I1^3")
    combined = ex.diff(3.0 * e1 + (-2.0) * e2, "I1")
    split = 3.0 * ex.diff(e1, "I1") + (-2.0) * ex.diff(e2, "I1")
    for _ in range(100):
        at = dict(zip(["I1", "I2"], rng.uniform(-2.0, 2.0, size=2)))
        assert ex.evaluate(combined, at) == pytest.approx(ex.evaluate(split, at), rel=1e-14, abs=1e-14)


def test_substitute_folds_constants():
    """Substituting numbers for parameters folds constant subtrees."""
    h = ex.substitute(ex.parse(H_TEXT, PARAMS), {"Omega1": 1.0, "Omega2": 0.0})
    assert ex.to_text(h) == "0.5*I1^2"
    assert ex.substitute(ex.parse("a1*cos(q1)", ["a1"]), {"a1": 0.0}) == ex.ZERO


def test_compiled_matches_tree(rng):
    """Compiled vectorized callables agree with tree evaluation."""
    exprs = [ex.parse("I1*cos(q1)"), ex.parse("exp(-I1^2)"), ex.parse("3")]
    compiled = ex.compile_many(exprs, ["I1", "q1"])
    points = rng.uniform(-1.0, 1.0, size=(20, 2))
    values = compiled.at_points(points)
    assert values.shape == (3, 20)
    for column, (I1, q1) in enumerate(points):
        for row, e in enumerate(exprs):
            assert values[row, column] == pytest.approx(ex.evaluate(e, {"I1": I1, "q1": q1}))
    with pytest.raises(UnboundVariableError):
        ex.compile_expr(ex.parse("I1*I2"), ["I1"])


def test_compiled_division_by_zero():
    """Compiled division by zero raises the evaluation error."""
    compiled = ex.compile_expr(ex.parse("1/I1"), ["I1"])
    with pytest.raises(EvaluationError):
        compiled(np.array([0.0, 1.0]))
    assert compiled(2.0) == pytest.approx(0.5)
    assert math.isclose(float(compiled(4.0)), 0.25)
