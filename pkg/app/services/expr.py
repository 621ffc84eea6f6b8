"""Scalar expression trees: parsing, printing, exact differentiation and evaluation.

Expressions describe the rotator Hamiltonian h(I), the pendulum potentials
V_j(q_j) and the coefficients of the perturbation's Fourier terms. The
grammar is deliberately small (``+ - * / ^``, integer powers, ``sin``,
``cos``, ``exp``) so that differentiation is total.

Nodes are immutable; the smart constructors (:func:`add`, :func:`mul`, ...)
fold constants so trees produced by differentiation stay small.
"""

import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from app.exceptions.custom_exceptions import (
    EvaluationError,
    ExpressionSyntaxError,
    UnboundVariableError,
    UnknownIdentifierError,
)

FUNCTIONS = ("sin", "cos", "exp")
VARIABLE_PATTERN = re.compile(r"^(I|phi|p|q)[0-9]+$|^t$")

Number = Union[int, float]


class Expr:
    """Base class of expression nodes; arithmetic operators build folded trees."""

    def __add__(self, other: "ExprLike") -> "Expr":
        return add(self, other)

    def __radd__(self, other: "ExprLike") -> "Expr":
        return add(other, self)

    def __sub__(self, other: "ExprLike") -> "Expr":
        return sub(self, other)

    def __rsub__(self, other: "ExprLike") -> "Expr":
        return sub(other, self)

    def __mul__(self, other: "ExprLike") -> "Expr":
        return mul(self, other)

    def __rmul__(self, other: "ExprLike") -> "Expr":
        return mul(other, self)

    def __truediv__(self, other: "ExprLike") -> "Expr":
        return div(self, other)

    def __rtruediv__(self, other: "ExprLike") -> "Expr":
        return div(other, self)

    def __neg__(self) -> "Expr":
        return neg(self)

    def __pow__(self, n: int) -> "Expr":
        return power(self, n)

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True, eq=True, repr=True)
class Constant(Expr):
    value: float


@dataclass(frozen=True, eq=True, repr=True)
class Variable(Expr):
    name: str


@dataclass(frozen=True, eq=True, repr=True)
class UnaryOp(Expr):
    """Negation; the only unary operator of the grammar."""

    operand: Expr
    op: str = "-"


@dataclass(frozen=True, eq=True, repr=True)
class BinaryOp(Expr):
    """Binary operator node; for ``^`` the right child is an integer Constant."""

    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True, eq=True, repr=True)
class Call(Expr):
    func: str
    arg: Expr


ExprLike = Union[Expr, Number]

ZERO = Constant(0.0)
ONE = Constant(1.0)


def const(value: Number) -> Constant:
    return Constant(float(value))


def var(name: str) -> Variable:
    return Variable(name)


def as_expr(value: ExprLike) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float, np.integer, np.floating)):
        return Constant(float(value))
    raise TypeError(f"Cannot convert {value!r} to an expression")


def is_const(e: Expr, value: Optional[float] = None) -> bool:
    if not isinstance(e, Constant):
        return False
    return value is None or e.value == value


# Smart constructors


def neg(a: ExprLike) -> Expr:
    a = as_expr(a)
    if isinstance(a, Constant):
        return Constant(-a.value)
    if isinstance(a, UnaryOp):
        return a.operand
    return UnaryOp(a)


def add(a: ExprLike, b: ExprLike) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if isinstance(a, Constant) and isinstance(b, Constant):
        return Constant(a.value + b.value)
    if is_const(a, 0.0):
        return b
    if is_const(b, 0.0):
        return a
    if isinstance(b, UnaryOp):
        return sub(a, b.operand)
    if isinstance(b, Constant) and b.value < 0:
        return sub(a, Constant(-b.value))
    return BinaryOp("+", a, b)


def sub(a: ExprLike, b: ExprLike) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if isinstance(a, Constant) and isinstance(b, Constant):
        return Constant(a.value - b.value)
    if is_const(b, 0.0):
        return a
    if is_const(a, 0.0):
        return neg(b)
    if a == b:
        return ZERO
    return BinaryOp("-", a, b)


def mul(a: ExprLike, b: ExprLike) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if isinstance(b, Constant) and not isinstance(a, Constant):
        a, b = b, a
    if isinstance(a, Constant):
        if isinstance(b, Constant):
            return Constant(a.value * b.value)
        if a.value == 0.0:
            return ZERO
        if a.value == 1.0:
            return b
        if a.value == -1.0:
            return neg(b)
        if isinstance(b, BinaryOp) and b.op == "*" and isinstance(b.left, Constant):
            return mul(a.value * b.left.value, b.right)
        if isinstance(b, UnaryOp):
            return mul(-a.value, b.operand)
    return BinaryOp("*", a, b)


def div(a: ExprLike, b: ExprLike) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if isinstance(b, Constant):
        if b.value == 0.0:
            # kept symbolic; evaluation reports the division by zero
            return BinaryOp("/", a, b)
        if b.value == 1.0:
            return a
        if isinstance(a, Constant):
            return Constant(a.value / b.value)
        return mul(1.0 / b.value, a)
    if is_const(a, 0.0):
        return ZERO
    return BinaryOp("/", a, b)


def power(a: ExprLike, n: int) -> Expr:
    a = as_expr(a)
    if int(n) != n:
        raise ExpressionSyntaxError("exponent must be an integer", 0)
    n = int(n)
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Constant) and not (a.value == 0.0 and n < 0):
        return Constant(a.value**n)
    if isinstance(a, BinaryOp) and a.op == "^":
        return power(a.left, int(a.right.value) * n)
    return BinaryOp("^", a, Constant(float(n)))


def call(func: str, a: ExprLike) -> Expr:
    a = as_expr(a)
    if func not in FUNCTIONS:
        raise ValueError(f"Unsupported function {func}")
    if isinstance(a, Constant):
        try:
            return Constant(getattr(math, func)(a.value))
        except OverflowError:
            return Call(func, a)
    return Call(func, a)


def sin(a: ExprLike) -> Expr:
    return call("sin", a)


def cos(a: ExprLike) -> Expr:
    return call("cos", a)


def exp(a: ExprLike) -> Expr:
    return call("exp", a)


def total(terms: Iterable[ExprLike]) -> Expr:
    """Sum of an iterable of expressions (0 when empty), built as a balanced tree."""
    items = [as_expr(t) for t in terms]
    items = [t for t in items if not is_const(t, 0.0)]
    if not items:
        return ZERO
    while len(items) > 1:
        paired = [add(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<number>(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)"
    r"|(?P<ident>[A-Za-z][A-Za-z0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


class _Token:
    __slots__ = ("kind", "text", "offset")

    def __init__(self, kind: str, text: str, offset: int):
        self.kind = kind
        self.text = text
        self.offset = offset


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def tokenize(text: str) -> List[_Token]:
    tokens: List[_Token] = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        match = _TOKEN.match(text, pos)
        if match is None or match.end() == pos:
            stripped = len(text[pos:]) - len(text[pos:].lstrip())
            at = pos + stripped
            raise ExpressionSyntaxError(f"unexpected character '{text[at]}'", _byte_offset(text, at))
        kind = match.lastgroup
        start = match.start(kind)
        tokens.append(_Token(kind, match.group(kind), _byte_offset(text, start)))
        pos = match.end()
    tokens.append(_Token("end", "", _byte_offset(text, len(text))))
    return tokens


class _Parser:
    """Recursive-descent parser over the token list."""

    def __init__(self, text: str, parameters: Set[str]):
        self.tokens = tokenize(text)
        self.pos = 0
        self.parameters = parameters

    @property
    def current(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, text: str) -> None:
        token = self.current
        if token.text != text:
            found = token.text or "end of input"
            raise ExpressionSyntaxError(f"expected '{text}', found '{found}'", token.offset)
        self.advance()

    def parse(self) -> Expr:
        if self.current.kind == "end":
            raise ExpressionSyntaxError("empty expression", self.current.offset)
        result = self.expr()
        if self.current.kind != "end":
            raise ExpressionSyntaxError(f"unexpected '{self.current.text}'", self.current.offset)
        return result

    def expr(self) -> Expr:
        left = self.term()
        while self.current.text in ("+", "-"):
            op = self.advance().text
            right = self.term()
            left = add(left, right) if op == "+" else sub(left, right)
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.current.text in ("*", "/"):
            op = self.advance().text
            right = self.unary()
            left = mul(left, right) if op == "*" else div(left, right)
        return left

    def unary(self) -> Expr:
        if self.current.text == "-":
            self.advance()
            return neg(self.unary())
        if self.current.text == "+":
            self.advance()
            return self.unary()
        return self.factor()

    def factor(self) -> Expr:
        base = self.base()
        if self.current.text == "^":
            self.advance()
            sign = 1
            if self.current.text in ("+", "-"):
                sign = -1 if self.advance().text == "-" else 1
            token = self.current
            if token.kind != "number" or not token.text.isdigit():
                raise ExpressionSyntaxError("exponent must be an integer literal", token.offset)
            self.advance()
            return power(base, sign * int(token.text))
        return base

    def base(self) -> Expr:
        token = self.current
        if token.kind == "number":
            self.advance()
            return Constant(float(token.text))
        if token.text == "(":
            self.advance()
            inner = self.expr()
            self.expect(")")
            return inner
        if token.kind == "ident":
            self.advance()
            if token.text in FUNCTIONS:
                if self.current.text != "(":
                    raise ExpressionSyntaxError(f"function '{token.text}' needs an argument", self.current.offset)
                self.advance()
                arg = self.expr()
                self.expect(")")
                return call(token.text, arg)
            if VARIABLE_PATTERN.match(token.text) or token.text in self.parameters:
                return Variable(token.text)
            raise UnknownIdentifierError(token.text, token.offset)
        found = token.text or "end of input"
        raise ExpressionSyntaxError(f"unexpected '{found}'", token.offset)


def parse(text: str, parameters: Iterable[str] = ()) -> Expr:
    """Parse an expression string.

    Args:
        text: Expression in the toolkit grammar.
        parameters: Names accepted besides the variables I<j>, phi<j>, p<j>, q<j>, t.

    Returns:
        The folded expression tree.

    Raises:
        ExpressionSyntaxError: Text does not follow the grammar (carries the byte offset).
        UnknownIdentifierError: A name is neither a variable nor a parameter.
    """
    return _Parser(text, set(parameters)).parse()


# Printing

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def _format_number(value: float) -> str:
    if math.isfinite(value) and value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _precedence(e: Expr) -> int:
    if isinstance(e, Constant):
        return _PRECEDENCE["neg"] if e.value < 0 else _PRECEDENCE["atom"]
    if isinstance(e, UnaryOp):
        return _PRECEDENCE["neg"]
    if isinstance(e, BinaryOp):
        return _PRECEDENCE[e.op]
    return _PRECEDENCE["atom"]


def _wrap(e: Expr, minimum: int) -> str:
    text = to_text(e)
    return f"({text})" if _precedence(e) < minimum else text


def to_text(e: Expr) -> str:
    """Print with minimal parentheses; parse(to_text(e)) prints back identically."""
    if isinstance(e, Constant):
        return _format_number(e.value)
    if isinstance(e, Variable):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_text(e.arg)})"
    if isinstance(e, UnaryOp):
        return "-" + _wrap(e.operand, _PRECEDENCE["neg"])
    if isinstance(e, BinaryOp):
        if e.op == "^":
            return f"{_wrap(e.left, _PRECEDENCE['atom'])}^{_format_number(e.right.value)}"
        if e.op in ("+", "-"):
            right_min = _PRECEDENCE["*"] if _precedence(e.right) != _PRECEDENCE["neg"] else _PRECEDENCE["atom"]
            return f"{_wrap(e.left, 1)} {e.op} {_wrap(e.right, right_min)}"
        right_min = _PRECEDENCE["^"] if _precedence(e.right) != _PRECEDENCE["neg"] else _PRECEDENCE["atom"]
        return f"{_wrap(e.left, 2)}{e.op}{_wrap(e.right, right_min)}"
    raise TypeError(f"Unknown node {e!r}")


# Structural queries


def free_variables(e: Expr) -> Set[str]:
    if isinstance(e, Variable):
        return {e.name}
    if isinstance(e, UnaryOp):
        return free_variables(e.operand)
    if isinstance(e, Call):
        return free_variables(e.arg)
    if isinstance(e, BinaryOp):
        return free_variables(e.left) | free_variables(e.right)
    return set()


def substitute(e: Expr, mapping: Mapping[str, ExprLike]) -> Expr:
    """Replace variables by expressions or numbers, refolding constants."""
    if isinstance(e, Variable):
        return as_expr(mapping[e.name]) if e.name in mapping else e
    if isinstance(e, Constant):
        return e
    if isinstance(e, UnaryOp):
        return neg(substitute(e.operand, mapping))
    if isinstance(e, Call):
        return call(e.func, substitute(e.arg, mapping))
    left = substitute(e.left, mapping)
    if e.op == "^":
        return power(left, int(e.right.value))
    right = substitute(e.right, mapping)
    return {"+": add, "-": sub, "*": mul, "/": div}[e.op](left, right)


# Differentiation


def diff(e: Expr, v: str) -> Expr:
    """Exact symbolic derivative of ``e`` with respect to the variable ``v``."""
    if isinstance(e, Constant):
        return ZERO
    if isinstance(e, Variable):
        return ONE if e.name == v else ZERO
    if isinstance(e, UnaryOp):
        return neg(diff(e.operand, v))
    if isinstance(e, Call):
        inner = diff(e.arg, v)
        if is_const(inner, 0.0):
            return ZERO
        if e.func == "sin":
            return mul(cos(e.arg), inner)
        if e.func == "cos":
            return mul(neg(sin(e.arg)), inner)
        return mul(e, inner)
    a, b = e.left, e.right
    if e.op == "+":
        return add(diff(a, v), diff(b, v))
    if e.op == "-":
        return sub(diff(a, v), diff(b, v))
    if e.op == "*":
        return add(mul(diff(a, v), b), mul(a, diff(b, v)))
    if e.op == "/":
        da, db = diff(a, v), diff(b, v)
        if is_const(db, 0.0):
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, 2))
    n = int(b.value)
    da = diff(a, v)
    if is_const(da, 0.0):
        return ZERO
    return mul(mul(const(n), power(a, n - 1)), da)


def gradient(e: Expr, names: Sequence[str]) -> List[Expr]:
    return [diff(e, name) for name in names]


def hessian(e: Expr, names: Sequence[str]) -> List[List[Expr]]:
    first = gradient(e, names)
    return [[diff(first[i], names[j]) for j in range(len(names))] for i in range(len(names))]


# Evaluation


def evaluate(e: Expr, bindings: Mapping[str, float]) -> float:
    """Evaluate at a full binding of the free variables.

    Raises:
        UnboundVariableError: A free variable is missing from ``bindings``.
        EvaluationError: Division by zero (or overflow of ``exp``).
    """
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Variable):
        if e.name not in bindings:
            raise UnboundVariableError(e.name)
        return float(bindings[e.name])
    if isinstance(e, UnaryOp):
        return -evaluate(e.operand, bindings)
    if isinstance(e, Call):
        try:
            return getattr(math, e.func)(evaluate(e.arg, bindings))
        except OverflowError as exc:
            raise EvaluationError(f"overflow in {e.func}") from exc
    left = evaluate(e.left, bindings)
    if e.op == "^":
        n = int(e.right.value)
        if left == 0.0 and n < 0:
            raise EvaluationError("division by zero in negative power")
        try:
            return left**n
        except OverflowError as exc:
            raise EvaluationError("overflow in power") from exc
    right = evaluate(e.right, bindings)
    if e.op == "+":
        return left + right
    if e.op == "-":
        return left - right
    if e.op == "*":
        return left * right
    if right == 0.0:
        raise EvaluationError(f"division by zero in {to_text(e)}")
    return left / right


def _to_python(e: Expr) -> str:
    if isinstance(e, Constant):
        return repr(e.value)
    if isinstance(e, Variable):
        return e.name
    if isinstance(e, UnaryOp):
        return f"(-{_to_python(e.operand)})"
    if isinstance(e, Call):
        return f"np.{e.func}({_to_python(e.arg)})"
    if e.op == "^":
        n = int(e.right.value)
        base = _to_python(e.left)
        if n < 0:
            return f"(1.0/({base})**{-n})"
        return f"(({base})**{n})"
    return f"({_to_python(e.left)} {e.op} {_to_python(e.right)})"


class CompiledExpr:
    """Vectorized callable generated from one or more expressions.

    Arguments are passed positionally in the order of ``variables``; scalar
    and numpy array arguments broadcast. With several expressions the
    result is stacked along the first axis.
    """

    def __init__(self, exprs: Sequence[Expr], variables: Sequence[str]):
        self.exprs = list(exprs)
        self.variables = list(variables)
        for e in self.exprs:
            missing = free_variables(e) - set(self.variables)
            if missing:
                raise UnboundVariableError(sorted(missing)[0])
        body = ", ".join(_to_python(e) for e in self.exprs)
        args = ", ".join(self.variables)
        source = f"lambda {args}: ({body},)"
        self._function: Callable = eval(source, {"np": np})  # noqa: S307 - generated from a parsed tree

    def __call__(self, *args):
        with np.errstate(divide="raise", over="ignore", invalid="ignore"):
            try:
                values = self._function(*args)
            except (ZeroDivisionError, FloatingPointError) as exc:
                raise EvaluationError(f"division by zero: {exc}") from exc
        if len(values) == 1:
            return values[0]
        if all(np.ndim(v) == 0 for v in values):
            return np.array(values, dtype=float)
        return np.array(np.broadcast_arrays(*values), dtype=float)

    def at_points(self, points: np.ndarray) -> np.ndarray:
        """Values at the rows of ``points``; shape (len(exprs), len(points))."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        values = self(*points.T) if self.variables else self()
        arr = np.asarray(values, dtype=float)
        if len(self.exprs) == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim == 1:
            arr = arr[:, None]
        return np.broadcast_to(arr, (len(self.exprs), len(points))).copy()


def compile_expr(e: Expr, variables: Sequence[str]) -> CompiledExpr:
    return CompiledExpr([e], variables)


def compile_many(exprs: Sequence[Expr], variables: Sequence[str]) -> CompiledExpr:
    return CompiledExpr(exprs, variables)


def variable_names(d: int, n: int) -> Tuple[List[str], List[str], List[str], List[str]]:
    """Names of actions, angles, pendulum momenta and positions."""
    return (
        [f"I{i + 1}" for i in range(d)],
        [f"phi{i + 1}" for i in range(d)],
        [f"p{j + 1}" for j in range(n)],
        [f"q{j + 1}" for j in range(n)],
    )


def bind(names: Sequence[str], values: Sequence[float]) -> Dict[str, float]:
    return {name: float(value) for name, value in zip(names, values)}
