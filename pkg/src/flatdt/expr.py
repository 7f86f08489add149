"""Immutable expression trees over shift-indexed variables.

The textual form follows a small grammar::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := '-' factor | power
    power  := base ('^' signed-int)?
    base   := number | ident shift? | ident '(' expr ')' | '(' expr ')'
    shift  := '[' signed-int ']'

``^`` binds tighter than unary minus, which binds tighter than ``*``/``/``.
A minus sign directly in front of a number literal produces a negative
constant (so printing a negative constant and re-parsing it round-trips).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt")


class FlatDTError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(FlatDTError):
    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"{message} (line {line}, column {column})")
        self.message = message
        self.line = line
        self.column = column


class UnboundSymbol(FlatDTError):
    pass


class SingularEvaluation(FlatDTError):
    """Raised on a domain error; ``expr`` is the offending subexpression."""

    def __init__(self, message: str, expr: "Expr"):
        super().__init__(f"{message}: {to_text(expr)}")
        self.expr = expr


class VarRef(NamedTuple):
    name: str
    shift: int = 0

    def __str__(self) -> str:
        return self.name if self.shift == 0 else f"{self.name}[{self.shift}]"

    def shifted(self, s: int) -> "VarRef":
        return VarRef(self.name, self.shift + s)


# --------------------------------------------------------------------------
# nodes


class Expr:
    """Base class of all expression nodes."""

    __slots__ = ()

    def __add__(self, other):
        return Add(self, as_expr(other))

    def __radd__(self, other):
        return Add(as_expr(other), self)

    def __sub__(self, other):
        return Sub(self, as_expr(other))

    def __rsub__(self, other):
        return Sub(as_expr(other), self)

    def __mul__(self, other):
        return Mul(self, as_expr(other))

    def __rmul__(self, other):
        return Mul(as_expr(other), self)

    def __truediv__(self, other):
        return Div(self, as_expr(other))

    def __rtruediv__(self, other):
        return Div(as_expr(other), self)

    def __neg__(self):
        return Neg(self)

    def __pow__(self, exponent: int):
        return Pow(self, exponent)

    def __str__(self) -> str:
        return to_text(self)

    @property
    def children(self) -> tuple["Expr", ...]:
        return ()


@dataclass(frozen=True, repr=False)
class Const(Expr):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        if not math.isfinite(self.value):
            raise ValueError("constants must be finite")

    def __repr__(self):
        return f"Const({self.value!r})"


@dataclass(frozen=True, repr=False)
class Var(Expr):
    name: str
    shift: int = 0

    @property
    def ref(self) -> VarRef:
        return VarRef(self.name, self.shift)

    def __repr__(self):
        return f"Var({self.name!r}, {self.shift})"


@dataclass(frozen=True, repr=False)
class Param(Expr):
    name: str

    def __repr__(self):
        return f"Param({self.name!r})"


@dataclass(frozen=True, repr=False)
class Neg(Expr):
    arg: Expr

    @property
    def children(self):
        return (self.arg,)

    def __repr__(self):
        return f"Neg({self.arg!r})"


@dataclass(frozen=True, repr=False)
class _Binary(Expr):
    left: Expr
    right: Expr

    @property
    def children(self):
        return (self.left, self.right)

    def __repr__(self):
        return f"{type(self).__name__}({self.left!r}, {self.right!r})"


class Add(_Binary):
    pass


class Sub(_Binary):
    pass


class Mul(_Binary):
    pass


class Div(_Binary):
    pass


@dataclass(frozen=True, repr=False)
class Pow(Expr):
    base: Expr
    exponent: int

    def __post_init__(self):
        if isinstance(self.exponent, bool) or int(self.exponent) != self.exponent:
            raise ValueError("exponent must be an integer")
        object.__setattr__(self, "exponent", int(self.exponent))

    @property
    def children(self):
        return (self.base,)

    def __repr__(self):
        return f"Pow({self.base!r}, {self.exponent})"


@dataclass(frozen=True, repr=False)
class Call(Expr):
    func: str
    arg: Expr

    def __post_init__(self):
        if self.func not in FUNCTIONS:
            raise ValueError(f"unknown function {self.func!r}")

    @property
    def children(self):
        return (self.arg,)

    def __repr__(self):
        return f"Call({self.func!r}, {self.arg!r})"


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return Const(float(value))
    raise TypeError(f"cannot convert {value!r} to an expression")


def var(name: str, shift: int = 0) -> Var:
    return Var(name, shift)


def walk(e: Expr) -> Iterator[Expr]:
    """Pre-order traversal."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(node.children))


def free_vars(exprs: Expr | Iterable[Expr]) -> set[VarRef]:
    if isinstance(exprs, Expr):
        exprs = [exprs]
    return {n.ref for e in exprs for n in walk(e) if isinstance(n, Var)}


def free_params(exprs: Expr | Iterable[Expr]) -> set[str]:
    if isinstance(exprs, Expr):
        exprs = [exprs]
    return {n.name for e in exprs for n in walk(e) if isinstance(n, Param)}


def denominators(exprs: Expr | Iterable[Expr]) -> list[Expr]:
    """Distinct denominators of all division nodes, in discovery order."""
    if isinstance(exprs, Expr):
        exprs = [exprs]
    out: list[Expr] = []
    for e in exprs:
        for n in walk(e):
            if isinstance(n, Div) and not isinstance(n.right, Const) and n.right not in out:
                out.append(n.right)
    return out


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z][A-Za-z0-9_]*)
  | (?P<op>[-+*/^()\[\]])
    """,
    re.VERBOSE,
)


class _Token(NamedTuple):
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), line, pos - line_start + 1))
        else:
            for i, ch in enumerate(m.group()):
                if ch == "\n":
                    line += 1
                    line_start = pos + i + 1
        pos = m.end()
    tokens.append(_Token("end", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, params: frozenset[str]):
        self.tokens = _tokenize(text)
        self.i = 0
        self.params = params

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def peek(self, offset: int = 1) -> _Token:
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def error(self, message: str, tok: _Token | None = None) -> ParseError:
        tok = tok or self.tok
        return ParseError(message, tok.line, tok.column)

    def accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> None:
        if not self.accept(text):
            found = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {found!r}")

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise self.error(f"unexpected {self.tok.text!r}")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            if self.accept("+"):
                e = Add(e, self.term())
            elif self.accept("-"):
                e = Sub(e, self.term())
            else:
                return e

    def term(self) -> Expr:
        e = self.factor()
        while True:
            if self.accept("*"):
                e = Mul(e, self.factor())
            elif self.accept("/"):
                e = Div(e, self.factor())
            else:
                return e

    def factor(self) -> Expr:
        if self.accept("-"):
            if self.tok.kind == "num" and not (self.peek().kind == "op" and self.peek().text == "^"):
                value = float(self.tok.text)
                self.i += 1
                return Const(-value)
            return Neg(self.factor())
        return self.power()

    def power(self) -> Expr:
        base = self.base()
        if self.accept("^"):
            return Pow(base, self.signed_int("exponent must be an integer literal"))
        return base

    def signed_int(self, message: str) -> int:
        sign = -1 if self.accept("-") else 1
        if sign == 1:
            self.accept("+")
        tok = self.tok
        if tok.kind != "num" or not tok.text.isdigit():
            raise self.error(message, tok)
        self.i += 1
        return sign * int(tok.text)

    def base(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Const(float(tok.text))
        if tok.kind == "ident":
            self.i += 1
            if self.accept("("):
                if tok.text not in FUNCTIONS:
                    raise self.error(f"unknown function {tok.text!r}", tok)
                arg = self.expr()
                self.expect(")")
                return Call(tok.text, arg)
            if self.accept("["):
                shift = self.signed_int("shift must be an integer literal")
                self.expect("]")
                if tok.text in self.params:
                    raise self.error(f"parameter {tok.text!r} cannot carry a shift", tok)
                return Var(tok.text, shift)
            if tok.text in self.params:
                return Param(tok.text)
            return Var(tok.text, 0)
        if self.accept("("):
            e = self.expr()
            self.expect(")")
            return e
        found = tok.text or "end of input"
        raise self.error(f"unexpected {found!r}", tok)


def parse_expr(text: str, params: Iterable[str] = ()) -> Expr:
    """Parse ``text``; identifiers listed in ``params`` become parameters."""
    return _Parser(text, frozenset(params)).parse()


# --------------------------------------------------------------------------
# printing

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}
_ATOM = 5


def _format_number(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _prec(e: Expr) -> int:
    if isinstance(e, Const):
        return 3 if e.value < 0 or math.copysign(1.0, e.value) < 0 else _ATOM
    return _PREC.get(type(e), _ATOM)


def to_text(e: Expr) -> str:
    """Render ``e`` so that ``parse_expr`` reproduces the same tree."""

    def wrap(child: Expr, minimum: int) -> str:
        s = to_text(child)
        return f"({s})" if _prec(child) < minimum else s

    if isinstance(e, Const):
        if math.copysign(1.0, e.value) < 0 and e.value == 0:
            return "-0"
        return _format_number(e.value)
    if isinstance(e, Var):
        return e.name if e.shift == 0 else f"{e.name}[{e.shift}]"
    if isinstance(e, Param):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_text(e.arg)})"
    if isinstance(e, Neg):
        inner = e.arg
        # "-3" would re-parse as a negative constant
        if isinstance(inner, Const) and _prec(inner) == _ATOM:
            return f"-({to_text(inner)})"
        return "-" + wrap(inner, 3)
    if isinstance(e, Pow):
        return f"{wrap(e.base, _ATOM)}^{e.exponent}"
    if isinstance(e, (Add, Sub)):
        op = "+" if isinstance(e, Add) else "-"
        return f"{wrap(e.left, 1)} {op} {wrap(e.right, 2)}"
    if isinstance(e, (Mul, Div)):
        op = "*" if isinstance(e, Mul) else "/"
        return f"{wrap(e.left, 2)}{op}{wrap(e.right, 3)}"
    raise TypeError(f"not an expression: {e!r}")


# --------------------------------------------------------------------------
# folding


def _is_const(e: Expr, value: float | None = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


def _signed_terms(e: Expr, sign: int, out: list[tuple[float, Expr]]) -> None:
    if isinstance(e, Add):
        _signed_terms(e.left, sign, out)
        _signed_terms(e.right, sign, out)
    elif isinstance(e, Sub):
        _signed_terms(e.left, sign, out)
        _signed_terms(e.right, -sign, out)
    elif isinstance(e, Neg):
        _signed_terms(e.arg, -sign, out)
    elif isinstance(e, Const):
        out.append((sign * e.value, Const(1.0)))
    elif isinstance(e, Mul) and isinstance(e.left, Const):
        out.append((sign * e.left.value, e.right))
    elif isinstance(e, Mul) and isinstance(e.right, Const):
        out.append((sign * e.right.value, e.left))
    else:
        out.append((float(sign), e))


def _collect_sum(e: Expr) -> Expr:
    terms: list[tuple[float, Expr]] = []
    _signed_terms(e, 1, terms)
    merged: dict[Expr, float] = {}
    for coef, core in terms:
        merged[core] = merged.get(core, 0.0) + coef
    items = [(c, core) for core, c in merged.items() if c != 0.0]
    if not items:
        return Const(0.0)
    # constant term goes last, as it would be written
    items.sort(key=lambda t: _is_const(t[1]))

    def term(c: float, core: Expr) -> Expr:
        if _is_const(core):
            return Const(c)
        return core if c == 1.0 else Mul(Const(c), core)

    c0, core0 = items[0]
    if c0 < 0 and not _is_const(core0):
        out = Neg(term(-c0, core0))
    else:
        out = term(c0, core0)
    for c, core in items[1:]:
        if c < 0:
            out = Sub(out, term(-c, core))
        else:
            out = Add(out, term(c, core))
    return out


def _fold_node(e: Expr) -> Expr:
    """Fold one node whose children are already folded."""
    if isinstance(e, Neg):
        a = e.arg
        if isinstance(a, Const):
            return Const(-a.value)
        if isinstance(a, Neg):
            return a.arg
        return e
    if isinstance(e, (Add, Sub)):
        l, r = e.left, e.right
        if isinstance(l, Const) and isinstance(r, Const):
            return Const(l.value + r.value if isinstance(e, Add) else l.value - r.value)
        return _collect_sum(e)
    if isinstance(e, Mul):
        l, r = e.left, e.right
        if isinstance(l, Const) and isinstance(r, Const):
            return Const(l.value * r.value)
        if _is_const(l, 0.0) or _is_const(r, 0.0):
            return Const(0.0)
        if _is_const(l, 1.0):
            return r
        if _is_const(r, 1.0):
            return l
        if _is_const(l, -1.0):
            return _fold_node(Neg(r))
        if _is_const(r, -1.0):
            return _fold_node(Neg(l))
        if isinstance(l, Neg) and isinstance(r, Neg):
            return Mul(l.arg, r.arg)
        return e
    if isinstance(e, Div):
        l, r = e.left, e.right
        if isinstance(l, Const) and isinstance(r, Const) and r.value != 0.0:
            return Const(l.value / r.value)
        if _is_const(r, 1.0):
            return l
        if _is_const(l, 0.0) and not _is_const(r, 0.0):
            return Const(0.0)
        if l == r and not _is_const(r, 0.0):
            return Const(1.0)
        return e
    if isinstance(e, Pow):
        b, k = e.base, e.exponent
        if k == 1:
            return b
        if k == 0:
            return Const(1.0)
        if isinstance(b, Const) and not (b.value == 0.0 and k < 0):
            try:
                return Const(b.value**k)
            except (OverflowError, ValueError):
                return e
        return e
    if isinstance(e, Call) and isinstance(e.arg, Const):
        try:
            return Const(_apply_float(e.func, e.arg.value))
        except (ValueError, OverflowError):
            return e
    return e


def fold(e: Expr) -> Expr:
    """Constant folding plus cancellation of identical terms in sums.

    No reordering of factors and no distribution is performed, so the result
    is not a canonical form; it is only guaranteed to evaluate to the same
    value wherever the input evaluates.
    """
    return _rebuild(e, _fold_node)


def _rebuild(e: Expr, post: Callable[[Expr], Expr]) -> Expr:
    memo: dict[int, Expr] = {}

    def go(node: Expr) -> Expr:
        key = id(node)
        if key in memo:
            return memo[key]
        if isinstance(node, Neg):
            out = post(Neg(go(node.arg)))
        elif isinstance(node, _Binary):
            out = post(type(node)(go(node.left), go(node.right)))
        elif isinstance(node, Pow):
            out = post(Pow(go(node.base), node.exponent))
        elif isinstance(node, Call):
            out = post(Call(node.func, go(node.arg)))
        else:
            out = post(node)
        memo[key] = out
        return out

    return go(e)


def substitute(e: Expr, rules: Mapping[VarRef, Expr], do_fold: bool = True) -> Expr:
    """Simultaneously replace variables according to ``rules``.

    Variables without a rule are left intact; the result is folded unless
    ``do_fold`` is false.
    """
    rules = {VarRef(*k): as_expr(v) for k, v in rules.items()}

    def post(node: Expr) -> Expr:
        if isinstance(node, Var):
            return rules.get(node.ref, node)
        return node

    out = _rebuild(e, post)
    return fold(out) if do_fold else out


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Binding:
    """Numeric values for variables and parameters."""

    values: Mapping[VarRef, float] = field(default_factory=dict)
    params: Mapping[str, float] = field(default_factory=dict)

    def with_values(self, values: Mapping[VarRef, float]) -> "Binding":
        merged = dict(self.values)
        merged.update(values)
        return Binding(merged, self.params)


def _apply_float(func: str, a: float) -> float:
    if func == "sin":
        return math.sin(a)
    if func == "cos":
        return math.cos(a)
    if func == "exp":
        return math.exp(a)
    if func == "log":
        if a <= 0:
            raise ValueError("log of non-positive value")
        return math.log(a)
    if func == "sqrt":
        if a < 0:
            raise ValueError("sqrt of negative value")
        return math.sqrt(a)
    raise ValueError(func)


class Dual:
    """Forward-mode dual number carrying a dense gradient vector."""

    __slots__ = ("val", "grad")

    def __init__(self, val: float, grad: np.ndarray):
        self.val = val
        self.grad = grad

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val + o.val, self.grad + o.grad)
        return Dual(self.val + o, self.grad)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val - o.val, self.grad - o.grad)
        return Dual(self.val - o, self.grad)

    def __rsub__(self, o):
        return Dual(o - self.val, -self.grad)

    def __neg__(self):
        return Dual(-self.val, -self.grad)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val * o.val, self.grad * o.val + o.grad * self.val)
        return Dual(self.val * o, self.grad * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            q = self.val / o.val
            return Dual(q, (self.grad - o.grad * q) / o.val)
        return Dual(self.val / o, self.grad / o)

    def __rtruediv__(self, o):
        q = o / self.val
        return Dual(q, -self.grad * (q / self.val))

    def __pow__(self, k: int):
        if k == 0:
            return Dual(1.0, np.zeros_like(self.grad))
        return Dual(self.val**k, self.grad * (k * self.val ** (k - 1)))

    def apply(self, func: str) -> "Dual":
        a = self.val
        v = _apply_float(func, a)
        if func == "sin":
            d = math.cos(a)
        elif func == "cos":
            d = -math.sin(a)
        elif func == "exp":
            d = v
        elif func == "log":
            d = 1.0 / a
        else:
            if a == 0:
                raise ValueError("sqrt not differentiable at 0")
            d = 0.5 / v
        return Dual(v, self.grad * d)


def _real(x) -> float:
    return x.val if isinstance(x, Dual) else x


def _evaluate(e: Expr, lookup: Callable[[Expr], object]):
    memo: dict[int, object] = {}

    def go(node: Expr):
        key = id(node)
        if key in memo:
            return memo[key]
        if isinstance(node, Const):
            out = node.value
        elif isinstance(node, (Var, Param)):
            out = lookup(node)
        elif isinstance(node, Add):
            out = go(node.left) + go(node.right)
        elif isinstance(node, Sub):
            out = go(node.left) - go(node.right)
        elif isinstance(node, Mul):
            out = go(node.left) * go(node.right)
        elif isinstance(node, Div):
            den = go(node.right)
            if _real(den) == 0.0:
                raise SingularEvaluation("division by zero", node)
            out = go(node.left) / den
        elif isinstance(node, Neg):
            out = -go(node.arg)
        elif isinstance(node, Pow):
            b = go(node.base)
            if node.exponent < 0 and _real(b) == 0.0:
                raise SingularEvaluation("negative power of zero", node)
            try:
                out = b**node.exponent
            except OverflowError:
                raise SingularEvaluation("overflow", node) from None
        elif isinstance(node, Call):
            a = go(node.arg)
            try:
                out = a.apply(node.func) if isinstance(a, Dual) else _apply_float(node.func, a)
            except (ValueError, OverflowError) as exc:
                raise SingularEvaluation(str(exc), node) from None
        else:
            raise TypeError(f"not an expression: {node!r}")
        memo[key] = out
        return out

    return go(e)


def _binding_lookup(b: Binding):
    def lookup(node):
        if isinstance(node, Var):
            try:
                return b.values[node.ref]
            except KeyError:
                raise UnboundSymbol(f"unbound variable {node.ref}") from None
        try:
            return b.params[node.name]
        except KeyError:
            raise UnboundSymbol(f"unbound parameter {node.name}") from None

    return lookup


def eval_expr(e: Expr, b: Binding) -> float:
    """Evaluate ``e`` in IEEE double arithmetic."""
    return float(_evaluate(e, _binding_lookup(b)))


def eval_many(exprs: Sequence[Expr], b: Binding) -> np.ndarray:
    lookup = _binding_lookup(b)
    return np.array([float(_evaluate(e, lookup)) for e in exprs], dtype=float)


def eval_with_jacobian(
    exprs: Sequence[Expr], vars: Sequence[VarRef], b: Binding
) -> tuple[np.ndarray, np.ndarray]:
    """Values and the Jacobian w.r.t. ``vars`` by dual-number propagation."""
    vars = [VarRef(*v) for v in vars]
    if len(set(vars)) != len(vars):
        raise ValueError("jacobian variables must be pairwise distinct")
    k = len(vars)
    seeds = {}
    for j, v in enumerate(vars):
        g = np.zeros(k)
        g[j] = 1.0
        try:
            seeds[v] = Dual(float(b.values[v]), g)
        except KeyError:
            raise UnboundSymbol(f"unbound variable {v}") from None
    base = _binding_lookup(b)

    def lookup(node):
        if isinstance(node, Var) and node.ref in seeds:
            return seeds[node.ref]
        return base(node)

    values = np.empty(len(exprs))
    jac = np.zeros((len(exprs), k))
    for i, e in enumerate(exprs):
        out = _evaluate(e, lookup)
        if isinstance(out, Dual):
            values[i] = out.val
            jac[i] = out.grad
        else:
            values[i] = out
    return values, jac


def jacobian_at(exprs: Sequence[Expr], vars: Sequence[VarRef], b: Binding) -> np.ndarray:
    return eval_with_jacobian(exprs, vars, b)[1]
