"""Expression trees over state variables x1..xn.

Expressions are immutable dataclasses built through smart constructors that
perform constant folding and the 0/1 identities. Derivatives are themselves
expressions; evaluation goes through :func:`compile_expr`, which turns a tree
into nested closures that accept floats or numpy arrays.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "tanh")


class ExprSyntaxError(ValueError):
    """Malformed source text. ``position`` is a 0-based character offset."""

    def __init__(self, message: str, position: int, source: str = ""):
        self.position = position
        self.source = source
        super().__init__(f"{message} at position {position}")


class UnknownIdentifier(ExprSyntaxError):
    pass


class VariableOutOfRange(ExprSyntaxError):
    pass


class EvalDomainError(ArithmeticError):
    """Raised by strict evaluation when a node leaves its domain."""

    def __init__(self, message: str, subexpr: "Expr"):
        self.subexpr = subexpr
        super().__init__(f"{message} in subexpression '{to_string(subexpr)}'")


class Expr:
    __slots__ = ()

    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k: int):
        return power(self, k)

    def __str__(self):
        return to_string(self)


@dataclass(frozen=True, repr=False)
class Const(Expr):
    value: float

    def __repr__(self):
        return f"Const({self.value!r})"


@dataclass(frozen=True, repr=False)
class Var(Expr):
    index: int  # 1-based

    def __repr__(self):
        return f"Var({self.index})"


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True)
class Func(Expr):
    name: str
    arg: Expr


ZERO = Const(0.0)
ONE = Const(1.0)

ExprLike = Union[Expr, float, int]


def as_expr(value: ExprLike) -> Expr:
    if isinstance(value, Expr):
        return value
    return Const(float(value))


def _is_const(e: Expr, value: float | None = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


# -- smart constructors ---------------------------------------------------


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    return Div(a, b)


def power(a: Expr, k: int) -> Expr:
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise TypeError("only integer exponents are supported")
    k = int(k)
    if k == 0:
        return ONE
    if k == 1:
        return a
    if isinstance(a, Const) and not (a.value == 0.0 and k < 0):
        return Const(a.value**k)
    return Pow(a, k)


def func(name: str, a: Expr) -> Expr:
    if name not in FUNCTIONS:
        raise ValueError(f"unknown function {name!r}")
    if isinstance(a, Const):
        v = a.value
        if name in ("sin", "tanh") and v == 0.0:
            return ZERO
        if name in ("cos", "exp") and v == 0.0:
            return ONE
        if name == "log" and v == 1.0:
            return ZERO
        if name == "sqrt" and v >= 0.0:
            return Const(math.sqrt(v))
    return Func(name, a)


def variables(n: int) -> list[Var]:
    return [Var(i) for i in range(1, n + 1)]


# -- parsing --------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while True:
        while pos < len(source) and source[pos].isspace():
            pos += 1
        if pos == len(source):
            break
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", pos, source)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, n: int):
        self.source = source
        self.n = n
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", pos, self.source)

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", pos, self.source)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def term(self) -> Expr:
        e = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.factor()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def factor(self) -> Expr:
        negate = False
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            negate = True
        e = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            sign = 1
            if self.peek()[0] == "op" and self.peek()[1] in "+-":
                sign = -1 if self.take()[1] == "-" else 1
            kind, text, pos = self.take()
            if kind != "num" or not text.isdigit():
                raise ExprSyntaxError("exponent must be an integer literal", pos, self.source)
            e = power(e, sign * int(text))
        return neg(e) if negate else e

    def atom(self) -> Expr:
        kind, text, pos = self.take()
        if kind == "num":
            return Const(float(text))
        if kind == "name":
            m = re.fullmatch(r"x(\d+)", text)
            if m:
                idx = int(m.group(1))
                if not 1 <= idx <= self.n:
                    raise VariableOutOfRange(
                        f"variable {text} outside x1..x{self.n}", pos, self.source
                    )
                return Var(idx)
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return func(text, arg)
            raise UnknownIdentifier(f"unknown identifier {text!r}", pos, self.source)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {found}", pos, self.source)


def parse(source: str, n: int) -> Expr:
    """Parse ``source`` into an expression over x1..xn.

    >>> evaluate(parse("1 - x1^2 - x2^2", 2), [0.0, 0.0])
    1.0
    """
    if n < 1:
        raise ValueError("dimension must be positive")
    return _Parser(source, n).parse()


# -- printing -------------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_UNARY, _PREC_ATOM = 1, 2, 3, 4


def _fmt_number(v: float) -> str:
    if math.isfinite(v) and v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _prec(e: Expr) -> int:
    if isinstance(e, (Add, Sub)):
        return _PREC_ADD
    if isinstance(e, (Mul, Div)):
        return _PREC_MUL
    if isinstance(e, (Neg, Pow)):
        return _PREC_UNARY
    if isinstance(e, Const) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return _PREC_UNARY
    return _PREC_ATOM


def _wrap(e: Expr, min_prec: int) -> str:
    s = to_string(e)
    return f"({s})" if _prec(e) < min_prec else s


def to_string(e: Expr) -> str:
    """Render ``e`` so that ``parse(to_string(e), n) == e``."""
    if isinstance(e, Const):
        return _fmt_number(e.value)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Func):
        return f"{e.name}({to_string(e.arg)})"
    if isinstance(e, Pow):
        return f"{_wrap(e.base, _PREC_ATOM)}^{e.exponent}"
    if isinstance(e, Neg):
        # a factor is ['-'] atom ['^' k]; anything else needs parentheses
        a = e.arg
        if isinstance(a, Pow) or _prec(a) == _PREC_ATOM:
            return "-" + to_string(a)
        return f"-({to_string(a)})"
    if isinstance(e, (Add, Sub)):
        op = " + " if isinstance(e, Add) else " - "
        # left-associative: right operand must bind tighter
        return _wrap(e.left, _PREC_ADD) + op + _wrap(e.right, _PREC_MUL)
    if isinstance(e, (Mul, Div)):
        op = " * " if isinstance(e, Mul) else " / "
        return _wrap(e.left, _PREC_MUL) + op + _wrap(e.right, _PREC_UNARY)
    raise TypeError(f"not an expression: {e!r}")


# -- differentiation ------------------------------------------------------


def diff(e: Expr, i: int) -> Expr:
    """Partial derivative of ``e`` with respect to x_i (1-based)."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == i else ZERO
    if isinstance(e, Neg):
        return neg(diff(e.arg, i))
    if isinstance(e, Add):
        return add(diff(e.left, i), diff(e.right, i))
    if isinstance(e, Sub):
        return sub(diff(e.left, i), diff(e.right, i))
    if isinstance(e, Mul):
        return add(mul(diff(e.left, i), e.right), mul(e.left, diff(e.right, i)))
    if isinstance(e, Div):
        du, dv = diff(e.left, i), diff(e.right, i)
        if _is_const(dv, 0.0):
            return div(du, e.right)
        return div(sub(mul(du, e.right), mul(e.left, dv)), power(e.right, 2))
    if isinstance(e, Pow):
        db = diff(e.base, i)
        if _is_const(db, 0.0):
            return ZERO
        k = e.exponent
        return mul(mul(Const(float(k)), power(e.base, k - 1)), db)
    if isinstance(e, Func):
        da = diff(e.arg, i)
        if _is_const(da, 0.0):
            return ZERO
        a = e.arg
        if e.name == "sin":
            outer = func("cos", a)
        elif e.name == "cos":
            outer = neg(func("sin", a))
        elif e.name == "exp":
            outer = e
        elif e.name == "log":
            return div(da, a)
        elif e.name == "sqrt":
            return div(da, mul(Const(2.0), e))
        elif e.name == "tanh":
            outer = sub(ONE, power(e, 2))
        else:  # pragma: no cover - guarded by func()
            raise ValueError(e.name)
        return mul(outer, da)
    raise TypeError(f"not an expression: {e!r}")


def gradient(e: Expr, n: int) -> list[Expr]:
    return [diff(e, i) for i in range(1, n + 1)]


def hessian(e: Expr, n: int) -> list[list[Expr]]:
    """Symmetric by construction: the upper triangle is mirrored."""
    g = gradient(e, n)
    H: list[list[Expr]] = [[ZERO] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            H[i][j] = H[j][i] = diff(g[i], j + 1)
    return H


@dataclass(frozen=True)
class VectorField:
    n: int
    components: tuple[Expr, ...]

    def __post_init__(self):
        if len(self.components) != self.n:
            raise ValueError(
                f"vector field has {len(self.components)} components, expected {self.n}"
            )

    @classmethod
    def parse(cls, sources: Sequence[str], n: int) -> "VectorField":
        if len(sources) != n:
            raise ValueError(f"vector field has {len(sources)} components, expected {n}")
        return cls(n, tuple(parse(s, n) for s in sources))

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i: int) -> Expr:
        return self.components[i]


def jacobian(v: VectorField) -> list[list[Expr]]:
    """``J[i][j] = d v_i / d x_{j+1}``."""
    return [gradient(c, v.n) for c in v.components]


def dot(a: Sequence[Expr], b: Sequence[Expr]) -> Expr:
    acc: Expr = ZERO
    for p, q in zip(a, b):
        acc = add(acc, mul(p, q))
    return acc


# -- evaluation -----------------------------------------------------------

Compiled = Callable[[Sequence], object]

_NUMPY_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
}


def compile_expr(e: Expr, strict: bool = True) -> Compiled:
    """Return ``fn(x)`` evaluating ``e``; ``x[i-1]`` may be a float or an array.

    With ``strict`` a domain violation (division by zero, log of a
    nonpositive value, sqrt of a negative value) raises EvalDomainError;
    otherwise numpy's nan/inf propagation is used silently.
    """
    if isinstance(e, Const):
        v = e.value
        return lambda x: v
    if isinstance(e, Var):
        k = e.index - 1
        return lambda x: x[k]
    if isinstance(e, Neg):
        fa = compile_expr(e.arg, strict)
        return lambda x: -fa(x)
    if isinstance(e, Add):
        fl, fr = compile_expr(e.left, strict), compile_expr(e.right, strict)
        return lambda x: fl(x) + fr(x)
    if isinstance(e, Sub):
        fl, fr = compile_expr(e.left, strict), compile_expr(e.right, strict)
        return lambda x: fl(x) - fr(x)
    if isinstance(e, Mul):
        fl, fr = compile_expr(e.left, strict), compile_expr(e.right, strict)
        return lambda x: fl(x) * fr(x)
    if isinstance(e, Div):
        fl, fr = compile_expr(e.left, strict), compile_expr(e.right, strict)
        if strict:

            def _div(x):
                d = fr(x)
                if np.any(d == 0):
                    raise EvalDomainError("division by zero", e)
                return fl(x) / d

            return _div

        def _div_lax(x):
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.true_divide(fl(x), fr(x))

        return _div_lax
    if isinstance(e, Pow):
        fb = compile_expr(e.base, strict)
        k = e.exponent
        if k > 0:
            return lambda x: fb(x) ** k
        if strict:

            def _pow_neg(x):
                b = fb(x)
                if np.any(b == 0):
                    raise EvalDomainError("zero raised to a negative power", e)
                return 1.0 / b ** (-k)

            return _pow_neg

        def _pow_neg_lax(x):
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.true_divide(1.0, fb(x) ** (-k))

        return _pow_neg_lax
    if isinstance(e, Func):
        fa = compile_expr(e.arg, strict)
        npf = _NUMPY_FUNCS[e.name]
        mf = getattr(math, e.name)
        check = None
        if e.name == "log":
            check = (lambda a: np.any(a <= 0), "log of a nonpositive value")
        elif e.name == "sqrt":
            check = (lambda a: np.any(a < 0), "sqrt of a negative value")
        if strict:

            def _func(x):
                a = fa(x)
                if check is not None and check[0](a):
                    raise EvalDomainError(check[1], e)
                if isinstance(a, float):
                    try:
                        return mf(a)
                    except OverflowError:
                        return math.inf
                return npf(a)

            return _func

        def _func_lax(x):
            with np.errstate(all="ignore"):
                return npf(fa(x))

        return _func_lax
    raise TypeError(f"not an expression: {e!r}")


def evaluate(e: Expr, x: Sequence[float], n: int | None = None) -> float:
    """Strict scalar evaluation at a single point."""
    if n is not None and len(x) != n:
        raise ValueError(f"point has dimension {len(x)}, expected {n}")
    xs = [float(v) for v in x]
    needed = max_var_index(e)
    if needed > len(xs):
        raise ValueError(f"expression uses x{needed} but point has dimension {len(xs)}")
    return float(compile_expr(e, strict=True)(xs))


def max_var_index(e: Expr) -> int:
    if isinstance(e, Var):
        return e.index
    if isinstance(e, Const):
        return 0
    if isinstance(e, (Neg, Func)):
        return max_var_index(e.arg)
    if isinstance(e, Pow):
        return max_var_index(e.base)
    return max(max_var_index(e.left), max_var_index(e.right))


def compile_many(exprs, strict: bool = True) -> Callable[[Sequence], np.ndarray]:
    """Compile a (nested) list of expressions into one function returning an array."""
    arr = np.asarray(exprs, dtype=object)
    fns = [compile_expr(e, strict) for e in arr.ravel()]
    shape = arr.shape

    def run(x):
        batch = np.shape(x[0])
        out = np.empty((len(fns),) + batch)
        for i, f in enumerate(fns):
            out[i] = f(x)
        return out.reshape(shape + batch)

    return run
