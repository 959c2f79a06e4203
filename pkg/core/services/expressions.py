"""
Scalar expression fields on a single coordinate chart.

This module provides the chart box, the expression grammar (parser and
syntax tree) and second-order forward-mode differentiation. A Jet carries
the value, gradient and Hessian of an expression over a batch of points and
is propagated through the tree with the same rules nested dual numbers
follow, so first and second derivatives are exact to machine precision.

Grammar (whitespace insignificant):

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' integer)?
    atom   := number | 'x<i>' | func '(' expr ')' | '(' expr ')'
    func   := sin | cos | exp | sqrt | neg
"""
import logging
import math
import re
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from core.services.errors import (
    ExpressionSyntaxError,
    NormalFormError,
    OutOfDomain,
    UndefinedExpression,
)

logger = logging.getLogger(__name__)

FUNCTIONS = frozenset(["sin", "cos", "exp", "sqrt", "neg"])

# Points closer than this (relative to the box size) to a face still count as inside.
BOX_SLACK = 1e-12


@dataclass(frozen=True)
class ChartBox:
    """
    Closed coordinate box of a single chart.

    Attributes:
        name: Human-readable chart name.
        bounds: One (lower, upper) pair per coordinate.
    """
    name: str
    bounds: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(bounds) < 1:
            raise NormalFormError(f"Chart {self.name!r} must have dimension at least 1")
        for i, (lo, hi) in enumerate(bounds):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise NormalFormError(f"Chart {self.name!r}: bound {i + 1} is not finite")
            if lo > hi:
                raise NormalFormError(f"Chart {self.name!r}: bound {i + 1} is empty ({lo} > {hi})")
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def cube(cls, name: str, dimension: int, half_width: float,
             center: Optional[Sequence[float]] = None) -> "ChartBox":
        """Box of the given half width around a center (the origin by default)."""
        center = [0.0] * dimension if center is None else list(center)
        return cls(name, tuple((c - half_width, c + half_width) for c in center))

    @property
    def dimension(self) -> int:
        return len(self.bounds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.bounds])

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of the points (shape (B, n)) that lie in the box."""
        points = np.atleast_2d(points)
        slack = BOX_SLACK * np.maximum(1.0, self.upper - self.lower)
        inside = (points >= self.lower - slack) & (points <= self.upper + slack)
        return np.all(inside, axis=-1) & np.all(np.isfinite(points), axis=-1)

    def require(self, points: np.ndarray) -> np.ndarray:
        """Return the points as a (B, n) array, raising OutOfDomain if any lies outside."""
        points = as_points(points, self.dimension)
        inside = self.contains(points)
        if not np.all(inside):
            bad = points[int(np.argmin(inside))]
            raise OutOfDomain(
                f"Point {np.array2string(bad, precision=6)} lies outside chart {self.name!r}",
                point=bad.tolist(),
                chart=self.name,
            )
        return points


def as_points(points, dimension: int) -> np.ndarray:
    """Coerce a point or a batch of points into a float array of shape (B, dimension)."""
    array = np.asarray(points, dtype=float)
    if array.ndim == 1:
        array = array[np.newaxis, :]
    if array.ndim != 2 or array.shape[1] != dimension:
        raise NormalFormError(
            f"Expected points with {dimension} coordinates, got shape {np.shape(points)}"
        )
    return array


# Syntax tree

@dataclass(frozen=True)
class Const:
    value: float

    def __str__(self) -> str:
        text = repr(float(self.value))
        return f"({text})" if self.value < 0 else text


@dataclass(frozen=True)
class Var:
    index: int  # zero-based

    def __str__(self) -> str:
        return f"x{self.index + 1}"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"

    def __str__(self) -> str:
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Power:
    base: "Node"
    exponent: int

    def __str__(self) -> str:
        return f"({self.base})^{self.exponent}" if self.exponent >= 0 else f"({self.base})^({self.exponent})"


@dataclass(frozen=True)
class Call:
    function: str
    argument: "Node"

    def __str__(self) -> str:
        return f"{self.function}({self.argument})"


Node = Union[Const, Var, BinOp, Power, Call]


_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<var>x\d+)"
    r"|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<op>[-+*/^()])"
    r"|(?P<bad>\S)"
    r")"
)


class _Parser:
    """Recursive-descent parser for the expression grammar."""

    def __init__(self, text: str):
        self.text = text
        self.tokens = list(self._tokenize(text))
        self.position = 0

    def _tokenize(self, text: str) -> Iterator[Tuple[str, str, int]]:
        for match in _TOKEN.finditer(text):
            kind = match.lastgroup
            if kind is None:
                continue
            value = match.group(kind)
            if kind == "bad":
                raise ExpressionSyntaxError(
                    f"Unexpected character {value!r} at offset {match.start(kind)} in {text!r}",
                    offset=match.start(kind),
                )
            yield kind, value, match.start(kind)

    def _peek(self) -> Optional[Tuple[str, str, int]]:
        return self.tokens[self.position] if self.position < len(self.tokens) else None

    def _take(self) -> Tuple[str, str, int]:
        token = self._peek()
        if token is None:
            raise ExpressionSyntaxError(f"Unexpected end of expression {self.text!r}")
        self.position += 1
        return token

    def _expect(self, value: str) -> None:
        kind, found, offset = self._take()
        if found != value:
            raise ExpressionSyntaxError(
                f"Expected {value!r} at offset {offset} in {self.text!r}, found {found!r}",
                offset=offset,
            )

    def _at(self, *values: str) -> bool:
        token = self._peek()
        return token is not None and token[0] == "op" and token[1] in values

    def parse(self) -> Node:
        if not self.tokens:
            raise ExpressionSyntaxError("Empty expression")
        node = self._expr()
        if self._peek() is not None:
            _, value, offset = self._peek()
            raise ExpressionSyntaxError(
                f"Unexpected {value!r} at offset {offset} in {self.text!r}", offset=offset
            )
        return node

    def _expr(self) -> Node:
        node = self._term()
        while self._at("+", "-"):
            op = self._take()[1]
            node = BinOp(op, node, self._term())
        return node

    def _term(self) -> Node:
        node = self._unary()
        while self._at("*", "/"):
            op = self._take()[1]
            node = BinOp(op, node, self._unary())
        return node

    def _unary(self) -> Node:
        if self._at("-"):
            self._take()
            return Call("neg", self._unary())
        if self._at("+"):
            self._take()
            return self._unary()
        return self._power()

    def _power(self) -> Node:
        base = self._atom()
        if self._at("^"):
            self._take()
            return Power(base, self._integer())
        return base

    def _integer(self) -> int:
        parenthesised = self._at("(")
        if parenthesised:
            self._take()
        sign = 1
        if self._at("-", "+"):
            sign = -1 if self._take()[1] == "-" else 1
        kind, value, offset = self._take()
        if kind != "number" or not value.isdigit():
            raise ExpressionSyntaxError(
                f"Exponent must be an integer literal at offset {offset} in {self.text!r}",
                offset=offset,
            )
        if parenthesised:
            self._expect(")")
        return sign * int(value)

    def _atom(self) -> Node:
        kind, value, offset = self._take()
        if kind == "number":
            return Const(float(value))
        if kind == "var":
            index = int(value[1:])
            if index < 1:
                raise ExpressionSyntaxError(f"Coordinate {value!r} does not exist", offset=offset)
            return Var(index - 1)
        if kind == "name":
            if value not in FUNCTIONS:
                raise ExpressionSyntaxError(
                    f"Unknown function {value!r} at offset {offset}; "
                    f"must be one of: {', '.join(sorted(FUNCTIONS))}",
                    offset=offset,
                )
            self._expect("(")
            argument = self._expr()
            self._expect(")")
            return Call(value, argument)
        if value == "(":
            node = self._expr()
            self._expect(")")
            return node
        raise ExpressionSyntaxError(f"Unexpected {value!r} at offset {offset} in {self.text!r}", offset=offset)


def parse_expression(text: str) -> Node:
    """Parse an expression string into its syntax tree."""
    return _Parser(text).parse()


def max_variable(node: Node) -> int:
    """Largest (one-based) coordinate index used by the tree, 0 for constants."""
    if isinstance(node, Var):
        return node.index + 1
    if isinstance(node, BinOp):
        return max(max_variable(node.left), max_variable(node.right))
    if isinstance(node, (Power, Call)):
        return max_variable(node.base if isinstance(node, Power) else node.argument)
    return 0


# Jets

class Jet:
    """
    Value, gradient and Hessian of a scalar over a batch of points.

    Shapes are (B,), (B, n) and (B, n, n). Order-0 and order-1 jets leave the
    unused parts as None.
    """

    __slots__ = ("value", "grad", "hess", "points")

    def __init__(self, value, grad, hess, points):
        self.value = value
        self.grad = grad
        self.hess = hess
        self.points = points

    @property
    def order(self) -> int:
        return 0 if self.grad is None else (1 if self.hess is None else 2)

    @classmethod
    def constant(cls, c: float, points: np.ndarray, order: int) -> "Jet":
        batch, n = points.shape
        value = np.full(batch, float(c))
        grad = np.zeros((batch, n)) if order >= 1 else None
        hess = np.zeros((batch, n, n)) if order >= 2 else None
        return cls(value, grad, hess, points)

    @classmethod
    def variable(cls, index: int, points: np.ndarray, order: int) -> "Jet":
        batch, n = points.shape
        grad = hess = None
        if order >= 1:
            grad = np.zeros((batch, n))
            grad[:, index] = 1.0
        if order >= 2:
            hess = np.zeros((batch, n, n))
        return cls(points[:, index].copy(), grad, hess, points)

    def __add__(self, other: "Jet") -> "Jet":
        return Jet(
            self.value + other.value,
            None if self.grad is None else self.grad + other.grad,
            None if self.hess is None else self.hess + other.hess,
            self.points,
        )

    def __sub__(self, other: "Jet") -> "Jet":
        return self + other.scaled(-1.0)

    def scaled(self, c: float) -> "Jet":
        return Jet(
            c * self.value,
            None if self.grad is None else c * self.grad,
            None if self.hess is None else c * self.hess,
            self.points,
        )

    def __mul__(self, other: "Jet") -> "Jet":
        a, b = self.value, other.value
        grad = hess = None
        if self.grad is not None:
            grad = a[:, None] * other.grad + b[:, None] * self.grad
        if self.hess is not None:
            cross = self.grad[:, :, None] * other.grad[:, None, :]
            hess = (a[:, None, None] * other.hess + b[:, None, None] * self.hess
                    + cross + np.swapaxes(cross, 1, 2))
        return Jet(a * b, grad, hess, self.points)

    def __truediv__(self, other: "Jet") -> "Jet":
        return self * other.reciprocal()

    def chain(self, f, f1, f2) -> "Jet":
        """Compose with a scalar function given its value and first two derivatives here."""
        grad = hess = None
        if self.grad is not None:
            grad = f1[:, None] * self.grad
        if self.hess is not None:
            hess = (f1[:, None, None] * self.hess
                    + f2[:, None, None] * self.grad[:, :, None] * self.grad[:, None, :])
        return Jet(f, grad, hess, self.points)

    def _undefined(self, mask: np.ndarray, what: str) -> None:
        if np.any(mask):
            bad = self.points[int(np.argmax(mask))]
            raise UndefinedExpression(
                f"{what} at {np.array2string(bad, precision=6)}", point=bad.tolist()
            )

    def reciprocal(self) -> "Jet":
        v = self.value
        self._undefined(v == 0.0, "Division by zero")
        return self.chain(1.0 / v, -1.0 / v**2, 2.0 / v**3)

    def power(self, k: int) -> "Jet":
        if k == 0:
            return Jet.constant(1.0, self.points, self.order)
        if k < 0:
            return self.reciprocal().power(-k)
        v = self.value
        f1 = k * v ** (k - 1)
        f2 = k * (k - 1) * v ** (k - 2) if k >= 2 else np.zeros_like(v)
        return self.chain(v**k, f1, f2)

    def apply(self, name: str) -> "Jet":
        v = self.value
        if name == "neg":
            return self.scaled(-1.0)
        if name == "sin":
            return self.chain(np.sin(v), np.cos(v), -np.sin(v))
        if name == "cos":
            return self.chain(np.cos(v), -np.sin(v), -np.cos(v))
        if name == "exp":
            e = np.exp(v)
            return self.chain(e, e, e)
        if name == "sqrt":
            self._undefined(v < 0.0, "Square root of a negative number")
            if self.order >= 1:
                self._undefined(v == 0.0, "Square root is not differentiable at zero")
                s = np.sqrt(v)
                return self.chain(s, 0.5 / s, -0.25 / (s * v))
            return Jet(np.sqrt(v), None, None, self.points)
        raise ExpressionSyntaxError(f"Unknown function {name!r}")


def _evaluate(node: Node, points: np.ndarray, order: int) -> Jet:
    if isinstance(node, Const):
        return Jet.constant(node.value, points, order)
    if isinstance(node, Var):
        return Jet.variable(node.index, points, order)
    if isinstance(node, BinOp):
        left = _evaluate(node.left, points, order)
        right = _evaluate(node.right, points, order)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        return left / right
    if isinstance(node, Power):
        return _evaluate(node.base, points, order).power(node.exponent)
    return _evaluate(node.argument, points, order).apply(node.function)


class ExpressionField:
    """
    Scalar function on a chart given by an expression tree.

    Instances are immutable; evaluation accepts a single point (shape (n,))
    or a batch (shape (B, n)).
    """

    __slots__ = ("_box", "_node", "_source")

    def __init__(self, source: Union[str, Node, float], box: ChartBox):
        if isinstance(source, (int, float)):
            node = Const(float(source))
        elif isinstance(source, str):
            node = parse_expression(source)
        else:
            node = source
        if max_variable(node) > box.dimension:
            raise ExpressionSyntaxError(
                f"Expression {source!s} uses x{max_variable(node)} "
                f"but chart {box.name!r} has dimension {box.dimension}"
            )
        self._box = box
        self._node = node
        self._source = source if isinstance(source, str) else str(node)

    @classmethod
    def constant(cls, value: float, box: ChartBox) -> "ExpressionField":
        return cls(Const(float(value)), box)

    @classmethod
    def affine(cls, offset: float, coefficients: Sequence[float], box: ChartBox) -> "ExpressionField":
        """Build offset + Σ c_i x_i directly as a tree, skipping zero coefficients."""
        node: Node = Const(float(offset))
        for i, c in enumerate(coefficients):
            if c != 0.0:
                node = BinOp("+", node, BinOp("*", Const(float(c)), Var(i)))
        return cls(node, box)

    @property
    def box(self) -> ChartBox:
        return self._box

    @property
    def node(self) -> Node:
        return self._node

    @property
    def is_constant(self) -> bool:
        return max_variable(self._node) == 0

    def negated(self) -> "ExpressionField":
        return ExpressionField(Call("neg", self._node), self._box)

    def __str__(self) -> str:
        return self._source

    def __repr__(self) -> str:
        return f"ExpressionField({self._source!r}, box={self._box.name!r})"

    def jet(self, points, order: int = 1) -> Jet:
        """Evaluate with derivatives up to the given order (0, 1 or 2) at checked points."""
        if order not in (0, 1, 2):
            raise NormalFormError(f"Jet order must be 0, 1 or 2, got {order}")
        points = self._box.require(points)
        with np.errstate(all="ignore"):
            result = _evaluate(self._node, points, order)
        for part in (result.value, result.grad, result.hess):
            if part is not None and not np.all(np.isfinite(part)):
                bad = points[int(np.argmin(np.all(np.isfinite(
                    part.reshape(part.shape[0], -1)), axis=1)))]
                raise UndefinedExpression(
                    f"Expression {self._source!r} is not finite at {np.array2string(bad, precision=6)}",
                    point=bad.tolist(),
                )
        return result

    def evaluate(self, points) -> np.ndarray:
        """Values at a batch of points, shape (B,)."""
        return self.jet(points, order=0).value


def eval_with_jet(f: ExpressionField, x, order: int = 1):
    """
    Value, gradient and (for order 2) Hessian of f at a single point.

    Returns:
        (value, gradient) for order 1, (value, gradient, hessian) for order 2.

    Raises:
        OutOfDomain: If x lies outside the chart box.
        UndefinedExpression: On division by zero or sqrt outside its domain.
    """
    if order not in (1, 2):
        raise NormalFormError(f"eval_with_jet supports order 1 or 2, got {order}")
    result = f.jet(np.asarray(x, dtype=float).reshape(1, -1), order)
    if order == 1:
        return float(result.value[0]), result.grad[0]
    return float(result.value[0]), result.grad[0], result.hess[0]
