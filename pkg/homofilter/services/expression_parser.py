"""Coefficient expression language.

Grammar (Pratt parser, standard precedence, right-associative ``^``)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | '+' unary | power
    power  := atom ('^' unary)?
    atom   := number | var | 'pi' | func '(' expr ')' | '(' expr ')'

Variables are ``x1..xm`` and ``z1..zn`` (``x_1`` and, in one dimension, ``x``
are accepted too). Functions: sin, cos, exp, tanh, sqrt, abs.

Trees print fully parenthesized with shortest round-trip float literals, so
``parse(print(e))`` rebuilds ``e`` exactly.
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from homofilter.exceptions import (
    ArityError,
    ExpressionDomainError,
    ExpressionSyntaxError,
    UnknownIdentifierError,
)

logger = logging.getLogger(__name__)

FUNCTIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "abs": np.abs,
}

CONSTANTS = {"pi": math.pi}

# Binding powers
INFIX_LBP = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 40}
PREFIX_RBP = 30

END = "end of input"
ATOM_START = ("number", "identifier", "(", "-", "+")

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<identifier>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
    r")"
)
_VAR_RE = re.compile(r"^([xz])_?(\d+)$")


# Expression tree

class Node:
    """Base class of expression tree nodes."""

    def evaluate(self, x: np.ndarray, z: np.ndarray):
        raise NotImplementedError

    def to_text(self) -> str:
        raise NotImplementedError

    def variables(self) -> List["Var"]:
        return []

    def __str__(self) -> str:
        return self.to_text()


@dataclass(frozen=True)
class Num(Node):
    value: float

    def evaluate(self, x, z):
        return self.value

    def to_text(self) -> str:
        if self.value < 0 or (self.value == 0 and math.copysign(1.0, self.value) < 0):
            return f"(-{repr(-self.value)})"
        return repr(self.value)


@dataclass(frozen=True)
class Var(Node):
    kind: str  # "x" or "z"
    index: int  # 1-based

    def evaluate(self, x, z):
        source = x if self.kind == "x" else z
        return source[:, self.index - 1]

    def to_text(self) -> str:
        return f"{self.kind}{self.index}"

    def variables(self):
        return [self]


@dataclass(frozen=True)
class Neg(Node):
    operand: Node

    def evaluate(self, x, z):
        return -self.operand.evaluate(x, z)

    def to_text(self) -> str:
        return f"(-{self.operand.to_text()})"

    def variables(self):
        return self.operand.variables()


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    def evaluate(self, x, z):
        a = self.left.evaluate(x, z)
        b = self.right.evaluate(x, z)
        if self.op == "+":
            out = np.add(a, b)
        elif self.op == "-":
            out = np.subtract(a, b)
        elif self.op == "*":
            out = np.multiply(a, b)
        elif self.op == "/":
            out = np.divide(a, b)
        else:
            out = np.power(np.asarray(a, dtype=float), b)
        _require_finite(out, self)
        return out

    def to_text(self) -> str:
        return f"({self.left.to_text()} {self.op} {self.right.to_text()})"

    def variables(self):
        return self.left.variables() + self.right.variables()


@dataclass(frozen=True)
class Call(Node):
    func: str
    arg: Node

    def evaluate(self, x, z):
        out = FUNCTIONS[self.func](self.arg.evaluate(x, z))
        _require_finite(out, self)
        return out

    def to_text(self) -> str:
        return f"{self.func}({self.arg.to_text()})"

    def variables(self):
        return self.arg.variables()


def _require_finite(value, node: Node) -> None:
    if not np.all(np.isfinite(value)):
        raise ExpressionDomainError(
            f"non-finite value in {node.to_text()}",
            location=node.to_text(),
            suggestion="check the coefficient domain (sqrt of negatives, division by zero, overflow)",
        )


@dataclass(frozen=True)
class CoefficientExpr:
    """A parsed scalar coefficient expression over x1..xm, z1..zn."""

    text: str
    root: Node
    dims: Tuple[int, int]

    @property
    def depends_on_z(self) -> bool:
        return any(v.kind == "z" for v in self.root.variables())

    @property
    def depends_on_x(self) -> bool:
        return any(v.kind == "x" for v in self.root.variables())

    def evaluate(self, x: np.ndarray, z: Optional[np.ndarray] = None) -> np.ndarray:
        """Evaluate on a batch: x has shape (N, m), z has shape (N, n); returns (N,)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if z is None:
            z = np.zeros((x.shape[0], max(self.dims[1], 1)))
        z = np.atleast_2d(np.asarray(z, dtype=float))
        with np.errstate(all="ignore"):
            out = self.root.evaluate(x, z)
            if isinstance(self.root, Num):
                _require_finite(out, self.root)
        return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],)).copy()

    def evaluate_point(self, x, z=()) -> float:
        xs = np.asarray(x, dtype=float).reshape(1, -1)
        zs = np.asarray(z, dtype=float).reshape(1, -1) if len(z) else None
        return float(self.evaluate(xs, zs)[0])

    def to_text(self) -> str:
        return self.root.to_text()

    def __str__(self) -> str:
        return self.to_text()


# Parser

@dataclass(frozen=True)
class Token:
    kind: str  # number, identifier, op, end
    text: str
    offset: int

    @property
    def symbol(self) -> str:
        return self.text if self.kind == "op" else self.kind


def _byte_offset(text: str, index: int) -> int:
    """UTF-8 byte offset of character index in text."""
    return len(text[:index].encode("utf-8"))


class ExpressionParser:
    """Pratt parser producing CoefficientExpr trees."""

    def __init__(self, text: str, dims: Tuple[int, int]):
        self.text = text
        self.m, self.n = dims
        self.tokens = self._tokenize(text)
        self.pos = 0

    def _tokenize(self, text: str) -> List[Token]:
        tokens = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            match = _TOKEN_RE.match(text, pos)
            if match is None or match.lastgroup is None:
                index = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise ExpressionSyntaxError(
                    f"unexpected character {text[index]!r}",
                    text=text,
                    offset=_byte_offset(text, index),
                    expected=ATOM_START + tuple(INFIX_LBP),
                )
            kind = match.lastgroup
            offset = _byte_offset(text, match.start(kind))
            tokens.append(Token(kind, match.group(kind), offset))
            pos = match.end()
        tokens.append(Token("end", "", _byte_offset(text, len(text))))
        return tokens

    def _peek(self) -> Token:
        return self.tokens[self.pos]

    def _advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "end":
            self.pos += 1
        return tok

    def _expect(self, symbol: str, expected: Tuple[str, ...]) -> Token:
        tok = self._advance()
        if tok.symbol != symbol:
            raise self._unexpected(tok, expected)
        return tok

    def _unexpected(self, tok: Token, expected) -> ExpressionSyntaxError:
        what = END if tok.kind == "end" else repr(tok.text)
        return ExpressionSyntaxError(
            f"unexpected {what}", text=self.text, offset=tok.offset, expected=expected
        )

    def parse(self) -> CoefficientExpr:
        if not self.text.strip():
            raise ExpressionSyntaxError(
                "empty expression", text=self.text, offset=0, expected=ATOM_START
            )
        root = self._expression(0)
        tok = self._peek()
        if tok.kind != "end":
            raise self._unexpected(tok, tuple(INFIX_LBP) + (END,))
        return CoefficientExpr(text=self.text, root=root, dims=(self.m, self.n))

    def _expression(self, rbp: int) -> Node:
        left = self._nud(self._advance())
        while True:
            tok = self._peek()
            lbp = INFIX_LBP.get(tok.text, 0) if tok.kind == "op" else 0
            if rbp >= lbp:
                return left
            self._advance()
            left = self._led(tok, left)

    def _nud(self, tok: Token) -> Node:
        if tok.kind == "number":
            value = float(tok.text)
            if not math.isfinite(value):
                raise ExpressionSyntaxError(
                    "numeric literal out of range", text=self.text, offset=tok.offset
                )
            return Num(value)
        if tok.kind == "identifier":
            return self._identifier(tok)
        if tok.symbol == "-":
            return Neg(self._expression(PREFIX_RBP))
        if tok.symbol == "+":
            return self._expression(PREFIX_RBP)
        if tok.symbol == "(":
            inner = self._expression(0)
            self._expect(")", tuple(INFIX_LBP) + (")",))
            return inner
        raise self._unexpected(tok, ATOM_START)

    def _identifier(self, tok: Token) -> Node:
        name = tok.text
        if name in FUNCTIONS:
            self._expect("(", ("(",))
            args = [self._expression(0)]
            while self._peek().symbol == ",":
                self._advance()
                args.append(self._expression(0))
            self._expect(")", tuple(INFIX_LBP) + (")", ","))
            if len(args) != 1:
                raise ArityError(name, len(args), text=self.text, offset=tok.offset)
            return Call(name, args[0])
        if name in CONSTANTS:
            return Num(CONSTANTS[name])
        var = self._variable(name)
        if var is None:
            raise UnknownIdentifierError(name, text=self.text, offset=tok.offset)
        return var

    def _variable(self, name: str) -> Optional[Var]:
        if name == "x" and self.m == 1:
            return Var("x", 1)
        if name == "z" and self.n == 1:
            return Var("z", 1)
        match = _VAR_RE.match(name)
        if match is None:
            return None
        kind, index = match.group(1), int(match.group(2))
        limit = self.m if kind == "x" else self.n
        if not 1 <= index <= limit:
            return None
        return Var(kind, index)

    def _led(self, tok: Token, left: Node) -> Node:
        lbp = INFIX_LBP[tok.text]
        # ^ is right-associative
        right = self._expression(lbp - 1 if tok.text == "^" else lbp)
        return BinOp(tok.text, left, right)


def parse_expression(text: str, dims: Tuple[int, int]) -> CoefficientExpr:
    """Parse a coefficient expression over x1..xm, z1..zn."""
    expr = ExpressionParser(text, dims).parse()
    logger.debug(f"Parsed {text!r} as {expr.to_text()}")
    return expr


def constant_expression(value: float, dims: Tuple[int, int]) -> CoefficientExpr:
    """Expression for a numeric constant given directly in a model file."""
    value = float(value)
    return CoefficientExpr(text=repr(value), root=Num(value), dims=dims)
