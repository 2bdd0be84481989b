"""Symbolic utility expression DSL.

Grammar (lowest to highest precedence)::

    sum     := product (('+' | '-') product)*
    product := power (('*' | '/') power)*
    power   := unary (('^' | '**') unary)*          # left-associative
    unary   := ('-' | '+') unary | atom
    atom    := NUMBER | PARAM | NAME | NAME '(' sum ')' | '(' sum ')' | '|' sum '|'

``PARAM`` is ``C_<n>``/``K_<n>`` (the underscore is optional).  A bare ``C`` or
``K`` receives a fresh index above every explicit index in the same text.
Unary minus applies before ``^``, so ``-x^2`` is ``(-x)^2``.

Canonical rendering fully parenthesizes binary operators, writes unary
operators as calls (``neg(x)``, ``abs(x)``) and uses ``^`` for powers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Union

import numpy as np

EPS = 1e-9
#: node results are clipped to this magnitude so evaluation stays finite
VALUE_LIMIT = 1e300

UNARY_OPS = ("neg", "abs", "sqrt", "log", "exp")
BINARY_OPS = ("+", "-", "*", "/", "^")


class ExpressionError(ValueError):
    """Raised for malformed DSL text."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} at position {position}"
        super().__init__(message)


class UnboundSymbolError(KeyError):
    pass


@dataclass(frozen=True)
class Feature:
    name: str


@dataclass(frozen=True)
class Param:
    cls: str
    index: int

    def __post_init__(self):
        if self.cls not in ("C", "K"):
            raise ValueError(f"parameter class must be C or K, got {self.cls!r}")
        if int(self.index) < 1:
            raise ValueError(f"parameter index must be >= 1, got {self.index}")

    @property
    def name(self) -> str:
        return f"{self.cls}_{self.index}"


@dataclass(frozen=True)
class Num:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("numeric literals must be finite")


@dataclass(frozen=True)
class Unary:
    op: str
    arg: "Expression"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expression"
    right: "Expression"


Expression = Union[Feature, Param, Num, Unary, Binary]


@dataclass(frozen=True)
class SymbolicLibrary:
    """Closed set of operators and feature names an expression may use."""

    features: frozenset[str]
    unary_ops: frozenset[str] = frozenset(UNARY_OPS)
    binary_ops: frozenset[str] = frozenset(BINARY_OPS)

    @classmethod
    def for_features(cls, names, unary_ops=UNARY_OPS, binary_ops=BINARY_OPS):
        return cls(frozenset(names), frozenset(unary_ops), frozenset(binary_ops))

    def describe_operators(self) -> str:
        ops = sorted(self.binary_ops, key=BINARY_OPS.index) + sorted(self.unary_ops)
        return ", ".join(ops)


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|[-+*/^(),|·×−])
    """,
    re.VERBOSE,
)
_PARAM_RE = re.compile(r"([CK])_?(\d+)?")
_OP_ALIASES = {"**": "^", "·": "*", "×": "*", "−": "-"}


@dataclass
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExpressionError(f"unknown token {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tok = m.group()
            if kind == "op":
                tok = _OP_ALIASES.get(tok, tok)
            tokens.append(_Token(kind, tok, pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


@dataclass
class _Parser:
    tokens: list[_Token]
    next_index: dict[str, int] = field(default_factory=dict)
    i: int = 0
    in_bars: int = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> None:
        if self.tok.text != text:
            found = "end of input" if self.tok.kind == "end" else repr(self.tok.text)
            raise ExpressionError(f"expected {text!r}, found {found}", self.tok.pos)
        self.advance()

    def parse(self) -> Expression:
        node = self.sum()
        if self.tok.kind != "end":
            raise ExpressionError(f"unexpected {self.tok.text!r}", self.tok.pos)
        return node

    def sum(self) -> Expression:
        node = self.product()
        while self.tok.text in ("+", "-"):
            op = self.advance().text
            node = Binary(op, node, self.product())
        return node

    def product(self) -> Expression:
        node = self.power()
        while self.tok.text in ("*", "/"):
            op = self.advance().text
            node = Binary(op, node, self.power())
        return node

    def power(self) -> Expression:
        node = self.unary()
        while self.tok.text == "^":
            self.advance()
            node = Binary("^", node, self.unary())
        return node

    def unary(self) -> Expression:
        if self.tok.text == "-":
            self.advance()
            if self.tok.kind == "num":
                return Num(-float(self.advance().text))
            return Unary("neg", self.unary())
        if self.tok.text == "+":
            self.advance()
            return self.unary()
        return self.atom()

    def atom(self) -> Expression:
        t = self.tok
        if t.kind == "num":
            self.advance()
            return Num(float(t.text))
        if t.kind == "name":
            self.advance()
            if self.tokens[self.i].text == "(":
                self.advance()
                arg = self.sum()
                self.expect(")")
                return Unary(t.text, arg)
            m = _PARAM_RE.fullmatch(t.text)
            if m:
                cls, idx = m.group(1), m.group(2)
                if idx is None:
                    idx = self.next_index.get(cls, 1)
                    self.next_index[cls] = idx + 1
                elif int(idx) < 1:
                    raise ExpressionError(f"parameter index must be >= 1 in {t.text!r}", t.pos)
                return Param(cls, int(idx))
            return Feature(t.text)
        if t.text == "(":
            self.advance()
            node = self.sum()
            self.expect(")")
            return node
        if t.text == "|":
            self.advance()
            node = self.sum()
            self.expect("|")
            return Unary("abs", node)
        if t.kind == "end":
            raise ExpressionError("unexpected end of input", t.pos)
        raise ExpressionError(f"unexpected {t.text!r}", t.pos)


def _explicit_indices(tokens: list[_Token]) -> dict[str, int]:
    top = {"C": 0, "K": 0}
    for t in tokens:
        if t.kind == "name":
            m = _PARAM_RE.fullmatch(t.text)
            if m and m.group(2) is not None:
                top[m.group(1)] = max(top[m.group(1)], int(m.group(2)))
    return top


def parse_expression(text: str, *, next_index: dict[str, int] | None = None) -> Expression:
    """Parse DSL text into an expression tree.

    ``next_index`` maps ``"C"``/``"K"`` to the index handed to the next bare
    parameter symbol; it is updated in place so several texts can share one
    parameter space.  By default bare symbols are numbered above the largest
    explicit index in ``text``.
    """
    if not text or not text.strip():
        raise ExpressionError("empty expression", 0)
    tokens = _tokenize(text)
    if next_index is None:
        top = _explicit_indices(tokens)
        next_index = {cls: v + 1 for cls, v in top.items()}
    return _Parser(tokens, next_index).parse()


def parse_expressions(texts) -> list[Expression]:
    """Parse several texts into one shared parameter space.

    Explicit indices keep their meaning across texts (``K_1`` in two texts is
    one parameter); bare ``C``/``K`` get fresh indices unique across all texts.
    """
    token_lists = [_tokenize(t) if t and t.strip() else None for t in texts]
    top = {"C": 0, "K": 0}
    for toks in token_lists:
        if toks is not None:
            for cls, v in _explicit_indices(toks).items():
                top[cls] = max(top[cls], v)
    counter = {cls: v + 1 for cls, v in top.items()}
    out = []
    for text in texts:
        out.append(parse_expression(text, next_index=counter))
    return out


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def _render_num(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def render_expression(e: Expression, *, erase_indices: bool = False) -> str:
    """Canonical DSL text for ``e``.

    With ``erase_indices`` parameters render as their bare class symbol,
    which is the form used for fragments.
    """
    if isinstance(e, Feature):
        return e.name
    if isinstance(e, Param):
        return e.cls if erase_indices else e.name
    if isinstance(e, Num):
        return _render_num(e.value)
    if isinstance(e, Unary):
        return f"{e.op}({render_expression(e.arg, erase_indices=erase_indices)})"
    if isinstance(e, Binary):
        left = render_expression(e.left, erase_indices=erase_indices)
        right = render_expression(e.right, erase_indices=erase_indices)
        return f"({left} {e.op} {right})"
    raise TypeError(f"not an expression node: {e!r}")


# --------------------------------------------------------------------------
# Traversal
# --------------------------------------------------------------------------

def iter_nodes(e: Expression) -> Iterator[Expression]:
    yield e
    if isinstance(e, Unary):
        yield from iter_nodes(e.arg)
    elif isinstance(e, Binary):
        yield from iter_nodes(e.left)
        yield from iter_nodes(e.right)


def features_of(e: Expression) -> set[str]:
    return {n.name for n in iter_nodes(e) if isinstance(n, Feature)}


def params_of(e: Expression) -> set[str]:
    return {n.name for n in iter_nodes(e) if isinstance(n, Param)}


def param_sort_key(name: str) -> tuple[str, int]:
    cls, idx = name.split("_")
    return cls, int(idx)


def depth(e: Expression) -> int:
    if isinstance(e, Unary):
        return 1 + depth(e.arg)
    if isinstance(e, Binary):
        return 1 + max(depth(e.left), depth(e.right))
    return 0


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def _clip(v):
    return np.clip(v, -VALUE_LIMIT, VALUE_LIMIT)


def _guarded_pow(base, expo):
    is_int = np.equal(expo, np.round(expo))
    base = np.where(is_int, base, np.maximum(base, EPS))
    return np.power(base, expo)


def _eval(e, features, theta):
    if isinstance(e, Feature):
        try:
            return features[e.name]
        except KeyError:
            raise UnboundSymbolError(f"unbound feature {e.name!r}") from None
    if isinstance(e, Param):
        try:
            return theta[e.name]
        except KeyError:
            raise UnboundSymbolError(f"unbound parameter {e.name!r}") from None
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Unary):
        x = _eval(e.arg, features, theta)
        if e.op == "neg":
            out = np.negative(x)
        elif e.op == "abs":
            out = np.abs(x)
        elif e.op == "sqrt":
            out = np.sqrt(np.maximum(x, 0.0))
        elif e.op == "log":
            out = np.log(np.maximum(x, EPS))
        elif e.op == "exp":
            out = np.exp(x)
        else:
            raise ValueError(f"cannot evaluate unknown operator {e.op!r}")
        return _clip(out)
    if isinstance(e, Binary):
        a = _eval(e.left, features, theta)
        b = _eval(e.right, features, theta)
        if e.op == "+":
            out = np.add(a, b)
        elif e.op == "-":
            out = np.subtract(a, b)
        elif e.op == "*":
            out = np.multiply(a, b)
        elif e.op == "/":
            sign = np.where(np.asarray(b) < 0, -1.0, 1.0)
            out = np.divide(a, sign * np.maximum(np.abs(b), EPS))
        elif e.op == "^":
            out = _guarded_pow(a, b)
        else:
            raise ValueError(f"cannot evaluate unknown operator {e.op!r}")
        return _clip(out)
    raise TypeError(f"not an expression node: {e!r}")


def evaluate(e: Expression, features: Mapping, theta: Mapping | None = None):
    """Evaluate ``e`` with guarded partial operators.

    ``features`` values may be scalars or equal-length arrays; the result has
    the broadcast shape.  Scalar inputs give a Python float.
    """
    with np.errstate(all="ignore"):
        out = _eval(e, features, theta or {})
    if np.ndim(out) == 0:
        return float(out)
    return np.asarray(out, dtype=float)


# --------------------------------------------------------------------------
# Validation and fragments
# --------------------------------------------------------------------------

def validate(e: Expression, lib: SymbolicLibrary) -> list[str]:
    """Return every out-of-library operator or feature used by ``e``.

    An empty list means the expression is valid.
    """
    violations: list[str] = []
    for node in iter_nodes(e):
        if isinstance(node, Feature) and node.name not in lib.features:
            item = f"feature {node.name}"
        elif isinstance(node, Unary) and node.op not in lib.unary_ops:
            item = f"operator {node.op}"
        elif isinstance(node, Binary) and node.op not in lib.binary_ops:
            item = f"operator {node.op}"
        else:
            continue
        if item not in violations:
            violations.append(item)
    return violations


def enumerate_fragments(e: Expression) -> set[str]:
    """Non-leaf subtrees of ``e`` rendered with parameter indices erased."""
    return {
        render_expression(node, erase_indices=True)
        for node in iter_nodes(e)
        if isinstance(node, (Unary, Binary))
    }
