"""
Token language, expression trees, pre-order/infix parsing and protected evaluation.

Expressions are closed over the regression token set {+, -, *, /, cos} and the four
observation variables x1..x4. Trees are stored as their pre-order token sequence;
evaluation is vectorised over an (n, 4) observation matrix.
"""

import logging
import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from config import (
    DEGENERATE_VALUE,
    MAX_EXPRESSION_LENGTH,
    PROTECTED_DIVISION_EPS,
    PROTECTED_DIVISION_VALUE,
    SymccError,
)

logger = logging.getLogger(__name__)

BINARY = "binary-op"
UNARY = "unary-op"
VARIABLE = "variable"

VARIABLES = ("x1", "x2", "x3", "x4")
REGRESSION_SYMBOLS = ("+", "-", "*", "/", "cos") + VARIABLES

# Display/exchange aliases accepted on input
SYMBOL_ALIASES = {"−": "-", "×": "*", "÷": "/"}


class ExpressionError(SymccError):
    """Base class for malformed expressions."""


class IncompleteSequence(ExpressionError):
    """The pre-order sequence ended while operands were still missing."""


class DanglingTokens(ExpressionError):
    """The expression was complete before the last token."""


class UnknownToken(ExpressionError):
    """A symbol outside the active token registry."""


class ExpressionTooLong(ExpressionError):
    """The expression exceeds the maximum token count."""


class InfixSyntaxError(ExpressionError):
    """An infix string does not follow the documented grammar."""


@dataclass(frozen=True)
class Token:
    symbol: str
    kind: str
    arity: int

    @property
    def is_variable(self):
        return self.kind == VARIABLE

    @property
    def variable_index(self):
        return VARIABLES.index(self.symbol)


def protected_division(a, b):
    """Closure of division: |b| below the threshold yields the neutral value."""
    small = np.abs(b) < PROTECTED_DIVISION_EPS
    safe = np.where(small, 1.0, b)
    return np.where(small, PROTECTED_DIVISION_VALUE, np.divide(a, safe))


# Format is symbol: (kind, arity, function)
FUNCTIONS = {
    "+": (BINARY, 2, np.add),
    "-": (BINARY, 2, np.subtract),
    "*": (BINARY, 2, np.multiply),
    "/": (BINARY, 2, protected_division),
    "cos": (UNARY, 1, np.cos),
    "sin": (UNARY, 1, np.sin),
    "exp": (UNARY, 1, np.exp),
}

REGISTRY = {s: Token(s, *FUNCTIONS[s][:2]) for s in REGRESSION_SYMBOLS if s in FUNCTIONS}
REGISTRY.update({v: Token(v, VARIABLE, 0) for v in VARIABLES})

# Test-only superset with sin/exp for the documentation example
EXTENDED_REGISTRY = dict(REGISTRY)
EXTENDED_REGISTRY.update({s: Token(s, UNARY, 1) for s in ("sin", "exp")})


def lookup_token(symbol, registry=None):
    """Resolve a symbol (or alias) to its Token."""
    registry = REGISTRY if registry is None else registry
    if isinstance(symbol, Token):
        return symbol
    key = SYMBOL_ALIASES.get(symbol.strip(), symbol.strip())
    try:
        return registry[key]
    except KeyError:
        raise UnknownToken(f"unknown token {symbol!r}") from None


@dataclass(frozen=True)
class ExprTree:
    """An immutable expression tree held as a complete pre-order token sequence."""

    preorder: tuple
    children: tuple = field(repr=False, compare=False)

    @property
    def length(self):
        return len(self.preorder)

    @cached_property
    def symbols(self):
        return tuple(t.symbol for t in self.preorder)

    @cached_property
    def variables(self):
        return frozenset(t.symbol for t in self.preorder if t.is_variable)

    @property
    def root(self):
        return self.preorder[0]

    def span_end(self, index):
        """Index one past the last token of the subtree rooted at `index`."""
        end = index
        need = 1
        while need:
            need += self.preorder[end].arity - 1
            end += 1
        return end

    def subtree(self, index):
        return parse_preorder(self.preorder[index:self.span_end(index)])

    def to_infix(self):
        return to_infix(self)

    def __str__(self):
        return to_infix(self)


def remaining_arity(prefix):
    """Open operand slots after `prefix`: 1 + Σ(arity − 1). Zero means complete."""
    return 1 + sum(lookup_token(t, EXTENDED_REGISTRY).arity - 1 for t in prefix)


def parse_preorder(tokens, registry=None, max_length=MAX_EXPRESSION_LENGTH):
    """Build an ExprTree from a pre-order sequence of Tokens or symbols."""
    sequence = tuple(lookup_token(t, registry) for t in tokens)
    if max_length is not None and len(sequence) > max_length:
        raise ExpressionTooLong(f"{len(sequence)} tokens exceed the maximum of {max_length}")

    deficit = 1
    for position, token in enumerate(sequence):
        deficit += token.arity - 1
        if deficit == 0 and position != len(sequence) - 1:
            raise DanglingTokens(
                f"expression complete at token {position}, {len(sequence) - position - 1} left over"
            )
    if deficit > 0:
        raise IncompleteSequence(f"{deficit} operand(s) missing at end of sequence")

    # child index lists, rebuilt from the pre-order walk
    children = [[] for _ in sequence]
    stack = []
    for position, token in enumerate(sequence):
        if stack:
            parent = stack[-1]
            children[parent].append(position)
            if len(children[parent]) == sequence[parent].arity:
                stack.pop()
        if token.arity:
            stack.append(position)
    return ExprTree(sequence, tuple(tuple(c) for c in children))


def format_preorder(tree):
    """Sidecar exchange format: comma-separated symbols, e.g. '+,cos,x1,x2'."""
    return ",".join(tree.symbols)


def parse_preorder_string(text, registry=None, max_length=MAX_EXPRESSION_LENGTH):
    symbols = [s for s in text.strip().split(",") if s.strip()]
    return parse_preorder(symbols, registry=registry, max_length=max_length)


def to_infix(tree):
    """Fully parenthesised infix rendering; parse_infix reads it back to the same tree."""

    def render(index):
        token = tree.preorder[index]
        kids = tree.children[index]
        if token.arity == 0:
            return token.symbol
        if token.arity == 1:
            return f"{token.symbol}({render(kids[0])})"
        return f"({render(kids[0])} {token.symbol} {render(kids[1])})"

    return render(0)


def _observation_matrix(obs):
    if hasattr(obs, "as_array"):
        obs = obs.as_array()
    matrix = np.asarray(obs, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.shape[1] != len(VARIABLES):
        raise ValueError(f"observations need {len(VARIABLES)} columns, got {matrix.shape[1]}")
    if np.isnan(matrix).any():
        raise ValueError("observation contains NaN")
    return matrix


def evaluate_batch(tree, observations):
    """
    Evaluate `tree` on every row of an (n, 4) matrix.

    Returns (values, degenerate): rows whose evaluation produced any non-finite
    intermediate are set to DEGENERATE_VALUE and flagged.
    """
    matrix = _observation_matrix(observations)
    degenerate = np.zeros(matrix.shape[0], dtype=bool)
    stack = []
    with np.errstate(all="ignore"):
        for token in reversed(tree.preorder):
            if token.is_variable:
                stack.append(matrix[:, token.variable_index])
                continue
            func = FUNCTIONS[token.symbol][2]
            if token.arity == 1:
                result = func(stack.pop())
            else:
                first = stack.pop()
                second = stack.pop()
                result = func(first, second)
            degenerate |= ~np.isfinite(result)
            stack.append(result)
    values = np.array(stack.pop(), dtype=np.float64, copy=True)
    values[degenerate] = DEGENERATE_VALUE
    return values, degenerate


def evaluate(tree, obs):
    """Evaluate on a single observation; always finite for finite input."""
    values, _ = evaluate_batch(tree, obs)
    return float(values[0])


# Pratt-style infix reader; left binding powers per operator
_BINDING_POWER = {"+": 10, "-": 10, "*": 20, "/": 20}
_INFIX_TOKEN = re.compile(r"\s*(?:([A-Za-z_][A-Za-z_0-9]*)|(\S))")


def _lex(text):
    position = 0
    text = text.rstrip()
    while position < len(text):
        match = _INFIX_TOKEN.match(text, position)
        if match is None:
            break
        name, symbol = match.groups()
        yield name if name else SYMBOL_ALIASES.get(symbol, symbol)
        position = match.end()
    yield None


class _InfixParser:
    def __init__(self, text, registry):
        self.registry = registry
        self.stream = _lex(text)
        self.current = next(self.stream)

    def advance(self):
        token = self.current
        self.current = next(self.stream)
        return token

    def expect(self, symbol):
        if self.current != symbol:
            raise InfixSyntaxError(f"expected {symbol!r}, found {self.current!r}")
        self.advance()

    def expression(self, rbp=0):
        left = self.prefix()
        while self.current in _BINDING_POWER and rbp < _BINDING_POWER[self.current]:
            op = self.advance()
            right = self.expression(_BINDING_POWER[op])
            left = [self.registry[op]] + left + right
        return left

    def prefix(self):
        token = self.advance()
        if token is None:
            raise InfixSyntaxError("unexpected end of expression")
        if token == "(":
            inner = self.expression()
            self.expect(")")
            return inner
        if token in _BINDING_POWER or token == ")":
            raise InfixSyntaxError(f"unexpected {token!r}")
        resolved = lookup_token(token, self.registry)
        if resolved.is_variable:
            return [resolved]
        if resolved.arity != 1:
            raise InfixSyntaxError(f"{token!r} cannot start an operand")
        self.expect("(")
        inner = self.expression()
        self.expect(")")
        return [resolved] + inner


def parse_infix(text, registry=None, max_length=MAX_EXPRESSION_LENGTH):
    """Read an infix expression (+ - * / with usual precedence, cos(...), x1..x4)."""
    registry = REGISTRY if registry is None else registry
    parser = _InfixParser(text, registry)
    tokens = parser.expression()
    if parser.current is not None:
        raise InfixSyntaxError(f"unexpected trailing {parser.current!r}")
    return parse_preorder(tokens, registry=registry, max_length=max_length)


class TokenLibrary:
    """Ordered token set used by the regression controllers."""

    def __init__(self, symbols=REGRESSION_SYMBOLS, registry=None):
        self.tokens = tuple(lookup_token(s, registry) for s in symbols)
        self.symbols = tuple(t.symbol for t in self.tokens)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate tokens in library")
        self.arities = np.array([t.arity for t in self.tokens], dtype=np.int64)
        self.size = len(self.tokens)
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def index(self, symbol):
        return self._index[symbol]

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"TokenLibrary({','.join(self.symbols)})"
