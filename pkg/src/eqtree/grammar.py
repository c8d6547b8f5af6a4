"""Expression grammar: trees, text format, depth, matching and enumeration.

Expressions are immutable trees written in a parenthesized prefix format::

    (+ (^ (sin th) 2) (^ (cos th) 2))

Leaves are named constants (``0 1 2 3 4 10 0.5 -1 0.4 0.7 pi``), variables
(``x y z th`` by default) or numbers of precision 2 in ``[-3.14, 3.14]``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

FUNCTION = "fn"
CONSTANT = "const"
VARIABLE = "var"
NUMBER = "num"

SYMBOLIC = "symbolic"
FUNCEVAL = "funceval"

UNARY_FUNCTIONS = (
    "sin", "cos", "csc", "sec", "tan",
    "cot", "asin", "acos", "acsc", "asec",
    "atan", "acot", "sinh", "cosh", "csch",
    "sech", "tanh", "coth", "asinh", "acosh",
    "acsch", "asech", "atanh", "acoth", "exp",
)
BINARY_FUNCTIONS = ("+", "*", "^")

# Not enabled by default; see FunctionTable.with_extras().
EXTRA_UNARY_FUNCTIONS = ("log",)
EXTRA_BINARY_FUNCTIONS = ("atan2",)

CONSTANTS = ("0", "1", "2", "3", "4", "10", "0.5", "-1", "0.4", "0.7", "pi")
DEFAULT_VARIABLES = ("x", "y", "z", "th")

NUMBER_LIMIT = 3.14
NUMBER_PRECISION = 2

ALIASES = {
    "×": "*", "∧": "^", "π": "pi", "θ": "th", "theta": "th",
    "arcsin": "asin", "arccos": "acos", "arccsc": "acsc", "arcsec": "asec",
    "arctan": "atan", "arccot": "acot", "arsinh": "asinh", "arcsinh": "asinh",
    "arcosh": "acosh", "arccosh": "acosh", "arcsch": "acsch", "arsech": "asech",
    "artanh": "atanh", "arctanh": "atanh", "arcoth": "acoth",
}

_CONSTANT_VALUES = {c: (math.pi if c == "pi" else float(c)) for c in CONSTANTS}
_NUMERIC_RE = re.compile(r"^-?(\d+(\.\d*)?|\.\d+)$")
_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")


class ParseError(ValueError):
    """Malformed expression text. ``pos`` is a character offset into the input."""

    def __init__(self, message: str, pos: int | None = None):
        if pos is not None:
            message = f"{message} (at offset {pos})"
        super().__init__(message)
        self.pos = pos


@dataclass(frozen=True)
class FunctionTable:
    unary: tuple[str, ...] = UNARY_FUNCTIONS
    binary: tuple[str, ...] = BINARY_FUNCTIONS

    @classmethod
    def with_extras(cls) -> "FunctionTable":
        return cls(UNARY_FUNCTIONS + EXTRA_UNARY_FUNCTIONS,
                   BINARY_FUNCTIONS + EXTRA_BINARY_FUNCTIONS)

    @property
    def names(self) -> tuple[str, ...]:
        return self.unary + self.binary

    def arity(self, name: str) -> int | None:
        if name in self.unary:
            return 1
        if name in self.binary:
            return 2
        return None


DEFAULT_TABLE = FunctionTable()


def format_number(value: float) -> str:
    """Canonical text of a precision-2 number: minimal digits, no ``-0``."""
    text = f"{value:.{NUMBER_PRECISION}f}".rstrip("0").rstrip(".")
    if text in ("-0", ""):
        text = "0"
    return text


def has_precision(value: float, digits: int = NUMBER_PRECISION) -> bool:
    scaled = value * 10 ** digits
    return abs(scaled - round(scaled)) < 1e-7


class Expr:
    """Immutable expression tree node.

    ``kind`` is one of FUNCTION, CONSTANT, VARIABLE, NUMBER. Leaves have no
    ``args``; function nodes carry exactly ``arity`` children.
    """

    __slots__ = ("head", "args", "kind", "_text", "_hash", "_depth", "_size")

    def __init__(self, head: str, args: Sequence["Expr"] = (), kind: str = FUNCTION):
        self.head = head
        self.args = tuple(args)
        self.kind = kind
        self._text = None
        self._hash = None
        self._depth = None
        self._size = None
        if kind == FUNCTION and not self.args:
            raise ValueError(f"function node {head!r} without arguments")
        if kind != FUNCTION and self.args:
            raise ValueError(f"leaf {head!r} cannot have arguments")

    def __setattr__(self, name, value):
        if name in ("head", "args", "kind") and hasattr(self, "_size"):
            raise AttributeError("Expr is immutable")
        object.__setattr__(self, name, value)

    # construction helpers
    @classmethod
    def call(cls, name: str, *args: "Expr") -> "Expr":
        return cls(name, args, FUNCTION)

    @classmethod
    def const(cls, token: str) -> "Expr":
        token = ALIASES.get(token, token)
        if token not in _CONSTANT_VALUES:
            raise ValueError(f"unknown named constant {token!r}")
        return cls(token, (), CONSTANT)

    @classmethod
    def var(cls, name: str) -> "Expr":
        return cls(ALIASES.get(name, name), (), VARIABLE)

    @classmethod
    def num(cls, value: float) -> "Expr":
        """Number leaf. Values equal to a named constant become that constant.

        Accepts precision-2 values in [-3.14, 3.14] plus the decimal digits
        5..9 that decimal expansion trees need.
        """
        if not has_precision(value):
            raise ValueError(f"{value!r} exceeds precision {NUMBER_PRECISION}")
        text = format_number(value)
        if text in _CONSTANT_VALUES:
            return cls(text, (), CONSTANT)
        v = float(text)
        if abs(v) > NUMBER_LIMIT + 1e-9 and not (v.is_integer() and 0 <= v <= 9):
            raise ValueError(f"number {text} outside [-{NUMBER_LIMIT}, {NUMBER_LIMIT}]")
        return cls(text, (), NUMBER)

    # structure
    @property
    def is_leaf(self) -> bool:
        return self.kind != FUNCTION

    @property
    def value(self) -> float:
        """Numeric value of a constant or number leaf."""
        if self.kind == CONSTANT:
            return _CONSTANT_VALUES[self.head]
        if self.kind == NUMBER:
            return float(self.head)
        raise TypeError(f"{self.head!r} has no numeric value")

    def depth(self) -> int:
        if self._depth is None:
            d = 1 + max((a.depth() for a in self.args), default=0)
            object.__setattr__(self, "_depth", d)
        return self._depth

    def size(self) -> int:
        if self._size is None:
            object.__setattr__(self, "_size", 1 + sum(a.size() for a in self.args))
        return self._size

    def walk(self, path: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], "Expr"]]:
        """Pre-order traversal yielding ``(path, subtree)``."""
        yield path, self
        for i, a in enumerate(self.args):
            yield from a.walk(path + (i,))

    def leaves(self) -> Iterator["Expr"]:
        for _, node in self.walk():
            if node.is_leaf:
                yield node

    def variables(self) -> list[str]:
        seen = []
        for leaf in self.leaves():
            if leaf.kind == VARIABLE and leaf.head not in seen:
                seen.append(leaf.head)
        return seen

    def at(self, path: Sequence[int]) -> "Expr":
        node = self
        for i in path:
            if i >= len(node.args):
                raise IndexError(f"invalid position {tuple(path)}")
            node = node.args[i]
        return node

    # text / comparison
    def __str__(self) -> str:
        if self._text is None:
            if self.args:
                text = "(" + " ".join([self.head] + [str(a) for a in self.args]) + ")"
            else:
                text = self.head
            object.__setattr__(self, "_text", text)
        return self._text

    def __repr__(self) -> str:
        return f"Expr({str(self)!r})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Expr):
            return NotImplemented
        return self is other or (self.kind == other.kind and str(self) == str(other))

    def __hash__(self) -> int:
        if self._hash is None:
            object.__setattr__(self, "_hash", hash((self.kind, str(self))))
        return self._hash


def expr_depth(e: Expr) -> int:
    return e.depth()


def to_text(e: Expr) -> str:
    return str(e)


def _classify_leaf(token: str, variables, pos: int) -> Expr:
    token = ALIASES.get(token, token)
    if token in _CONSTANT_VALUES:
        return Expr(token, (), CONSTANT)
    if _NUMERIC_RE.match(token):
        try:
            return Expr.num(float(token))
        except ValueError as exc:
            raise ParseError(str(exc), pos) from None
    if _IDENT_RE.match(token):
        if variables is not None and token not in variables:
            raise ParseError(f"unknown symbol {token!r}", pos)
        return Expr(token, (), VARIABLE)
    raise ParseError(f"unknown symbol {token!r}", pos)


def parse(text: str, table: FunctionTable = DEFAULT_TABLE,
          variables: Iterable[str] | None = None) -> Expr:
    """Parse prefix text into an :class:`Expr`.

    ``variables`` restricts the accepted variable names; by default any
    identifier that is not a function name is a variable.
    """
    variables = None if variables is None else set(variables)
    tokens = [(m.group(), m.start()) for m in _TOKEN_RE.finditer(text)]
    if not tokens:
        raise ParseError("empty expression", 0)
    pos = 0

    def parse_at() -> Expr:
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of input", len(text))
        tok, off = tokens[pos]
        pos += 1
        if tok == ")":
            raise ParseError("unexpected ')'", off)
        if tok != "(":
            name = ALIASES.get(tok, tok)
            if table.arity(name) is not None:
                raise ParseError(f"function {name!r} used as a terminal", off)
            return _classify_leaf(tok, variables, off)
        if pos >= len(tokens):
            raise ParseError("unexpected end of input", len(text))
        head, head_off = tokens[pos]
        pos += 1
        name = ALIASES.get(head, head)
        arity = table.arity(name)
        if arity is None:
            raise ParseError(f"unknown function {head!r}", head_off)
        args = []
        while pos < len(tokens) and tokens[pos][0] != ")":
            args.append(parse_at())
        if pos >= len(tokens):
            raise ParseError("missing ')'", len(text))
        pos += 1
        if len(args) != arity:
            raise ParseError(f"arity mismatch: {name!r} takes {arity} argument(s), got {len(args)}",
                             head_off)
        return Expr(name, args, FUNCTION)

    e = parse_at()
    if pos != len(tokens):
        raise ParseError("trailing input", tokens[pos][1])
    return e


def substitute(e: Expr, path: Sequence[int], replacement: Expr) -> Expr:
    """Copy of ``e`` with the subtree at ``path`` replaced."""
    path = tuple(path)
    if not path:
        return replacement
    i = path[0]
    if i >= len(e.args):
        raise IndexError(f"invalid position {path}")
    args = list(e.args)
    args[i] = substitute(e.args[i], path[1:], replacement)
    return Expr(e.head, args, e.kind)


def match(pattern: Expr, e: Expr, binding: dict[str, Expr] | None = None) -> dict[str, Expr] | None:
    """Match ``e`` against ``pattern`` whose variable leaves are wildcards."""
    binding = {} if binding is None else binding
    if pattern.kind == VARIABLE:
        bound = binding.get(pattern.head)
        if bound is None:
            binding[pattern.head] = e
            return binding
        return binding if bound == e else None
    if pattern.kind != e.kind or pattern.head != e.head or len(pattern.args) != len(e.args):
        return None
    for p, c in zip(pattern.args, e.args):
        if match(p, c, binding) is None:
            return None
    return binding


def match_subtree(e: Expr, pattern: Expr) -> list[tuple[tuple[int, ...], dict[str, Expr]]]:
    """All positions (pre-order) where ``pattern`` matches a subtree of ``e``."""
    out = []
    for path, node in e.walk():
        b = match(pattern, node)
        if b is not None:
            out.append((path, b))
    return out


def instantiate(pattern: Expr, binding: dict[str, Expr]) -> Expr:
    """Replace wildcard leaves by their bindings; unbound wildcards are kept."""
    if pattern.kind == VARIABLE:
        return binding.get(pattern.head, pattern)
    if not pattern.args:
        return pattern
    return Expr(pattern.head, [instantiate(a, binding) for a in pattern.args], pattern.kind)


def decimal_tree(n: float) -> Expr:
    """Decimal expansion of ``n`` as digit * 10^power sums.

    Negative powers are written ``(^ 10 (* -1 k))`` and a negative number is
    ``(* -1 tree)`` since the grammar has no unary minus.
    """
    if not has_precision(n):
        raise ValueError(f"{n!r} exceeds precision {NUMBER_PRECISION}")
    if abs(n) > NUMBER_LIMIT + 1e-9:
        raise ValueError(f"{n!r} outside [-{NUMBER_LIMIT}, {NUMBER_LIMIT}]")
    hundredths = int(round(abs(n) * 100))
    ten = Expr.const("10")
    minus_one = Expr.const("-1")

    def term(digit: int, power: int) -> Expr:
        exponent = Expr.num(0) if power == 0 else Expr.call("*", minus_one, Expr.num(-power))
        return Expr.call("*", Expr.num(digit), Expr.call("^", ten, exponent))

    if hundredths == 0:
        return term(0, 0)
    digits = [(hundredths // 100, 0), ((hundredths // 10) % 10, -1), (hundredths % 10, -2)]
    tree = None
    for digit, power in digits:
        if digit == 0:
            continue
        t = term(digit, power)
        tree = t if tree is None else Expr.call("+", tree, t)
    if n < 0:
        tree = Expr.call("*", minus_one, tree)
    return tree


def terminal_sort_key(t: Expr):
    if t.kind == CONSTANT:
        return (0, CONSTANTS.index(t.head), 0.0, "")
    if t.kind == VARIABLE:
        rank = DEFAULT_VARIABLES.index(t.head) if t.head in DEFAULT_VARIABLES else len(DEFAULT_VARIABLES)
        return (1, rank, 0.0, t.head)
    return (2, 0, t.value, "")


def enumerate_exprs(max_depth: int, terminals: Iterable[Expr],
                    table: FunctionTable = DEFAULT_TABLE) -> list[Expr]:
    """All expressions of depth <= ``max_depth`` (1 or 2) over ``terminals``.

    Order: terminals, then unary applications, then binary applications, each
    following the function table order; duplicates are dropped.
    """
    if max_depth not in (1, 2):
        raise ValueError("max_depth must be 1 or 2")
    terms = sorted(set(terminals), key=terminal_sort_key)
    out = list(terms)
    if max_depth == 2:
        for f in table.unary:
            out.extend(Expr.call(f, t) for t in terms)
        for f in table.binary:
            out.extend(Expr.call(f, a, b) for a in terms for b in terms)
    seen = set()
    unique = []
    for e in out:
        s = str(e)
        if s not in seen:
            seen.add(s)
            unique.append(e)
    return unique


def symbolic_terminals(variables: Sequence[str] = DEFAULT_VARIABLES) -> list[Expr]:
    return [Expr.const(c) for c in CONSTANTS] + [Expr.var(v) for v in variables]


def number_grid() -> list[Expr]:
    """Every precision-2 number in [-3.14, 3.14] (629 values), ascending."""
    return [Expr.num(k / 100) for k in range(-314, 315)]


@dataclass(frozen=True)
class Equation:
    """An identity ``lhs = rhs``.

    ``label`` is True (correct), False (incorrect) or None (not yet labeled).
    ``split`` and ``provenance`` are bookkeeping and do not take part in
    equality.
    """

    lhs: Expr
    rhs: Expr
    label: bool | None = None
    kind: str = SYMBOLIC
    provenance: str = field(default="", compare=False)
    split: str = field(default="", compare=False)

    def __post_init__(self):
        check_kind(self.lhs, self.rhs, self.kind)

    @property
    def depth(self) -> int:
        return max(self.lhs.depth(), self.rhs.depth())

    @property
    def text(self) -> str:
        return f"{self.lhs} = {self.rhs}"

    def __str__(self) -> str:
        return self.text

    def side(self, i: int) -> Expr:
        return self.lhs if i == 0 else self.rhs

    def with_side(self, i: int, e: Expr) -> "Equation":
        return replace(self, lhs=e) if i == 0 else replace(self, rhs=e)

    def size(self) -> int:
        return self.lhs.size() + self.rhs.size() + 1

    @classmethod
    def parse(cls, text: str, label: bool | None = None, kind: str | None = None,
              table: FunctionTable = DEFAULT_TABLE, **kw) -> "Equation":
        lhs_text, rhs_text = split_equation(text)
        lhs = parse(lhs_text, table)
        rhs = parse(rhs_text, table)
        if kind is None:
            kind = infer_kind(lhs, rhs)
        return cls(lhs, rhs, label, kind, **kw)


def split_equation(text: str) -> tuple[str, str]:
    level = 0
    for i, ch in enumerate(text):
        if ch == "(":
            level += 1
        elif ch == ")":
            level -= 1
        elif ch == "=" and level == 0:
            return text[:i].strip(), text[i + 1:].strip()
    raise ParseError("missing top-level '='", None)


def infer_kind(lhs: Expr, rhs: Expr) -> str:
    kinds = {leaf.kind for side in (lhs, rhs) for leaf in side.leaves()}
    return FUNCEVAL if NUMBER in kinds else SYMBOLIC


def check_kind(lhs: Expr, rhs: Expr, kind: str) -> None:
    kinds = {leaf.kind for side in (lhs, rhs) for leaf in side.leaves()}
    if kind == SYMBOLIC:
        if NUMBER in kinds:
            raise ValueError("symbolic equation contains a number terminal")
    elif kind == FUNCEVAL:
        if VARIABLE in kinds:
            raise ValueError("function-evaluation equation contains a variable")
    else:
        raise ValueError(f"unknown equation kind {kind!r}")
