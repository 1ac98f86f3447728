"""Subscription constraint language and the gas-metered trigger gates.

Grammar::

    expr     := or_expr
    or_expr  := and_expr ("or" and_expr)*
    and_expr := not_expr ("and" not_expr)*
    not_expr := ["not"] cmp
    cmp      := term op term | "(" expr ")" | bool_lit | bool_field
    term     := int_lit | hex_bytes_lit | bool_lit | field_ref
    op       := == | != | < | <= | > | >=

Field references: ``payload.<name>``, ``block.number``, ``block.time``,
``publisher`` (publisher public key) and, inside contract scripts only,
``self.balance``.  Ordering operators apply to integers only.  The empty
string parses to the always-true expression.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Union

EVAL_GAS_PER_NODE = 3
MAX_DEPTH = 32
MAX_NODES = 256


class ConstraintSyntaxError(SyntaxError):
    pass


class ConstraintTypeError(TypeError):
    pass


# value types of the language
INT, BYTES, ADDRESS, BOOL = "int", "bytes", "address", "bool"
_VARTYPE_NAMES = {0: INT, 1: BYTES, 2: ADDRESS, 3: BOOL}
_BYTESLIKE = {BYTES, ADDRESS}


@dataclass(frozen=True)
class Const:
    value: object
    type: str


@dataclass(frozen=True)
class Field:
    path: str
    type: str
    index: int = -1


@dataclass(frozen=True)
class Compare:
    op: str
    left: Union[Const, Field]
    right: Union[Const, Field]


@dataclass(frozen=True)
class Not:
    operand: "Expr"


@dataclass(frozen=True)
class And:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Or:
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Field, Compare, Not, And, Or]
ALWAYS_TRUE = Const(True, BOOL)


def node_count(expr) -> int:
    if isinstance(expr, Compare):
        return 3
    if isinstance(expr, Not):
        return 1 + node_count(expr.operand)
    if isinstance(expr, (And, Or)):
        return 1 + node_count(expr.left) + node_count(expr.right)
    return 1


def tree_depth(expr) -> int:
    if isinstance(expr, Compare):
        return 2
    if isinstance(expr, Not):
        return 1 + tree_depth(expr.operand)
    if isinstance(expr, (And, Or)):
        return 1 + max(tree_depth(expr.left), tree_depth(expr.right))
    return 1


def comparisons(expr) -> int:
    if isinstance(expr, Compare):
        return 1
    if isinstance(expr, Not):
        return comparisons(expr.operand)
    if isinstance(expr, (And, Or)):
        return comparisons(expr.left) + comparisons(expr.right)
    return 0


# -- parsing ------------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<hex>0x[0-9a-fA-F]*)
  | (?P<int>-?\d+)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)
  | (?P<op>==|!=|<=|>=|<|>)
  | (?P<lpar>\()
  | (?P<rpar>\))
""", re.VERBOSE)

_KEYWORDS = {"and", "or", "not", "true", "false"}
_ORDER_OPS = {"<", "<=", ">", ">="}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ConstraintSyntaxError(f"unexpected character {text[pos]!r} at {pos}")
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if kind == "name" and value in _KEYWORDS:
                kind = value
            tokens.append((kind, value, pos))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, schema: tuple, allow_self: bool):
        self.tokens = _tokenize(text)
        self.i = 0
        self.schema = {name: (idx, _VARTYPE_NAMES[int(vt)]) for idx, (name, vt) in enumerate(schema)}
        self.allow_self = allow_self

    def peek(self, offset: int = 0):
        j = self.i + offset
        return self.tokens[j] if j < len(self.tokens) else ("eof", "", -1)

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, kind: str):
        tok = self.next()
        if tok[0] != kind:
            raise ConstraintSyntaxError(f"expected {kind}, got {tok[1] or 'end of input'!r}")
        return tok

    def parse(self, depth: int = 0):
        if depth > MAX_DEPTH:
            raise ConstraintSyntaxError(f"expression nested deeper than {MAX_DEPTH}")
        left = self.and_expr(depth)
        while self.peek()[0] == "or":
            self.next()
            left = Or(left, self.and_expr(depth))
        return left

    def and_expr(self, depth: int):
        left = self.not_expr(depth)
        while self.peek()[0] == "and":
            self.next()
            left = And(left, self.not_expr(depth))
        return left

    def not_expr(self, depth: int):
        if self.peek()[0] == "not":
            self.next()
            return Not(self.cmp(depth + 1))
        return self.cmp(depth)

    def cmp(self, depth: int):
        kind = self.peek()[0]
        if kind == "lpar":
            self.next()
            inner = self.parse(depth + 1)
            self.expect("rpar")
            return inner
        left = self.term()
        if self.peek()[0] != "op":
            if left.type == BOOL:
                return left
            raise ConstraintSyntaxError(f"expected comparison operator after {self.peek(-1)[1]!r}")
        op = self.next()[1]
        right = self.term()
        self.check_types(op, left, right)
        return Compare(op, left, right)

    def term(self):
        kind, value, pos = self.next()
        if kind == "int":
            return Const(int(value), INT)
        if kind == "hex":
            digits = value[2:]
            if len(digits) % 2:
                raise ConstraintSyntaxError(f"odd-length hex literal at {pos}")
            return Const(bytes.fromhex(digits), BYTES)
        if kind in ("true", "false"):
            return Const(kind == "true", BOOL)
        if kind == "name":
            return self.field(value)
        raise ConstraintSyntaxError(f"unexpected {value or 'end of input'!r}")

    def field(self, path: str) -> Field:
        if path.startswith("payload."):
            name = path[len("payload."):]
            if name not in self.schema:
                raise ConstraintTypeError(f"unknown payload field {name!r}")
            idx, vtype = self.schema[name]
            return Field(path, vtype, idx)
        if path in ("block.number", "block.time"):
            return Field(path, INT)
        if path == "publisher":
            return Field(path, BYTES)
        if path == "self.balance" and self.allow_self:
            return Field(path, INT)
        raise ConstraintTypeError(f"unknown field {path!r}")

    @staticmethod
    def check_types(op: str, left, right):
        lt, rt = left.type, right.type
        same = lt == rt or (lt in _BYTESLIKE and rt in _BYTESLIKE)
        if not same:
            raise ConstraintTypeError(f"cannot compare {lt} with {rt}")
        if op in _ORDER_OPS and lt != INT:
            raise ConstraintTypeError(f"operator {op} needs integers, got {lt}")


@lru_cache(maxsize=4096)
def _parse_cached(text: str, schema: tuple, allow_self: bool):
    if not text.strip():
        return ALWAYS_TRUE
    p = _Parser(text, schema, allow_self)
    expr = p.parse()
    if p.peek()[0] != "eof":
        raise ConstraintSyntaxError(f"trailing input at {p.peek()[1]!r}")
    if node_count(expr) > MAX_NODES:
        raise ConstraintSyntaxError(f"expression exceeds {MAX_NODES} nodes")
    if tree_depth(expr) > MAX_DEPTH:
        raise ConstraintSyntaxError(f"expression nested deeper than {MAX_DEPTH}")
    return expr


def _schema_key(schema) -> tuple:
    if schema is None:
        return ()
    if hasattr(schema, "variables"):
        schema = schema.variables
    return tuple((v.name, int(v.type)) if hasattr(v, "name") else (v[0], int(v[1])) for v in schema)


def parse_constraint(text: str, schema=None, *, allow_self: bool = False) -> Expr:
    """Parse and type-check ``text`` against an event's variables.

    ``schema`` is an EventDefinition, its variables, or (name, VarType) pairs.
    """
    return _parse_cached(text, _schema_key(schema), allow_self)


# -- evaluation -----------------------------------------------------------------

@dataclass(frozen=True)
class MatchContext:
    update: object
    block_number: int
    block_time: int
    self_balance: int = 0


def _value(term, ctx: MatchContext):
    if isinstance(term, Const):
        return term.value
    path = term.path
    if term.index >= 0:
        return ctx.update.payload[term.index]
    if path == "block.number":
        return ctx.block_number
    if path == "block.time":
        return ctx.block_time
    if path == "publisher":
        return ctx.update.publisher_key
    return ctx.self_balance


def _compare(op: str, a, b) -> bool:
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def _eval(expr, ctx: MatchContext) -> tuple[bool, int]:
    if isinstance(expr, Compare):
        return _compare(expr.op, _value(expr.left, ctx), _value(expr.right, ctx)), 3
    if isinstance(expr, And):
        left, n = _eval(expr.left, ctx)
        if not left:
            return False, n + 1
        right, m = _eval(expr.right, ctx)
        return right, n + m + 1
    if isinstance(expr, Or):
        left, n = _eval(expr.left, ctx)
        if left:
            return True, n + 1
        right, m = _eval(expr.right, ctx)
        return right, n + m + 1
    if isinstance(expr, Not):
        inner, n = _eval(expr.operand, ctx)
        return not inner, n + 1
    return bool(_value(expr, ctx)), 1


def evaluate(expr: Expr, ctx: MatchContext, gas_per_node: int = EVAL_GAS_PER_NODE) -> tuple[bool, int]:
    """Short-circuit evaluation; returns (truth, gas) where gas counts visited nodes."""
    result, visited = _eval(expr, ctx)
    return result, visited * gas_per_node


# -- trigger gates ----------------------------------------------------------------

class Gate(Enum):
    PASS = "Pass"
    PUBLISHER_FILTER = "PublisherFilter"
    SUBSCRIPTION_FEE = "SubscriptionFee"
    BLOCK_RATE = "BlockRate"
    EVENT_RATE = "EventRate"
    CONSTRAINT = "Constraint"


def publisher_allowed(sub, update) -> bool:
    return not sub.publisher_filter or update.publisher_key in sub.publisher_filter


def should_trigger(sub, ctx: MatchContext, schema=None,
                   gas_per_node: int = EVAL_GAS_PER_NODE) -> tuple[bool, int, Gate]:
    """Run the gates cheapest first; eval gas accrues only at the constraint gate."""
    update = ctx.update
    if not publisher_allowed(sub, update):
        return False, 0, Gate.PUBLISHER_FILTER
    if sub.max_subscription_fee < update.subscription_fee:
        return False, 0, Gate.SUBSCRIPTION_FEE
    if sub.block_rate > 0 and sub.last_trigger_block is not None \
            and ctx.block_number - sub.last_trigger_block < sub.block_rate:
        return False, 0, Gate.BLOCK_RATE
    if sub.event_rate > 0 and (sub.instance_counter + 1) % sub.event_rate != 0:
        return False, 0, Gate.EVENT_RATE
    ok, gas = evaluate(parse_constraint(sub.constraint, schema), ctx, gas_per_node)
    return ok, gas, (Gate.PASS if ok else Gate.CONSTRAINT)
