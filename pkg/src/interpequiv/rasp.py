"""A small RASP dialect: parser, reference interpreter and compiler.

Grammar (one statement per line, ``#`` starts a comment)::

    alphabet 1,2,3          # token alphabet (literals; bare words become strings)
    name = <expr>           # define an s-op or selector
    output name             # designate the output s-op (defaults to ``out``)

Expressions are Python-syntax calls over the primitives ``tokens``,
``indices`` and ``length`` and the operations

    map(lambda x: ..., sop)            map2(lambda a, b: ..., sop, sop)
    select(keys, queries, lambda k, q: <bool>)
    aggregate(selector, sop)           selector_width(selector)
    numerical(sop)

Arithmetic, comparison and boolean operators on s-ops desugar to ``map`` and
``map2``. Macros expand to primitives: ``sort``, ``sort_desc``, ``reverse``,
``next``, ``shift(x, k)``, ``first``, ``all``, ``any``, ``all_equal`` and
``select_all()``.

Semantics: ``select`` builds ``S[i][j] = pred(keys[j], queries[i])``;
``aggregate`` averages the selected values per query row and yields ``0`` on
an empty row. ``sort`` is rank-then-gather: ``rank`` counts strictly smaller
``(value, index)`` keys, then each position gathers the element whose rank
equals its index.

Compilation targets a fixed sequence length. Categorical s-ops occupy one-hot
slots of the residual stream; aggregates of ``numerical`` values occupy one
channel. Every categorical aggregate must select at most one distinct value
for the compiled model to be exact.
"""

from __future__ import annotations

import ast
import builtins
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import Any

import numpy as np

from . import ops as _ops
from .causal import (
    Alignment,
    CausalModel,
    Intervention,
    Task,
    TransitionFunction,
    Variable,
    build_model,
    solve_batch,
)
from .errors import (
    AlphabetViolation,
    CapacityExceeded,
    RaspRuntimeError,
    RaspSyntaxError,
    TypeMismatch,
    UnknownPrimitive,
    UnsupportedOp,
    ValidationError,
)

PRIMITIVES = ("tokens", "indices", "length")
CORE_OPS = ("map", "map2", "select", "aggregate", "selector_width", "numerical")
MACROS = ("sort", "sort_desc", "reverse", "next", "shift", "first", "all", "any", "all_equal", "select_all")
_LAMBDA_BUILTINS = {"abs": abs, "min": min, "max": max}


# ------------------------------------------------------------------- nodes

@dataclass(eq=False)
class Node:
    op: str
    args: tuple["Node", ...] = ()
    fn: Callable | None = None
    source: str = ""
    label: str = ""
    uid: int = 0

    @property
    def is_selector(self) -> bool:
        return self.op == "select"

    def __repr__(self) -> str:
        return f"Node({self.op}, {self.label!r})"


@dataclass(frozen=True)
class RaspProgram:
    """A parsed program: named definitions, all nodes, output and alphabet."""

    sops: Mapping[str, Node]
    output: str
    nodes: tuple[Node, ...]
    alphabet: tuple | None = None
    source: str = ""

    @property
    def output_node(self) -> Node:
        return self.sops[self.output]

    def reachable(self) -> list[Node]:
        seen: dict[int, Node] = {}
        stack = [self.output_node]
        while stack:
            node = stack.pop()
            if node.uid in seen:
                continue
            seen[node.uid] = node
            stack.extend(node.args)
        return sorted(seen.values(), key=lambda n: n.uid)


# ------------------------------------------------------------------ parser

_ALLOWED_LAMBDA_NODES = (
    ast.Expression, ast.Lambda, ast.arguments, ast.arg, ast.Name, ast.Load, ast.Constant,
    ast.BinOp, ast.UnaryOp, ast.BoolOp, ast.Compare, ast.IfExp, ast.Call, ast.Tuple, ast.Subscript,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.FloorDiv, ast.Mod, ast.Pow,
    ast.USub, ast.UAdd, ast.Not, ast.And, ast.Or,
    ast.Eq, ast.NotEq, ast.Lt, ast.LtE, ast.Gt, ast.GtE,
)

_BINOPS: dict[type, Callable[[Any, Any], Any]] = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.FloorDiv: lambda a, b: a // b,
    ast.Mod: lambda a, b: a % b,
}
_CMPOPS: dict[type, Callable[[Any, Any], bool]] = {
    ast.Eq: lambda a, b: a == b,
    ast.NotEq: lambda a, b: a != b,
    ast.Lt: lambda a, b: a < b,
    ast.LtE: lambda a, b: a <= b,
    ast.Gt: lambda a, b: a > b,
    ast.GtE: lambda a, b: a >= b,
}
_OP_SYMBOLS = {
    ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/", ast.FloorDiv: "//", ast.Mod: "%",
    ast.Eq: "==", ast.NotEq: "!=", ast.Lt: "<", ast.LtE: "<=", ast.Gt: ">", ast.GtE: ">=",
}


def _is_boolean_expr(node: ast.AST) -> bool:
    if isinstance(node, (ast.Compare, ast.BoolOp)):
        return True
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
        return True
    if isinstance(node, ast.Constant) and isinstance(node.value, bool):
        return True
    if isinstance(node, ast.IfExp):
        return _is_boolean_expr(node.body) and _is_boolean_expr(node.orelse)
    return False


class _Parser:
    def __init__(self):
        self.nodes: list[Node] = []
        self.env: dict[str, Node] = {}
        self.sops: dict[str, Node] = {}
        self.line = 0
        self.prefix = ""
        self.used_labels: set[str] = set()
        for name in PRIMITIVES:
            self.env[name] = self._new(name, label=name)

    # -- construction helpers
    def _new(self, op: str, args: Sequence[Node] = (), fn=None, source: str = "", hint: str = "", label: str = "") -> Node:
        if not label:
            base = f"{self.prefix}.{hint or op}" if self.prefix else (hint or op)
            label, k = base, 1
            while label in self.used_labels:
                k += 1
                label = f"{base}{k}"
        self.used_labels.add(label)
        node = Node(op, tuple(args), fn, source, label, len(self.nodes))
        self.nodes.append(node)
        return node

    def _error(self, cls, msg: str, node: ast.AST | None = None):
        col = getattr(node, "col_offset", -1) + 1 if node is not None else 1
        return cls(msg, self.line, col)

    def _map(self, fn, x: Node, source: str, hint: str = "map") -> Node:
        return self._new("map", (x,), fn, source, hint)

    def _map2(self, fn, a: Node, b: Node, source: str, hint: str = "map2") -> Node:
        return self._new("map2", (a, b), fn, source, hint)

    def _select(self, keys: Node, queries: Node, pred, source: str, hint: str = "select") -> Node:
        return self._new("select", (keys, queries), pred, source, hint)

    def _aggregate(self, sel: Node, values: Node, hint: str = "aggregate") -> Node:
        return self._new("aggregate", (sel, values), hint=hint)

    # -- program
    def parse(self, text: str) -> RaspProgram:
        alphabet = None
        output = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            self.line = lineno
            line = raw.split("#", 1)[0].rstrip()
            stripped = line.strip()
            if not stripped:
                continue
            head = stripped.split(None, 1)
            if head[0] == "alphabet" and len(head) == 2 and "=" not in head[1]:
                alphabet = tuple(_parse_literal(item.strip()) for item in head[1].split(",") if item.strip())
                if len(set(alphabet)) != len(alphabet):
                    raise RaspSyntaxError("alphabet has duplicates", lineno, 1)
                continue
            if head[0] == "output" and len(head) == 2 and "=" not in head[1]:
                output = head[1].strip()
                continue
            self._statement(line)
        if output is None:
            output = "out"
        if output not in self.sops:
            raise RaspSyntaxError(f"output s-op {output!r} is not defined", self.line or 1, 1)
        if self.sops[output].is_selector:
            raise TypeMismatch("the output must be an s-op, not a selector", self.line or 1, 1)
        return RaspProgram(MappingProxyType(dict(self.sops)), output, tuple(self.nodes), alphabet, text)

    def _statement(self, line: str) -> None:
        try:
            tree = ast.parse(line.strip() if line[:1].isspace() else line)
        except SyntaxError as exc:
            raise RaspSyntaxError(exc.msg, self.line, exc.offset or 1) from None
        if len(tree.body) != 1 or not isinstance(tree.body[0], ast.Assign):
            raise RaspSyntaxError("expected 'name = expression'", self.line, 1)
        stmt = tree.body[0]
        if len(stmt.targets) != 1 or not isinstance(stmt.targets[0], ast.Name):
            raise self._error(RaspSyntaxError, "assignment target must be a single name", stmt)
        name = stmt.targets[0].id
        if name in PRIMITIVES or name in CORE_OPS or name in MACROS:
            raise self._error(RaspSyntaxError, f"cannot redefine {name!r}", stmt)
        if name in self.env:
            raise self._error(RaspSyntaxError, f"{name!r} is already defined", stmt)
        self.prefix = name
        before = len(self.nodes)
        value = self._expr(stmt.value)
        self.prefix = ""
        if not isinstance(value, Node):
            raise self._error(TypeMismatch, "a definition must be an s-op or selector, not a constant", stmt.value)
        if value.uid >= before:
            self.used_labels.discard(value.label)
            value.label = name
            self.used_labels.add(name)
        self.env[name] = value
        self.sops[name] = value

    # -- expressions
    def _expr(self, node: ast.AST) -> Node | Any:
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            if node.id in self.env:
                return self.env[node.id]
            if node.id in CORE_OPS or node.id in MACROS:
                raise self._error(TypeMismatch, f"{node.id!r} must be called", node)
            raise self._error(RaspSyntaxError, f"undefined name {node.id!r}", node)
        if isinstance(node, ast.BinOp):
            return self._binop(node)
        if isinstance(node, ast.UnaryOp):
            operand = self._expr(node.operand)
            if isinstance(node.op, ast.Not):
                fn, src = (lambda x: not x), "not x"
            elif isinstance(node.op, ast.USub):
                fn, src = (lambda x: -x), "-x"
            elif isinstance(node.op, ast.UAdd):
                fn, src = (lambda x: +x), "+x"
            else:
                raise self._error(RaspSyntaxError, "unsupported unary operator", node)
            if not isinstance(operand, Node):
                return fn(operand)
            self._require_sop(operand, node)
            return self._map(fn, operand, f"lambda x: {src}", "unary")
        if isinstance(node, ast.Compare):
            if len(node.ops) != 1:
                raise self._error(RaspSyntaxError, "chained comparisons are not supported", node)
            fn = _CMPOPS[type(node.ops[0])]
            return self._lift2(fn, self._expr(node.left), self._expr(node.comparators[0]),
                               _OP_SYMBOLS[type(node.ops[0])], node, "cmp")
        if isinstance(node, ast.BoolOp):
            result = self._expr(node.values[0])
            is_and = isinstance(node.op, ast.And)
            for operand in node.values[1:]:
                other = self._expr(operand)
                fn = (lambda a, b: bool(a and b)) if is_and else (lambda a, b: bool(a or b))
                result = self._lift2(fn, result, other, "and" if is_and else "or", node, "and" if is_and else "or")
            return result
        if isinstance(node, ast.Call):
            return self._call(node)
        if isinstance(node, ast.Lambda):
            raise self._error(TypeMismatch, "a lambda is only allowed as a function argument", node)
        raise self._error(RaspSyntaxError, f"unsupported syntax {type(node).__name__}", node)

    def _require_sop(self, value: Any, where: ast.AST) -> Node:
        if not isinstance(value, Node):
            raise self._error(TypeMismatch, "expected an s-op", where)
        if value.is_selector:
            raise self._error(TypeMismatch, "expected an s-op, got a selector", where)
        return value

    def _require_selector(self, value: Any, where: ast.AST) -> Node:
        if not isinstance(value, Node) or not value.is_selector:
            raise self._error(TypeMismatch, "expected a selector", where)
        return value

    def _binop(self, node: ast.BinOp):
        op = _BINOPS.get(type(node.op))
        if op is None:
            raise self._error(RaspSyntaxError, "unsupported operator", node)
        return self._lift2(op, self._expr(node.left), self._expr(node.right), _OP_SYMBOLS[type(node.op)], node, "op")

    def _lift2(self, fn, left, right, symbol: str, where: ast.AST, hint: str):
        left_node, right_node = isinstance(left, Node), isinstance(right, Node)
        if not left_node and not right_node:
            return fn(left, right)
        if left_node:
            self._require_sop(left, where)
        if right_node:
            self._require_sop(right, where)
        if left_node and right_node:
            return self._map2(fn, left, right, f"lambda a, b: a {symbol} b", hint)
        if left_node:
            const = right
            return self._map(lambda x, _c=const, _f=fn: _f(x, _c), left, f"lambda x: x {symbol} {const!r}", hint)
        const = left
        return self._map(lambda x, _c=const, _f=fn: _f(_c, x), right, f"lambda x: {const!r} {symbol} x", hint)

    def _lambda(self, node: ast.AST, arity: int, boolean: bool = False):
        if not isinstance(node, ast.Lambda):
            raise self._error(TypeMismatch, "expected a lambda", node)
        params = [a.arg for a in node.args.args]
        if len(params) != arity or node.args.vararg or node.args.kwarg or node.args.kwonlyargs:
            raise self._error(TypeMismatch, f"lambda must take exactly {arity} argument(s)", node)
        for sub in ast.walk(node):
            if not isinstance(sub, _ALLOWED_LAMBDA_NODES):
                raise self._error(RaspSyntaxError, f"{type(sub).__name__} is not allowed in a lambda", sub)
            if isinstance(sub, ast.Name) and sub.id not in params and sub.id not in _LAMBDA_BUILTINS:
                raise self._error(RaspSyntaxError, f"unknown name {sub.id!r} in lambda", sub)
            if isinstance(sub, ast.Call) and not (isinstance(sub.func, ast.Name) and sub.func.id in _LAMBDA_BUILTINS):
                raise self._error(UnknownPrimitive, "only abs, min and max may be called in a lambda", sub)
        if boolean and not _is_boolean_expr(node.body):
            raise self._error(TypeMismatch, "select predicate must be boolean-valued", node.body)
        code = builtins.compile(ast.fix_missing_locations(ast.Expression(node)), "<rasp>", "eval")
        fn = eval(code, {"__builtins__": {}, **_LAMBDA_BUILTINS})  # noqa: S307 - AST validated above
        return fn, ast.unparse(node)

    def _call(self, node: ast.Call):
        if not isinstance(node.func, ast.Name):
            raise self._error(UnknownPrimitive, "only named operations can be called", node)
        name = node.func.id
        if node.keywords:
            raise self._error(RaspSyntaxError, "keyword arguments are not supported", node)
        args = node.args

        def need(count: int):
            if len(args) != count:
                raise self._error(TypeMismatch, f"{name} takes {count} argument(s), got {len(args)}", node)

        if name == "map":
            need(2)
            fn, src = self._lambda(args[0], 1)
            return self._map(fn, self._require_sop(self._expr(args[1]), args[1]), src)
        if name == "map2":
            need(3)
            fn, src = self._lambda(args[0], 2)
            a = self._require_sop(self._expr(args[1]), args[1])
            b = self._require_sop(self._expr(args[2]), args[2])
            return self._map2(fn, a, b, src)
        if name == "select":
            need(3)
            keys = self._require_sop(self._expr(args[0]), args[0])
            queries = self._require_sop(self._expr(args[1]), args[1])
            pred, src = self._lambda(args[2], 2, boolean=True)
            return self._select(keys, queries, pred, src)
        if name == "aggregate":
            need(2)
            sel = self._require_selector(self._expr(args[0]), args[0])
            return self._aggregate(sel, self._require_sop(self._expr(args[1]), args[1]))
        if name == "selector_width":
            need(1)
            return self._new("selector_width", (self._require_selector(self._expr(args[0]), args[0]),))
        if name == "numerical":
            need(1)
            return self._new("numerical", (self._require_sop(self._expr(args[0]), args[0]),))
        if name == "select_all":
            need(0)
            return self._select_all()
        if name == "shift":
            need(2)
            offset = self._expr(args[1])
            if not isinstance(offset, int) or isinstance(offset, bool):
                raise self._error(TypeMismatch, "shift offset must be an integer literal", args[1])
            return self._shift(self._require_sop(self._expr(args[0]), args[0]), offset)
        if name in MACROS:
            need(1)
            x = self._require_sop(self._expr(args[0]), args[0])
            return getattr(self, f"_macro_{name}")(x)
        raise self._error(UnknownPrimitive, f"unknown operation {name!r}", node)

    # -- macros
    def _select_all(self) -> Node:
        return self._select(self.env["indices"], self.env["indices"], lambda k, q: True, "lambda k, q: True", "all_sel")

    def _shift(self, x: Node, offset: int) -> Node:
        sel = self._select(
            self.env["indices"], self.env["indices"],
            lambda k, q, _o=offset: k == q + _o, f"lambda k, q: k == q + {offset}", "shift_sel",
        )
        return self._aggregate(sel, x, "shift")

    def _sort(self, x: Node, descending: bool) -> Node:
        if descending:
            key = self._map2(lambda a, i: (-a, i), x, self.env["indices"], "lambda a, i: (-a, i)", "key")
        else:
            key = self._map2(lambda a, i: (a, i), x, self.env["indices"], "lambda a, i: (a, i)", "key")
        smaller = self._select(key, key, lambda k, q: k < q, "lambda k, q: k < q", "rank_sel")
        rank = self._new("selector_width", (smaller,), hint="rank")
        gather = self._select(rank, self.env["indices"], lambda k, q: k == q, "lambda k, q: k == q", "gather_sel")
        return self._aggregate(gather, x, "sorted")

    def _macro_sort(self, x: Node) -> Node:
        return self._sort(x, descending=False)

    def _macro_sort_desc(self, x: Node) -> Node:
        return self._sort(x, descending=True)

    def _macro_reverse(self, x: Node) -> Node:
        opp = self._map2(lambda n, i: n - 1 - i, self.env["length"], self.env["indices"],
                         "lambda n, i: n - 1 - i", "opp")
        sel = self._select(self.env["indices"], opp, lambda k, q: k == q, "lambda k, q: k == q", "flip_sel")
        return self._aggregate(sel, x, "reverse")

    def _macro_next(self, x: Node) -> Node:
        return self._shift(x, 1)

    def _macro_first(self, x: Node) -> Node:
        sel = self._select(self.env["indices"], self.env["indices"], lambda k, q: k == 0,
                           "lambda k, q: k == 0", "first_sel")
        return self._aggregate(sel, x, "first")

    def _macro_all(self, x: Node) -> Node:
        mean = self._aggregate(self._select_all(), self._new("numerical", (x,), hint="num"), "mean")
        return self._map(lambda m: m == 1, mean, "lambda m: m == 1", "all")

    def _macro_any(self, x: Node) -> Node:
        mean = self._aggregate(self._select_all(), self._new("numerical", (x,), hint="num"), "mean")
        return self._map(lambda m: m > 0, mean, "lambda m: m > 0", "any")

    def _macro_all_equal(self, x: Node) -> Node:
        head = self._macro_first(x)
        same = self._map2(lambda a, b: a == b, x, head, "lambda a, b: a == b", "same")
        return self._macro_all(same)


def _parse_literal(text: str) -> Any:
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_program(source_text: str) -> RaspProgram:
    """Parse DSL text into a validated :class:`RaspProgram`."""
    return _Parser().parse(source_text)


# ------------------------------------------------------------- interpreter

def _is_numeric_node(node: Node) -> bool:
    if node.op == "numerical":
        return True
    if node.op == "aggregate":
        return _is_numeric_node(node.args[1])
    return False


def _apply(fn: Callable, node: Node, *args):
    try:
        return fn(*args)
    except Exception as exc:  # noqa: BLE001 - user lambda
        raise RaspRuntimeError(f"{node.label}: {type(exc).__name__}: {exc}") from exc


def _check_predicate(node: Node, value: Any) -> bool:
    if not isinstance(value, (bool, np.bool_)):
        raise TypeMismatch(f"predicate of {node.label!r} returned {type(value).__name__}, not bool")
    return bool(value)


def _aggregate_row(selected: list[Any], numeric: bool) -> Any:
    if not selected:
        return 0
    if not numeric and all(v == selected[0] for v in selected):
        return selected[0]
    try:
        return sum(selected) / len(selected)
    except TypeError as exc:
        raise RaspRuntimeError(f"cannot average non-numeric values {selected!r}") from exc


def evaluate(program: RaspProgram, sequence: Sequence[Any] | str) -> dict[str, list]:
    """Run every reachable node; returns values keyed by node label."""
    seq = list(sequence)
    if program.alphabet is not None:
        allowed = set(program.alphabet)
        for tok in seq:
            if tok not in allowed:
                raise AlphabetViolation(f"token {tok!r} is not in the alphabet")
    n = len(seq)
    values: dict[int, Any] = {}
    for node in program.reachable():
        a = [values[x.uid] for x in node.args]
        if node.op == "tokens":
            out = list(seq)
        elif node.op == "indices":
            out = list(range(n))
        elif node.op == "length":
            out = [n] * n
        elif node.op == "map":
            out = [_apply(node.fn, node, x) for x in a[0]]
        elif node.op == "map2":
            out = [_apply(node.fn, node, x, y) for x, y in zip(a[0], a[1])]
        elif node.op == "numerical":
            out = list(a[0])
        elif node.op == "select":
            keys, queries = a
            out = [[_check_predicate(node, _apply(node.fn, node, k, q)) for k in keys] for q in queries]
        elif node.op == "aggregate":
            sel, vals = a
            numeric = _is_numeric_node(node)
            out = [_aggregate_row([v for v, s in zip(vals, row) if s], numeric) for row in sel]
        elif node.op == "selector_width":
            out = [sum(row) for row in a[0]]
        else:
            raise UnknownPrimitive(f"unknown node op {node.op!r}")
        values[node.uid] = out
    return {node.label: values[node.uid] for node in program.reachable()}


def interpret(program: RaspProgram, sequence: Sequence[Any] | str) -> list:
    """Reference semantics of ``program`` on one sequence."""
    return evaluate(program, sequence)[program.output_node.label]


def aggregate_values(selector: Sequence[Sequence[Any]], values: Sequence[Any]) -> list:
    """Mean of selected values per row; empty rows give 0."""
    return [_aggregate_row([v for v, s in zip(values, row) if s], numeric=True) for row in selector]


def decide(program: RaspProgram, sequence: Sequence[Any]) -> bool:
    """Boolean decision read from position 0 of the output."""
    out = interpret(program, sequence)
    return bool(out[0]) if out else False


# ---------------------------------------------------------- domain analysis

def _ordered_unique(values: Sequence[Any]) -> list:
    seen: dict[Any, Any] = {}
    for v in values:
        if v not in seen:
            seen[v] = v
    items = list(seen.values())
    try:
        return sorted(items)
    except TypeError:
        return items


def _mean_domain(values: Sequence[Any], max_count: int) -> list[float]:
    try:
        fracs = {Fraction(v) for v in values}
    except (TypeError, ValueError) as exc:
        raise TypeMismatch(f"numerical aggregate needs numeric values, got {values!r}") from exc
    means = {Fraction(0)}
    sums = {Fraction(0)}
    for count in range(1, max_count + 1):
        sums = {s + v for s in sums for v in fracs}
        means.update(s / count for s in sums)
    return sorted({float(m) for m in means})


@dataclass
class _Analysis:
    nodes: list[Node]
    domain: dict[int, list]
    numeric: dict[int, bool]


def analyze(program: RaspProgram, length: int) -> _Analysis:
    """Value domains of every reachable node for sequences of ``length``."""
    if program.alphabet is None:
        raise ValidationError("compilation needs an 'alphabet' declaration")
    domain: dict[int, list] = {}
    numeric: dict[int, bool] = {}
    nodes = program.reachable()
    for node in nodes:
        uid = node.uid
        numeric[uid] = _is_numeric_node(node)
        args = node.args
        if node.op == "tokens":
            domain[uid] = list(program.alphabet)
        elif node.op == "indices":
            domain[uid] = list(range(length))
        elif node.op == "length":
            domain[uid] = [length]
        elif node.op == "select":
            domain[uid] = []
        elif node.op == "numerical":
            src = domain[args[0].uid]
            try:
                domain[uid] = _ordered_unique([float(v) for v in src])
            except (TypeError, ValueError) as exc:
                raise TypeMismatch(f"numerical({args[0].label}) needs numeric values") from exc
        elif node.op == "map":
            out = []
            for v in domain[args[0].uid]:
                try:
                    out.append(node.fn(v))
                except Exception:  # noqa: BLE001 - unreachable inputs are skipped
                    continue
            domain[uid] = _ordered_unique(out)
        elif node.op == "map2":
            out = []
            for a in domain[args[0].uid]:
                for b in domain[args[1].uid]:
                    try:
                        out.append(node.fn(a, b))
                    except Exception:  # noqa: BLE001
                        continue
            domain[uid] = _ordered_unique(out)
        elif node.op == "aggregate":
            vals = domain[args[1].uid]
            if numeric[uid]:
                domain[uid] = _mean_domain(vals, length)
            else:
                domain[uid] = _ordered_unique(list(vals) + [0])
        elif node.op == "selector_width":
            domain[uid] = list(range(length + 1))
        else:
            raise UnknownPrimitive(f"unknown node op {node.op!r}")
    return _Analysis(nodes, domain, numeric)


# ------------------------------------------------------------------ compiler

@dataclass(frozen=True)
class CompileConfig:
    """Compiler settings. ``max_len`` is the (fixed) compiled sequence length."""

    max_len: int = 5
    max_layers: int | str = "auto"
    max_heads: int | str = "auto"
    pad_heads: int = 1
    pad_mlps: int = 1
    pad_width: int = 4
    pad_scale: float = 0.1
    pad_seed: int = 0

    def __post_init__(self):
        if self.max_len < 1:
            raise ValidationError("max_len must be >= 1")
        for key in ("max_layers", "max_heads"):
            value = getattr(self, key)
            if value != "auto" and (not isinstance(value, int) or value < 0):
                raise ValidationError(f"{key} must be a nonnegative int or 'auto'")
        if min(self.pad_heads, self.pad_mlps) < 0 or self.pad_width < 1:
            raise ValidationError("pad counts must be >= 0 and pad_width >= 1")


@dataclass(frozen=True)
class Slot:
    offset: int
    width: int


@dataclass
class CompiledTransformer:
    """A compiled program plus everything needed to drive and audit it."""

    model: CausalModel
    program: RaspProgram
    config: CompileConfig
    length: int
    source_map: Mapping[str, str]
    layers: int
    residual_width: int
    input_codes: tuple
    output_domain: tuple
    abstract_model: CausalModel
    alignment: Alignment
    slots: Mapping[str, Slot] = field(default_factory=dict)

    def encode_inputs(self, sequences: Sequence[Sequence[Any]]) -> np.ndarray:
        lookup = {tok: code for tok, code in zip(self.program.alphabet, self.input_codes)}
        rows = []
        for seq in sequences:
            seq = list(seq)
            if len(seq) != self.length:
                raise ValidationError(f"compiled for length {self.length}, got {len(seq)}")
            try:
                rows.append([lookup[t] for t in seq])
            except KeyError as exc:
                raise AlphabetViolation(f"token {exc.args[0]!r} is not in the alphabet") from None
        return np.asarray(rows, dtype=np.float64).reshape(len(rows), self.length)

    def encode_outputs(self, outputs: Sequence[Sequence[Any]]) -> np.ndarray:
        return np.stack([_encode_sequence(o, self.output_domain, self.output_numeric) for o in outputs]) \
            if outputs else np.zeros((0, self.length * self.output_width))

    @property
    def output_numeric(self) -> bool:
        return _is_numeric_node(self.program.output_node)

    @property
    def output_width(self) -> int:
        return 1 if self.output_numeric else len(self.output_domain)

    def decode_outputs(self, out: np.ndarray) -> list[list]:
        out = np.asarray(out, dtype=np.float64).reshape(-1, self.length, self.output_width)
        if self.output_numeric:
            return [list(row[:, 0]) for row in out]
        return [[self.output_domain[i] for i in row] for row in out.argmax(axis=2)]

    def reference_outputs(self, sequences: Sequence[Sequence[Any]]) -> np.ndarray:
        return self.encode_outputs([interpret(self.program, s) for s in sequences])

    def make_task(self, sequences: Sequence[Sequence[Any]]) -> Task:
        alphabet_size = len(self.program.alphabet)
        return Task(alphabet_size, [tuple(self.encode_inputs([s])[0]) for s in sequences],
                    self.reference_outputs(sequences))

    def run(self, sequences: Sequence[Sequence[Any]], chunk: int = 1000) -> np.ndarray:
        """Output activations for ``sequences``, solved ``chunk`` rows at a time to bound memory."""
        u = self.encode_inputs(sequences)
        parts = [solve_batch(self.model, u[k:k + chunk])[self.model.output_id] for k in range(0, len(u), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.length * self.output_width))

    def decisions(self, out: np.ndarray) -> np.ndarray:
        """Boolean decision per row, read from position 0 of the output."""
        return np.array([bool(row[0]) for row in self.decode_outputs(out)])


def _encode_sequence(values: Sequence[Any], domain: Sequence[Any], numeric: bool) -> np.ndarray:
    if numeric:
        return np.asarray([float(v) for v in values], dtype=np.float64)
    index = {v: i for i, v in enumerate(domain)}
    out = np.zeros((len(values), len(domain)))
    for pos, v in enumerate(values):
        if v not in index:
            raise ValidationError(f"value {v!r} is outside the compiled domain")
        out[pos, index[v]] = 1.0
    return out.ravel()


def _schedule(nodes: list[Node]) -> tuple[dict[int, int], dict[int, int]]:
    """Greedy earliest placement; returns (available-at, computed-at) sublayers.

    Sublayer 0 is the embedding, odd sublayers are attention, even ones MLPs.
    """
    avail: dict[int, int] = {}
    at: dict[int, int] = {}
    for node in nodes:
        deps = max((avail[a.uid] for a in node.args), default=0)
        if node.op in PRIMITIVES:
            avail[node.uid] = 0
        elif node.op in ("select", "numerical"):
            avail[node.uid] = deps
        elif node.op in ("map", "map2"):
            s = deps + 1 if (deps + 1) % 2 == 0 else deps + 2
            at[node.uid] = avail[node.uid] = s
        elif node.op == "aggregate":
            s = deps + 1 if (deps + 1) % 2 == 1 else deps + 2
            at[node.uid] = avail[node.uid] = s
        elif node.op == "selector_width":
            s = deps + 1 if (deps + 1) % 2 == 1 else deps + 2
            at[node.uid] = s
            avail[node.uid] = s + 1
    return avail, at


def _resolve(node: Node, numeric: Mapping[int, bool]) -> Node:
    """Skip ``numerical`` views of categorical s-ops."""
    while node.op == "numerical" and not numeric[node.args[0].uid]:
        node = node.args[0]
    while node.op == "numerical":
        node = node.args[0]
    return node


def required_layers(program: RaspProgram) -> int:
    avail, _ = _schedule(program.reachable())
    return math.ceil(max(avail.values(), default=0) / 2)


def compile_program(program: RaspProgram, config: CompileConfig | None = None) -> CompiledTransformer:
    """Compile ``program`` to a hard-attention transformer causal model."""
    return _Compiler(program, config or CompileConfig()).build()


compile = compile_program  # noqa: A001 - public name of the operation


class _Compiler:
    def __init__(self, program: RaspProgram, config: CompileConfig):
        self.program = program
        self.config = config
        self.n = config.max_len
        self.analysis = analyze(program, self.n)
        self.domain = self.analysis.domain
        self.numeric = self.analysis.numeric
        self.nodes = self.analysis.nodes
        self.avail, self.at = _schedule(self.nodes)

    # -- layout
    def _layout(self) -> None:
        slots: dict[str, Slot] = {}
        offset = 0

        def add(key: str, width: int):
            nonlocal offset
            slots[key] = Slot(offset, width)
            offset += width

        by_op = {n.op: n for n in self.nodes if n.op in PRIMITIVES}
        for prim in PRIMITIVES:
            if prim in by_op:
                add(by_op[prim].label, len(self.domain[by_op[prim].uid]))
        for node in self.nodes:
            if node.op in PRIMITIVES or node.op in ("select", "numerical"):
                continue
            add(node.label, 1 if self.numeric[node.uid] else len(self.domain[node.uid]))
            if node.op == "selector_width":
                add(f"{node.label}#raw", 1)
        for layer in range(1, self.layers + 1):
            for k in range(self.config.pad_heads):
                add(f"L{layer}.attn.pad{k}", self.config.pad_width)
            for k in range(self.config.pad_mlps):
                add(f"L{layer}.mlp.pad{k}", self.config.pad_width)
        self.slots = slots
        self.d = offset

    def _slot(self, node: Node) -> Slot:
        return self.slots[_resolve(node, self.numeric).label]

    def _index(self, node: Node) -> dict[Any, int]:
        return {v: i for i, v in enumerate(self.domain[node.uid])}

    # -- weights
    def _reader(self, node: Node) -> np.ndarray:
        """``(d, |dom|)`` matrix that extracts a categorical slot."""
        src = _resolve(node, self.numeric)
        slot = self._slot(src)
        W = np.zeros((self.d, slot.width))
        W[slot.offset:slot.offset + slot.width] = np.eye(slot.width)
        return W

    def _writer(self, key: str, width: int) -> np.ndarray:
        slot = self.slots[key]
        if slot.width != width:
            raise AssertionError(f"slot {key} width {slot.width} != {width}")
        W = np.zeros((width, self.d))
        W[:, slot.offset:slot.offset + width] = np.eye(width)
        return W

    def _onehot_table(self, outputs: Sequence[Any], out_node: Node) -> np.ndarray:
        index = self._index(out_node)
        table = np.zeros((len(outputs), len(index)))
        for row, value in enumerate(outputs):
            if value is not _MISSING:
                table[row, index[value]] = 1.0
        return table

    def _selector_weights(self, sel: Node) -> tuple[np.ndarray, np.ndarray]:
        keys, queries = sel.args
        for side in (keys, queries):
            if self.numeric[_resolve(side, self.numeric).uid]:
                raise UnsupportedOp(f"select over numerical s-op {side.label!r}")
        k_src, q_src = _resolve(keys, self.numeric), _resolve(queries, self.numeric)
        k_dom, q_dom = self.domain[k_src.uid], self.domain[q_src.uid]
        match = np.zeros((len(q_dom), len(k_dom)))
        for i, q in enumerate(q_dom):
            for j, k in enumerate(k_dom):
                match[i, j] = float(_check_predicate(sel, _apply(sel.fn, sel, k, q)))
        W_q = self._reader(q_src) @ match
        W_k = self._reader(k_src)
        return W_q, W_k

    def _value_weights(self, node: Node) -> tuple[np.ndarray, np.ndarray]:
        values = node.args[1]
        if self.numeric[node.uid]:
            src = _resolve(values, self.numeric)
            slot = self._slot(src)
            W_ov = np.zeros((self.d, 1))
            if self.numeric[src.uid]:
                W_ov[slot.offset, 0] = 1.0
            else:
                for i, v in enumerate(self.domain[src.uid]):
                    W_ov[slot.offset + i, 0] = float(v)
            return W_ov, np.zeros(1)
        src = _resolve(values, self.numeric)
        out_index = self._index(node)
        mapping = np.zeros((len(self.domain[src.uid]), len(out_index)))
        for i, v in enumerate(self.domain[src.uid]):
            mapping[i, out_index[v]] = 1.0
        default = np.zeros(len(out_index))
        default[out_index[0]] = 1.0
        return self._reader(src) @ mapping, default

    # -- build
    def build(self) -> CompiledTransformer:
        cfg = self.config
        n = self.n
        self.layers = math.ceil(max(self.avail.values(), default=0) / 2)
        if cfg.max_layers != "auto" and self.layers > cfg.max_layers:
            raise CapacityExceeded(f"program needs {self.layers} layers, config allows {cfg.max_layers}")
        heads_per_layer = [0] * (self.layers + 1)
        for node in self.nodes:
            if node.op in ("aggregate", "selector_width"):
                heads_per_layer[(self.at[node.uid] + 1) // 2] += 1
        if cfg.max_heads != "auto" and max(heads_per_layer, default=0) > cfg.max_heads:
            raise CapacityExceeded(
                f"program needs {max(heads_per_layer)} heads in a layer, config allows {cfg.max_heads}"
            )
        self._layout()
        rng = np.random.default_rng(cfg.pad_seed)
        d = self.d

        variables = [Variable("U", n, "input")]
        transitions: list[TransitionFunction] = []
        source_map: dict[str, str] = {}

        tokens = next((x for x in self.nodes if x.op == "tokens"), None)
        alphabet = list(self.program.alphabet)
        numeric_alphabet = all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in alphabet)
        codes = tuple(float(t) for t in alphabet) if numeric_alphabet else tuple(float(i) for i in range(len(alphabet)))
        embed_table = np.zeros((len(alphabet), d))
        if tokens is not None:
            slot = self.slots[tokens.label]
            embed_table[:, slot.offset:slot.offset + slot.width] = np.eye(len(alphabet))
        positional = np.zeros((n, d))
        for node in self.nodes:
            if node.op == "indices":
                slot = self.slots[node.label]
                positional[:, slot.offset:slot.offset + n] = np.eye(n)
            elif node.op == "length":
                positional[:, self.slots[node.label].offset] = 1.0
        variables.append(Variable("embed", n * d))
        transitions.append(TransitionFunction(
            "embed", ["U"], _ops.ElementwiseTable(codes, embed_table, positional, positions=n, match="exact")
        ))
        residual = "embed"
        rho = [["embed"]]

        for layer in range(1, self.layers + 1):
            attn_sub, mlp_sub = 2 * layer - 1, 2 * layer
            # attention sublayer
            heads: list[tuple[str, str, int]] = []  # (var id, slot key, width)
            for node in self.nodes:
                if self.at.get(node.uid) != attn_sub:
                    continue
                vid = f"L{layer}.attn.{node.label}"
                W_q, W_k = self._selector_weights(node.args[0])
                if node.op == "aggregate":
                    W_ov, default = self._value_weights(node)
                    op = _ops.HardAttention(W_q, W_k, W_ov, default=default, positions=n)
                    width, key = W_ov.shape[1], node.label
                    source_map[abstract_id(node.label)] = vid
                else:
                    op = _ops.HardAttention(W_q, W_k, np.zeros((d, 1)), bos=np.ones(1), positions=n)
                    width, key = 1, f"{node.label}#raw"
                variables.append(Variable(vid, n * width))
                transitions.append(TransitionFunction(vid, [residual], op))
                heads.append((vid, key, width))
            for k in range(cfg.pad_heads):
                vid = f"L{layer}.attn.pad{k}"
                w = cfg.pad_width
                op = _ops.HardAttention(
                    rng.normal(0, cfg.pad_scale, (d, w)), rng.normal(0, cfg.pad_scale, (d, w)),
                    rng.normal(0, cfg.pad_scale, (d, w)), default=rng.normal(0, cfg.pad_scale, w), positions=n,
                )
                variables.append(Variable(vid, n * w))
                transitions.append(TransitionFunction(vid, [residual], op))
                heads.append((vid, vid, w))
            mid = f"L{layer}.mid"
            W_mid = np.vstack([np.eye(d)] + [self._writer(key, w) for _, key, w in heads])
            variables.append(Variable(mid, n * d))
            transitions.append(TransitionFunction(mid, [residual] + [h[0] for h in heads], _ops.Affine(W_mid, positions=n)))

            # MLP sublayer
            blocks: list[tuple[str, str, int]] = []
            for node in self.nodes:
                computed_here = self.at.get(node.uid) == mlp_sub and node.op in ("map", "map2")
                width_here = node.op == "selector_width" and self.at[node.uid] + 1 == mlp_sub
                if not (computed_here or width_here):
                    continue
                vid = f"L{layer}.mlp.{node.label}"
                out_width = len(self.domain[node.uid])
                for v, t in self._mlp(node, vid, mid):
                    variables.append(v)
                    transitions.append(t)
                source_map[abstract_id(node.label)] = vid
                blocks.append((vid, node.label, out_width))
            for k in range(cfg.pad_mlps):
                hid, vid, w = f"L{layer}.mlp.pad{k}.hidden", f"L{layer}.mlp.pad{k}", cfg.pad_width
                variables.append(Variable(hid, n * w))
                transitions.append(TransitionFunction(hid, [mid], _ops.Relu(
                    rng.normal(0, cfg.pad_scale, (d, w)), rng.normal(0, cfg.pad_scale, w), positions=n)))
                variables.append(Variable(vid, n * w))
                transitions.append(TransitionFunction(vid, [hid], _ops.Affine(
                    rng.normal(0, cfg.pad_scale, (w, w)), rng.normal(0, cfg.pad_scale, w), positions=n)))
                blocks.append((vid, vid, w))
            res = f"L{layer}.res"
            W_res = np.vstack([np.eye(d)] + [self._writer(key, w) for _, key, w in blocks])
            variables.append(Variable(res, n * d))
            transitions.append(TransitionFunction(res, [mid] + [b[0] for b in blocks], _ops.Affine(W_res, positions=n)))
            residual = res
            rho.append([res])

        out_node = self.program.output_node
        out_src = _resolve(out_node, self.numeric)
        if self.numeric[out_node.uid]:
            out_domain = tuple(self.domain[out_src.uid])
            W_out = np.zeros((d, 1))
            slot = self._slot(out_src)
            if self.numeric[out_src.uid]:
                W_out[slot.offset, 0] = 1.0
            else:
                W_out[slot.offset:slot.offset + slot.width, 0] = [float(v) for v in self.domain[out_src.uid]]
        else:
            out_domain = tuple(self.domain[out_src.uid])
            W_out = self._reader(out_src)
        out_width = W_out.shape[1]
        variables.append(Variable("out", n * out_width, "output"))
        transitions.append(TransitionFunction("out", [residual], _ops.Affine(W_out, positions=n)))
        source_map["U"] = "U"
        source_map["out"] = "out"

        meta = {
            "kind": "compiled-rasp",
            "length": n,
            "layers": self.layers,
            "residual_width": d,
            "rho": rho,
            "source_map": dict(source_map),
            "output_domain": [_jsonable(v) for v in out_domain],
        }
        model = build_model(variables, "U", transitions, meta)
        abstract = _abstract_model(self, codes)
        alignment = _source_alignment(model, abstract, source_map, self)
        return CompiledTransformer(
            model=model, program=self.program, config=cfg, length=n,
            source_map=MappingProxyType(source_map), layers=self.layers, residual_width=d,
            input_codes=codes, output_domain=out_domain, abstract_model=abstract,
            alignment=alignment, slots=MappingProxyType(self.slots),
        )

    def _mlp(self, node: Node, vid: str, mid: str):
        n = self.n
        if node.op == "selector_width":
            raw = self.slots[f"{node.label}#raw"]
            keys = [1.0 / (w + 1) for w in range(n + 1)]
            table = self._onehot_table(list(range(n + 1)), node)
            op = _ops.ElementwiseTable(keys, table, positions=n, channel=raw.offset, match="nearest")
            return [(Variable(vid, n * table.shape[1]), TransitionFunction(vid, [mid], op))]
        if node.op == "map":
            src = _resolve(node.args[0], self.numeric)
            dom = self.domain[src.uid]
            outputs = [_try(node.fn, v) for v in dom]
            table = self._onehot_table(outputs, node)
            if self.numeric[src.uid]:
                op = _ops.ElementwiseTable(dom, table, positions=n, channel=self._slot(src).offset, match="nearest")
                return [(Variable(vid, n * table.shape[1]), TransitionFunction(vid, [mid], op))]
            hidden = f"{vid}.hidden"
            relu = _ops.Relu(self._reader(src), np.zeros(len(dom)), positions=n)
            return [
                (Variable(hidden, n * len(dom)), TransitionFunction(hidden, [mid], relu)),
                (Variable(vid, n * table.shape[1]), TransitionFunction(vid, [hidden], _ops.Affine(table, positions=n))),
            ]
        a_src, b_src = (_resolve(x, self.numeric) for x in node.args)
        if self.numeric[a_src.uid] or self.numeric[b_src.uid]:
            raise UnsupportedOp(f"map2 {node.label!r} over a numerical s-op")
        dom_a, dom_b = self.domain[a_src.uid], self.domain[b_src.uid]
        read_a, read_b = self._reader(a_src), self._reader(b_src)
        W = np.zeros((self.d, len(dom_a) * len(dom_b)))
        outputs = []
        for i, a in enumerate(dom_a):
            for j, b in enumerate(dom_b):
                col = i * len(dom_b) + j
                W[:, col] += read_a[:, i] + read_b[:, j]
                outputs.append(_try(node.fn, a, b))
        table = self._onehot_table(outputs, node)
        hidden = f"{vid}.hidden"
        relu = _ops.Relu(W, -np.ones(W.shape[1]), positions=n)
        return [
            (Variable(hidden, n * W.shape[1]), TransitionFunction(hidden, [mid], relu)),
            (Variable(vid, n * table.shape[1]), TransitionFunction(vid, [hidden], _ops.Affine(table, positions=n))),
        ]


_MISSING = object()


def _try(fn: Callable, *args):
    try:
        return fn(*args)
    except Exception:  # noqa: BLE001 - row stays empty
        return _MISSING


def _jsonable(value: Any) -> Any:
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (int, float, str)):
        return value
    return repr(value)


# ------------------------------------------------------- abstract program model

def _abstract_model(comp: _Compiler, codes: tuple) -> CausalModel:
    """The program as a causal model: one variable per computed s-op.

    Values use the compiler's encodings, but every transition is computed by
    decoding parents, applying the node's operation over the value domains,
    and re-encoding, without reference to the compiled weights.
    """
    n = comp.n
    numeric = comp.numeric
    domain = comp.domain
    program = comp.program
    materialized = [x for x in comp.nodes if x.op not in PRIMITIVES + ("select", "numerical")]
    code_index = {c: i for i, c in enumerate(codes)}

    def width(node: Node) -> int:
        return 1 if numeric[node.uid] else len(domain[node.uid])

    def var_of(node: Node) -> str:
        src = _resolve(node, numeric)
        return "U" if src.op in PRIMITIVES else abstract_id(src.label)

    def deps_of(node: Node) -> list[Node]:
        out: list[Node] = []
        for arg in node.args:
            if arg.op == "select":
                out.extend(arg.args)
            else:
                out.append(arg)
        return out

    def make_evaluator(node: Node, parent_ids: list[str]):
        def decode(arg: Node, parents: list[np.ndarray], u: np.ndarray):
            """Index into domain[src] (categorical) or raw value (numerical)."""
            src = _resolve(arg, numeric)
            batch = u.shape[0]
            if src.op == "tokens":
                return np.vectorize(code_index.__getitem__, otypes=[np.int64])(u)
            if src.op == "indices":
                return np.broadcast_to(np.arange(n), (batch, n))
            if src.op == "length":
                return np.zeros((batch, n), dtype=np.int64)
            arr = parents[parent_ids.index(abstract_id(src.label))].reshape(batch, n, -1)
            if numeric[src.uid]:
                return arr[:, :, 0]
            return arr.argmax(axis=2)

        def numeric_values(arg: Node, parents, u):
            src = _resolve(arg, numeric)
            raw = decode(arg, parents, u)
            if numeric[src.uid]:
                return raw
            return np.asarray([float(v) for v in domain[src.uid]])[raw]

        out_index = None if numeric[node.uid] else {v: i for i, v in enumerate(domain[node.uid])}
        w = width(node)

        def onehot(idx: np.ndarray) -> np.ndarray:
            out = np.zeros(idx.shape + (w,))
            valid = idx >= 0
            np.put_along_axis(out, np.where(valid, idx, 0)[..., None], valid[..., None].astype(float), axis=-1)
            return out.reshape(idx.shape[0], -1)

        def lookup(outputs: list) -> np.ndarray:
            return np.asarray([-1 if v is _MISSING else out_index[v] for v in outputs], dtype=np.int64)

        if node.op == "map":
            src = _resolve(node.args[0], numeric)
            dom = domain[src.uid]
            table = lookup([_try(node.fn, v) for v in dom])
            if numeric[src.uid]:
                keys = np.asarray(dom, dtype=np.float64)

                def ev(parents, u):
                    vals = decode(node.args[0], parents, u)
                    nearest = np.abs(vals[..., None] - keys).argmin(axis=-1)
                    return onehot(table[nearest])
                return ev

            def ev(parents, u):
                return onehot(table[decode(node.args[0], parents, u)])
            return ev

        if node.op == "map2":
            a_src, b_src = (_resolve(x, numeric) for x in node.args)
            dom_a, dom_b = domain[a_src.uid], domain[b_src.uid]
            table = lookup([_try(node.fn, a, b) for a in dom_a for b in dom_b]).reshape(len(dom_a), len(dom_b))

            def ev(parents, u):
                return onehot(table[decode(node.args[0], parents, u), decode(node.args[1], parents, u)])
            return ev

        sel = node.args[0]
        k_src, q_src = (_resolve(x, numeric) for x in sel.args)
        match = np.asarray(
            [[bool(sel.fn(k, q)) for k in domain[k_src.uid]] for q in domain[q_src.uid]], dtype=np.float64
        )

        def selection(parents, u):
            qi = decode(sel.args[1], parents, u)
            ki = decode(sel.args[0], parents, u)
            return match[qi[:, :, None], ki[:, None, :]]

        if node.op == "selector_width":
            def ev(parents, u):
                return onehot(selection(parents, u).sum(axis=2).astype(np.int64))
            return ev

        values = node.args[1]
        if numeric[node.uid]:
            def ev(parents, u):
                s = selection(parents, u)
                vals = numeric_values(values, parents, u)
                counts = s.sum(axis=2)
                sums = np.einsum("bij,bj->bi", s, vals)
                return np.where(counts > 0, sums / np.where(counts > 0, counts, 1), 0.0)
            return ev

        v_src = _resolve(values, numeric)
        value_to_out = np.asarray([out_index[v] for v in domain[v_src.uid]], dtype=np.int64)
        zero = out_index[0]

        def ev(parents, u):
            s = selection(parents, u)
            enc = onehot(value_to_out[decode(values, parents, u)]).reshape(u.shape[0], n, w)
            counts = s.sum(axis=2, keepdims=True)
            mean = (s @ enc) / np.where(counts > 0, counts, 1)
            default = np.zeros(w)
            default[zero] = 1.0
            return np.where(counts > 0, mean, default).reshape(u.shape[0], -1)
        return ev

    variables = [Variable("U", n, "input")]
    transitions = []
    for node in materialized:
        parent_ids: list[str] = []
        for dep in deps_of(node):
            pid = var_of(dep)
            if pid not in parent_ids:
                parent_ids.append(pid)
        variables.append(Variable(abstract_id(node.label), n * width(node)))
        transitions.append(TransitionFunction(abstract_id(node.label), parent_ids, _ParentEvaluator(make_evaluator(node, parent_ids), parent_ids)))

    out_node = program.output_node
    out_src = _resolve(out_node, numeric)
    out_parent = var_of(out_node)
    if out_src.op in PRIMITIVES:
        evaluator = _ParentEvaluator(make_evaluator_primitive(out_src, codes, n, domain), [out_parent])
        out_width = len(domain[out_src.uid])
    elif numeric[out_node.uid] and not numeric[out_src.uid]:
        values = np.asarray([float(v) for v in domain[out_src.uid]])
        evaluator = _ParentEvaluator(
            lambda parents, u, _v=values: parents[0].reshape(u.shape[0], n, -1) @ _v, [out_parent]
        )
        out_width = 1
    else:
        evaluator = _ParentEvaluator(lambda parents, u: parents[0].copy(), [out_parent])
        out_width = width(out_src)
    variables.append(Variable("out", n * out_width, "output"))
    transitions.append(TransitionFunction("out", [out_parent], evaluator))
    return build_model(variables, "U", transitions, {"kind": "rasp-abstract", "length": n})


def abstract_id(label: str) -> str:
    """Variable id of an s-op in the abstract model (avoids ``U``/``out``)."""
    return f"{label}.value" if label in ("U", "out") else label


class _ParentEvaluator:
    """Adapter that takes ``U`` from the parent list when it is a parent.

    This keeps interventions on ``U`` visible to downstream transitions.
    """

    def __init__(self, fn, parent_ids: list[str]):
        self.fn = fn
        self.u_index = parent_ids.index("U") if "U" in parent_ids else None

    def __call__(self, parents, u):
        if self.u_index is not None:
            u = parents[self.u_index]
        return self.fn(parents, u)


def make_evaluator_primitive(src: Node, codes: tuple, n: int, domain) -> Callable:
    code_index = {c: i for i, c in enumerate(codes)}
    size = len(domain[src.uid])

    def ev(parents, u):
        batch = u.shape[0]
        if src.op == "tokens":
            idx = np.vectorize(code_index.__getitem__, otypes=[np.int64])(u)
        elif src.op == "indices":
            idx = np.broadcast_to(np.arange(n), (batch, n))
        else:
            idx = np.zeros((batch, n), dtype=np.int64)
        out = np.zeros((batch, n, size))
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out.reshape(batch, -1)
    return ev


def _is_valid_encoding(value: np.ndarray, n: int, numeric: bool) -> bool:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        return False
    if numeric:
        return True
    rows = value.reshape(n, -1)
    return bool(np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=1) == 1))


def _source_alignment(low: CausalModel, high: CausalModel, source_map: Mapping[str, str], comp: _Compiler) -> Alignment:
    """Ground-truth alignment from compiled components to program s-ops."""
    inverse = {low_id: high_id for high_id, low_id in source_map.items()}
    numeric = {abstract_id(x.label): comp.numeric[x.uid] for x in comp.nodes}
    numeric["out"] = _is_numeric_node(comp.program.output_node)
    n = comp.n

    def omega(iv: Intervention) -> Intervention | None:
        high_id = inverse.get(iv.target)
        if high_id is None or iv.new_parents or not isinstance(iv.new_evaluator, _ops.Constant):
            return None
        value = iv.new_evaluator.value
        if high_id != "U" and not _is_valid_encoding(value, n, numeric.get(high_id, False)):
            return None
        return Intervention.constant(high_id, value, f"{iv.label}->{high_id}")

    variable_map = {high_id: ((low_id,), _identity_value) for high_id, low_id in source_map.items()}
    return Alignment(MappingProxyType(variable_map), omega, frozenset(low.by_id), frozenset(high.by_id))


def _identity_value(vals: list[np.ndarray]) -> np.ndarray:
    return vals[0]


# -------------------------------------------------------- builtin programs

SORTING_GROUP = (0, 1, 2, 3)
COUNTING_GROUP = (4, 5)

_BUILTIN_SOURCES = (
    # sort; adjacent differences; all equal
    """
sorted = sort(tokens)
nxt = next(sorted)
diff = map2(lambda a, b: a - b if a > 0 else 1, nxt, sorted)
out = all_equal(diff)
""",
    # sort descending; add the index; all equal
    """
desc = sort_desc(tokens)
shifted = desc + indices
out = all_equal(shifted)
""",
    # sort; pair with the reversed list; neighbour sums in the interleaving
    """
sorted = sort(tokens)
rev = reverse(sorted)
nxt = next(sorted)
pair = sorted + rev
cross = map2(lambda r, s: r + s - 1 if s > 0 else 0, rev, nxt)
target = first(pair)
ok = (pair == target) and ((cross == target) or (cross == 0))
out = all(ok)
""",
    # sort; neighbours alternate in parity
    """
sorted = sort(tokens)
nxt = next(sorted)
alt = map2(lambda a, b: a == 0 or a % 2 != b % 2, nxt, sorted)
out = all(alt)
""",
    # duplicates per element; add the next one; all zero
    """
cnt = selector_width(select(tokens, tokens, lambda k, q: k == q))
dup = cnt - 1
nxt = next(dup)
sm = dup + nxt
out = all(sm == 0)
""",
    # rank by count of smaller elements; ranks must be unique
    """
less = selector_width(select(tokens, tokens, lambda k, q: k < q))
cnt = selector_width(select(less, less, lambda k, q: k == q))
out = all(cnt == 1)
""",
)

BUILTIN_NAMES = (
    "sort-diff", "sort-desc-index", "sort-interleave", "sort-parity", "count-duplicates", "rank-unique",
)


def builtin_source(index: int, n: int) -> str:
    header = "alphabet " + ",".join(str(v) for v in range(1, n + 1)) + "\n"
    return header + _BUILTIN_SOURCES[index].lstrip("\n") + "output out\n"


def builtin_interpretations(n: int) -> list[RaspProgram]:
    """Six permutation detectors over ``{1..n}``; four sort-based, two count-based."""
    if not 3 <= n <= 10:
        raise ValidationError("n must be between 3 and 10")
    return [parse_program(builtin_source(i, n)) for i in range(len(_BUILTIN_SOURCES))]


def is_permutation(sequence: Sequence[int], n: int) -> bool:
    return sorted(sequence) == list(range(1, n + 1))


def source_map_interventions(compiled: CompiledTransformer, task: Task, per_component: int = 2,
                             seed: int = 0) -> list[Intervention]:
    """Resample interventions on every mapped component.

    Each sets a component to its value on another task input, which keeps the
    value inside the component's encoding.
    """
    rng = np.random.default_rng(seed)
    values = solve_batch(compiled.model, task.input_array())
    suite = []
    for high_id, low_id in compiled.source_map.items():
        if low_id in ("U", "out"):
            continue
        for _ in range(per_component):
            row = int(rng.integers(len(task)))
            suite.append(Intervention.constant(low_id, values[low_id][row], f"resample({low_id},{row})"))
    return suite
