"""Correction-formula DSL: grammar, parser, validator, sandboxed evaluator.

The language is a single arithmetic expression over named features:

    expr    := term (('+' | '-') term)*
    term    := factor (('*' | '/') factor)*
    factor  := '-' factor | primary
    primary := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Allowed calls: clip(x,lo,hi), exp(x), log1p(x), abs(x), max(x,y), min(x,y),
sigmoid(x). There is no '^' (write repeated products or exp/log forms), no
statements, no loops, no attribute access. Saturation x/(K+x) and Gaussian
bumps exp(-(x-m)*(x-m)/s) are compositions, not primitives.

Evaluation is vectorised and total on finite inputs except division; any
NaN/Inf in the output rejects the formula (rejection is a value, not an
exception). sigmoid clamps its exponent argument to [-60, 60].
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

MAX_NODES = 64
EXP_CLAMP = 60.0

# validator failure taxonomy: the three regeneration causes
SYNTAX, NUMERIC, TYPE = "syntax", "numeric", "type"

_BLOCKED = {
    "import", "exec", "eval", "open", "lambda", "def", "class", "while",
    "for", "if", "else", "return", "getattr", "setattr", "globals",
    "locals", "compile", "input", "os", "sys", "subprocess", "__import__",
}


class FormulaError(ValueError):
    """Base class for parse/validation failures."""

    kind = SYNTAX

    def __init__(self, message: str, position: Optional[int] = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class FormulaSyntaxError(FormulaError):
    kind = SYNTAX


class BlockedConstructError(FormulaError):
    kind = TYPE


class UnknownNameError(FormulaError):
    kind = TYPE


class NodeBudgetError(FormulaError):
    kind = TYPE


class ExtractionError(ValueError):
    """No Formula: line found in a response."""


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Feature:
    name: str


@dataclass(frozen=True)
class Neg:
    child: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str                     # + - * /
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple["Node", ...]


Node = Union[Num, Feature, Neg, BinOp, Call]

_FUNCTIONS: dict[str, int] = {
    "clip": 3, "exp": 1, "log1p": 1, "abs": 1, "max": 2, "min": 2,
    "sigmoid": 1,
}


def node_count(node: Node) -> int:
    if isinstance(node, (Num, Feature)):
        return 1
    if isinstance(node, Neg):
        return 1 + node_count(node.child)
    if isinstance(node, BinOp):
        return 1 + node_count(node.left) + node_count(node.right)
    return 1 + sum(node_count(a) for a in node.args)


def referenced_features(node: Node) -> set[str]:
    if isinstance(node, Feature):
        return {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, Neg):
        return referenced_features(node.child)
    if isinstance(node, BinOp):
        return referenced_features(node.left) | referenced_features(node.right)
    out: set[str] = set()
    for a in node.args:
        out |= referenced_features(a)
    return out


@dataclass(frozen=True)
class FormulaAst:
    """Parsed, validated expression bound to a feature-name universe."""

    root: Node
    feature_names: tuple[str, ...]
    source: str
    lint_warnings: tuple[str, ...] = ()

    @property
    def n_nodes(self) -> int:
        return node_count(self.root)

    def text(self) -> str:
        return print_formula(self.root)


@dataclass(frozen=True)
class FormulaSource:
    text: str
    origin: str = "inline"          # llm-response | file | inline

    def __post_init__(self):
        if not self.text.strip():
            raise FormulaSyntaxError("empty formula source")


@dataclass(frozen=True)
class EvalReport:
    values: Optional[np.ndarray]
    clip_events: int = 0
    rejected: bool = False
    rejection_reason: Optional[str] = None


# ---------------------------------------------------------------------------
# tokenizer / parser

_TOKEN_RE = re.compile(r"""
    (?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<op>[-+*/(),])
  | (?P<ws>\s+)
  | (?P<bad>.)
""", re.VERBOSE)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        if kind == "ws":
            continue
        if kind == "bad":
            ch = m.group()
            hint = "; '^' is not supported, use repeated products" \
                if ch == "^" else ""
            raise FormulaSyntaxError(f"unexpected character {ch!r}{hint}",
                                     m.start())
        tokens.append((kind, m.group(), m.start()))
    return tokens


class _Parser:
    def __init__(self, tokens: list[tuple[str, str, int]], names: set[str],
                 text_len: int):
        self.tokens = tokens
        self.pos = 0
        self.names = names
        self.text_len = text_len

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            raise FormulaSyntaxError("unexpected end of formula", self.text_len)
        self.pos += 1
        return tok

    def expect(self, value: str):
        tok = self.next()
        if tok[1] != value:
            raise FormulaSyntaxError(f"expected {value!r}, found {tok[1]!r}",
                                     tok[2])
        return tok

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok is not None:
            raise FormulaSyntaxError(
                f"unexpected trailing input {tok[1]!r}", tok[2])
        return node

    def expr(self) -> Node:
        node = self.term()
        while (tok := self.peek()) and tok[1] in "+-":
            self.next()
            node = BinOp(tok[1], node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while (tok := self.peek()) and tok[1] in "*/":
            self.next()
            node = BinOp(tok[1], node, self.factor())
        return node

    def factor(self) -> Node:
        tok = self.peek()
        if tok and tok[1] == "-":
            self.next()
            return Neg(self.factor())
        return self.primary()

    def primary(self) -> Node:
        tok = self.next()
        kind, value, pos = tok
        if kind == "num":
            return Num(float(value))
        if value == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if value in _BLOCKED:
                raise BlockedConstructError(
                    f"blocked construct {value!r}", pos)
            nxt = self.peek()
            if nxt and nxt[1] == "(":
                if value not in _FUNCTIONS:
                    raise UnknownNameError(f"unknown function {value!r}", pos)
                self.next()
                args = [self.expr()]
                while (tok2 := self.peek()) and tok2[1] == ",":
                    self.next()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != _FUNCTIONS[value]:
                    raise UnknownNameError(
                        f"{value} takes {_FUNCTIONS[value]} argument(s), "
                        f"got {len(args)}", pos)
                return Call(value, tuple(args))
            if value not in self.names:
                raise UnknownNameError(f"unknown feature {value!r}", pos)
            return Feature(value)
        raise FormulaSyntaxError(f"unexpected token {value!r}", pos)


def _additive_terms(node: Node) -> list[tuple[int, Node]]:
    """Flatten an additive chain into (sign, term) pairs."""
    if isinstance(node, BinOp) and node.op in "+-":
        left = _additive_terms(node.left)
        right = _additive_terms(node.right)
        if node.op == "-":
            right = [(-s, t) for s, t in right]
        return left + right
    if isinstance(node, Neg):
        return [(-s, t) for s, t in _additive_terms(node.child)]
    return [(1, node)]


def _division_lint(node: Node, warnings: list[str]) -> None:
    if isinstance(node, BinOp):
        _division_lint(node.left, warnings)
        _division_lint(node.right, warnings)
        if node.op == "/":
            guarded = any(sign > 0 and isinstance(term, Num) and term.value > 0
                          for sign, term in _additive_terms(node.right))
            if not guarded:
                warnings.append(
                    f"unguarded division by {print_formula(node.right)!r}; "
                    "add a positive constant to the denominator")
    elif isinstance(node, Neg):
        _division_lint(node.child, warnings)
    elif isinstance(node, Call):
        for a in node.args:
            _division_lint(a, warnings)


def parse(source: FormulaSource | str,
          feature_names: Sequence[str],
          max_nodes: int = MAX_NODES) -> FormulaAst:
    """Parse and validate a formula against a feature-name universe.

    Raises FormulaSyntaxError / BlockedConstructError / UnknownNameError /
    NodeBudgetError; the .kind attribute carries the regeneration cause
    (syntax | type).
    """
    if isinstance(source, str):
        source = FormulaSource(source)
    tokens = _tokenize(source.text)
    if not tokens:
        raise FormulaSyntaxError("empty formula")
    root = _Parser(tokens, set(feature_names), len(source.text)).parse()
    n = node_count(root)
    if n > max_nodes:
        raise NodeBudgetError(f"formula has {n} nodes, budget is {max_nodes}")
    warnings: list[str] = []
    _division_lint(root, warnings)
    return FormulaAst(root=root, feature_names=tuple(feature_names),
                      source=source.text, lint_warnings=tuple(warnings))


# ---------------------------------------------------------------------------
# printer

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "atom": 4}


def _prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _PREC["neg"]
    return _PREC["atom"]


def print_formula(node: Node) -> str:
    """Render with minimal parentheses; parse(print(ast)) == ast."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Feature):
        return node.name
    if isinstance(node, Neg):
        inner = print_formula(node.child)
        if _prec(node.child) < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Call):
        return f"{node.fn}({', '.join(print_formula(a) for a in node.args)})"
    left = print_formula(node.left)
    right = print_formula(node.right)
    if _prec(node.left) < _PREC[node.op]:
        left = f"({left})"
    # right side needs parens at equal precedence: a-(b+c), a/(b*c)
    if _prec(node.right) <= _PREC[node.op]:
        right = f"({right})"
    return f"{left} {node.op} {right}"


# ---------------------------------------------------------------------------
# evaluator


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -EXP_CLAMP, EXP_CLAMP)))


def _eval_node(node: Node, columns: Mapping[str, np.ndarray]) -> np.ndarray:
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Feature):
        return columns[node.name]
    if isinstance(node, Neg):
        return -_eval_node(node.child, columns)
    if isinstance(node, BinOp):
        a = _eval_node(node.left, columns)
        b = _eval_node(node.right, columns)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        return a / b                    # no implicit epsilon by design
    a = [_eval_node(arg, columns) for arg in node.args]
    if node.fn == "clip":
        return np.clip(a[0], a[1], a[2])
    if node.fn == "exp":
        return np.exp(a[0])
    if node.fn == "log1p":
        return np.log1p(a[0])
    if node.fn == "abs":
        return np.abs(a[0])
    if node.fn == "max":
        return np.maximum(a[0], a[1])
    if node.fn == "min":
        return np.minimum(a[0], a[1])
    if node.fn == "sigmoid":
        return sigmoid(a[0])
    raise AssertionError(f"unreachable function {node.fn}")


def _columns_for(ast: FormulaAst, matrix: np.ndarray) -> dict[str, np.ndarray]:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if matrix.shape[1] != len(ast.feature_names):
        raise KeyError(
            f"matrix has {matrix.shape[1]} columns, formula universe has "
            f"{len(ast.feature_names)}")
    return {name: matrix[:, j] for j, name in enumerate(ast.feature_names)}


def evaluate(ast: FormulaAst,
             matrix: np.ndarray | Mapping[str, np.ndarray],
             output_bounds: Optional[tuple[float, float]] = None) -> EvalReport:
    """Element-wise evaluation over a feature matrix.

    The matrix columns must follow ast.feature_names order (or pass a
    name->column mapping). NaN/Inf anywhere rejects the formula. Values
    outside output_bounds are clipped and counted.
    """
    if isinstance(matrix, Mapping):
        columns = matrix
        missing = referenced_features(ast.root) - set(columns)
        if missing:
            raise KeyError(f"missing feature column(s): {sorted(missing)}")
        n = len(next(iter(columns.values()))) if columns else 1
    else:
        columns = _columns_for(ast, matrix)
        n = len(next(iter(columns.values()))) if columns else 1
    with np.errstate(all="ignore"):
        raw = _eval_node(ast.root, columns)
    values = np.broadcast_to(np.asarray(raw, dtype=np.float64), (n,)).copy()
    if not np.isfinite(values).all():
        bad = int((~np.isfinite(values)).sum())
        return EvalReport(values=None, rejected=True,
                          rejection_reason=f"{bad} non-finite output value(s)")
    clip_events = 0
    if output_bounds is not None:
        lo, hi = output_bounds
        clip_events = int(((values < lo) | (values > hi)).sum())
        values = np.clip(values, lo, hi)
    values.setflags(write=False)
    return EvalReport(values=values, clip_events=clip_events)


def evaluate_per_row(ast: FormulaAst,
                     matrix: np.ndarray | Mapping[str, np.ndarray]
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Raw outputs plus a per-row finite mask (no rejection, no clipping).

    Lets callers zero out a mechanism on exactly the queries where it
    misbehaves instead of rejecting a whole batch.
    """
    if isinstance(matrix, Mapping):
        columns = matrix
        n = len(next(iter(columns.values()))) if columns else 1
    else:
        columns = _columns_for(ast, matrix)
        n = len(next(iter(columns.values()))) if columns else 1
    with np.errstate(all="ignore"):
        raw = _eval_node(ast.root, columns)
    values = np.broadcast_to(np.asarray(raw, dtype=np.float64), (n,)).copy()
    return values, np.isfinite(values)


def multiclass_scores(asts: Sequence[FormulaAst],
                      matrix: np.ndarray) -> EvalReport:
    """Stack per-class formula outputs into an (N, C) score matrix.

    Any single class rejection rejects the whole mechanism for this batch.
    """
    if len(asts) < 2:
        raise ValueError("multiclass scoring needs >= 2 per-class formulas")
    cols = []
    for c, ast in enumerate(asts, start=1):
        rep = evaluate(ast, matrix)
        if rep.rejected:
            return EvalReport(values=None, rejected=True,
                              rejection_reason=f"class {c}: "
                              f"{rep.rejection_reason}")
        cols.append(rep.values)
    scores = np.column_stack(cols)
    scores.setflags(write=False)
    return EvalReport(values=scores)


# ---------------------------------------------------------------------------
# extraction from LLM responses

_FORMULA_LINE = re.compile(r"^\s*Formula:\s*(.+?)\s*$")
_CLASS_FORMULA_LINE = re.compile(r"^\s*Formula\[(\d+)\]:\s*(.+?)\s*$")


def extract_formula(text: str) -> FormulaSource:
    """Expression after the last line starting with 'Formula:' (case
    sensitive, leading whitespace allowed)."""
    found = None
    for line in text.splitlines():
        m = _FORMULA_LINE.match(line)
        if m:
            found = m.group(1)
    if found is None:
        raise ExtractionError("no 'Formula:' line in response")
    return FormulaSource(found, origin="llm-response")


def extract_class_formulas(text: str, num_classes: int) -> list[FormulaSource]:
    """One 'Formula[c]:' expression per class 1..C; last occurrence wins."""
    found: dict[int, str] = {}
    for line in text.splitlines():
        m = _CLASS_FORMULA_LINE.match(line)
        if m:
            found[int(m.group(1))] = m.group(2)
    missing = [c for c in range(1, num_classes + 1) if c not in found]
    if missing:
        raise ExtractionError(
            f"missing 'Formula[c]:' line(s) for class(es) {missing}")
    return [FormulaSource(found[c], origin="llm-response")
            for c in range(1, num_classes + 1)]


# ---------------------------------------------------------------------------
# mechanism text files

_BLOCK_SEP = "==="


def format_mechanism_block(explanation: str,
                           formulas: Sequence[str] | str) -> str:
    lines = [ln for ln in explanation.strip().splitlines() if ln.strip()]
    if isinstance(formulas, str):
        lines.append(f"Formula: {formulas}")
    else:
        for c, f in enumerate(formulas, start=1):
            lines.append(f"Formula[{c}]: {f}")
    return "\n".join(lines)


def write_mechanism_file(path, blocks: Iterable[str]) -> None:
    text = f"\n{_BLOCK_SEP}\n".join(blocks)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def read_mechanism_file(path) -> list[tuple[str, Union[str, list[str]]]]:
    """Parse a mechanism file into (explanation, formula | per-class list)."""
    with open(path) as fh:
        raw = fh.read()
    out = []
    for chunk in raw.split(f"\n{_BLOCK_SEP}\n"):
        if not chunk.strip():
            continue
        expl_lines, single, per_class = [], None, {}
        for line in chunk.splitlines():
            m = _CLASS_FORMULA_LINE.match(line)
            if m:
                per_class[int(m.group(1))] = m.group(2)
                continue
            m = _FORMULA_LINE.match(line)
            if m:
                single = m.group(1)
                continue
            expl_lines.append(line)
        explanation = "\n".join(expl_lines).strip()
        if per_class:
            formulas = [per_class[c] for c in sorted(per_class)]
            out.append((explanation, formulas))
        elif single is not None:
            out.append((explanation, single))
        else:
            raise ExtractionError(f"{path}: mechanism block without a "
                                  "Formula line")
    return out


def template_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
