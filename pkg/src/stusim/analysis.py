"""Code analysis for Python student programs: lexing, AST normalization and
equality, def-use dataflow extraction, and the four-component CodeBLEU metric.
"""

from __future__ import annotations

import ast
import keyword
import math
import re
from collections import Counter
from dataclasses import dataclass, field

DEFAULT_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
KEYWORD_WEIGHT = 5.0
SUBTREE_DEPTH = 3

PYTHON_KEYWORDS = frozenset(keyword.kwlist)

# Multi-character operators first so the lexer munches maximally.
_OPERATORS = [
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "==", "!=", "<=", ">=",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "**", "//", "<<", ">>",
    "+", "-", "*", "/", "%", "=", "<", ">", "&", "|", "^", "~", "@",
]
_PUNCT = frozenset(["(", ")", "[", "]", "{", "}", ",", ":", ";", "."])

_TOKEN_RE = re.compile(
    r"""
    (?P<comment>\#[^\n]*)
  | (?P<string>[rbfuRBFU]{0,3}(?:'''(?:[^\\]|\\.)*?'''|\"\"\"(?:[^\\]|\\.)*?\"\"\"|'(?:[^'\\\n]|\\.)*'|"(?:[^"\\\n]|\\.)*"))
  | (?P<number>\d[\w.]*(?:[eE][+-]?\d+)?[jJ]?)
  | (?P<name>[A-Za-z_]\w*)
  | (?P<op>%s)
  | (?P<punct>[()\[\]{},:;.])
    """
    % "|".join(re.escape(op) for op in _OPERATORS),
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    text: str
    kind: str  # keyword | identifier | literal | operator | punct


@dataclass
class TokenSeq:
    tokens: list[Token]

    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize_code(program: str) -> TokenSeq:
    """Best-effort lexing of (possibly non-parsing) Python source.

    Whitespace and comments are dropped; keywords are classified from the
    language keyword table.
    """
    tokens: list[Token] = []
    for m in _TOKEN_RE.finditer(program):
        kind = m.lastgroup
        text = m.group()
        if kind == "comment":
            continue
        if kind == "string" or kind == "number":
            tokens.append(Token(text, "literal"))
        elif kind == "name":
            if text in PYTHON_KEYWORDS:
                tokens.append(Token(text, "keyword"))
            else:
                tokens.append(Token(text, "identifier"))
        elif kind == "op":
            tokens.append(Token(text, "operator"))
        elif kind == "punct":
            tokens.append(Token(text, "punct"))
    return TokenSeq(tokens)


@dataclass(frozen=True)
class AstNode:
    """Normalized syntax-tree node; only leaves carry text."""

    kind: str
    text: str | None = None
    children: tuple["AstNode", ...] = ()

    def is_leaf(self) -> bool:
        return not self.children

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class ParseError:
    line: int
    column: int
    message: str


def _convert(node: ast.AST) -> AstNode:
    children: list[AstNode] = []
    for name, value in ast.iter_fields(node):
        if name in ("type_comment", "ctx"):
            continue
        if isinstance(value, ast.AST):
            children.append(_convert(value))
        elif isinstance(value, list):
            for item in value:
                if isinstance(item, ast.AST):
                    children.append(_convert(item))
                elif item is not None:
                    children.append(AstNode(name, repr(item)))
        elif value is not None:
            children.append(AstNode(name, repr(value)))
    return AstNode(type(node).__name__, None, tuple(children))


def parse_ast(program: str) -> AstNode | ParseError:
    """Parse to a normalized tree with comments and formatting stripped.

    A syntax error is returned as a ParseError value, not raised.
    """
    try:
        tree = ast.parse(program)
    except SyntaxError as exc:
        return ParseError(exc.lineno or 0, exc.offset or 0, exc.msg or "invalid syntax")
    except ValueError as exc:  # e.g. source containing null bytes
        return ParseError(0, 0, str(exc))
    return _convert(tree)


def ast_equal(p: str, q: str) -> bool:
    """True iff both sides parse and the trees are isomorphic, leaf texts
    (identifiers and literals) included. Formatting and comments never matter."""
    left = parse_ast(p)
    right = parse_ast(q)
    if isinstance(left, ParseError) or isinstance(right, ParseError):
        return False
    return left == right


def _ngrams(texts: list[str], n: int) -> Counter:
    return Counter(tuple(texts[i : i + n]) for i in range(len(texts) - n + 1))


def _modified_precision(
    candidate: TokenSeq, reference: TokenSeq, n: int, keyword_weight: float | None
) -> tuple[float, float]:
    """Clipped n-gram matches and totals; keyword-led n-grams may be upweighted."""
    cand = _ngrams(candidate.texts(), n)
    ref = _ngrams(reference.texts(), n)
    if keyword_weight is None:
        weights = {g: 1.0 for g in cand}
    else:
        kinds = {t.text: t.kind for t in candidate.tokens}
        weights = {
            g: (keyword_weight if kinds.get(g[0]) == "keyword" else 1.0) for g in cand
        }
    matched = sum(weights[g] * min(c, ref.get(g, 0)) for g, c in cand.items())
    total = sum(weights[g] * c for g, c in cand.items())
    return matched, total


def ngram_bleu(
    candidate: TokenSeq,
    reference: TokenSeq,
    max_n: int = 4,
    keyword_weight: float | None = None,
) -> float:
    """BLEU over code tokens: geometric mean of modified n-gram precisions with
    a 1/(2*len) floor for zero precisions, times the brevity penalty.

    Orders above the candidate length fall back to the smoothing floor; the
    effective order is capped at the candidate length so self-comparison of
    short sequences still scores 1.0.
    """
    c = len(candidate)
    r = len(reference)
    if c == 0:
        return 1.0 if r == 0 else 0.0
    floor = 1.0 / (2.0 * c)
    top_n = max(1, min(max_n, c))
    log_sum = 0.0
    for n in range(1, top_n + 1):
        matched, total = _modified_precision(candidate, reference, n, keyword_weight)
        p_n = matched / total if total > 0 else 0.0
        if p_n <= 0.0:
            p_n = floor
        log_sum += math.log(p_n) / top_n
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def _fragment(node: AstNode, depth: int) -> str:
    if node.is_leaf():
        return f"{node.kind}={node.text}" if node.text is not None else node.kind
    if depth == 0:
        return node.kind
    inner = " ".join(_fragment(ch, depth - 1) for ch in node.children)
    return f"({node.kind} {inner})"


def _fragments(root: AstNode, depth: int) -> Counter:
    out: Counter = Counter()
    for node in root.walk():
        if node.children:
            out[_fragment(node, depth)] += 1
    return out


def subtree_match(candidate: AstNode, reference: AstNode, depth: int = SUBTREE_DEPTH) -> float:
    """Fraction of reference subtrees (depth-limited, >= 2 nodes) found in the
    candidate, with multiset clipping."""
    ref = _fragments(reference, depth)
    cand = _fragments(candidate, depth)
    total = sum(ref.values())
    if total == 0:
        return 1.0 if sum(cand.values()) == 0 else 0.0
    matched = sum(min(count, cand.get(frag, 0)) for frag, count in ref.items())
    return matched / total


class _DefUseVisitor(ast.NodeVisitor):
    """Collects def-use edges (name, def ordinal, assignment target) in program
    order. Single flat scope; no alias analysis."""

    def __init__(self) -> None:
        self.def_counts: dict[str, int] = {}
        self.edges: Counter = Counter()
        self._target: str | None = None

    def _define(self, name: str) -> None:
        self.def_counts[name] = self.def_counts.get(name, 0) + 1

    def _use(self, name: str) -> None:
        ordinal = self.def_counts.get(name, 0)
        if ordinal > 0:
            self.edges[(name, ordinal, self._target)] += 1

    @staticmethod
    def _first_target_name(target: ast.AST) -> str | None:
        if isinstance(target, ast.Name):
            return target.id
        if isinstance(target, (ast.Tuple, ast.List)) and target.elts:
            return _DefUseVisitor._first_target_name(target.elts[0])
        return None

    def _define_targets(self, target: ast.AST) -> None:
        if isinstance(target, ast.Name):
            self._define(target.id)
        elif isinstance(target, (ast.Tuple, ast.List)):
            for elt in target.elts:
                self._define_targets(elt)
        elif isinstance(target, (ast.Subscript, ast.Attribute)):
            self.visit(target.value)

    def _visit_value(self, value: ast.AST, target_name: str | None) -> None:
        prev = self._target
        self._target = target_name
        self.visit(value)
        self._target = prev

    def visit_Assign(self, node: ast.Assign) -> None:
        name = self._first_target_name(node.targets[0]) if node.targets else None
        self._visit_value(node.value, name)
        for target in node.targets:
            self._define_targets(target)

    def visit_AnnAssign(self, node: ast.AnnAssign) -> None:
        if node.value is not None:
            self._visit_value(node.value, self._first_target_name(node.target))
        self._define_targets(node.target)

    def visit_AugAssign(self, node: ast.AugAssign) -> None:
        name = self._first_target_name(node.target)
        prev = self._target
        self._target = name
        if name is not None:
            self._use(name)  # augmented target is read before rebinding
        else:
            self.visit(node.target)
        self.visit(node.value)
        self._target = prev
        self._define_targets(node.target)

    def visit_For(self, node: ast.For) -> None:
        self._visit_value(node.iter, self._first_target_name(node.target))
        self._define_targets(node.target)
        for stmt in node.body:
            self.visit(stmt)
        for stmt in node.orelse:
            self.visit(stmt)

    def visit_FunctionDef(self, node: ast.FunctionDef) -> None:
        self._define(node.name)
        for arg in node.args.args + node.args.posonlyargs + node.args.kwonlyargs:
            self._define(arg.arg)
        for stmt in node.body:
            self.visit(stmt)

    def visit_comprehension(self, node: ast.comprehension) -> None:
        self._visit_value(node.iter, self._first_target_name(node.target))
        self._define_targets(node.target)
        for cond in node.ifs:
            self.visit(cond)

    def visit_Name(self, node: ast.Name) -> None:
        if isinstance(node.ctx, ast.Load):
            self._use(node.id)


def dataflow_edges(program: str) -> Counter | None:
    """Def-use edge multiset, or None when the program does not parse."""
    try:
        tree = ast.parse(program)
    except (SyntaxError, ValueError):
        return None
    visitor = _DefUseVisitor()
    visitor.visit(tree)
    return visitor.edges


def dataflow_match(candidate: str, reference: str) -> float:
    """Matched reference def-use edges over total reference edges."""
    ref_edges = dataflow_edges(reference)
    cand_edges = dataflow_edges(candidate)
    if ref_edges is None or cand_edges is None:
        return 0.0
    total = sum(ref_edges.values())
    if total == 0:
        return 1.0 if sum(cand_edges.values()) == 0 else 0.0
    matched = sum(min(count, cand_edges.get(e, 0)) for e, count in ref_edges.items())
    return matched / total


@dataclass
class CodeBleuBreakdown:
    ngram: float
    weighted_ngram: float
    ast_match: float
    dataflow_match: float
    total: float
    weights: tuple[float, float, float, float] = field(default=DEFAULT_WEIGHTS)

    def as_dict(self) -> dict:
        return {
            "ngram": self.ngram,
            "weighted_ngram": self.weighted_ngram,
            "ast_match": self.ast_match,
            "dataflow_match": self.dataflow_match,
            "total": self.total,
            "weights": list(self.weights),
        }


def codebleu(
    candidate: str,
    reference: str,
    weights: tuple[float, float, float, float] = DEFAULT_WEIGHTS,
) -> CodeBleuBreakdown:
    """Composite similarity: n-gram, keyword-weighted n-gram, AST subtree and
    dataflow components combined by `weights`.

    A non-parsing candidate zeroes the AST and dataflow components but keeps
    its n-gram credit.
    """
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {weights}")
    cand_tokens = tokenize_code(candidate)
    ref_tokens = tokenize_code(reference)
    ngram = ngram_bleu(cand_tokens, ref_tokens)
    weighted = ngram_bleu(cand_tokens, ref_tokens, keyword_weight=KEYWORD_WEIGHT)

    cand_tree = parse_ast(candidate)
    ref_tree = parse_ast(reference)
    if isinstance(cand_tree, ParseError) or isinstance(ref_tree, ParseError):
        ast_score = 0.0
        flow_score = 0.0
    else:
        ast_score = subtree_match(cand_tree, ref_tree)
        flow_score = dataflow_match(candidate, reference)

    total = (
        weights[0] * ngram
        + weights[1] * weighted
        + weights[2] * ast_score
        + weights[3] * flow_score
    )
    return CodeBleuBreakdown(ngram, weighted, ast_score, flow_score, total, tuple(weights))
