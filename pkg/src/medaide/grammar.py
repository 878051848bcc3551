"""Tokenization and chart parsing over a small medical CFG.

The parser is a CYK chart over a normalized (at-most-binary) grammar with
unary productions kept as a closure step. Ambiguity is resolved by a fixed
rule so every parse is reproducible: among candidate derivations of the
same cell and symbol, lowest production index wins, and within one binary
production the longest left constituent (largest split point) wins.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import CyclicUnitChain, GrammarError, NoParse

logger = logging.getLogger(__name__)

UNKNOWN_CLASS = "UNK"

_WORD_RE = re.compile(r"[A-Za-z0-9]+|\S")


# --- tokens -----------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    surface: str  # lowercased form used for lookup
    raw: str  # exact source slice
    cls: str
    start: int
    end: int


@dataclass(frozen=True)
class TokenSequence:
    source: str
    tokens: tuple[Token, ...]
    separators: tuple[str, ...]  # len(tokens) + 1 entries

    def __post_init__(self) -> None:
        if len(self.separators) != len(self.tokens) + 1:
            raise GrammarError("separator count must be token count + 1")

    def reconstruct(self) -> str:
        parts = [self.separators[0]]
        for token, sep in zip(self.tokens, self.separators[1:]):
            parts.append(token.raw)
            parts.append(sep)
        return "".join(parts)

    def slice_text(self, start_token: int, end_token: int) -> str:
        """Source text covered by tokens [start_token, end_token)."""
        if start_token >= end_token:
            return ""
        return self.source[self.tokens[start_token].start : self.tokens[end_token - 1].end]


def load_lexicon(path: str | Path) -> dict[str, str]:
    """Token lexicon from JSONL lines of {"surface", "class"}."""
    lexicon: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            surface, cls = str(row["surface"]), str(row["class"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise GrammarError(f"{path}:{lineno}: bad lexicon line: {exc}") from exc
        if not surface or not cls:
            raise GrammarError(f"{path}:{lineno}: empty surface or class")
        lexicon[surface.lower()] = cls
    return lexicon


def tokenize(source: str, lexicon: dict[str, str]) -> TokenSequence:
    """Split into word/symbol tokens, classify via the lexicon.

    Unknown surfaces get class UNK. Inter-token text is kept so the
    sequence reconstructs the source exactly.
    """
    tokens: list[Token] = []
    separators: list[str] = []
    cursor = 0
    for match in _WORD_RE.finditer(source):
        separators.append(source[cursor : match.start()])
        raw = match.group(0)
        surface = raw.lower()
        tokens.append(
            Token(
                surface=surface,
                raw=raw,
                cls=lexicon.get(surface, UNKNOWN_CLASS),
                start=match.start(),
                end=match.end(),
            )
        )
        cursor = match.end()
    separators.append(source[cursor:])
    return TokenSequence(source=source, tokens=tuple(tokens), separators=tuple(separators))


# --- grammar -----------------------------------------------------------------


@dataclass(frozen=True)
class Production:
    lhs: str
    rhs: tuple[str, ...]
    index: int


@dataclass(frozen=True)
class Grammar:
    start: str
    productions: tuple[Production, ...]
    nonterminals: frozenset[str]
    terminals: frozenset[str]
    # introduced binarization symbol -> the original lhs it came from
    origin: dict[str, str]

    def origin_symbol(self, symbol: str) -> str:
        return self.origin.get(symbol, symbol)


def load_grammar(path: str | Path) -> Grammar:
    """Read `LHS -> A B | C` lines (# starts a comment) and normalize.

    The first rule's left-hand side is the start symbol.
    """
    raw: list[tuple[str, tuple[str, ...]]] = []
    start: str | None = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "->" not in text:
            raise GrammarError(f"{path}:{lineno}: expected 'LHS -> ...'")
        lhs, rhs_text = text.split("->", 1)
        lhs = lhs.strip()
        if not lhs or " " in lhs:
            raise GrammarError(f"{path}:{lineno}: bad left-hand side {lhs!r}")
        if start is None:
            start = lhs
        for alternative in rhs_text.split("|"):
            rhs = tuple(alternative.split())
            if not rhs:
                raise GrammarError(f"{path}:{lineno}: empty right-hand side")
            raw.append((lhs, rhs))
    if start is None:
        raise GrammarError(f"{path}: no productions")
    return normalize_grammar(raw, start)


def normalize_grammar(raw: list[tuple[str, tuple[str, ...]]], start: str) -> Grammar:
    """Binarize long productions and validate structural invariants.

    `A -> X1 X2 X3` becomes `A -> X1 A__1`, `A__1 -> X2 X3`, helpers spliced
    right after their parent so production indices stay deterministic.
    Introduced symbols remember their origin lhs.
    """
    lhs_symbols = {lhs for lhs, _ in raw}
    if start not in lhs_symbols:
        raise GrammarError(f"start symbol {start!r} has no production")
    origin: dict[str, str] = {}
    productions: list[Production] = []
    helper_counter = 0
    for lhs, rhs in raw:
        if not rhs:
            raise GrammarError(f"{lhs}: empty production")
        current_lhs = lhs
        remaining = list(rhs)
        while len(remaining) > 2:
            helper_counter += 1
            helper = f"{lhs}__{helper_counter}"
            while helper in lhs_symbols or helper in origin:
                helper_counter += 1
                helper = f"{lhs}__{helper_counter}"
            origin[helper] = origin.get(lhs, lhs)
            productions.append(Production(current_lhs, (remaining[0], helper), len(productions)))
            current_lhs = helper
            remaining = remaining[1:]
        productions.append(Production(current_lhs, tuple(remaining), len(productions)))

    nonterminals = frozenset(p.lhs for p in productions)
    terminals = frozenset(
        symbol for p in productions for symbol in p.rhs if symbol not in nonterminals
    )

    # unit-production cycle check: A -> B edges with B a nonterminal
    unit_edges: dict[str, set[str]] = {}
    for p in productions:
        if len(p.rhs) == 1 and p.rhs[0] in nonterminals:
            unit_edges.setdefault(p.lhs, set()).add(p.rhs[0])
    state: dict[str, int] = {}  # 1 = on stack, 2 = done

    def visit(node: str, trail: list[str]) -> None:
        state[node] = 1
        trail.append(node)
        for succ in sorted(unit_edges.get(node, ())):
            if state.get(succ) == 1:
                cycle = trail[trail.index(succ) :] + [succ]
                raise CyclicUnitChain(f"unit production cycle: {' -> '.join(cycle)}")
            if state.get(succ) != 2:
                visit(succ, trail)
        trail.pop()
        state[node] = 2

    for symbol in sorted(unit_edges):
        if state.get(symbol) != 2:
            visit(symbol, [])

    return Grammar(
        start=start,
        productions=tuple(productions),
        nonterminals=nonterminals,
        terminals=terminals,
        origin=origin,
    )


# --- parse trees ---------------------------------------------------------------


@dataclass(frozen=True)
class ParseTree:
    symbol: str
    span: tuple[int, int]  # token span, end exclusive
    production: int | None  # None for terminal leaves
    children: tuple["ParseTree", ...]
    token: int | None = None  # leaf token index

    def is_leaf(self) -> bool:
        return self.token is not None

    def leaves(self) -> list[int]:
        if self.is_leaf():
            return [self.token]  # type: ignore[list-item]
        out: list[int] = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def render(self, tokens: TokenSequence | None = None) -> str:
        if self.is_leaf():
            if tokens is not None:
                return tokens.tokens[self.token].surface  # type: ignore[index]
            return self.symbol
        inner = ", ".join(child.render(tokens) for child in self.children)
        return f"{self.symbol}({inner})"


_LEAF = (-1, None)


def parse(tokens: TokenSequence, grammar: Grammar) -> ParseTree:
    """CYK chart parse; raises NoParse with a best-effort cover on failure.

    Cell choices are stored as (production index, split) decisions and the
    tree is materialized only after the whole chart is final, so late
    unary-closure improvements can never leave stale subtrees behind.
    """
    n = len(tokens.tokens)
    if n == 0:
        raise NoParse("empty token sequence")

    unary = [p for p in grammar.productions if len(p.rhs) == 1]
    binary = [p for p in grammar.productions if len(p.rhs) == 2]

    # chart[(i, j)]: symbol -> (production index, split | None); leaves use _LEAF
    chart: dict[tuple[int, int], dict[str, tuple[int, int | None]]] = {}

    def close_unary(cell: dict[str, tuple[int, int | None]]) -> None:
        changed = True
        while changed:
            changed = False
            for p in unary:
                if p.rhs[0] not in cell:
                    continue
                if p.rhs[0] == p.lhs:
                    continue
                candidate = (p.index, None)
                current = cell.get(p.lhs)
                if current is None or (current != _LEAF and p.index < current[0]):
                    if current != candidate:
                        cell[p.lhs] = candidate
                        changed = True

    for i, token in enumerate(tokens.tokens):
        cell: dict[str, tuple[int, int | None]] = {token.cls: _LEAF}
        close_unary(cell)
        chart[(i, i + 1)] = cell

    for length in range(2, n + 1):
        for i in range(0, n - length + 1):
            j = i + length
            cell = {}
            for p in binary:
                left_sym, right_sym = p.rhs
                # largest split first realizes the longest-left tie-break
                for split in range(j - 1, i, -1):
                    if left_sym in chart[(i, split)] and right_sym in chart[(split, j)]:
                        current = cell.get(p.lhs)
                        if current is None or p.index < current[0]:
                            cell[p.lhs] = (p.index, split)
                        break
            close_unary(cell)
            chart[(i, j)] = cell

    if grammar.start not in chart[(0, n)]:
        raise NoParse(
            f"{n} tokens not derivable from {grammar.start}",
            cover=_best_cover(chart, tokens, n),
        )

    def build(i: int, j: int, symbol: str) -> ParseTree:
        choice = chart[(i, j)][symbol]
        if choice == _LEAF:
            return ParseTree(symbol=symbol, span=(i, j), production=None, children=(), token=i)
        index, split = choice
        production = grammar.productions[index]
        if split is None:
            children = (build(i, j, production.rhs[0]),)
        else:
            children = (build(i, split, production.rhs[0]), build(split, j, production.rhs[1]))
        return ParseTree(symbol=symbol, span=(i, j), production=index, children=children)

    return build(0, n, grammar.start)


def _best_cover(
    chart: dict[tuple[int, int], dict[str, tuple[int, int | None]]],
    tokens: TokenSequence,
    n: int,
) -> tuple[tuple[int, int, str], ...]:
    """Greedy left-to-right tiling with the longest available constituent."""
    cover: list[tuple[int, int, str]] = []
    position = 0
    while position < n:
        placed = False
        for end in range(n, position, -1):
            cell = chart.get((position, end), {})
            if cell:
                symbol = min(cell, key=lambda s: (cell[s][0], s))
                cover.append((position, end, symbol))
                position = end
                placed = True
                break
        if not placed:  # leaf cells always exist, but stay safe
            position += 1
    return tuple(cover)


def collect_spans(tree: ParseTree, symbols: frozenset[str], grammar: Grammar) -> list[tuple[int, int]]:
    """Spans of maximal subtrees whose origin symbol is in `symbols`."""
    spans: list[tuple[int, int]] = []

    def walk(node: ParseTree) -> None:
        if not node.is_leaf() and grammar.origin_symbol(node.symbol) in symbols:
            spans.append(node.span)
            return
        for child in node.children:
            walk(child)

    walk(tree)
    return spans
