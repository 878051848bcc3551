"""Query regularization: rewrite to a fixed point, segment, extract, refine.

The rewrite engine applies an ordered rule set repeatedly until a full
sweep changes nothing (or the sweep budget runs out), recording which
rules fired. The standardized text is then parsed, split into clauses,
mined for clinical elements, and reassembled into a refined query whose
subqueries are deduplicated and ordered by care-stage priority.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import ConfigError, EmptyText, NoParse
from .gateway import ChatBackend, ChatMessage, ChatRequest, Embedder
from .grammar import Grammar, TokenSequence, collect_spans, parse
from .retrieval import CorpusDocument, InvertedIndex, hybrid_retrieve, soft_f1
from .textutil import text_hash, text_tokens

logger = logging.getLogger(__name__)

TEXT_KINDS = ("grammatical-normalization", "format-standardization")
LIST_KINDS = (
    "subquery-filter",
    "overlap-removal",
    "consolidation",
    "intent-prioritization",
)
RULE_KINDS = TEXT_KINDS + LIST_KINDS

FORMAT_OPS = ("lowercase", "collapse-whitespace", "strip-noise", "regex")

# stage priority used for subquery ordering and hints
STAGE_PRIORITY = ("pre-diagnosis", "diagnosis", "medicament", "post-diagnosis")

STAGE_HINT_KEYWORDS: dict[str, tuple[str, ...]] = {
    "medicament": (
        "medication", "medications", "medicine", "drug", "drugs", "dose", "dosage",
        "prescription", "prescribe", "pill", "tablet", "interact", "interaction",
        "ibuprofen", "aspirin", "amoxicillin", "antibiotic", "antibiotics",
    ),
    "post-diagnosis": (
        "recover", "recovery", "rehab", "rehabilitation", "follow", "aftercare",
        "discharge", "prognosis", "monitor", "monitoring", "checkup",
    ),
    "pre-diagnosis": (
        "department", "appointment", "register", "registration", "clinic",
        "book", "triage", "visit", "specialist",
    ),
}

# checked in this order; the first stage with a keyword hit wins
_HINT_ORDER = ("medicament", "post-diagnosis", "pre-diagnosis")


@dataclass(frozen=True)
class RewriteRule:
    id: str
    kind: str
    pattern: str | None = None
    replacement: str | None = None
    op: str | None = None  # format-standardization only
    params: dict | None = None
    prompt: str | None = None  # model-backed text rules

    def __post_init__(self) -> None:
        if self.kind not in RULE_KINDS:
            raise ConfigError(f"rule {self.id!r}: unknown kind {self.kind!r}")
        if self.kind == "format-standardization":
            if self.op not in FORMAT_OPS:
                raise ConfigError(f"rule {self.id!r}: unknown format op {self.op!r}")
            if self.op == "regex" and (self.pattern is None or self.replacement is None):
                raise ConfigError(f"rule {self.id!r}: regex op needs pattern and replacement")
        if self.kind == "grammatical-normalization" and self.pattern is None:
            raise ConfigError(f"rule {self.id!r}: needs a pattern")
        if self.pattern is not None:
            try:
                re.compile(self.pattern)
            except re.error as exc:
                raise ConfigError(f"rule {self.id!r}: bad pattern: {exc}") from exc

    def param(self, name: str, default):
        if self.params and name in self.params:
            return self.params[name]
        return default


def load_rules(path: str | Path) -> tuple[RewriteRule, ...]:
    """Ordered rule set from JSONL; ids must be unique."""
    rules: list[RewriteRule] = []
    seen: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            rule = RewriteRule(
                id=str(row["id"]),
                kind=str(row["kind"]),
                pattern=row.get("pattern"),
                replacement=row.get("replacement"),
                op=row.get("op"),
                params=row.get("params"),
                prompt=row.get("prompt"),
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad rule line: {exc}") from exc
        if rule.id in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate rule id {rule.id!r}")
        seen.add(rule.id)
        rules.append(rule)
    return tuple(rules)


# --- text-level application ---------------------------------------------------


def apply_text_rule(rule: RewriteRule, text: str, backend: ChatBackend | None = None) -> str:
    """One text rule, once. List-level kinds are the identity here."""
    if rule.kind not in TEXT_KINDS:
        return text
    if rule.prompt is not None and backend is not None and backend.generative:
        rewritten = _model_rewrite(rule, text, backend)
        if rewritten is not None:
            return rewritten
        # fall through to the deterministic form of the rule
    if rule.kind == "grammatical-normalization":
        assert rule.pattern is not None
        return re.sub(rule.pattern, rule.replacement or "", text)
    if rule.op == "lowercase":
        return text.lower()
    if rule.op == "collapse-whitespace":
        return re.sub(r"\s+", " ", text)
    if rule.op == "strip-noise":
        chars = rule.param("chars", "?!.,;: ")
        return text.strip().strip(chars).strip()
    assert rule.op == "regex"
    return re.sub(rule.pattern, rule.replacement or "", text)  # type: ignore[arg-type]


def _model_rewrite(rule: RewriteRule, text: str, backend: ChatBackend) -> str | None:
    """Ask the backend to rewrite; reject empty or multi-line answers."""
    prompt = rule.prompt.replace("{{text}}", text)  # type: ignore[union-attr]
    reply = backend.chat(
        ChatRequest(model="rewrite", messages=(ChatMessage(role="user", content=prompt),))
    )
    rewritten = reply.content.strip()
    if not rewritten or "\n" in rewritten:
        logger.warning("rule %s: unusable model rewrite, using deterministic form", rule.id)
        return None
    return rewritten


# --- fixed point -----------------------------------------------------------------


@dataclass(frozen=True)
class Provenance:
    rule_id: str
    before: str  # text hash
    after: str


@dataclass(frozen=True)
class StandardizedQuery:
    text: str
    sweeps: int
    converged: bool
    provenance: tuple[Provenance, ...]


def _fixed_point(state, rules, apply_one, state_hash, max_sweeps: int):
    """Shared sweep loop: apply rules in order until a sweep is a no-op."""
    if max_sweeps < 1:
        raise ConfigError(f"max_sweeps must be >= 1, got {max_sweeps}")
    provenance: list[Provenance] = []
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        changed = False
        for rule in rules:
            new_state = apply_one(rule, state)
            if new_state != state:
                provenance.append(Provenance(rule.id, state_hash(state), state_hash(new_state)))
                state = new_state
                changed = True
        if not changed:
            converged = True
            break
    return state, sweeps, converged, tuple(provenance)


def standardize(
    query: str,
    rules: tuple[RewriteRule, ...],
    backend: ChatBackend | None = None,
    max_sweeps: int = 16,
) -> StandardizedQuery:
    """Rewrite the query text to a fixed point of the text-level rules."""
    if not query.strip():
        raise EmptyText("empty query")
    text, sweeps, converged, provenance = _fixed_point(
        query,
        rules,
        lambda rule, state: apply_text_rule(rule, state, backend),
        text_hash,
        max_sweeps,
    )
    return StandardizedQuery(text=text, sweeps=sweeps, converged=converged, provenance=provenance)


# --- clause segmentation -----------------------------------------------------------


SPLIT_CLASSES = frozenset({"CONJ", "PUNCT"})


def segment_clauses(
    tokens: TokenSequence,
    grammar: Grammar,
    clause_symbols: frozenset[str] = frozenset({"CLAUSE"}),
) -> list[tuple[int, int]]:
    """Clause token-spans, from the parse when one exists.

    Tree mode: spans of maximal subtrees labeled with a clause symbol
    (conjunctions nested inside one clause never split it). Fallback on
    NoParse: split between runs of CONJ/PUNCT tokens.
    """
    if not tokens.tokens:
        return []
    try:
        tree = parse(tokens, grammar)
    except NoParse:
        return _segment_flat(tokens)
    spans = collect_spans(tree, clause_symbols, grammar)
    if not spans:
        return [(0, len(tokens.tokens))]
    return spans


def _segment_flat(tokens: TokenSequence) -> list[tuple[int, int]]:
    spans: list[tuple[int, int]] = []
    start: int | None = None
    for position, token in enumerate(tokens.tokens):
        if token.cls in SPLIT_CLASSES:
            if start is not None:
                spans.append((start, position))
                start = None
        elif start is None:
            start = position
    if start is not None:
        spans.append((start, len(tokens.tokens)))
    if not spans:
        spans.append((0, len(tokens.tokens)))
    return spans


# --- clinical elements ---------------------------------------------------------------


@dataclass(frozen=True)
class ClinicalElement:
    kind: str
    surface: str
    start: int  # char offsets into the standardized text
    end: int


@dataclass(frozen=True)
class ClinicalElementSet:
    elements: tuple[ClinicalElement, ...]

    def surfaces(self) -> list[str]:
        seen: set[str] = set()
        out: list[str] = []
        for element in self.elements:
            if element.surface not in seen:
                seen.add(element.surface)
                out.append(element.surface)
        return out

    def render(self) -> str:
        if not self.elements:
            return "(none)"
        return "; ".join(f"{element.kind}: {element.surface}" for element in self.elements)


def load_element_lexicon(path: str | Path) -> dict[str, str]:
    """Element lexicon from JSONL lines of {"surface", "kind"}.

    Surfaces may be multi-word; matching is over token sequences.
    """
    lexicon: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            surface, kind = str(row["surface"]).lower(), str(row["kind"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad element line: {exc}") from exc
        if not surface or not kind:
            raise ConfigError(f"{path}:{lineno}: empty surface or kind")
        lexicon[surface] = kind
    return lexicon


def extract_elements(
    tokens: TokenSequence,
    clause_spans: list[tuple[int, int]],
    lexicon: dict[str, str],
) -> ClinicalElementSet:
    """Longest-match-first, non-overlapping element spotting within clauses."""
    by_length: dict[int, dict[tuple[str, ...], str]] = {}
    for surface, kind in lexicon.items():
        words = tuple(text_tokens(surface))
        if words:
            by_length.setdefault(len(words), {})[words] = kind
    lengths = sorted(by_length, reverse=True)
    elements: list[ClinicalElement] = []
    for clause_start, clause_end in clause_spans:
        position = clause_start
        while position < clause_end:
            matched = False
            for length in lengths:
                if position + length > clause_end:
                    continue
                window = tuple(t.surface for t in tokens.tokens[position : position + length])
                kind = by_length[length].get(window)
                if kind is not None:
                    first, last = tokens.tokens[position], tokens.tokens[position + length - 1]
                    elements.append(
                        ClinicalElement(
                            kind=kind,
                            surface=tokens.source[first.start : last.end],
                            start=first.start,
                            end=last.end,
                        )
                    )
                    position += length
                    matched = True
                    break
            if not matched:
                position += 1
    elements.sort(key=lambda element: (element.start, element.end))
    return ClinicalElementSet(elements=tuple(elements))


# --- guideline context -----------------------------------------------------------------


def assemble_context(
    elements: ClinicalElementSet,
    index: InvertedIndex,
    documents: list[CorpusDocument],
    query_embedder: Embedder,
    token_embedder: Embedder,
    tau: float,
    top_k: int = 3,
) -> list[tuple[CorpusDocument, float]]:
    """Guideline documents supporting the extracted elements.

    Candidates come from one hybrid retrieval over the concatenated
    element surfaces (keyword mode "any"); they are then reranked by soft
    token alignment against that element text. Empty element set, empty
    context.
    """
    surfaces = elements.surfaces()
    if not surfaces:
        return []
    element_text = " ".join(surfaces)
    result = hybrid_retrieve(
        element_text,
        query_embedder.embed(element_text),
        index,
        documents,
        tau,
        mode="any",
    )
    by_id = {document.id: document for document in documents}
    scored = [
        (by_id[doc_id], soft_f1(by_id[doc_id].search_text(), element_text, token_embedder))
        for doc_id in result.ids
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0].id))
    return scored[: max(0, top_k)]


# --- refined query ------------------------------------------------------------------------


@dataclass(frozen=True)
class Subquery:
    text: str
    stage_hint: str


@dataclass(frozen=True)
class RefinedQuery:
    subqueries: tuple[Subquery, ...]
    merged_text: str


def stage_hint(clause_text: str) -> str:
    tokens = set(text_tokens(clause_text))
    for stage in _HINT_ORDER:
        if tokens & set(STAGE_HINT_KEYWORDS[stage]):
            return stage
    return "diagnosis"


def _overlap_ratio(a: str, b: str) -> float:
    tokens_a, tokens_b = set(text_tokens(a)), set(text_tokens(b))
    if not tokens_a or not tokens_b:
        return 0.0
    return len(tokens_a & tokens_b) / min(len(tokens_a), len(tokens_b))


def apply_list_rule(
    rule: RewriteRule,
    subqueries: tuple[Subquery, ...],
    backend: ChatBackend | None = None,
) -> tuple[Subquery, ...]:
    """One rule applied at the subquery-list level, once.

    Text kinds map over each subquery's text; list kinds reshape the list.
    """
    if rule.kind in TEXT_KINDS:
        return tuple(
            replace(subquery, text=apply_text_rule(rule, subquery.text, backend))
            for subquery in subqueries
        )
    if rule.kind == "subquery-filter":
        min_tokens = int(rule.param("min_tokens", 0))
        pattern = re.compile(rule.pattern) if rule.pattern else None
        kept = []
        for subquery in subqueries:
            if len(text_tokens(subquery.text)) < min_tokens:
                continue
            if pattern is not None and pattern.search(subquery.text):
                continue
            kept.append(subquery)
        return tuple(kept)
    if rule.kind == "overlap-removal":
        threshold = float(rule.param("threshold", 0.6))
        kept = []
        for subquery in subqueries:
            if any(_overlap_ratio(subquery.text, earlier.text) > threshold for earlier in kept):
                continue
            kept.append(subquery)
        return tuple(kept)
    if rule.kind == "consolidation":
        separator = str(rule.param("separator", ", "))
        merged: dict[str, list[str]] = {}
        order: list[str] = []
        for subquery in subqueries:
            if subquery.stage_hint not in merged:
                merged[subquery.stage_hint] = []
                order.append(subquery.stage_hint)
            merged[subquery.stage_hint].append(subquery.text)
        return tuple(
            Subquery(text=separator.join(merged[hint]), stage_hint=hint) for hint in order
        )
    assert rule.kind == "intent-prioritization"
    priority = {stage: position for position, stage in enumerate(STAGE_PRIORITY)}
    return tuple(
        sorted(subqueries, key=lambda subquery: priority.get(subquery.stage_hint, len(priority)))
    )


def construct_refined(
    std: StandardizedQuery,
    clause_texts: list[str],
    rules: tuple[RewriteRule, ...],
    backend: ChatBackend | None = None,
    overlap_threshold: float = 0.6,
    max_sweeps: int = 16,
) -> RefinedQuery:
    """Build the refined query from clause texts under the list-level rules.

    Invariants enforced regardless of what the rule set does: at least one
    subquery survives, no pair overlaps beyond the threshold, and
    subqueries are ordered by stage priority. The merged text joins
    subqueries with "; " in that order.
    """
    initial = tuple(
        Subquery(text=clause, stage_hint=stage_hint(clause))
        for clause in clause_texts
        if clause.strip()
    )
    if not initial:
        initial = (Subquery(text=std.text, stage_hint=stage_hint(std.text)),)
    subqueries, _, _, _ = _fixed_point(
        initial,
        rules,
        lambda rule, state: apply_list_rule(rule, state, backend),
        lambda state: text_hash("\x1f".join(f"{s.stage_hint}\x1e{s.text}" for s in state)),
        max_sweeps,
    )
    deduped: list[Subquery] = []
    for subquery in subqueries:
        if any(_overlap_ratio(subquery.text, kept.text) > overlap_threshold for kept in deduped):
            continue
        deduped.append(subquery)
    if not deduped:
        deduped = [Subquery(text=std.text, stage_hint=stage_hint(std.text))]
    priority = {stage: position for position, stage in enumerate(STAGE_PRIORITY)}
    deduped.sort(key=lambda subquery: priority.get(subquery.stage_hint, len(priority)))
    return RefinedQuery(
        subqueries=tuple(deduped),
        merged_text="; ".join(subquery.text for subquery in deduped),
    )
