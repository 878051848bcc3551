"""Hybrid retrieval: keyword slice, embedding match, merged ranking.

A query is answered from the union of two routes: an inverted-index
keyword slice and a cosine-threshold semantic match. Semantic hits are
ranked by score; keyword-only hits follow, id-ordered, so results are
stable across runs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateId,
    EmptyCorpus,
    EmptyText,
    MedAideError,
    ZeroNorm,
)
from .gateway import Embedder
from .textutil import text_tokens

logger = logging.getLogger(__name__)


@dataclass
class CorpusDocument:
    id: str
    title: str
    body: str
    tags: tuple[str, ...]
    store: str
    vector: np.ndarray | None = None

    def search_text(self) -> str:
        return " ".join([self.title, self.body, " ".join(self.tags)])


def load_corpus(path: str | Path, store: str) -> list[CorpusDocument]:
    """Documents from JSONL lines of {"id", "title", "body", "tags"}."""
    documents: list[CorpusDocument] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            document = CorpusDocument(
                id=str(row["id"]),
                title=str(row["title"]),
                body=str(row["body"]),
                tags=tuple(str(t) for t in row.get("tags", [])),
                store=store,
            )
        except (json.JSONDecodeError, KeyError) as exc:
            raise MedAideError(f"{path}:{lineno}: bad corpus line: {exc}") from exc
        if not document.id or not document.body:
            raise EmptyText(f"{path}:{lineno}: document needs id and body")
        documents.append(document)
    return documents


def load_stopwords(path: str | Path) -> frozenset[str]:
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        word = line.strip().lower()
        if word and not word.startswith("#"):
            words.add(word)
    return frozenset(words)


# --- keyword route -------------------------------------------------------------


@dataclass(frozen=True)
class InvertedIndex:
    store: str
    postings: dict[str, tuple[str, ...]]  # term -> sorted doc ids
    doc_count: int
    stopwords: frozenset[str]


def build_index(documents: list[CorpusDocument], stopwords: frozenset[str], store: str = "") -> InvertedIndex:
    """Posting lists over title+body+tags tokens, stopwords excluded."""
    if not documents:
        raise EmptyCorpus(f"no documents to index for store {store!r}")
    seen: set[str] = set()
    postings: dict[str, set[str]] = {}
    for document in documents:
        if document.id in seen:
            raise DuplicateId(f"document id {document.id!r} appears twice in store {store!r}")
        seen.add(document.id)
        for term in set(text_tokens(document.search_text())):
            if term in stopwords:
                continue
            postings.setdefault(term, set()).add(document.id)
    return InvertedIndex(
        store=store or documents[0].store,
        postings={term: tuple(sorted(ids)) for term, ids in sorted(postings.items())},
        doc_count=len(documents),
        stopwords=stopwords,
    )


def keyword_retrieve(terms: list[str], index: InvertedIndex, mode: str = "all") -> frozenset[str]:
    """Ids of documents containing the query terms.

    mode="all" intersects posting lists, mode="any" unions them. Terms on
    the stopword list are dropped first; if nothing is left the result is
    empty in both modes (an all-stopword query matches nothing, it does
    not match everything).
    """
    if mode not in ("all", "any"):
        raise MedAideError(f"unknown keyword mode {mode!r}")
    useful = [term.lower() for term in terms if term.lower() not in index.stopwords]
    if not useful:
        return frozenset()
    id_sets = [set(index.postings.get(term, ())) for term in useful]
    if mode == "all":
        result = set.intersection(*id_sets)
    else:
        result = set.union(*id_sets)
    return frozenset(result)


# --- semantic route --------------------------------------------------------------


def semantic_retrieve(
    query_vector: np.ndarray, documents: list[CorpusDocument], tau: float
) -> dict[str, float]:
    """Cosine similarity against document vectors; keep scores >= tau."""
    if not documents:
        raise EmptyCorpus("no documents for semantic retrieval")
    norm = float(np.linalg.norm(query_vector))
    if norm < 1e-12:
        raise ZeroNorm("query vector has zero norm")
    scores: dict[str, float] = {}
    for document in documents:
        if document.vector is None:
            continue
        if document.vector.shape != query_vector.shape:
            raise DimensionMismatch(
                f"document {document.id!r}: vector shape {document.vector.shape} "
                f"vs query {query_vector.shape}"
            )
        doc_norm = float(np.linalg.norm(document.vector))
        if doc_norm < 1e-12:
            raise ZeroNorm(f"document {document.id!r} has a zero-norm vector")
        score = float(np.dot(query_vector, document.vector) / (norm * doc_norm))
        if score >= tau:
            scores[document.id] = score
    return scores


# --- hybrid merge -----------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalResult:
    store: str
    slice_ids: frozenset[str]
    match_scores: dict[str, float]
    ids: tuple[str, ...]  # final ranked union
    tau: float
    mode: str

    def top(self, k: int) -> tuple[str, ...]:
        return self.ids[: max(0, k)]


def hybrid_retrieve(
    query_text: str,
    query_vector: np.ndarray,
    index: InvertedIndex,
    documents: list[CorpusDocument],
    tau: float,
    mode: str = "all",
) -> RetrievalResult:
    """Union of the keyword slice and the semantic match.

    Ranking: semantic hits by descending score, then keyword-only hits;
    ties and the keyword tail are ordered by id.
    """
    slice_ids = keyword_retrieve(text_tokens(query_text), index, mode=mode)
    match_scores = semantic_retrieve(query_vector, documents, tau)
    semantic_ranked = sorted(match_scores, key=lambda d: (-match_scores[d], d))
    keyword_only = sorted(slice_ids - set(match_scores))
    return RetrievalResult(
        store=index.store,
        slice_ids=slice_ids,
        match_scores=match_scores,
        ids=tuple(semantic_ranked + keyword_only),
        tau=tau,
        mode=mode,
    )


# --- soft token alignment ------------------------------------------------------------


def soft_f1(candidate: str, reference: str, embedder: Embedder) -> float:
    """Greedy soft token-alignment F1 in [0, 1].

    Each candidate token scores its best cosine against any reference
    token (negatives clamp to zero); precision and recall are the mean
    best scores in each direction, combined harmonically.
    """
    candidate_tokens = text_tokens(candidate)
    reference_tokens = text_tokens(reference)
    if not candidate_tokens and not reference_tokens:
        return 1.0
    if not candidate_tokens or not reference_tokens:
        return 0.0
    cache: dict[str, np.ndarray] = {}

    def vector(token: str) -> np.ndarray:
        if token not in cache:
            raw = embedder.embed(token)
            norm = float(np.linalg.norm(raw))
            if norm < 1e-12:
                raise ZeroNorm(f"token {token!r} embeds to zero")
            cache[token] = raw / norm
        return cache[token]

    def best_scores(from_tokens: list[str], to_tokens: list[str]) -> float:
        to_matrix = np.stack([vector(t) for t in to_tokens])
        total = 0.0
        for token in from_tokens:
            sims = to_matrix @ vector(token)
            total += max(0.0, float(np.max(sims)))
        return total / len(from_tokens)

    precision = best_scores(candidate_tokens, reference_tokens)
    recall = best_scores(reference_tokens, candidate_tokens)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
