"""Prototype-based intent matching.

Each intent carries a prototype embedding. A query is scored by cosine
similarity against every prototype, the similarities pass through a
softmax over the whole taxonomy, and every intent whose probability
clears the threshold activates. If nothing clears it, the single most
probable intent activates as a fallback so downstream staging always has
work to do.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    UnparseableReply,
    ZeroNorm,
)
from .gateway import ChatBackend, ChatMessage, ChatRequest, Embedder

logger = logging.getLogger(__name__)

STAGES = ("pre-diagnosis", "diagnosis", "medicament", "post-diagnosis")


@dataclass(frozen=True)
class Intent:
    id: str
    label: str
    stage: str


@dataclass(frozen=True)
class IntentTaxonomy:
    intents: tuple[Intent, ...]

    def __post_init__(self) -> None:
        ids = [intent.id for intent in self.intents]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate intent ids in taxonomy")
        for intent in self.intents:
            if intent.stage not in STAGES:
                raise ConfigError(f"intent {intent.id!r} has unknown stage {intent.stage!r}")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(intent.id for intent in self.intents)

    def index(self, intent_id: str) -> int:
        for position, intent in enumerate(self.intents):
            if intent.id == intent_id:
                return position
        raise KeyError(intent_id)

    def get(self, intent_id: str) -> Intent:
        return self.intents[self.index(intent_id)]

    def for_stage(self, stage: str) -> tuple[str, ...]:
        return tuple(intent.id for intent in self.intents if intent.stage == stage)


def load_taxonomy(path: str | Path) -> IntentTaxonomy:
    """Taxonomy from JSONL lines of {"id", "label", "stage"}; order matters."""
    intents: list[Intent] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            intents.append(Intent(id=str(row["id"]), label=str(row["label"]), stage=str(row["stage"])))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad taxonomy line: {exc}") from exc
    if not intents:
        raise ConfigError(f"{path}: empty taxonomy")
    return IntentTaxonomy(intents=tuple(intents))


def load_exemplars(path: str | Path) -> dict[str, str]:
    """Exemplar texts from JSONL lines of {"intent", "text"}."""
    exemplars: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{lineno}: bad exemplar line: {exc}") from exc
        if row["intent"] in exemplars:
            raise ConfigError(f"{path}:{lineno}: duplicate exemplar for {row['intent']!r}")
        exemplars[str(row["intent"])] = str(row["text"])
    return exemplars


class PrototypeStore:
    """One embedding per intent id, all the same dimension, none zero."""

    def __init__(self, vectors: dict[str, np.ndarray], taxonomy: IntentTaxonomy):
        missing = [intent.id for intent in taxonomy.intents if intent.id not in vectors]
        if missing:
            raise ConfigError(f"prototype store missing intents: {missing}")
        dimensions = {vectors[i].shape for i in taxonomy.ids}
        if len(dimensions) != 1:
            raise DimensionMismatch(f"prototype dimensions differ: {sorted(dimensions)}")
        for intent_id in taxonomy.ids:
            if float(np.linalg.norm(vectors[intent_id])) < 1e-12:
                raise ZeroNorm(f"prototype for {intent_id!r} has zero norm")
        self.vectors = {intent_id: np.asarray(vectors[intent_id], dtype=np.float64) for intent_id in taxonomy.ids}
        self.dimension = int(self.vectors[taxonomy.ids[0]].shape[0])

    @classmethod
    def from_exemplars(
        cls, taxonomy: IntentTaxonomy, exemplars: dict[str, str], embedder: Embedder
    ) -> "PrototypeStore":
        vectors = {}
        for intent in taxonomy.intents:
            if intent.id not in exemplars:
                raise ConfigError(f"no exemplar text for intent {intent.id!r}")
            vectors[intent.id] = embedder.embed(exemplars[intent.id])
        return cls(vectors, taxonomy)


@dataclass(frozen=True)
class IntentActivation:
    """Scored taxonomy snapshot for one query.

    similarities/probabilities are ordered like the taxonomy. `activated`
    keeps taxonomy order too. `fallback` marks the nothing-cleared-the-bar
    argmax path; `distribution` is "softmax" for the prototype route and
    "synthetic" for label-only recognizers whose probabilities are not a
    softmax output.
    """

    similarities: tuple[float, ...]
    probabilities: tuple[float, ...]
    activated: tuple[str, ...]
    threshold: float
    fallback: bool = False
    distribution: str = "softmax"


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    if u.shape != v.shape:
        raise DimensionMismatch(f"cosine over shapes {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < 1e-12 or nv < 1e-12:
        raise ZeroNorm("cosine over a zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def intent_distribution(
    query_vector: np.ndarray, store: PrototypeStore, taxonomy: IntentTaxonomy
) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarities and their softmax over the full taxonomy."""
    similarities = np.array(
        [cosine(query_vector, store.vectors[intent_id]) for intent_id in taxonomy.ids],
        dtype=np.float64,
    )
    shifted = np.exp(similarities - np.max(similarities))
    probabilities = shifted / float(np.sum(shifted))
    return similarities, probabilities


def activate(
    similarities: np.ndarray,
    probabilities: np.ndarray,
    taxonomy: IntentTaxonomy,
    threshold: float,
) -> IntentActivation:
    """Threshold the distribution; argmax fallback when nothing clears it.

    Probability ties at the fallback argmax resolve to the lowest taxonomy
    index.
    """
    if not 0.0 <= threshold < 1.0:
        raise ConfigError(f"intent threshold must be in [0, 1), got {threshold}")
    activated = [
        intent_id
        for intent_id, probability in zip(taxonomy.ids, probabilities)
        if probability >= threshold
    ]
    fallback = False
    if not activated:
        best = int(np.argmax(probabilities))  # np.argmax takes the first maximum
        activated = [taxonomy.ids[best]]
        fallback = True
    return IntentActivation(
        similarities=tuple(float(s) for s in similarities),
        probabilities=tuple(float(p) for p in probabilities),
        activated=tuple(activated),
        threshold=threshold,
        fallback=fallback,
    )


def match(
    query_text: str,
    embedder: Embedder,
    store: PrototypeStore,
    taxonomy: IntentTaxonomy,
    threshold: float,
) -> IntentActivation:
    return match_vector(embedder.embed(query_text), store, taxonomy, threshold)


def match_vector(
    query_vector: np.ndarray,
    store: PrototypeStore,
    taxonomy: IntentTaxonomy,
    threshold: float,
) -> IntentActivation:
    similarities, probabilities = intent_distribution(query_vector, store, taxonomy)
    return activate(similarities, probabilities, taxonomy, threshold)


def smooth_query_vector(
    current: np.ndarray, previous: np.ndarray | None, ema_lambda: float
) -> np.ndarray:
    """Exponential smoothing across the turns of a session.

    lambda = 0 disables history; lambda must stay below 1 so the current
    turn always contributes.
    """
    if not 0.0 <= ema_lambda < 1.0:
        raise ConfigError(f"ema lambda must be in [0, 1), got {ema_lambda}")
    if previous is None or ema_lambda == 0.0:
        return current
    if previous.shape != current.shape:
        raise DimensionMismatch("session vector dimension changed mid-session")
    return ema_lambda * previous + (1.0 - ema_lambda) * current


# --- label-only recognition through a chat model --------------------------------


PROMPT_HEADER = "You label medical queries with intent ids from a fixed taxonomy."


def classification_prompt(text: str, taxonomy: IntentTaxonomy) -> str:
    lines = [PROMPT_HEADER, "Known intent ids:"]
    for intent in taxonomy.intents:
        lines.append(f"- {intent.id}: {intent.label}")
    lines.append(f"Query: {text}")
    lines.append("Reply with only the matching intent ids, comma-separated.")
    return "\n".join(lines)


def parse_intent_reply(raw: str, taxonomy: IntentTaxonomy) -> tuple[str, ...]:
    """Extract known intent ids from a free-form reply.

    First pass: comma/newline/semicolon-separated pieces that are exactly
    known ids. If that finds nothing, fall back to scanning the raw text
    for ids appearing as whole tokens, so chatty replies ("I would say
    med.dosage here") still parse. Result is deduped in taxonomy order.
    Raises UnparseableReply when no known id occurs at all.
    """
    pieces: list[str] = []
    for chunk in raw.replace(";", ",").replace("\n", ",").split(","):
        piece = chunk.strip().strip(".").strip()
        if piece:
            pieces.append(piece)
    known = set(taxonomy.ids)
    found = {piece for piece in pieces if piece in known}
    if not found:
        for intent_id in taxonomy.ids:
            if re.search(rf"(?<![\w.]){re.escape(intent_id)}(?![\w.])", raw):
                found.add(intent_id)
    if not found:
        raise UnparseableReply(raw)
    return tuple(intent_id for intent_id in taxonomy.ids if intent_id in found)


def match_via_prompt(
    text: str,
    taxonomy: IntentTaxonomy,
    backend: ChatBackend,
    model: str,
    threshold: float,
) -> IntentActivation:
    """Ask a chat model for labels instead of scoring prototypes.

    The reply gives activations only, so probabilities are synthetic:
    uniform over the activated set, zero elsewhere.
    """
    request = ChatRequest(
        model=model,
        messages=(ChatMessage(role="user", content=classification_prompt(text, taxonomy)),),
        temperature=0.0,
    )
    reply = backend.chat(request)
    activated = parse_intent_reply(reply.content, taxonomy)
    share = 1.0 / len(activated)
    probabilities = tuple(share if intent_id in activated else 0.0 for intent_id in taxonomy.ids)
    return IntentActivation(
        similarities=tuple(0.0 for _ in taxonomy.ids),
        probabilities=probabilities,
        activated=activated,
        threshold=threshold,
        fallback=False,
        distribution="synthetic",
    )
