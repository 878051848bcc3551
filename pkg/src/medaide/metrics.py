"""Reference-based text metrics on a 0-100 scale.

These are fixed-order, single-reference variants chosen for offline
reproducibility: no smoothing, no external tokenizers, one tokenization
(lowercase alphanumeric runs) shared with the rest of the engine.
"""

from __future__ import annotations

import math
from collections import Counter

from .errors import EmptyReference, LengthMismatch
from .gateway import Embedder
from .retrieval import soft_f1
from .textutil import text_tokens


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _require_reference(reference: str) -> list[str]:
    tokens = text_tokens(reference)
    if not tokens:
        raise EmptyReference("reference has no tokens")
    return tokens


def bleu_n(candidate: str, reference: str, n: int) -> float:
    """Single-order BLEU: clipped n-gram precision times brevity penalty."""
    reference_tokens = _require_reference(reference)
    candidate_tokens = text_tokens(candidate)
    if len(candidate_tokens) < n:
        return 0.0
    candidate_grams = _ngrams(candidate_tokens, n)
    reference_grams = _ngrams(reference_tokens, n)
    clipped = sum(min(count, reference_grams[gram]) for gram, count in candidate_grams.items())
    total = sum(candidate_grams.values())
    if clipped == 0:
        return 0.0
    precision = clipped / total
    c, r = len(candidate_tokens), len(reference_tokens)
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * precision * brevity


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F-score with beta = 1."""
    reference_tokens = _require_reference(reference)
    candidate_tokens = text_tokens(candidate)
    if not candidate_tokens:
        return 0.0
    m, n = len(candidate_tokens), len(reference_tokens)
    table = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            if candidate_tokens[i - 1] == reference_tokens[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    lcs = table[m][n]
    if lcs == 0:
        return 0.0
    precision = lcs / m
    recall = lcs / n
    return 100.0 * (2.0 * precision * recall) / (precision + recall)


def gleu(candidate: str, reference: str) -> float:
    """min(precision, recall) over n-gram matches pooled across n = 1..4."""
    reference_tokens = _require_reference(reference)
    candidate_tokens = text_tokens(candidate)
    if not candidate_tokens:
        return 0.0
    matches = 0
    candidate_total = 0
    reference_total = 0
    for n in range(1, 5):
        candidate_grams = _ngrams(candidate_tokens, n)
        reference_grams = _ngrams(reference_tokens, n)
        matches += sum(min(count, reference_grams[gram]) for gram, count in candidate_grams.items())
        candidate_total += sum(candidate_grams.values())
        reference_total += sum(reference_grams.values())
    if candidate_total == 0 or reference_total == 0:
        return 0.0
    return 100.0 * min(matches / candidate_total, matches / reference_total)


def _align(candidate_tokens: list[str], reference_tokens: list[str]) -> list[tuple[int, int]]:
    """Exact unigram alignment: each candidate token takes the leftmost
    unused reference occurrence of the same surface, left to right."""
    used: set[int] = set()
    pairs: list[tuple[int, int]] = []
    positions: dict[str, list[int]] = {}
    for j, token in enumerate(reference_tokens):
        positions.setdefault(token, []).append(j)
    for i, token in enumerate(candidate_tokens):
        for j in positions.get(token, ()):
            if j not in used:
                used.add(j)
                pairs.append((i, j))
                break
    return pairs


def meteor_lite(candidate: str, reference: str) -> float:
    """Unigram F-mean weighted toward recall, with a fragmentation penalty.

    Fmean = 10PR / (R + 9P); penalty = 0.5 * (chunks / matches)^3 where a
    chunk is a maximal run of alignments contiguous in both texts.
    """
    reference_tokens = _require_reference(reference)
    candidate_tokens = text_tokens(candidate)
    if not candidate_tokens:
        return 0.0
    pairs = _align(candidate_tokens, reference_tokens)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate_tokens)
    recall = matches / len(reference_tokens)
    fmean = 10.0 * precision * recall / (recall + 9.0 * precision)
    chunks = 1
    for (prev_i, prev_j), (cur_i, cur_j) in zip(pairs, pairs[1:]):
        if cur_i != prev_i + 1 or cur_j != prev_j + 1:
            chunks += 1
    penalty = 0.5 * (chunks / matches) ** 3
    return 100.0 * fmean * (1.0 - penalty)


def bert_score_like(candidate: str, reference: str, token_embedder: Embedder) -> float:
    """Soft token-alignment F1 scaled to 0-100."""
    _require_reference(reference)
    if not text_tokens(candidate):
        return 0.0
    return 100.0 * soft_f1(candidate, reference, token_embedder)


def intent_f1(predicted: list[set[str]], gold: list[set[str]]) -> float:
    """Micro-averaged set F1 over instances, in [0, 1]."""
    if len(predicted) != len(gold):
        raise LengthMismatch(f"{len(predicted)} predictions vs {len(gold)} gold sets")
    tp = fp = fn = 0
    for predicted_set, gold_set in zip(predicted, gold):
        tp += len(predicted_set & gold_set)
        fp += len(predicted_set - gold_set)
        fn += len(gold_set - predicted_set)
    denominator = 2 * tp + fp + fn
    if denominator == 0:
        return 0.0
    return 2.0 * tp / denominator


TEXT_METRICS = ("bleu1", "bleu2", "rouge_l", "gleu", "meteor_lite", "bert_score_like")


def score_pair(candidate: str, reference: str, token_embedder: Embedder) -> dict[str, float]:
    """All text metrics for one candidate/reference pair."""
    return {
        "bleu1": bleu_n(candidate, reference, 1),
        "bleu2": bleu_n(candidate, reference, 2),
        "rouge_l": rouge_l(candidate, reference),
        "gleu": gleu(candidate, reference),
        "meteor_lite": meteor_lite(candidate, reference),
        "bert_score_like": bert_score_like(candidate, reference, token_embedder),
    }
