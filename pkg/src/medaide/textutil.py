"""Small text and hashing helpers shared across modules."""

from __future__ import annotations

import hashlib
import json
import re

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def text_tokens(text: str) -> list[str]:
    """Lowercase alphanumeric token runs, in order.

    This is the one tokenizer used for retrieval, metrics and overlap
    checks, so scores stay comparable across modules.
    """
    return _TOKEN_RE.findall(text.lower())


def canonical_json(obj: object) -> str:
    """Stable JSON encoding: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def stable_hash(obj: object) -> str:
    """sha256 hex digest of the canonical JSON encoding."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def text_hash(text: str) -> str:
    """sha256 hex digest of raw text bytes."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
