"""Model gateway: chat backends, embedding backends, cassettes, vector files.

Everything model-shaped goes through this module so the rest of the engine
never sees a network. Backends share one wire shape (the common
chat-completions JSON contract); offline backends (echo, scripted mock,
replay) implement the same interface deterministically.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .errors import (
    BadMagic,
    BadVersion,
    ConfigError,
    DuplicateKey,
    EmptyInput,
    GatewayError,
    ReplayMiss,
    ScriptMiss,
    TransportError,
    TruncatedFile,
    UnknownKey,
)
from .textutil import canonical_json, stable_hash

logger = logging.getLogger(__name__)

API_KEY_ENV = "MEDAIDE_API_KEY"


# --- chat wire types -------------------------------------------------------


@dataclass(frozen=True)
class ChatMessage:
    role: str  # "system" | "user" | "assistant"
    content: str

    def as_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self) -> None:
        if not self.messages:
            raise GatewayError("chat request needs at least one message")

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "messages": [m.as_dict() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class ChatReply:
    content: str
    finish_reason: str = "stop"


def request_hash(request: ChatRequest) -> str:
    """Canonical request identity: sha256 over sorted-key compact JSON."""
    return stable_hash(request.as_dict())


def last_user_content(request: ChatRequest) -> str:
    for message in reversed(request.messages):
        if message.role == "user":
            return message.content
    # A request with no user turn is legal on the wire but has nothing to echo.
    return request.messages[-1].content


# --- chat backends ---------------------------------------------------------


class ChatBackend:
    """Interface for anything that can answer a ChatRequest.

    ``generative`` tells callers whether replies carry model judgement.
    Deterministic backends (echo, replay) report False so pipeline stages
    that would *consult* a model fall back to their rule-based route.
    """

    generative: bool = False

    def chat(self, request: ChatRequest) -> ChatReply:
        raise NotImplementedError


class EchoBackend(ChatBackend):
    """Replies with the last user message, verbatim."""

    generative = False

    def chat(self, request: ChatRequest) -> ChatReply:
        return ChatReply(content=last_user_content(request))


class PanicBackend(ChatBackend):
    """Fails on any call. Used to prove a code path never reaches a model."""

    generative = False

    def chat(self, request: ChatRequest) -> ChatReply:
        raise GatewayError("backend call on a path that must stay offline")


@dataclass(frozen=True)
class Script:
    """One scripted exchange: reply when `match` occurs in the last user turn."""

    match: str  # "*" matches anything
    reply: str


class MockBackend(ChatBackend):
    """Scripted backend: first matching script wins, in declaration order.

    fallback: "echo" answers unmatched requests like EchoBackend,
    "error" raises ScriptMiss instead.
    """

    generative = True

    def __init__(self, scripts: list[Script] | None = None, fallback: str = "echo"):
        if fallback not in ("echo", "error"):
            raise ConfigError(f"unknown mock fallback: {fallback!r}")
        self.scripts = list(scripts or [])
        self.fallback = fallback

    def chat(self, request: ChatRequest) -> ChatReply:
        text = last_user_content(request)
        for script in self.scripts:
            if script.match == "*" or script.match in text:
                return ChatReply(content=script.reply)
        if self.fallback == "echo":
            return ChatReply(content=text)
        raise ScriptMiss(f"no script matches request: {text[:120]!r}")


def load_scripts(path: str | Path) -> list[Script]:
    """Load scripts from JSONL lines of {"match": ..., "reply": ...}."""
    import json

    scripts = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            scripts.append(Script(match=str(row["match"]), reply=str(row["reply"])))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad script line: {exc}") from exc
    return scripts


class HTTPChatBackend(ChatBackend):
    """Live backend speaking the chat-completions wire shape.

    POST {base_url}/chat/completions with Authorization: Bearer taken from
    the MEDAIDE_API_KEY environment variable when set.
    """

    generative = True

    def __init__(
        self,
        base_url: str,
        model: str,
        retries: int = 1,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.retries = max(0, retries)
        self._client = client or httpx.Client(timeout=60.0)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def chat(self, request: ChatRequest) -> ChatReply:
        payload = request.as_dict()
        payload["model"] = payload["model"] or self.model
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                response = self._client.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers=self._headers(),
                )
            except httpx.HTTPError as exc:
                last_error = TransportError(0, str(exc))
                logger.warning("chat transport error (attempt %d): %s", attempt + 1, exc)
                continue
            if response.status_code // 100 != 2:
                last_error = TransportError(response.status_code, response.text)
                continue
            try:
                body = response.json()
                choice = body["choices"][0]
                return ChatReply(
                    content=choice["message"]["content"],
                    finish_reason=choice.get("finish_reason", "stop"),
                )
            except (KeyError, IndexError, ValueError) as exc:
                raise TransportError(response.status_code, f"malformed reply: {exc}") from exc
        assert last_error is not None
        raise last_error


# --- cassette (record / replay) ---------------------------------------------


class CassetteBackend(ChatBackend):
    """Records or replays chat exchanges as JSONL keyed by request hash.

    record: delegate to `inner`, append {"hash", "request", "reply"} for
    hashes not yet on file. replay: answer from file; a miss raises
    ReplayMiss and never touches `inner`.
    """

    def __init__(self, path: str | Path, mode: str, inner: ChatBackend | None = None):
        if mode not in ("record", "replay"):
            raise ConfigError(f"cassette mode must be record or replay, got {mode!r}")
        self.path = Path(path)
        self.mode = mode
        self.inner = inner
        self.generative = inner.generative if inner is not None else False
        self._replies: dict[str, str] = {}
        if mode == "replay":
            self._load()
        elif self.path.exists():
            self._load()  # resume a partial recording without duplicating rows

    def _load(self) -> None:
        import json

        if not self.path.exists():
            raise ConfigError(f"cassette not found: {self.path}")
        for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                self._replies[row["hash"]] = row["reply"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ConfigError(f"{self.path}:{lineno}: bad cassette line: {exc}") from exc

    def chat(self, request: ChatRequest) -> ChatReply:
        digest = request_hash(request)
        if self.mode == "replay":
            if digest not in self._replies:
                raise ReplayMiss(digest, request.as_dict())
            return ChatReply(content=self._replies[digest])
        if digest in self._replies:
            return ChatReply(content=self._replies[digest])
        if self.inner is None:
            raise ConfigError("record mode needs an inner backend")
        reply = self.inner.chat(request)
        self._replies[digest] = reply.content
        line = canonical_json({"hash": digest, "request": request.as_dict(), "reply": reply.content})
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")
        return reply


# --- embedding backends ------------------------------------------------------


class Embedder:
    """Interface: text -> unit-norm float vector of fixed dimension."""

    dimension: int

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError


class HashEmbedder(Embedder):
    """Deterministic pseudo-embeddings from sha256 in counter mode.

    The digest of the exact text bytes seeds a counter-mode stream; each
    32-bit word maps to [-1, 1) and the result is L2-normalized. No RNG
    library is involved, so any language can reproduce the vectors
    bit-for-bit from this description.
    """

    def __init__(self, dimension: int = 768):
        if dimension <= 0:
            raise ConfigError("embedding dimension must be positive")
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmptyInput("cannot embed empty text")
        seed = hashlib.sha256(text.encode("utf-8")).digest()
        values = np.empty(self.dimension, dtype=np.float64)
        filled = 0
        counter = 0
        while filled < self.dimension:
            block = hashlib.sha256(seed + counter.to_bytes(4, "little")).digest()
            words = struct.unpack("<8I", block)
            for word in words:
                if filled == self.dimension:
                    break
                values[filled] = word / 2147483648.0 - 1.0
                filled += 1
            counter += 1
        # Sequential accumulation, not a vectorized norm: the summation order
        # is part of the cross-language contract for these vectors.
        total = 0.0
        for value in values.tolist():
            total += value * value
        norm = math.sqrt(total)
        if norm < 1e-12:
            raise EmptyInput("degenerate hash vector")
        return values / norm


class FileEmbedder(Embedder):
    """Looks texts up verbatim in a vector store loaded from disk."""

    def __init__(self, vectors: dict[str, np.ndarray], dimension: int):
        self.vectors = vectors
        self.dimension = dimension

    @classmethod
    def from_file(cls, path: str | Path) -> "FileEmbedder":
        vectors, dimension = load_embedding_file(path)
        return cls(vectors, dimension)

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmptyInput("cannot embed empty text")
        if text not in self.vectors:
            raise UnknownKey(text)
        return self.vectors[text]


class HTTPEmbedder(Embedder):
    """Live embeddings via POST {base_url}/embeddings."""

    def __init__(
        self,
        base_url: str,
        model: str,
        dimension: int,
        retries: int = 1,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dimension = dimension
        self.retries = max(0, retries)
        self._client = client or httpx.Client(timeout=60.0)

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmptyInput("cannot embed empty text")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                response = self._client.post(
                    f"{self.base_url}/embeddings",
                    json={"model": self.model, "input": [text]},
                    headers=headers,
                )
            except httpx.HTTPError as exc:
                last_error = TransportError(0, str(exc))
                continue
            if response.status_code // 100 != 2:
                last_error = TransportError(response.status_code, response.text)
                continue
            try:
                data = response.json()["data"][0]["embedding"]
            except (KeyError, IndexError, ValueError) as exc:
                raise TransportError(response.status_code, f"malformed reply: {exc}") from exc
            vector = np.asarray(data, dtype=np.float64)
            if vector.shape != (self.dimension,):
                raise TransportError(
                    response.status_code,
                    f"expected dimension {self.dimension}, got {vector.shape}",
                )
            return vector
        assert last_error is not None
        raise last_error


class CachingEmbedder(Embedder):
    """Memoizes an inner embedder. Lookup key is the exact text."""

    def __init__(self, inner: Embedder):
        self.inner = inner
        self.dimension = inner.dimension
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        if text not in self._cache:
            self._cache[text] = self.inner.embed(text)
        return self._cache[text]


# --- binary embedding file format --------------------------------------------

MAGIC = b"MAED"
FORMAT_VERSION = 1


def write_embedding_file(path: str | Path, vectors: dict[str, np.ndarray], dimension: int) -> None:
    """Write the binary vector format.

    Layout, all integers little-endian: magic "MAED", u16 version, u32
    dimension, u32 record count, then per record a u16 key byte-length,
    the UTF-8 key, and dimension float32 values.
    """
    path = Path(path)
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<II", dimension, len(vectors))]
    for key, vector in vectors.items():
        if vector.shape != (dimension,):
            raise ConfigError(f"vector for {key!r} has shape {vector.shape}, want ({dimension},)")
        encoded = key.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ConfigError(f"key too long for format: {key[:50]!r}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(np.asarray(vector, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_embedding_file(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    """Read the binary vector format; returns (key -> float32 vector, dimension)."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}")
    if len(data) < 14:
        raise TruncatedFile(f"{path}: header cut short")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise BadVersion(f"{path}: version {version}, supported {FORMAT_VERSION}")
    dimension, count = struct.unpack_from("<II", data, 6)
    offset = 14
    vectors: dict[str, np.ndarray] = {}
    vector_bytes = 4 * dimension
    for index in range(count):
        if offset + 2 > len(data):
            raise TruncatedFile(f"{path}: record {index} key length cut short")
        (key_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + key_len + vector_bytes > len(data):
            raise TruncatedFile(f"{path}: record {index} cut short")
        key = data[offset : offset + key_len].decode("utf-8")
        offset += key_len
        if key in vectors:
            raise DuplicateKey(f"{path}: key {key!r} appears twice")
        vector = np.frombuffer(data[offset : offset + vector_bytes], dtype="<f4").astype(np.float32)
        offset += vector_bytes
        vectors[key] = vector
    if offset != len(data):
        # Trailing garbage means the count header and the payload disagree.
        raise TruncatedFile(f"{path}: {len(data) - offset} unexpected trailing bytes")
    return vectors, dimension
