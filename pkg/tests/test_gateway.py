from __future__ import annotations

import hashlib
import math
import struct

import httpx
import numpy as np
import pytest

from medaide.errors import (
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
from medaide.gateway import (
    CachingEmbedder,
    CassetteBackend,
    ChatMessage,
    ChatRequest,
    EchoBackend,
    FileEmbedder,
    HashEmbedder,
    HTTPChatBackend,
    MockBackend,
    Script,
    load_embedding_file,
    request_hash,
    write_embedding_file,
)


def _request(text: str) -> ChatRequest:
    return ChatRequest(
        model="m",
        messages=(ChatMessage("system", "s"), ChatMessage("user", text)),
    )


# --- chat backends ----------------------------------------------------------


def test_request_validation():
    with pytest.raises(GatewayError):
        ChatRequest(model="m", messages=())


def test_request_hash_depends_on_content_not_identity():
    assert request_hash(_request("a")) == request_hash(_request("a"))
    assert request_hash(_request("a")) != request_hash(_request("b"))


def test_echo_returns_last_user_message():
    backend = EchoBackend()
    assert backend.generative is False
    reply = backend.chat(_request("hello there"))
    assert reply.content == "hello there"


def test_mock_scripts_first_match_wins():
    backend = MockBackend(
        scripts=[Script("fever", "script one"), Script("fever and", "script two")],
    )
    assert backend.chat(_request("fever and chills")).content == "script one"
    assert backend.chat(_request("unrelated")).content == "unrelated"


def test_mock_wildcard_and_error_fallback():
    backend = MockBackend(scripts=[Script("*", "always")], fallback="error")
    assert backend.chat(_request("anything")).content == "always"
    strict = MockBackend(scripts=[], fallback="error")
    with pytest.raises(ScriptMiss):
        strict.chat(_request("anything"))


def test_http_backend_sends_bearer_and_retries(monkeypatch):
    monkeypatch.setenv("MEDAIDE_API_KEY", "k-123")
    calls: list[httpx.Request] = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        if len(calls) == 1:
            return httpx.Response(500, text="boom")
        return httpx.Response(
            200,
            json={"choices": [{"message": {"content": "fine"}, "finish_reason": "stop"}]},
        )

    client = httpx.Client(transport=httpx.MockTransport(handler))
    backend = HTTPChatBackend("http://api.test", model="m", retries=1, client=client)
    reply = backend.chat(_request("q"))
    assert reply.content == "fine"
    assert len(calls) == 2
    assert calls[0].headers["Authorization"] == "Bearer k-123"
    assert calls[0].url.path == "/chat/completions"


def test_http_backend_raises_after_retries():
    client = httpx.Client(
        transport=httpx.MockTransport(lambda request: httpx.Response(503, text="down"))
    )
    backend = HTTPChatBackend("http://api.test", model="m", retries=2, client=client)
    with pytest.raises(TransportError):
        backend.chat(_request("q"))


# --- cassettes --------------------------------------------------------------


def test_cassette_record_then_replay(tmp_path):
    path = tmp_path / "tape.jsonl"
    recorder = CassetteBackend(path, "record", inner=EchoBackend())
    assert recorder.chat(_request("one")).content == "one"
    assert recorder.chat(_request("one")).content == "one"  # dedupe
    assert recorder.chat(_request("two")).content == "two"
    assert len(path.read_text().splitlines()) == 2

    replayer = CassetteBackend(path, "replay")
    assert replayer.chat(_request("two")).content == "two"
    with pytest.raises(ReplayMiss):
        replayer.chat(_request("never recorded"))


def test_cassette_record_resumes_existing_file(tmp_path):
    path = tmp_path / "tape.jsonl"
    CassetteBackend(path, "record", inner=EchoBackend()).chat(_request("one"))
    resumed = CassetteBackend(path, "record", inner=EchoBackend())
    resumed.chat(_request("one"))
    resumed.chat(_request("two"))
    assert len(path.read_text().splitlines()) == 2


def test_cassette_replay_requires_file(tmp_path):
    with pytest.raises(ConfigError):
        CassetteBackend(tmp_path / "missing.jsonl", "replay")


# --- hash embedder ----------------------------------------------------------


def _reference_hash_vector(text: str, dimension: int) -> list[float]:
    """Independent reimplementation of the counter-mode construction."""
    seed = hashlib.sha256(text.encode("utf-8")).digest()
    raw: list[float] = []
    counter = 0
    while len(raw) < dimension:
        block = hashlib.sha256(seed + counter.to_bytes(4, "little")).digest()
        for word in struct.unpack("<8I", block):
            if len(raw) == dimension:
                break
            raw.append(word / 2147483648.0 - 1.0)
        counter += 1
    total = 0.0
    for value in raw:
        total += value * value
    norm = math.sqrt(total)
    return [value / norm for value in raw]


def test_hash_embedder_matches_reference_construction():
    embedder = HashEmbedder(dimension=20)
    for text in ("fever", "fever and chills", "x"):
        got = embedder.embed(text)
        want = _reference_hash_vector(text, 20)
        assert got.tolist() == want  # bit-for-bit, not approximately


def test_hash_embedder_basic_properties():
    embedder = HashEmbedder(dimension=768)
    v1 = embedder.embed("some text")
    v2 = embedder.embed("some text")
    v3 = embedder.embed("other text")
    assert np.array_equal(v1, v2)
    assert not np.array_equal(v1, v3)
    assert abs(float(np.linalg.norm(v1)) - 1.0) < 1e-9
    with pytest.raises(EmptyInput):
        embedder.embed("   ")


def test_caching_embedder_embeds_once():
    calls = []

    class Counting(HashEmbedder):
        def embed(self, text):
            calls.append(text)
            return super().embed(text)

    cached = CachingEmbedder(Counting(dimension=8))
    a = cached.embed("x")
    b = cached.embed("x")
    assert np.array_equal(a, b)
    assert calls == ["x"]


# --- embedding file format ----------------------------------------------------


def test_embedding_file_round_trip_is_bitwise(tmp_path):
    path = tmp_path / "v.maed"
    embedder = HashEmbedder(dimension=12)
    vectors = {key: embedder.embed(key) for key in ("alpha", "beta", "gamma")}
    write_embedding_file(path, vectors, dimension=12)
    loaded, dimension = load_embedding_file(path)
    assert dimension == 12
    assert set(loaded) == set(vectors)
    for key, vector in vectors.items():
        assert loaded[key].dtype == np.float32
        assert loaded[key].tobytes() == vector.astype(np.float32).tobytes()


def test_embedding_file_bad_magic(tmp_path):
    path = tmp_path / "v.maed"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(BadMagic):
        load_embedding_file(path)


def test_embedding_file_bad_version(tmp_path):
    path = tmp_path / "v.maed"
    path.write_bytes(b"MAED" + struct.pack("<H", 9) + struct.pack("<II", 2, 0))
    with pytest.raises(BadVersion):
        load_embedding_file(path)


def test_embedding_file_truncation_variants(tmp_path):
    path = tmp_path / "v.maed"
    embedder = HashEmbedder(dimension=8)
    write_embedding_file(path, {"k": embedder.embed("k")}, dimension=8)
    whole = path.read_bytes()

    for cut in (6, 15, len(whole) - 3):
        path.write_bytes(whole[:cut])
        with pytest.raises(TruncatedFile):
            load_embedding_file(path)

    path.write_bytes(whole + b"xx")  # surplus bytes disagree with the count
    with pytest.raises(TruncatedFile):
        load_embedding_file(path)


def test_embedding_file_duplicate_key(tmp_path):
    path = tmp_path / "v.maed"
    record = struct.pack("<H", 1) + b"k" + struct.pack("<4f", 1, 2, 3, 4)
    blob = b"MAED" + struct.pack("<H", 1) + struct.pack("<II", 4, 2) + record + record
    path.write_bytes(blob)
    with pytest.raises(DuplicateKey):
        load_embedding_file(path)


def test_file_embedder_lookup(tmp_path):
    path = tmp_path / "v.maed"
    embedder = HashEmbedder(dimension=8)
    write_embedding_file(path, {"known text": embedder.embed("known text")}, dimension=8)
    file_embedder = FileEmbedder.from_file(path)
    assert file_embedder.dimension == 8
    assert file_embedder.embed("known text").shape == (8,)
    with pytest.raises(UnknownKey):
        file_embedder.embed("unknown text")
