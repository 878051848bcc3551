"""Exception hierarchy for the medaide engine.

Every error raised by the package derives from MedAideError so callers
(the service layer, the CLI) can map the whole family onto one failure
channel while still catching specific conditions.
"""

from __future__ import annotations


class MedAideError(Exception):
    """Base class for all engine errors."""


class ConfigError(MedAideError):
    """Bad or incomplete configuration (missing path, out-of-range value)."""


class TemplateError(ConfigError):
    """A prompt template references an unknown placeholder or is missing a required one."""


# --- grammar / parsing ---------------------------------------------------


class GrammarError(MedAideError):
    """Malformed grammar file or grammar that violates a structural invariant."""


class CyclicUnitChain(GrammarError):
    """Unit productions form a cycle, so normalization cannot terminate."""


class NoParse(MedAideError):
    """The token sequence is not derivable from the start symbol.

    Carries the best partial cover found so callers can degrade gracefully.
    """

    def __init__(self, message: str, cover: "tuple[tuple[int, int, str], ...]" = ()):
        super().__init__(message)
        self.cover = tuple(cover)


# --- model gateway -------------------------------------------------------


class GatewayError(MedAideError):
    """Base class for chat/embedding backend failures."""


class TransportError(GatewayError):
    """HTTP-level failure talking to a live backend."""

    def __init__(self, status: int, body: str):
        super().__init__(f"backend returned status {status}: {body[:200]}")
        self.status = status
        self.body = body


class ReplayMiss(GatewayError):
    """Replay cassette has no entry for the request hash."""

    def __init__(self, request_hash: str, request: dict):
        super().__init__(f"no recorded reply for request {request_hash}")
        self.request_hash = request_hash
        self.request = request


class ScriptMiss(GatewayError):
    """Scripted mock backend matched no script and has no fallback."""


class EmbedderError(GatewayError):
    """Base class for embedding backend failures."""


class EmptyInput(EmbedderError):
    """Asked to embed empty or whitespace-only text."""


class UnknownKey(EmbedderError):
    """File-backed embedder has no vector stored under the given key."""

    def __init__(self, key: str):
        super().__init__(f"no stored vector for key: {key[:120]!r}")
        self.key = key


# --- embedding file format -----------------------------------------------


class EmbeddingFileError(MedAideError):
    """Base class for binary embedding file problems."""


class BadMagic(EmbeddingFileError):
    """File does not start with the expected magic bytes."""


class BadVersion(EmbeddingFileError):
    """File declares an unsupported format version."""


class TruncatedFile(EmbeddingFileError):
    """File ends mid-record or mid-header."""


class DuplicateKey(EmbeddingFileError):
    """The same key appears twice in one embedding file."""


# --- vectors ---------------------------------------------------------------


class ZeroNorm(MedAideError):
    """A vector that must be normalizable has (near-)zero L2 norm."""


class DimensionMismatch(MedAideError):
    """Vectors of different dimensionality were combined."""


# --- retrieval -------------------------------------------------------------


class DuplicateId(MedAideError):
    """Two documents in one store share an id."""


class EmptyCorpus(MedAideError):
    """An operation that needs documents was given an empty store."""


class EmptyText(MedAideError):
    """A text field that must be non-empty was empty."""


# --- metrics ---------------------------------------------------------------


class EmptyReference(MedAideError):
    """A metric was asked to score against an empty reference."""


class LengthMismatch(MedAideError):
    """Paired per-instance lists have different lengths."""


# --- intent ----------------------------------------------------------------


class UnparseableReply(MedAideError):
    """A model reply could not be interpreted as intent labels."""

    def __init__(self, raw: str):
        super().__init__(f"could not parse intent labels from reply: {raw[:200]!r}")
        self.raw = raw


# --- protocol / sessions ---------------------------------------------------


class ProtocolViolation(MedAideError):
    """A collaboration trace does not follow the required event sequence."""


class ProfileNotFound(MedAideError):
    """No stored profile for the requested patient id."""

    def __init__(self, patient_id: str):
        super().__init__(f"no profile stored for patient {patient_id!r}")
        self.patient_id = patient_id
