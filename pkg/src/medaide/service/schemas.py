"""Request/response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class FlagParams(BaseModel):
    stages: int | None = None
    threshold: float | None = None
    tau: float | None = None
    seed: int | None = None
    recognizer: str | None = None
    no_rie: bool = False
    no_decision_analysis: bool = False
    explain: bool = False


class RunRequest(BaseModel):
    query: str
    patient_id: str | None = None
    flags: FlagParams = Field(default_factory=FlagParams)


class ActivationOut(BaseModel):
    activated: list[str]
    probabilities: list[float]
    similarities: list[float]
    threshold: float
    fallback: bool
    distribution: str


class TraceEventOut(BaseModel):
    session: str
    seq: int
    stage: str
    kind: str
    agent: str
    request_hash: str
    response_hash: str


class StageOutputOut(BaseModel):
    stage: str
    agent: str
    initial: str
    contributions: list[tuple[str, str]]
    integrated: str


class ExplainOut(BaseModel):
    std_text: str
    sweeps: int
    converged: bool
    provenance: list[tuple[str, str, str]]
    subqueries: list[tuple[str, str]]
    elements: list[tuple[str, str]]
    context: list[tuple[str, float]]
    stage_outputs: list[StageOutputOut]


class RunResponse(BaseModel):
    response: str
    session_id: str
    fingerprint: str
    merged_query: str
    activated: list[str]
    stages_run: list[str]
    activation: ActivationOut
    events: list[TraceEventOut]
    explain: ExplainOut | None = None


class IngestRequest(BaseModel):
    documents: list[dict]


class IngestResponse(BaseModel):
    store: str
    added: int
    documents: int


class IndexResponse(BaseModel):
    store: str
    documents: int
    terms: int


class SessionRequest(BaseModel):
    patient_id: str | None = None


class SessionResponse(BaseModel):
    session_id: str
    patient_id: str | None


class MessageRequest(BaseModel):
    text: str
    flags: FlagParams = Field(default_factory=FlagParams)


class ProfileIn(BaseModel):
    demographics: dict[str, str] = Field(default_factory=dict)
    allergies: list[str] = Field(default_factory=list)
    medications: list[str] = Field(default_factory=list)
    visits: list[dict] = Field(default_factory=list)


class ProfileOut(ProfileIn):
    patient_id: str


class BenchRequest(BaseModel):
    path: str
    flags: FlagParams = Field(default_factory=FlagParams)


class AblateRequest(BaseModel):
    path: str
    flags: FlagParams = Field(default_factory=FlagParams)
    cells: list[str] | None = None


class SweepRequest(BaseModel):
    path: str
    flags: FlagParams = Field(default_factory=FlagParams)
    granularities: list[int] | None = None


class HealthResponse(BaseModel):
    status: str
    profile: str
    fingerprint: str
    stores: dict[str, int]
