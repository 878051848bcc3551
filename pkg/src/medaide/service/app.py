"""HTTP service wrapping one Engine instance.

The app is a plain function of an EngineConfig so tests and the CLI can
mount it in-process; `uvicorn medaide.service.app:app` style deployment
goes through `create_app(load_config(...))` in serve().
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..bench import load_benchmark, run_ablation, run_benchmark, run_stage_sweep, DEFAULT_ABLATION_CELLS
from ..config import EngineConfig, RunFlags
from ..engine import Engine, RunResult
from ..errors import (
    ConfigError,
    EmptyText,
    MedAideError,
    ProfileNotFound,
)
from ..rotation import PatientProfile
from .schemas import (
    AblateRequest,
    ActivationOut,
    BenchRequest,
    ExplainOut,
    FlagParams,
    HealthResponse,
    IndexResponse,
    IngestRequest,
    IngestResponse,
    MessageRequest,
    ProfileIn,
    ProfileOut,
    RunRequest,
    RunResponse,
    SessionRequest,
    SessionResponse,
    StageOutputOut,
    SweepRequest,
    TraceEventOut,
)

logger = logging.getLogger(__name__)


def _flags(params: FlagParams) -> RunFlags:
    return RunFlags(
        stages=params.stages,
        threshold=params.threshold,
        tau=params.tau,
        seed=params.seed,
        recognizer=params.recognizer,
        no_rie=params.no_rie,
        no_decision_analysis=params.no_decision_analysis,
        explain=params.explain,
    )


def _run_response(result: RunResult, explain: bool) -> RunResponse:
    activation = ActivationOut(
        activated=list(result.activation.activated),
        probabilities=list(result.activation.probabilities),
        similarities=list(result.activation.similarities),
        threshold=result.activation.threshold,
        fallback=result.activation.fallback,
        distribution=result.activation.distribution,
    )
    events = [TraceEventOut(**event.as_dict()) for event in result.events]
    explain_out = None
    if explain:
        explain_out = ExplainOut(
            std_text=result.std.text,
            sweeps=result.std.sweeps,
            converged=result.std.converged,
            provenance=[(p.rule_id, p.before, p.after) for p in result.std.provenance],
            subqueries=[(s.text, s.stage_hint) for s in result.refined.subqueries],
            elements=[(e.kind, e.surface) for e in result.elements.elements],
            context=list(result.context),
            stage_outputs=[
                StageOutputOut(
                    stage=o.stage,
                    agent=o.agent,
                    initial=o.initial,
                    contributions=list(o.contributions),
                    integrated=o.integrated,
                )
                for o in result.stage_outputs
            ],
        )
    return RunResponse(
        response=result.response,
        session_id=result.session_id,
        fingerprint=result.fingerprint,
        merged_query=result.refined.merged_text,
        activated=list(result.activation.activated),
        stages_run=list(result.stages_run),
        activation=activation,
        events=events,
        explain=explain_out,
    )


def create_app(config: EngineConfig) -> FastAPI:
    engine = Engine(config)
    app = FastAPI(title="medaide", version="0.1.0")
    app.state.engine = engine

    @app.exception_handler(MedAideError)
    async def medaide_error_handler(request: Request, exc: MedAideError) -> JSONResponse:
        if isinstance(exc, ProfileNotFound):
            status = 404
        elif isinstance(exc, (ConfigError, EmptyText)):
            status = 422
        else:
            status = 500
        return JSONResponse(
            status_code=status,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok",
            profile=engine.config.profile,
            fingerprint=engine.config.fingerprint(),
            stores=engine.store_stats(),
        )

    @app.post("/run", response_model=RunResponse, response_model_exclude_none=True)
    def run(request: RunRequest) -> RunResponse:
        result = engine.run_query(
            request.query,
            flags=_flags(request.flags),
            patient_id=request.patient_id,
        )
        return _run_response(result, request.flags.explain)

    @app.post("/stores/{store}/documents", response_model=IngestResponse)
    def ingest(store: str, request: IngestRequest) -> IngestResponse:
        return IngestResponse(**engine.ingest(store, request.documents))

    @app.post("/stores/{store}/index", response_model=IndexResponse)
    def reindex(store: str) -> IndexResponse:
        return IndexResponse(**engine.reindex(store))

    @app.post("/sessions", response_model=SessionResponse)
    def create_session(request: SessionRequest) -> SessionResponse:
        state = engine.create_session(request.patient_id)
        return SessionResponse(session_id=state.session_id, patient_id=state.patient_id)

    @app.post("/sessions/{session_id}/messages", response_model=RunResponse, response_model_exclude_none=True)
    def message(session_id: str, request: MessageRequest) -> RunResponse:
        result = engine.chat(session_id, request.text, flags=_flags(request.flags))
        return _run_response(result, request.flags.explain)

    @app.get("/sessions/{session_id}/trace")
    def trace(session_id: str) -> dict:
        if session_id not in engine.sessions:
            raise ConfigError(f"unknown session {session_id!r}")
        state = engine.sessions[session_id]
        return {"session_id": session_id, "events": state.trace.rows(), "digest": state.trace.digest()}

    @app.get("/sessions/{session_id}/intents")
    def last_intents(session_id: str) -> dict:
        if session_id not in engine.sessions:
            raise ConfigError(f"unknown session {session_id!r}")
        state = engine.sessions[session_id]
        if state.last_activation is None:
            return {"session_id": session_id, "activated": []}
        return {
            "session_id": session_id,
            "activated": list(state.last_activation.activated),
            "probabilities": list(state.last_activation.probabilities),
        }

    @app.get("/profiles/{patient_id}", response_model=ProfileOut)
    def get_profile(patient_id: str) -> ProfileOut:
        profile = engine.profile_store.get(patient_id)
        return ProfileOut(**profile.as_dict())

    @app.put("/profiles/{patient_id}", response_model=ProfileOut)
    def put_profile(patient_id: str, body: ProfileIn) -> ProfileOut:
        profile = PatientProfile(
            patient_id=patient_id,
            demographics=body.demographics,
            allergies=tuple(body.allergies),
            medications=tuple(body.medications),
            visits=tuple(body.visits),
        )
        engine.profile_store.upsert(profile)
        return ProfileOut(**profile.as_dict())

    @app.post("/bench")
    def bench(request: BenchRequest) -> dict:
        instances = load_benchmark(request.path, engine.taxonomy)
        return run_benchmark(engine, instances, _flags(request.flags))

    @app.post("/ablate")
    def ablate(request: AblateRequest) -> dict:
        instances = load_benchmark(request.path, engine.taxonomy)
        cells = DEFAULT_ABLATION_CELLS
        if request.cells:
            wanted = set(request.cells)
            unknown = wanted - {name for name, _ in DEFAULT_ABLATION_CELLS}
            if unknown:
                raise ConfigError(f"unknown ablation cells: {sorted(unknown)}")
            cells = tuple(cell for cell in DEFAULT_ABLATION_CELLS if cell[0] in wanted)
        return run_ablation(engine, instances, _flags(request.flags), cells)

    @app.post("/sweep")
    def sweep(request: SweepRequest) -> dict:
        instances = load_benchmark(request.path, engine.taxonomy)
        granularities = tuple(request.granularities) if request.granularities else (2, 3, 4, 5, 6)
        return run_stage_sweep(engine, instances, _flags(request.flags), granularities)

    return app
