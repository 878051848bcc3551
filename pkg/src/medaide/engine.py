"""Pipeline orchestration: wires regularization, intent matching and the
rotation protocol together behind one object the service layer can hold.

An Engine is built from an EngineConfig, loads every fixture it needs up
front (grammar, lexicons, rules, taxonomy, prototypes, corpora, plans,
templates), and then answers queries through `run_query`/`chat`. All
model traffic goes through the configured chat backend; all vectors come
from the configured embedding backends. Two embedding spaces are kept
apart on purpose: the query embedder scores intents against prototypes,
the document embedder scores retrieval in document space.
"""

from __future__ import annotations

import logging
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import EngineConfig, RunFlags, apply_flags, run_fingerprint
from .errors import ConfigError, DuplicateId, EmptyText, MedAideError
from .gateway import (
    CachingEmbedder,
    CassetteBackend,
    ChatBackend,
    EchoBackend,
    Embedder,
    FileEmbedder,
    HashEmbedder,
    HTTPChatBackend,
    HTTPEmbedder,
    MockBackend,
    load_scripts,
)
from .grammar import load_grammar, load_lexicon, tokenize
from .intent import (
    IntentActivation,
    IntentTaxonomy,
    PrototypeStore,
    load_exemplars,
    load_taxonomy,
    match_vector,
    match_via_prompt,
    smooth_query_vector,
)
from .retrieval import (
    CorpusDocument,
    InvertedIndex,
    build_index,
    hybrid_retrieve,
    load_corpus,
    load_stopwords,
)
from .rotation import (
    PatientProfile,
    ProfileStore,
    ProtocolTrace,
    RetrievalBundle,
    StageOutput,
    StagePlan,
    TemplateSet,
    TraceEvent,
    assemble_outputs,
    load_stage_plan,
    plan_stages,
    run_stage,
    synthesize,
)
from .standardize import (
    ClinicalElementSet,
    RefinedQuery,
    StandardizedQuery,
    Subquery,
    assemble_context,
    construct_refined,
    extract_elements,
    load_element_lexicon,
    load_rules,
    segment_clauses,
    stage_hint,
    standardize,
)
from .textutil import stable_hash

logger = logging.getLogger(__name__)


@dataclass
class Store:
    name: str
    path: Path
    documents: list[CorpusDocument]
    index: InvertedIndex


@dataclass
class SessionState:
    session_id: str
    patient_id: str | None
    trace: ProtocolTrace
    turns: int = 0
    vector: np.ndarray | None = None
    last_activation: IntentActivation | None = None
    transcript: list[dict] = field(default_factory=list)


@dataclass
class RunResult:
    query: str
    response: str
    session_id: str
    fingerprint: str
    std: StandardizedQuery
    refined: RefinedQuery
    elements: ClinicalElementSet
    context: list[tuple[str, float]]  # (document id, alignment score)
    activation: IntentActivation
    stages_run: tuple[str, ...]
    stage_outputs: list[StageOutput]
    events: list[TraceEvent]
    flags: RunFlags


class Engine:
    def __init__(self, config: EngineConfig):
        config.validate()
        self.config = config
        self.chat_backend = self._build_chat_backend(config)
        self.query_embedder = self._build_embedder(config, config.query_backend)
        self.doc_embedder = self._build_embedder(config, config.doc_backend)
        self.token_embedder = self._build_embedder(config, config.token_backend)

        self.lexicon = load_lexicon(config.token_lexicon_path)
        self.element_lexicon = load_element_lexicon(config.element_lexicon_path)
        self.grammar = load_grammar(config.grammar_path)
        self.rules = load_rules(config.rules_path)
        self.taxonomy = load_taxonomy(config.taxonomy_path)
        self.exemplars = load_exemplars(config.exemplars_path)
        self.prototypes = PrototypeStore.from_exemplars(
            self.taxonomy, self.exemplars, self.query_embedder
        )
        self.stopwords = load_stopwords(config.stopwords_path)

        self.stores: dict[str, Store] = {}
        for name, filename in config.stores.items():
            self._load_store(name, Path(config.corpora_dir) / filename)

        self._plans: dict[int, StagePlan] = {}
        self._templates: dict[int, TemplateSet] = {}
        self.profile_store = ProfileStore(Path(config.data_dir) / "profiles")
        self.sessions: dict[str, SessionState] = {}
        self._session_counter = 0

    # --- construction helpers -------------------------------------------

    @staticmethod
    def _build_chat_backend(config: EngineConfig) -> ChatBackend:
        if config.profile == "mock":
            scripts = load_scripts(config.scripts_path) if config.scripts_path else []
            return MockBackend(scripts=scripts, fallback=config.mock_fallback)
        if config.profile == "replay":
            return CassetteBackend(config.cassette_path, "replay")
        if config.profile == "record":
            if config.base_url:
                inner: ChatBackend = HTTPChatBackend(
                    config.base_url, config.model, retries=config.retries
                )
            else:
                inner = EchoBackend()
            return CassetteBackend(config.cassette_path, "record", inner=inner)
        return HTTPChatBackend(config.base_url, config.model, retries=config.retries)

    @staticmethod
    def _build_embedder(config: EngineConfig, kind: str) -> Embedder:
        if kind == "hash":
            return CachingEmbedder(HashEmbedder(config.dimension))
        if kind == "file":
            return FileEmbedder.from_file(config.embedding_file)
        return CachingEmbedder(
            HTTPEmbedder(
                config.embeddings_base_url,
                config.embeddings_model or config.model,
                config.dimension,
                retries=config.retries,
            )
        )

    def _load_store(self, name: str, path: Path) -> Store:
        documents = load_corpus(path, store=name)
        for document in documents:
            document.vector = self.doc_embedder.embed(document.search_text())
        index = build_index(documents, self.stopwords, store=name)
        store = Store(name=name, path=path, documents=documents, index=index)
        self.stores[name] = store
        return store

    def plan(self, stages: int) -> StagePlan:
        if stages not in self._plans:
            path = Path(self.config.plans_dir) / f"stages-{stages}.json"
            self._plans[stages] = load_stage_plan(path, self.taxonomy)
        return self._plans[stages]

    def templates(self, stages: int) -> TemplateSet:
        if stages not in self._templates:
            plan = self.plan(stages)
            self._templates[stages] = TemplateSet.load(
                self.config.templates_dir, [stage.id for stage in plan.stages]
            )
        return self._templates[stages]

    # --- sessions ----------------------------------------------------------

    def create_session(self, patient_id: str | None = None) -> SessionState:
        self._session_counter += 1
        if self.config.profile == "live":
            session_id = f"sess-{uuid.uuid4().hex[:12]}"
        else:
            session_id = f"sess-{self._session_counter:04d}"
        state = SessionState(
            session_id=session_id,
            patient_id=patient_id,
            trace=ProtocolTrace(session_id),
        )
        self.sessions[session_id] = state
        return state

    def _one_shot_session_id(self, query: str, patient_id: str | None) -> str:
        if self.config.profile == "live":
            return f"run-{uuid.uuid4().hex[:12]}"
        return "run-" + stable_hash([self.config.fingerprint(), patient_id or "", query])[:12]

    # --- pipeline stages ------------------------------------------------------

    def regularize(
        self, query: str, effective: EngineConfig
    ) -> tuple[StandardizedQuery, ClinicalElementSet, list[tuple[str, float]], RefinedQuery]:
        """Standardize, segment, extract, contextualize, refine."""
        std = standardize(query, self.rules, self.chat_backend, effective.max_sweeps)
        if not std.text.strip():
            raise EmptyText("query standardized to nothing")
        tokens = tokenize(std.text, self.lexicon)
        spans = segment_clauses(tokens, self.grammar)
        clause_texts = [tokens.slice_text(start, end) for start, end in spans]
        elements = extract_elements(tokens, spans, self.element_lexicon)
        context_store = self.stores[effective.context_store]
        context = assemble_context(
            elements,
            context_store.index,
            context_store.documents,
            self.doc_embedder,
            self.token_embedder,
            effective.tau_for(effective.context_store),
            effective.top_k,
        )
        refined = construct_refined(
            std,
            clause_texts,
            self.rules,
            self.chat_backend,
            effective.overlap_threshold,
            effective.max_sweeps,
        )
        return std, elements, [(doc.id, score) for doc, score in context], refined

    def recognize(
        self,
        merged_text: str,
        effective: EngineConfig,
        session: SessionState | None = None,
    ) -> IntentActivation:
        if effective.recognizer == "prompt":
            return match_via_prompt(
                merged_text,
                self.taxonomy,
                self.chat_backend,
                effective.model,
                effective.intent_threshold,
            )
        current = self.query_embedder.embed(merged_text)
        previous = session.vector if session is not None else None
        vector = smooth_query_vector(current, previous, effective.ema_lambda)
        if session is not None:
            session.vector = vector
        return match_vector(vector, self.prototypes, self.taxonomy, effective.intent_threshold)

    def stage_knowledge(
        self,
        stage_stores: tuple[str, ...],
        merged_text: str,
        elements: ClinicalElementSet,
        profile: PatientProfile,
        effective: EngineConfig,
    ) -> list[RetrievalBundle]:
        """Per-store hybrid retrieval for one stage.

        The medications store additionally sees the patient's recorded
        allergies and medications, so contraindications can surface.
        """
        bundles: list[RetrievalBundle] = []
        for store_name in stage_stores:
            if store_name not in self.stores:
                raise ConfigError(f"stage references unknown store {store_name!r}")
            store = self.stores[store_name]
            parts = [merged_text] + elements.surfaces()
            if store_name == "medications":
                parts.extend(profile.allergies)
                parts.extend(profile.medications)
            query_text = " ".join(parts)
            result = hybrid_retrieve(
                query_text,
                self.doc_embedder.embed(query_text),
                store.index,
                store.documents,
                effective.tau_for(store_name),
                mode="any",
            )
            by_id = {document.id: document for document in store.documents}
            top_docs = [by_id[doc_id] for doc_id in result.top(effective.top_k)]
            bundles.append(RetrievalBundle(store=store_name, result=result, documents=top_docs))
        return bundles

    @staticmethod
    def _render_context(
        context: list[tuple[str, float]],
        context_docs: dict[str, CorpusDocument],
        bundles: list[RetrievalBundle],
    ) -> str:
        lines = []
        for doc_id, _score in context:
            document = context_docs[doc_id]
            lines.append(f"- [context/{document.id}] {document.title}: {document.body}")
        for bundle in bundles:
            for document in bundle.documents:
                lines.append(f"- [{bundle.store}/{document.id}] {document.title}: {document.body}")
        return "\n".join(lines) if lines else "(no supporting documents)"

    # --- entry points -------------------------------------------------------------

    def run_query(
        self,
        query: str,
        flags: RunFlags = RunFlags(),
        patient_id: str | None = None,
        session: SessionState | None = None,
    ) -> RunResult:
        if not query.strip():
            raise EmptyText("empty query")
        effective = apply_flags(self.config, flags)
        profile = self.profile_store.get_or_default(
            patient_id or (session.patient_id if session else None)
        )

        if flags.no_rie:
            std = StandardizedQuery(text=query, sweeps=0, converged=True, provenance=())
            elements = ClinicalElementSet(elements=())
            context: list[tuple[str, float]] = []
            refined = RefinedQuery(
                subqueries=(Subquery(text=query, stage_hint=stage_hint(query)),),
                merged_text=query,
            )
        else:
            std, elements, context, refined = self.regularize(query, effective)

        activation = self.recognize(refined.merged_text, effective, session)
        plan = self.plan(effective.stages)
        stages_to_run = plan_stages(activation, plan)
        templates = self.templates(effective.stages)

        if session is not None:
            trace = session.trace
            session_id = session.session_id
        else:
            session_id = self._one_shot_session_id(query, patient_id)
            trace = ProtocolTrace(session_id)

        context_store = self.stores[effective.context_store]
        context_docs = {document.id: document for document in context_store.documents}
        base_slots = {
            "query": refined.merged_text,
            "elements": elements.render(),
            "profile": profile.render(),
        }
        first_event = len(trace.events)
        outputs: list[StageOutput] = []
        decision_analysis = not flags.no_decision_analysis
        for stage in stages_to_run:
            bundles = self.stage_knowledge(stage.stores, refined.merged_text, elements, profile, effective)
            slots = dict(base_slots)
            slots["context"] = self._render_context(context, context_docs, bundles)
            outputs.append(
                run_stage(
                    stage,
                    plan.agents,
                    templates,
                    self.chat_backend,
                    effective.model,
                    trace,
                    slots,
                    outputs,
                    effective.max_tokens,
                    decision_analysis,
                )
            )
        if decision_analysis:
            response = synthesize(
                outputs,
                templates,
                self.chat_backend,
                effective.model,
                trace,
                base_slots,
                effective.max_tokens,
            )
        else:
            response = assemble_outputs(outputs)

        if session is not None:
            session.turns += 1
            session.last_activation = activation
            session.transcript.append({"query": query, "response": response})

        return RunResult(
            query=query,
            response=response,
            session_id=session_id,
            fingerprint=run_fingerprint(self.config, flags),
            std=std,
            refined=refined,
            elements=elements,
            context=context,
            activation=activation,
            stages_run=tuple(stage.id for stage in stages_to_run),
            stage_outputs=outputs,
            events=trace.events[first_event:],
            flags=flags,
        )

    def chat(self, session_id: str, text: str, flags: RunFlags = RunFlags()) -> RunResult:
        if session_id not in self.sessions:
            raise ConfigError(f"unknown session {session_id!r}")
        session = self.sessions[session_id]
        return self.run_query(text, flags=flags, session=session)

    # --- store maintenance -----------------------------------------------------------

    def ingest(self, store_name: str, rows: list[dict]) -> dict:
        """Validate and append documents to a store, then reindex it."""
        if store_name not in self.stores:
            raise ConfigError(f"unknown store {store_name!r}")
        store = self.stores[store_name]
        existing = {document.id for document in store.documents}
        new_documents: list[CorpusDocument] = []
        for row in rows:
            try:
                document = CorpusDocument(
                    id=str(row["id"]),
                    title=str(row.get("title", "")),
                    body=str(row["body"]),
                    tags=tuple(str(t) for t in row.get("tags", [])),
                    store=store_name,
                )
            except KeyError as exc:
                raise MedAideError(f"document missing field: {exc}") from exc
            if not document.id or not document.body:
                raise EmptyText("document needs id and body")
            if document.id in existing or any(d.id == document.id for d in new_documents):
                raise DuplicateId(f"document id {document.id!r} already in store {store_name!r}")
            new_documents.append(document)
        with store.path.open("a", encoding="utf-8") as handle:
            for document in new_documents:
                handle.write(
                    stable_json_line(
                        {
                            "id": document.id,
                            "title": document.title,
                            "body": document.body,
                            "tags": list(document.tags),
                        }
                    )
                )
        self._load_store(store_name, store.path)
        return {"store": store_name, "added": len(new_documents), "documents": len(self.stores[store_name].documents)}

    def reindex(self, store_name: str) -> dict:
        if store_name not in self.stores:
            raise ConfigError(f"unknown store {store_name!r}")
        store = self._load_store(store_name, self.stores[store_name].path)
        return {
            "store": store_name,
            "documents": store.index.doc_count,
            "terms": len(store.index.postings),
        }

    def store_stats(self) -> dict[str, int]:
        return {name: store.index.doc_count for name, store in sorted(self.stores.items())}


def stable_json_line(obj: dict) -> str:
    import json

    return json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n"
