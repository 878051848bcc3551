"""Rotation-based collaboration: staged main-chair polling with a trace.

Each care stage owns one agent. When a stage runs, its agent drafts an
initial answer as main chair, every other agent in the pool contributes a
supplement that sees that draft verbatim, and the chair integrates the
contributions into the stage answer. A final synthesize step merges the
per-stage answers. Every model exchange lands in an append-only trace so
a whole session can be checked and replayed offline.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ProfileNotFound, ProtocolViolation, TemplateError
from .gateway import ChatBackend, ChatMessage, ChatRequest, request_hash
from .intent import IntentActivation, IntentTaxonomy
from .retrieval import CorpusDocument, RetrievalResult
from .textutil import stable_hash, text_hash

logger = logging.getLogger(__name__)


# --- stage plans -------------------------------------------------------------


@dataclass(frozen=True)
class StageSpec:
    id: str
    agent: str
    intents: tuple[str, ...]
    stores: tuple[str, ...]


@dataclass(frozen=True)
class StagePlan:
    granularity: int
    stages: tuple[StageSpec, ...]

    @property
    def agents(self) -> tuple[str, ...]:
        return tuple(stage.agent for stage in self.stages)


def load_stage_plan(path: str | Path, taxonomy: IntentTaxonomy) -> StagePlan:
    """Plan from JSON; stages partition the taxonomy, one agent per stage."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: bad plan JSON: {exc}") from exc
    try:
        granularity = int(data["granularity"])
        stages = tuple(
            StageSpec(
                id=str(stage["id"]),
                agent=str(stage["agent"]),
                intents=tuple(str(i) for i in stage["intents"]),
                stores=tuple(str(s) for s in stage.get("stores", [])),
            )
            for stage in data["stages"]
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: bad plan structure: {exc}") from exc
    if not 2 <= granularity <= 6:
        raise ConfigError(f"{path}: granularity must be 2..6, got {granularity}")
    if len(stages) != granularity:
        raise ConfigError(f"{path}: {len(stages)} stages for granularity {granularity}")
    ids = [stage.id for stage in stages]
    agents = [stage.agent for stage in stages]
    if len(set(ids)) != len(ids) or len(set(agents)) != len(agents):
        raise ConfigError(f"{path}: stage ids and agents must be unique")
    covered: dict[str, str] = {}
    for stage in stages:
        for intent_id in stage.intents:
            if intent_id in covered:
                raise ConfigError(
                    f"{path}: intent {intent_id!r} in both {covered[intent_id]!r} and {stage.id!r}"
                )
            covered[intent_id] = stage.id
    missing = [intent_id for intent_id in taxonomy.ids if intent_id not in covered]
    unknown = [intent_id for intent_id in covered if intent_id not in set(taxonomy.ids)]
    if missing or unknown:
        raise ConfigError(f"{path}: uncovered intents {missing}, unknown intents {unknown}")
    return StagePlan(granularity=granularity, stages=stages)


def plan_stages(activation: IntentActivation, plan: StagePlan) -> tuple[StageSpec, ...]:
    """Stages that own at least one activated intent, in plan order."""
    activated = set(activation.activated)
    return tuple(stage for stage in plan.stages if activated & set(stage.intents))


@dataclass(frozen=True)
class RetrievalBundle:
    """One store's retrieval outcome for a stage: ranking plus the
    documents actually handed to the prompts."""

    store: str
    result: RetrievalResult
    documents: list[CorpusDocument]


# --- trace ---------------------------------------------------------------------


EVENT_KINDS = ("mc-call", "supporter-call", "integrate", "synthesize")


@dataclass(frozen=True)
class TraceEvent:
    session: str
    seq: int
    stage: str
    kind: str
    agent: str
    request_hash: str
    response_hash: str

    def as_dict(self) -> dict:
        return {
            "session": self.session,
            "seq": self.seq,
            "stage": self.stage,
            "kind": self.kind,
            "agent": self.agent,
            "request_hash": self.request_hash,
            "response_hash": self.response_hash,
        }


class ProtocolTrace:
    """Append-only event log; seq is assigned on append and never reused."""

    def __init__(self, session: str, start_seq: int = 0):
        self.session = session
        self.events: list[TraceEvent] = []
        self._next_seq = start_seq

    def record(self, stage: str, kind: str, agent: str, request_hash_: str, response_hash: str) -> TraceEvent:
        if kind not in EVENT_KINDS:
            raise ProtocolViolation(f"unknown event kind {kind!r}")
        event = TraceEvent(
            session=self.session,
            seq=self._next_seq,
            stage=stage,
            kind=kind,
            agent=agent,
            request_hash=request_hash_,
            response_hash=response_hash,
        )
        self._next_seq += 1
        self.events.append(event)
        return event

    def rows(self) -> list[dict]:
        return [event.as_dict() for event in self.events]

    def digest(self) -> str:
        return stable_hash(self.rows())


def validate_trace(rows: list[dict], pool_size: int, decision_analysis: bool = True) -> None:
    """Check a trace against the stage grammar.

    With decision analysis: per stage `mc-call supporter-call{pool-1}
    integrate`, supporters in ascending agent order and distinct, the
    integrate agent equal to the chair; one trailing synthesize. Without:
    stages are `mc-call supporter-call{pool-1}` and there is no
    synthesize. Seq must increase by one from the first event.
    """
    if not rows:
        raise ProtocolViolation("empty trace")
    base = rows[0]["seq"]
    for offset, row in enumerate(rows):
        if row["seq"] != base + offset:
            raise ProtocolViolation(f"seq jump at position {offset}: {row['seq']}")
        if row["kind"] not in EVENT_KINDS:
            raise ProtocolViolation(f"unknown kind {row['kind']!r}")
    position = 0
    supporters_expected = pool_size - 1
    while position < len(rows) and rows[position]["kind"] != "synthesize":
        stage_rows = rows[position :]
        head = stage_rows[0]
        if head["kind"] != "mc-call":
            raise ProtocolViolation(f"stage must open with mc-call, got {head['kind']}")
        stage_id = head["stage"]
        chair = head["agent"]
        needed = 1 + supporters_expected + (1 if decision_analysis else 0)
        if len(stage_rows) < needed:
            raise ProtocolViolation(f"stage {stage_id!r} truncated")
        supporters = stage_rows[1 : 1 + supporters_expected]
        agents = []
        for row in supporters:
            if row["kind"] != "supporter-call" or row["stage"] != stage_id:
                raise ProtocolViolation(f"stage {stage_id!r}: bad supporter row {row}")
            if row["agent"] == chair:
                raise ProtocolViolation(f"stage {stage_id!r}: chair cannot support itself")
            agents.append(row["agent"])
        if agents != sorted(agents) or len(set(agents)) != len(agents):
            raise ProtocolViolation(f"stage {stage_id!r}: supporters must be distinct and ordered")
        position += 1 + supporters_expected
        if decision_analysis:
            tail = rows[position]
            if tail["kind"] != "integrate" or tail["stage"] != stage_id or tail["agent"] != chair:
                raise ProtocolViolation(f"stage {stage_id!r}: expected chair integrate, got {tail}")
            position += 1
    if decision_analysis:
        if position != len(rows) - 1 or rows[-1]["kind"] != "synthesize":
            raise ProtocolViolation("trace must end with exactly one synthesize")
    elif position != len(rows):
        raise ProtocolViolation("unexpected trailing events")


# --- patient profiles --------------------------------------------------------------


@dataclass(frozen=True)
class PatientProfile:
    patient_id: str
    demographics: dict[str, str] = field(default_factory=dict)
    allergies: tuple[str, ...] = ()
    medications: tuple[str, ...] = ()
    visits: tuple[dict, ...] = ()

    def as_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "demographics": dict(self.demographics),
            "allergies": list(self.allergies),
            "medications": list(self.medications),
            "visits": [dict(v) for v in self.visits],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PatientProfile":
        return cls(
            patient_id=str(data["patient_id"]),
            demographics={str(k): str(v) for k, v in data.get("demographics", {}).items()},
            allergies=tuple(str(a) for a in data.get("allergies", [])),
            medications=tuple(str(m) for m in data.get("medications", [])),
            visits=tuple(dict(v) for v in data.get("visits", [])),
        )

    def render(self) -> str:
        if self.patient_id == ANONYMOUS_ID and not (self.allergies or self.medications or self.demographics):
            return "(no profile on file)"
        lines = [f"patient: {self.patient_id}"]
        for key in sorted(self.demographics):
            lines.append(f"{key}: {self.demographics[key]}")
        lines.append(f"allergies: {', '.join(self.allergies) or 'none recorded'}")
        lines.append(f"medications: {', '.join(self.medications) or 'none recorded'}")
        for visit in self.visits:
            lines.append(f"visit {visit.get('date', '?')}: {visit.get('summary', '')}")
        return "\n".join(lines)


ANONYMOUS_ID = "anonymous"


def anonymous_profile() -> PatientProfile:
    return PatientProfile(patient_id=ANONYMOUS_ID)


class ProfileStore:
    """One JSON file per patient under a root directory; writes are atomic."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, patient_id: str) -> Path:
        safe = re.sub(r"[^A-Za-z0-9_-]", "_", patient_id)
        return self.root / f"{safe}.json"

    def get(self, patient_id: str) -> PatientProfile:
        path = self._path(patient_id)
        if not path.exists():
            raise ProfileNotFound(patient_id)
        return PatientProfile.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def get_or_default(self, patient_id: str | None) -> PatientProfile:
        if not patient_id:
            return anonymous_profile()
        try:
            return self.get(patient_id)
        except ProfileNotFound:
            return PatientProfile(patient_id=patient_id)

    def upsert(self, profile: PatientProfile) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self._path(profile.patient_id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(profile.as_dict(), indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(path)

    def list_ids(self) -> list[str]:
        if not self.root.exists():
            return []
        return sorted(path.stem for path in self.root.glob("*.json"))


# --- prompt templates -----------------------------------------------------------------


PLACEHOLDERS = frozenset(
    {"query", "elements", "context", "prior_outputs", "initial_output", "contributions", "profile"}
)
_PLACEHOLDER_RE = re.compile(r"\{\{([a-z_]+)\}\}")

ROLE_REQUIRED = {
    "main": frozenset({"query"}),
    "supporter": frozenset({"initial_output"}),
    "integrate": frozenset({"initial_output", "contributions"}),
    "synthesize": frozenset({"prior_outputs"}),
}


class TemplateSet:
    """Prompt templates keyed by name, placeholder-checked at load time."""

    def __init__(self, templates: dict[str, str]):
        self.templates = templates

    @classmethod
    def load(cls, directory: str | Path, stage_ids: list[str]) -> "TemplateSet":
        directory = Path(directory)
        templates: dict[str, str] = {}
        wanted = [(f"{stage}.{role}", role) for stage in stage_ids for role in ("main", "supporter", "integrate")]
        wanted.append(("synthesize", "synthesize"))
        for name, role in wanted:
            path = directory / f"{name}.txt"
            if not path.exists():
                raise ConfigError(f"missing template {path}")
            text = path.read_text(encoding="utf-8")
            found = set(_PLACEHOLDER_RE.findall(text))
            unknown = found - PLACEHOLDERS
            if unknown:
                raise TemplateError(f"{path}: unknown placeholders {sorted(unknown)}")
            missing = ROLE_REQUIRED[role] - found
            if missing:
                raise TemplateError(f"{path}: role {role!r} requires placeholders {sorted(missing)}")
            templates[name] = text
        return cls(templates)

    def render(self, name: str, slots: dict[str, str]) -> str:
        if name not in self.templates:
            raise TemplateError(f"no template named {name!r}")
        unknown = set(slots) - PLACEHOLDERS
        if unknown:
            raise TemplateError(f"unknown slots {sorted(unknown)}")

        def fill(match: re.Match) -> str:
            key = match.group(1)
            if key not in slots:
                raise TemplateError(f"template {name!r} needs slot {key!r}")
            return slots[key]

        return _PLACEHOLDER_RE.sub(fill, self.templates[name])


# --- stage execution --------------------------------------------------------------------


@dataclass(frozen=True)
class StageOutput:
    stage: str
    agent: str
    initial: str
    contributions: tuple[tuple[str, str], ...]  # (agent, text) in agent order
    integrated: str


def render_prior_outputs(outputs: list[StageOutput]) -> str:
    if not outputs:
        return "(no prior stages)"
    return "\n\n".join(f"## {output.stage}\n{output.integrated}" for output in outputs)


def render_contributions(contributions: list[tuple[str, str]]) -> str:
    if not contributions:
        return "(no contributions)"
    return "\n\n".join(f"### {agent}\n{text}" for agent, text in contributions)


SYNTHESIZER_AGENT = "synthesizer"


def _call(
    backend: ChatBackend,
    model: str,
    prompt: str,
    trace: ProtocolTrace,
    stage: str,
    kind: str,
    agent: str,
    max_tokens: int,
) -> str:
    # The agent identity rides in the system turn, so two supporters asked
    # the same question still produce distinct requests in the trace.
    request = ChatRequest(
        model=model,
        messages=(
            ChatMessage(role="system", content=f"You are agent {agent} ({kind}) for stage {stage}."),
            ChatMessage(role="user", content=prompt),
        ),
        temperature=0.0,
        max_tokens=max_tokens,
    )
    reply = backend.chat(request)
    trace.record(stage, kind, agent, request_hash(request), text_hash(reply.content))
    return reply.content


def run_stage(
    stage: StageSpec,
    pool: tuple[str, ...],
    templates: TemplateSet,
    backend: ChatBackend,
    model: str,
    trace: ProtocolTrace,
    slots: dict[str, str],
    prior_outputs: list[StageOutput],
    max_tokens: int = 512,
    decision_analysis: bool = True,
) -> StageOutput:
    """One polling round: chair draft, supporter supplements, integration.

    `slots` carries query/elements/context/profile; prior stage answers are
    rendered here. Supporter prompts embed the chair's draft verbatim.
    With decision analysis off, the integrate call is skipped and the
    stage answer is the draft plus contributions in agent order.
    """
    base_slots = dict(slots)
    base_slots["prior_outputs"] = render_prior_outputs(prior_outputs)
    initial = _call(
        backend,
        model,
        templates.render(f"{stage.id}.main", base_slots),
        trace,
        stage.id,
        "mc-call",
        stage.agent,
        max_tokens,
    )
    contributions: list[tuple[str, str]] = []
    supporter_slots = dict(base_slots)
    supporter_slots["initial_output"] = initial
    for agent in sorted(a for a in pool if a != stage.agent):
        text = _call(
            backend,
            model,
            templates.render(f"{stage.id}.supporter", supporter_slots),
            trace,
            stage.id,
            "supporter-call",
            agent,
            max_tokens,
        )
        contributions.append((agent, text))
    if decision_analysis:
        integrate_slots = dict(supporter_slots)
        integrate_slots["contributions"] = render_contributions(contributions)
        integrated = _call(
            backend,
            model,
            templates.render(f"{stage.id}.integrate", integrate_slots),
            trace,
            stage.id,
            "integrate",
            stage.agent,
            max_tokens,
        )
    else:
        integrated = "\n\n".join([initial] + [text for _, text in contributions])
    return StageOutput(
        stage=stage.id,
        agent=stage.agent,
        initial=initial,
        contributions=tuple(contributions),
        integrated=integrated,
    )


def synthesize(
    outputs: list[StageOutput],
    templates: TemplateSet,
    backend: ChatBackend,
    model: str,
    trace: ProtocolTrace,
    slots: dict[str, str],
    max_tokens: int = 512,
) -> str:
    """Merge the per-stage answers into the final response."""
    if not outputs:
        raise ProtocolViolation("nothing to synthesize: no stage outputs")
    synth_slots = dict(slots)
    synth_slots["prior_outputs"] = render_prior_outputs(outputs)
    return _call(
        backend,
        model,
        templates.render("synthesize", synth_slots),
        trace,
        "synthesize",
        "synthesize",
        SYNTHESIZER_AGENT,
        max_tokens,
    )


def assemble_outputs(outputs: list[StageOutput]) -> str:
    """Decision-analysis-off final answer: stage sections, no model merge."""
    if not outputs:
        raise ProtocolViolation("nothing to assemble: no stage outputs")
    return render_prior_outputs(outputs)
