from __future__ import annotations

import json

import pytest

from medaide.errors import (
    ConfigError,
    ProfileNotFound,
    ProtocolViolation,
    TemplateError,
)
from medaide.gateway import EchoBackend
from medaide.intent import IntentActivation, load_taxonomy
from medaide.rotation import (
    PatientProfile,
    ProfileStore,
    ProtocolTrace,
    TemplateSet,
    anonymous_profile,
    assemble_outputs,
    load_stage_plan,
    plan_stages,
    render_contributions,
    render_prior_outputs,
    run_stage,
    synthesize,
    validate_trace,
)

from tests.conftest import FIXTURES


@pytest.fixture(scope="module")
def taxonomy():
    return load_taxonomy(FIXTURES / "intents" / "taxonomy.jsonl")


@pytest.fixture(scope="module")
def plan4(taxonomy):
    return load_stage_plan(FIXTURES / "plans" / "stages-4.json", taxonomy)


# --- stage plans -----------------------------------------------------------------


def test_every_fixture_plan_partitions_the_taxonomy(taxonomy):
    for granularity in range(2, 7):
        plan = load_stage_plan(FIXTURES / "plans" / f"stages-{granularity}.json", taxonomy)
        assert plan.granularity == granularity
        assert len(plan.stages) == granularity
        covered = [intent_id for stage in plan.stages for intent_id in stage.intents]
        assert sorted(covered) == sorted(taxonomy.ids)
        assert len(set(plan.agents)) == granularity


def _write_plan(tmp_path, data):
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_plan_validation_rejects_bad_shapes(tmp_path, taxonomy):
    base = json.loads((FIXTURES / "plans" / "stages-2.json").read_text(encoding="utf-8"))

    overlapping = json.loads(json.dumps(base))
    overlapping["stages"][1]["intents"].append(base["stages"][0]["intents"][0])
    with pytest.raises(ConfigError, match="in both"):
        load_stage_plan(_write_plan(tmp_path, overlapping), taxonomy)

    missing = json.loads(json.dumps(base))
    missing["stages"][0]["intents"] = missing["stages"][0]["intents"][:-1]
    with pytest.raises(ConfigError, match="uncovered"):
        load_stage_plan(_write_plan(tmp_path, missing), taxonomy)

    wrong_count = json.loads(json.dumps(base))
    wrong_count["granularity"] = 3
    with pytest.raises(ConfigError, match="stages for granularity"):
        load_stage_plan(_write_plan(tmp_path, wrong_count), taxonomy)

    out_of_range = json.loads(json.dumps(base))
    out_of_range["granularity"] = 7
    with pytest.raises(ConfigError, match="granularity"):
        load_stage_plan(_write_plan(tmp_path, out_of_range), taxonomy)

    shared_agent = json.loads(json.dumps(base))
    shared_agent["stages"][1]["agent"] = shared_agent["stages"][0]["agent"]
    with pytest.raises(ConfigError, match="unique"):
        load_stage_plan(_write_plan(tmp_path, shared_agent), taxonomy)


def test_plan_stages_keeps_plan_order(plan4):
    activation = IntentActivation(
        similarities=(),
        probabilities=(),
        activated=("post.recovery", "diag.urgency"),
        threshold=0.1,
    )
    selected = plan_stages(activation, plan4)
    assert [stage.id for stage in selected] == ["diagnosis", "post-diagnosis"]


def test_plan_stages_empty_when_nothing_activates(plan4):
    activation = IntentActivation(
        similarities=(), probabilities=(), activated=(), threshold=0.1
    )
    assert plan_stages(activation, plan4) == ()


# --- trace ------------------------------------------------------------------------


def test_trace_assigns_sequential_seq():
    trace = ProtocolTrace("sess-x", start_seq=5)
    trace.record("s1", "mc-call", "a1", "rh1", "xh1")
    trace.record("s1", "supporter-call", "a2", "rh2", "xh2")
    assert [event.seq for event in trace.events] == [5, 6]
    with pytest.raises(ProtocolViolation):
        trace.record("s1", "coffee-break", "a1", "rh", "xh")


def test_trace_digest_tracks_content():
    one = ProtocolTrace("sess-x")
    two = ProtocolTrace("sess-x")
    for trace in (one, two):
        trace.record("s1", "mc-call", "a1", "rh1", "xh1")
    assert one.digest() == two.digest()
    two.record("s1", "supporter-call", "a2", "rh2", "xh2")
    assert one.digest() != two.digest()


def _stage_rows(session, seq, stage, chair, supporters, with_integrate=True):
    rows = [
        {
            "session": session,
            "seq": seq,
            "stage": stage,
            "kind": "mc-call",
            "agent": chair,
            "request_hash": f"r{seq}",
            "response_hash": f"x{seq}",
        }
    ]
    for agent in supporters:
        seq += 1
        rows.append(
            {
                "session": session,
                "seq": seq,
                "stage": stage,
                "kind": "supporter-call",
                "agent": agent,
                "request_hash": f"r{seq}",
                "response_hash": f"x{seq}",
            }
        )
    if with_integrate:
        seq += 1
        rows.append(
            {
                "session": session,
                "seq": seq,
                "stage": stage,
                "kind": "integrate",
                "agent": chair,
                "request_hash": f"r{seq}",
                "response_hash": f"x{seq}",
            }
        )
    return rows


def _synth_row(session, seq):
    return {
        "session": session,
        "seq": seq,
        "stage": "synthesize",
        "kind": "synthesize",
        "agent": "synthesizer",
        "request_hash": f"r{seq}",
        "response_hash": f"x{seq}",
    }


def test_validate_trace_accepts_well_formed_polling():
    rows = []
    rows += _stage_rows("s", 0, "alpha", "a1", ["a2", "a3", "a4"])
    rows += _stage_rows("s", 5, "beta", "a2", ["a1", "a3", "a4"])
    rows.append(_synth_row("s", 10))
    validate_trace(rows, pool_size=4)


def test_validate_trace_rejects_protocol_breaks():
    good = _stage_rows("s", 0, "alpha", "a1", ["a2", "a3"]) + [_synth_row("s", 4)]
    validate_trace(good, pool_size=3)

    disordered = _stage_rows("s", 0, "alpha", "a1", ["a3", "a2"]) + [_synth_row("s", 4)]
    with pytest.raises(ProtocolViolation, match="distinct and ordered"):
        validate_trace(disordered, pool_size=3)

    selfie = _stage_rows("s", 0, "alpha", "a1", ["a1", "a2"]) + [_synth_row("s", 4)]
    with pytest.raises(ProtocolViolation, match="chair cannot support itself"):
        validate_trace(selfie, pool_size=3)

    headless = good[1:]
    with pytest.raises(ProtocolViolation, match="open with mc-call"):
        validate_trace(headless, pool_size=3)

    no_synth = _stage_rows("s", 0, "alpha", "a1", ["a2", "a3"])
    with pytest.raises(ProtocolViolation, match="synthesize"):
        validate_trace(no_synth, pool_size=3)

    jumpy = [dict(row) for row in good]
    jumpy[2]["seq"] = 9
    with pytest.raises(ProtocolViolation, match="seq jump"):
        validate_trace(jumpy, pool_size=3)

    with pytest.raises(ProtocolViolation, match="empty"):
        validate_trace([], pool_size=3)


def test_validate_trace_without_decision_analysis():
    rows = _stage_rows("s", 0, "alpha", "a1", ["a2", "a3"], with_integrate=False)
    rows += _stage_rows("s", 3, "beta", "a2", ["a1", "a3"], with_integrate=False)
    validate_trace(rows, pool_size=3, decision_analysis=False)
    # an integrate event is a violation in this mode
    with_integrate = _stage_rows("s", 0, "alpha", "a1", ["a2", "a3"])
    with pytest.raises(ProtocolViolation):
        validate_trace(with_integrate, pool_size=3, decision_analysis=False)
    # and a synthesize trailer is too
    trailed = rows + [_synth_row("s", 6)]
    with pytest.raises(ProtocolViolation):
        validate_trace(trailed, pool_size=3, decision_analysis=False)


# --- profiles ----------------------------------------------------------------------


def test_profile_round_trip_and_render(tmp_path):
    store = ProfileStore(tmp_path / "profiles")
    profile = PatientProfile(
        patient_id="p-17",
        demographics={"age": "44", "sex": "female"},
        allergies=("penicillin",),
        medications=("warfarin",),
        visits=({"date": "2026-01-12", "summary": "annual checkup"},),
    )
    store.upsert(profile)
    loaded = store.get("p-17")
    assert loaded == profile
    rendered = loaded.render()
    assert "patient: p-17" in rendered
    assert "age: 44" in rendered
    assert "penicillin" in rendered
    assert "visit 2026-01-12" in rendered

    with pytest.raises(ProfileNotFound):
        store.get("nobody")
    assert store.get_or_default(None) == anonymous_profile()
    assert store.get_or_default("fresh").patient_id == "fresh"
    assert store.list_ids() == ["p-17"]


def test_profile_ids_are_sanitized_consistently(tmp_path):
    store = ProfileStore(tmp_path)
    profile = PatientProfile(patient_id="ward/7 bed#2")
    store.upsert(profile)
    assert store.get("ward/7 bed#2").patient_id == "ward/7 bed#2"
    assert all("/" not in name and "#" not in name for name in store.list_ids())


def test_anonymous_profile_renders_placeholder():
    assert anonymous_profile().render() == "(no profile on file)"
    named = PatientProfile(patient_id="anonymous", allergies=("latex",))
    assert "latex" in named.render()


# --- templates ---------------------------------------------------------------------


def test_fixture_templates_load_for_every_plan(taxonomy):
    for granularity in range(2, 7):
        plan = load_stage_plan(FIXTURES / "plans" / f"stages-{granularity}.json", taxonomy)
        templates = TemplateSet.load(FIXTURES / "templates", [stage.id for stage in plan.stages])
        for stage in plan.stages:
            for role in ("main", "supporter", "integrate"):
                assert f"{stage.id}.{role}" in templates.templates
        assert "synthesize" in templates.templates


def _template_dir(tmp_path, main="Q: {{query}}"):
    directory = tmp_path / "templates"
    directory.mkdir()
    (directory / "s1.main.txt").write_text(main, encoding="utf-8")
    (directory / "s1.supporter.txt").write_text(
        "draft:\n{{initial_output}}\nquery: {{query}}", encoding="utf-8"
    )
    (directory / "s1.integrate.txt").write_text(
        "merge: {{initial_output}}\n{{contributions}}", encoding="utf-8"
    )
    (directory / "synthesize.txt").write_text("final:\n{{prior_outputs}}", encoding="utf-8")
    return directory


def test_template_load_validation(tmp_path):
    directory = _template_dir(tmp_path)
    templates = TemplateSet.load(directory, ["s1"])
    assert templates.render("s1.main", {"query": "hi", "context": "unused"}) == "Q: hi"
    with pytest.raises(TemplateError, match="needs slot"):
        templates.render("synthesize", {})
    with pytest.raises(TemplateError, match="unknown slots"):
        templates.render("s1.main", {"query": "hi", "surprise": "x"})
    with pytest.raises(TemplateError, match="no template"):
        templates.render("s2.main", {"query": "hi"})

    (directory / "s1.main.txt").write_text("Q: {{query}} {{mystery_slot}}", encoding="utf-8")
    with pytest.raises(TemplateError, match="unknown placeholders"):
        TemplateSet.load(directory, ["s1"])

    (directory / "s1.main.txt").write_text("no slots at all", encoding="utf-8")
    with pytest.raises(TemplateError, match="requires placeholders"):
        TemplateSet.load(directory, ["s1"])

    (directory / "s1.main.txt").unlink()
    with pytest.raises(ConfigError, match="missing template"):
        TemplateSet.load(directory, ["s1"])


# --- stage execution ------------------------------------------------------------------


def _base_slots():
    return {
        "query": "what should i do about my fever",
        "elements": "(none)",
        "context": "(none)",
        "profile": "(no profile on file)",
    }


def test_run_stage_polls_pool_in_order(tmp_path, taxonomy, plan4):
    directory = _template_dir(tmp_path)
    templates = TemplateSet.load(directory, ["s1"])
    stage = plan4.stages[1]  # diagnosis
    spec = type(stage)(id="s1", agent="bravo", intents=stage.intents, stores=stage.stores)
    trace = ProtocolTrace("sess-t")
    backend = EchoBackend()

    output = run_stage(
        stage=spec,
        pool=("alpha", "bravo", "charlie"),
        templates=templates,
        backend=backend,
        model="echo",
        trace=trace,
        slots=_base_slots(),
        prior_outputs=[],
    )

    kinds = [event.kind for event in trace.events]
    assert kinds == ["mc-call", "supporter-call", "supporter-call", "integrate"]
    agents = [event.agent for event in trace.events]
    assert agents == ["bravo", "alpha", "charlie", "bravo"]
    assert output.initial == "Q: what should i do about my fever"
    # supporters see the chair draft verbatim
    assert [agent for agent, _ in output.contributions] == ["alpha", "charlie"]
    for _, text in output.contributions:
        assert output.initial in text
    # the two supporter requests differ because identity rides in the system turn
    supporter_hashes = [event.request_hash for event in trace.events if event.kind == "supporter-call"]
    assert len(set(supporter_hashes)) == 2
    # integration sees both contributions
    assert "### alpha" in output.integrated
    assert "### charlie" in output.integrated


def test_run_stage_without_decision_analysis_skips_integrate(tmp_path, plan4):
    directory = _template_dir(tmp_path)
    templates = TemplateSet.load(directory, ["s1"])
    stage = plan4.stages[0]
    spec = type(stage)(id="s1", agent="alpha", intents=stage.intents, stores=stage.stores)
    trace = ProtocolTrace("sess-t")

    output = run_stage(
        stage=spec,
        pool=("alpha", "bravo"),
        templates=templates,
        backend=EchoBackend(),
        model="echo",
        trace=trace,
        slots=_base_slots(),
        prior_outputs=[],
        decision_analysis=False,
    )
    assert [event.kind for event in trace.events] == ["mc-call", "supporter-call"]
    assert output.integrated == output.initial + "\n\n" + output.contributions[0][1]
    validate_trace(trace.rows(), pool_size=2, decision_analysis=False)


def test_synthesize_merges_stage_answers(tmp_path, plan4):
    directory = _template_dir(tmp_path)
    templates = TemplateSet.load(directory, ["s1"])
    stage = plan4.stages[0]
    spec = type(stage)(id="s1", agent="alpha", intents=stage.intents, stores=stage.stores)
    trace = ProtocolTrace("sess-t")
    output = run_stage(
        stage=spec,
        pool=("alpha", "bravo"),
        templates=templates,
        backend=EchoBackend(),
        model="echo",
        trace=trace,
        slots=_base_slots(),
        prior_outputs=[],
    )
    final = synthesize([output], templates, EchoBackend(), "echo", trace, _base_slots())
    assert final.startswith("final:")
    assert "## s1" in final
    assert trace.events[-1].kind == "synthesize"

    with pytest.raises(ProtocolViolation):
        synthesize([], templates, EchoBackend(), "echo", trace, _base_slots())
    with pytest.raises(ProtocolViolation):
        assemble_outputs([])


def test_prior_and_contribution_rendering():
    assert render_prior_outputs([]) == "(no prior stages)"
    assert render_contributions([]) == "(no contributions)"
    assert render_contributions([("a", "text")]) == "### a\ntext"
