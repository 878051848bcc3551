"""Acceptance gate: one test per release criterion, at stated tolerances.

Each test prints a single summary line with the measured values; the
pytest -v listing gives the pass/fail verdict per criterion.
"""

from __future__ import annotations

import json
import math
import random
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from medaide.bench import load_benchmark, run_ablation, run_benchmark, run_stage_sweep
from medaide.config import load_config
from medaide.engine import Engine
from medaide.errors import NoParse
from medaide.grammar import load_grammar, parse, tokenize
from medaide.intent import (
    Intent,
    IntentTaxonomy,
    PrototypeStore,
    activate,
    intent_distribution,
    load_taxonomy,
)
from medaide.metrics import bert_score_like, bleu_n, gleu, meteor_lite, rouge_l
from medaide.retrieval import build_index, hybrid_retrieve
from medaide.rotation import load_stage_plan, validate_trace
from medaide.standardize import RewriteRule, apply_text_rule, load_rules, standardize
from medaide.textutil import canonical_json

from tests.conftest import DEMO_QUERY, FIXTURES, ROOT, SESSION_START
from tests.test_grammar import (
    AB_LEXICON,
    TOY_GRAMMAR_TEXT,
    _oracle_cells,
    _oracle_tree,
    _shape,
)
from tests.test_metrics import BasisEmbedder
from tests.test_retrieval import STOPWORDS, VOCAB, _oracle_keyword, _oracle_semantic, _random_corpus


# --- criterion 1: prototype softmax math ------------------------------------------


def _bf_cosine(u, v):
    dot = nu = nv = 0.0
    for a, b in zip(u, v):
        dot += a * b
        nu += a * a
        nv += b * b
    return dot / math.sqrt(nu * nv)


def _bf_distribution(query, prototypes):
    similarities = [_bf_cosine(query, p) for p in prototypes]
    peak = max(similarities)
    weights = [math.exp(s - peak) for s in similarities]
    total = sum(weights)
    return similarities, [w / total for w in weights]


def _bf_activate(probabilities, ids, threshold):
    activated = [i for i, p in zip(ids, probabilities) if p >= threshold]
    if not activated:
        best = probabilities.index(max(probabilities))
        activated = [ids[best]]
    return tuple(activated)


def test_criterion_1_ipm_math_suite():
    started = time.monotonic()
    taxonomy = IntentTaxonomy(
        intents=tuple(Intent(id=f"i{n:02d}", label=str(n), stage="diagnosis") for n in range(17))
    )
    basis = {}
    for position, intent_id in enumerate(taxonomy.ids):
        vector = np.zeros(17)
        vector[position] = 1.0
        basis[intent_id] = vector
    store = PrototypeStore(basis, taxonomy)

    _, uniform = intent_distribution(np.ones(17), store, taxonomy)
    uniform_dev = float(np.max(np.abs(uniform - 1.0 / 17.0)))
    assert uniform_dev < 1e-9

    query = np.zeros(17)
    query[6] = 1.0
    _, peaked = intent_distribution(query, store, taxonomy)
    peak_dev = abs(float(peaked[6]) - math.e / (math.e + 16.0))
    assert peak_dev < 1e-9

    rng = random.Random(20260816)
    dim = 16
    worst = 0.0
    for _ in range(1000):
        prototypes = [[rng.gauss(0.0, 1.0) for _ in range(dim)] for _ in range(17)]
        vectors = {
            intent_id: np.array(prototype)
            for intent_id, prototype in zip(taxonomy.ids, prototypes)
        }
        trial_store = PrototypeStore(vectors, taxonomy)
        query_list = [rng.gauss(0.0, 1.0) for _ in range(dim)]
        threshold = rng.choice((0.0, 0.05, 0.10, 0.25))

        similarities, probabilities = intent_distribution(
            np.array(query_list), trial_store, taxonomy
        )
        chosen = activate(similarities, probabilities, taxonomy, threshold)

        bf_sims, bf_probs = _bf_distribution(query_list, prototypes)
        deviation = max(
            abs(a - b) for a, b in zip(list(probabilities), bf_probs)
        )
        worst = max(worst, deviation)
        assert deviation < 1e-9
        assert chosen.activated == _bf_activate(bf_probs, taxonomy.ids, threshold)

    elapsed = time.monotonic() - started
    assert elapsed < 5.0
    print(
        f"[criterion 1] PASS: uniform dev {uniform_dev:.2e}, one-hot dev {peak_dev:.2e}, "
        f"1000 random sets within {worst:.2e}, runtime {elapsed:.2f}s"
    )


# --- criterion 2: hybrid retrieval vs brute force --------------------------------------


def test_criterion_2_hybrid_retrieval_oracle():
    started = time.monotonic()
    rng = random.Random(20260817)
    dim = 8
    for trial in range(200):
        documents = _random_corpus(rng, dim, max_docs=50)
        index = build_index(documents, stopwords=STOPWORDS, store="s")
        terms = [rng.choice(VOCAB) for _ in range(rng.randint(1, 4))]
        query_vector = np.array([rng.uniform(-1.0, 1.0) for _ in range(dim)])
        tau = rng.uniform(0.0, 0.9)
        mode = rng.choice(("all", "any"))
        result = hybrid_retrieve(" ".join(terms), query_vector, index, documents, tau, mode=mode)
        want_slice = _oracle_keyword(terms, documents, STOPWORDS, mode)
        want_match = _oracle_semantic(query_vector, documents, tau)
        assert set(result.ids) == want_slice | set(want_match), f"trial {trial}"
        assert result.slice_ids == want_slice
        assert set(result.match_scores) == set(want_match)

    for trial in range(100):
        documents = _random_corpus(rng, dim, max_docs=50)
        index = build_index(documents, stopwords=STOPWORDS, store="s")
        query_vector = np.array([rng.uniform(-1.0, 1.0) for _ in range(dim)])
        tau_low = rng.uniform(0.0, 0.6)
        tau_high = tau_low + rng.uniform(0.01, 0.39)
        loose = hybrid_retrieve("fever", query_vector, index, documents, tau_low)
        tight = hybrid_retrieve("fever", query_vector, index, documents, tau_high)
        assert set(tight.match_scores) <= set(loose.match_scores), f"pair {trial}"
        assert set(tight.ids) <= set(loose.ids)

    elapsed = time.monotonic() - started
    assert elapsed < 10.0
    print(
        f"[criterion 2] PASS: 200 corpora matched brute force, 100 tau pairs monotone, "
        f"runtime {elapsed:.2f}s"
    )


# --- criterion 3: parser vs exhaustive chart oracle ---------------------------------------


def test_criterion_3_parser_oracle(tmp_path):
    started = time.monotonic()
    path = tmp_path / "toy.txt"
    path.write_text(TOY_GRAMMAR_TEXT.strip(), encoding="utf-8")
    grammar = load_grammar(path)
    rng = random.Random(20260818)
    accepted = rejected = 0
    for _ in range(100):
        length = rng.randint(1, 8)
        source = " ".join(rng.choice("ab") for _ in range(length))
        tokens = tokenize(source, AB_LEXICON)
        classes = [token.cls for token in tokens.tokens]
        cells = _oracle_cells(classes, grammar)
        if grammar.start in cells[(0, len(classes))]:
            accepted += 1
            tree = parse(tokens, grammar)
            assert _shape(tree) == _oracle_tree(cells, classes, grammar, 0, len(classes), grammar.start)
        else:
            rejected += 1
            with pytest.raises(NoParse):
                parse(tokens, grammar)
    elapsed = time.monotonic() - started
    assert elapsed < 10.0
    print(
        f"[criterion 3] PASS: 100 sentences ({accepted} parsed, {rejected} rejected) "
        f"match the exhaustive oracle, runtime {elapsed:.2f}s"
    )


# --- criterion 4: standardizer fixed point ---------------------------------------------


def test_criterion_4_standardizer_fixed_point():
    rules = load_rules(FIXTURES / "rules" / "standardization-rules.jsonl")
    queries = [
        DEMO_QUERY,
        "   PLEASE   help, I can't sleep and my head hurts!!",
        "Which department should I visit?",
        "What are the side effects of amoxicillin?",
        "i'm dizzy and i've been sick, it     won't stop",
    ]
    for query in queries:
        std = standardize(query, rules)
        assert std.converged is True, f"{query!r} did not converge"
        again = std.text
        for rule in rules:
            again = apply_text_rule(rule, again)
        assert again == std.text, f"extra pass moved {query!r}"

    flip = RewriteRule(id="flip", kind="grammatical-normalization", pattern=r"^x$", replacement="y")
    flop = RewriteRule(id="flop", kind="grammatical-normalization", pattern=r"^y$", replacement="x")
    oscillating = standardize("x", (flip, flop), max_sweeps=16)
    assert oscillating.sweeps == 16
    assert oscillating.converged is False
    print(
        f"[criterion 4] PASS: {len(queries)} converged fixtures are fixed points, "
        f"oscillator stopped unconverged at sweep {oscillating.sweeps}"
    )


# --- criterion 5: golden protocol trace ------------------------------------------------


def _replay_run():
    engine = Engine(load_config(FIXTURES / "configs" / "replay-golden.ini"))
    return engine.run_query(DEMO_QUERY)


def test_criterion_5_protocol_golden_trace():
    first = _replay_run()
    second = _replay_run()

    rows = [event.as_dict() for event in first.events]
    assert len(rows) == 21
    expected_kinds = (["mc-call"] + ["supporter-call"] * 3 + ["integrate"]) * 4 + ["synthesize"]
    assert [row["kind"] for row in rows] == expected_kinds
    validate_trace(rows, pool_size=4)

    cassette = {}
    cassette_path = FIXTURES / "cassettes" / "golden-4stage.jsonl"
    for line in cassette_path.read_text(encoding="utf-8").splitlines():
        row = json.loads(line)
        cassette[row["hash"]] = row
    for stage_index in range(4):
        block = rows[stage_index * 5 : stage_index * 5 + 5]
        draft = cassette[block[0]["request_hash"]]["reply"]
        for supporter_row in block[1:4]:
            request = cassette[supporter_row["request_hash"]]["request"]
            user_content = request["messages"][-1]["content"]
            assert draft in user_content, (
                f"stage {block[0]['stage']}: supporter {supporter_row['agent']} "
                "request does not embed the chair draft verbatim"
            )

    first_bytes = canonical_json({"response": first.response, "events": rows}).encode()
    second_bytes = canonical_json(
        {"response": second.response, "events": [event.as_dict() for event in second.events]}
    ).encode()
    assert first_bytes == second_bytes
    print(
        "[criterion 5] PASS: 21-event (mc supporter^3 integrate)^4 synthesize trace, "
        "drafts verbatim in supporter requests, two runs byte-identical "
        f"({len(first_bytes)} bytes)"
    )


# --- criterion 6: metric anchors ----------------------------------------------------


def test_criterion_6_metric_oracles():
    tolerance = 1e-6

    bleu_anchor = bleu_n("the the the the the the the", "the cat is on the mat", 1)
    assert abs(bleu_anchor - 100.0 * 2.0 / 7.0) < tolerance

    rouge_anchor = rouge_l("a b c d", "a c d")
    assert abs(rouge_anchor - 100.0 * 6.0 / 7.0) < tolerance

    identical = "the patient needs rest and fluids"
    token_count = 6
    embedder = BasisEmbedder()
    maxima = {
        "bleu1": (bleu_n(identical, identical, 1), 100.0),
        "bleu2": (bleu_n(identical, identical, 2), 100.0),
        "rouge_l": (rouge_l(identical, identical), 100.0),
        "gleu": (gleu(identical, identical), 100.0),
        "meteor_lite": (
            meteor_lite(identical, identical),
            100.0 * (1.0 - 0.5 / token_count**3),
        ),
        "bert_score_like": (bert_score_like(identical, identical, embedder), 100.0),
    }
    for name, (got, want) in maxima.items():
        assert abs(got - want) < tolerance, f"{name}: {got} != {want}"

    candidate, reference = "x y z w", "a b c d"
    zeros = {
        "bleu1": bleu_n(candidate, reference, 1),
        "bleu2": bleu_n(candidate, reference, 2),
        "rouge_l": rouge_l(candidate, reference),
        "gleu": gleu(candidate, reference),
        "meteor_lite": meteor_lite(candidate, reference),
        "bert_score_like": bert_score_like(candidate, reference, BasisEmbedder()),
    }
    for name, got in zeros.items():
        assert abs(got) < tolerance, f"{name}: {got} != 0"
    print(
        f"[criterion 6] PASS: BLEU-1 anchor {bleu_anchor:.4f}, ROUGE-L anchor {rouge_anchor:.4f}, "
        "identical-pair maxima and disjoint-pair zeros within 1e-6"
    )


# --- criterion 7: intent F1 and ablations ----------------------------------------------


def test_criterion_7_intent_f1_and_ablation(mock_engine):
    file_engine = Engine(load_config(FIXTURES / "configs" / "file-f1.ini"))
    taxonomy = file_engine.taxonomy
    instances = load_benchmark(FIXTURES / "bench" / "bench-f1.jsonl", taxonomy)
    report = run_benchmark(file_engine, instances)
    assert report["errors"] == []
    assert report["intent_f1"] == 1.0
    for row in report["instances"]:
        assert row["activated"] == row["gold"]

    bench = load_benchmark(FIXTURES / "bench" / "bench-small.jsonl", mock_engine.taxonomy)
    ablation = run_ablation(mock_engine, bench)
    cells = ablation["cells"]
    assert set(cells) == {"full", "no_rie", "prompt_recognizer", "no_decision_analysis"}
    fingerprints = [cell["fingerprint"] for cell in cells.values()]
    assert len(set(fingerprints)) == 4
    for cell in cells.values():
        assert cell["scored"] == cell["count"]

    names = list(cells)
    for left in range(len(names)):
        for right in range(left + 1, len(names)):
            left_rows = {row["id"]: row["response"] for row in cells[names[left]]["instances"]}
            right_rows = {row["id"]: row["response"] for row in cells[names[right]]["instances"]}
            assert any(
                left_rows[instance_id] != right_rows[instance_id] for instance_id in left_rows
            ), f"cells {names[left]} and {names[right]} produced identical outputs"
    print(
        f"[criterion 7] PASS: exemplar benchmark intent_f1 {report['intent_f1']:.1f}, "
        "4 ablation cells with distinct fingerprints and pairwise-different outputs"
    )


# --- criterion 8: stage-granularity sweep ------------------------------------------------


def test_criterion_8_stage_granularity_sweep(mock_engine):
    taxonomy = mock_engine.taxonomy
    for granularity in range(2, 7):
        plan = load_stage_plan(
            FIXTURES / "plans" / f"stages-{granularity}.json", taxonomy
        )
        owners: dict[str, int] = {}
        for stage in plan.stages:
            for intent_id in stage.intents:
                owners[intent_id] = owners.get(intent_id, 0) + 1
        assert set(owners) == set(taxonomy.ids)
        assert all(count == 1 for count in owners.values())

    bench = load_benchmark(FIXTURES / "bench" / "bench-small.jsonl", taxonomy)
    sweep = run_stage_sweep(mock_engine, bench)
    assert set(sweep["granularities"]) == {"2", "3", "4", "5", "6"}
    for report in sweep["granularities"].values():
        assert report["errors"] == []
        assert report["scored"] == len(bench)
    print(
        "[criterion 8] PASS: plans 2-6 each partition all 17 intents exactly once "
        f"and scored {len(bench)}/{len(bench)} instances per granularity"
    )


# --- criterion 9: end-to-end determinism --------------------------------------------------


def _cli(args):
    return subprocess.run(
        [sys.executable, "-m", "medaide", *args],
        cwd=ROOT,
        capture_output=True,
        timeout=120,
    )


def test_criterion_9_end_to_end_determinism(tmp_path, monkeypatch):
    replay_ini = str(FIXTURES / "configs" / "replay-golden.ini")
    bench_ini = str(FIXTURES / "configs" / "replay-bench.ini")
    bench_path = str(FIXTURES / "bench" / "bench-small.jsonl")

    run_one = _cli(["--config", replay_ini, "run", DEMO_QUERY])
    run_two = _cli(["--config", replay_ini, "run", DEMO_QUERY])
    assert run_one.returncode == 0, run_one.stderr.decode()
    assert run_one.stdout == run_two.stdout
    assert run_one.stdout.strip()

    out_one, out_two = tmp_path / "one", tmp_path / "two"
    bench_one = _cli(["--config", bench_ini, "bench", "--bench", bench_path, "--out", str(out_one)])
    bench_two = _cli(["--config", bench_ini, "bench", "--bench", bench_path, "--out", str(out_two)])
    assert bench_one.returncode == 0, bench_one.stderr.decode()
    summary_one = bench_one.stdout.replace(str(out_one).encode(), b"OUT")
    summary_two = bench_two.stdout.replace(str(out_two).encode(), b"OUT")
    assert summary_one == summary_two
    assert (out_one / "bench.json").read_bytes() == (out_two / "bench.json").read_bytes()

    def no_network(*_args, **_kwargs):
        raise AssertionError("replay attempted network activity")

    monkeypatch.setattr(socket.socket, "connect", no_network)
    monkeypatch.setattr(socket, "create_connection", no_network)
    monkeypatch.setattr(socket, "getaddrinfo", no_network)
    guarded = _replay_run()
    assert guarded.response.strip()

    elapsed = time.monotonic() - SESSION_START
    assert elapsed < 120.0
    print(
        "[criterion 9] PASS: run and bench byte-identical across invocations, replay ran "
        f"under a network guard, suite at {elapsed:.1f}s of the 120s budget "
        "(exporter not involved)"
    )
