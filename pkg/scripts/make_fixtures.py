"""Regenerate the derived fixtures: embedding file and replay cassettes.

Everything here is produced deterministically from the hand-written
fixtures, so the outputs can be committed and replayed byte for byte.
Run from the repository root:

    python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import json
from pathlib import Path

from medaide.bench import load_benchmark, run_benchmark
from medaide.config import RunFlags, load_config
from medaide.engine import Engine
from medaide.gateway import HashEmbedder, write_embedding_file

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

DEMO_QUERY = (
    "I have a fever and chills, and I took ibuprofen yesterday. What should I do?"
)


def build_embedding_file() -> Path:
    """Freeze the intent prototype vectors into the binary embedding file.

    Keys are the exemplar texts themselves, so a file-backed query embedder
    resolves both prototype construction and benchmark queries that quote
    an exemplar verbatim.
    """
    embedder = HashEmbedder(dimension=768)
    vectors = {}
    with open(FIXTURES / "intents" / "exemplars.jsonl", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            text = json.loads(line)["text"]
            vectors[text] = embedder.embed(text)
    out = FIXTURES / "embeddings" / "intent-prototypes.maed"
    write_embedding_file(out, vectors, dimension=768)
    print(f"embedding file: {out.name} ({len(vectors)} keys)")
    return out


def record_golden_cassette() -> Path:
    """Record the 4-agent, 4-stage demo conversation against the echo backend."""
    out = FIXTURES / "cassettes" / "golden-4stage.jsonl"
    out.unlink(missing_ok=True)
    engine = Engine(load_config(FIXTURES / "configs" / "record-golden.ini"))
    result = engine.run_query(DEMO_QUERY)
    print(f"golden cassette: {out.name} ({len(result.events)} events)")
    return out


def record_bench_cassette() -> Path:
    """Record every exchange the small benchmark issues under default flags."""
    out = FIXTURES / "cassettes" / "bench-small.jsonl"
    out.unlink(missing_ok=True)
    engine = Engine(load_config(FIXTURES / "configs" / "record-bench.ini"))
    instances = load_benchmark(FIXTURES / "bench" / "bench-small.jsonl", engine.taxonomy)
    report = run_benchmark(engine, instances, RunFlags())
    if report["errors"]:
        raise SystemExit(f"benchmark recording hit errors: {report['errors']}")
    print(f"bench cassette: {out.name} ({report['scored']} instances scored)")
    return out


def main() -> None:
    build_embedding_file()
    record_golden_cassette()
    record_bench_cassette()


if __name__ == "__main__":
    main()
