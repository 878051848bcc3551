"""Command line for the engine.

Every command talks to the HTTP service: by default an in-process app
built from --config (no daemon involved), or a remote instance when
--server is given. Exit codes: 0 success, 1 usage, 2 configuration,
3 pipeline or backend failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import httpx

from .config import load_config
from .errors import ConfigError, MedAideError

logger = logging.getLogger(__name__)


class ServiceError(MedAideError):
    def __init__(self, status: int, payload: dict | str):
        detail = payload.get("detail", payload) if isinstance(payload, dict) else payload
        super().__init__(f"service error {status}: {detail}")
        self.status = status
        self.payload = payload


class ServiceClient:
    """httpx wrapper that mounts the app in-process unless --server is set."""

    def __init__(self, config_path: str | None, server: str | None):
        if server:
            self._client = httpx.Client(base_url=server.rstrip("/"), timeout=120.0)
        else:
            if not config_path:
                raise click.UsageError("--config is required unless --server is given")
            import warnings

            from .service import create_app

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from starlette.testclient import TestClient

                app = create_app(load_config(config_path))
                self._client = TestClient(app, raise_server_exceptions=False)

    def request(self, method: str, path: str, body: dict | None = None) -> dict:
        response = self._client.request(method, path, json=body)
        try:
            payload = response.json()
        except ValueError:
            payload = response.text
        if response.status_code // 100 != 2:
            if response.status_code == 422 and isinstance(payload, dict) and "error" in payload:
                raise ConfigError(str(payload.get("detail")))
            raise ServiceError(response.status_code, payload)
        return payload


def _flag_params(ctx: click.Context) -> dict:
    return dict(ctx.obj["flags"])


@click.group()
@click.option("--config", "config_path", type=click.Path(), help="engine config INI")
@click.option("--server", help="remote service URL instead of in-process engine")
@click.option("--profile", "patient_id", help="patient profile id for this run")
@click.option("--stages", type=int, help="stage granularity override (2-6)")
@click.option("--threshold", type=float, help="intent activation threshold override")
@click.option("--tau", type=float, help="retrieval similarity threshold override")
@click.option("--seed", type=int, help="seed override recorded in the fingerprint")
@click.option("--no-rie", is_flag=True, help="skip query regularization")
@click.option(
    "--recognizer",
    type=click.Choice(["prototype", "prompt"]),
    help="intent recognizer override",
)
@click.option("--no-decision-analysis", is_flag=True, help="skip integrate and synthesize")
@click.option("--explain", is_flag=True, help="include pipeline internals in output")
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: str | None,
    server: str | None,
    patient_id: str | None,
    stages: int | None,
    threshold: float | None,
    tau: float | None,
    seed: int | None,
    no_rie: bool,
    recognizer: str | None,
    no_decision_analysis: bool,
    explain: bool,
) -> None:
    """Staged medical-assistant engine."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["server"] = server
    ctx.obj["patient_id"] = patient_id
    ctx.obj["flags"] = {
        "stages": stages,
        "threshold": threshold,
        "tau": tau,
        "seed": seed,
        "recognizer": recognizer,
        "no_rie": no_rie,
        "no_decision_analysis": no_decision_analysis,
        "explain": explain,
    }
    ctx.obj["client"] = None


def _client(ctx: click.Context) -> ServiceClient:
    if ctx.obj["client"] is None:
        ctx.obj["client"] = ServiceClient(ctx.obj["config_path"], ctx.obj["server"])
    return ctx.obj["client"]


@cli.command()
@click.argument("query")
@click.pass_context
def run(ctx: click.Context, query: str) -> None:
    """Answer one query and print the response."""
    payload = {
        "query": query,
        "patient_id": ctx.obj["patient_id"],
        "flags": _flag_params(ctx),
    }
    result = _client(ctx).request("POST", "/run", payload)
    click.echo(result["response"])
    if ctx.obj["flags"]["explain"] and result.get("explain"):
        click.echo("--- explain ---")
        detail = {
            "session_id": result["session_id"],
            "fingerprint": result["fingerprint"],
            "merged_query": result["merged_query"],
            "activated": result["activated"],
            "stages_run": result["stages_run"],
            "explain": result["explain"],
        }
        click.echo(json.dumps(detail, indent=2, sort_keys=True, ensure_ascii=False))


@cli.command()
@click.pass_context
def chat(ctx: click.Context) -> None:
    """Multi-turn session reading queries from stdin (exit/quit to stop)."""
    client = _client(ctx)
    session = client.request("POST", "/sessions", {"patient_id": ctx.obj["patient_id"]})
    session_id = session["session_id"]
    click.echo(f"session {session_id}")
    stream = click.get_text_stream("stdin")
    for line in stream:
        text = line.strip()
        if not text:
            continue
        if text in ("exit", "quit"):
            break
        click.echo(f"you> {text}")
        result = client.request(
            "POST", f"/sessions/{session_id}/messages", {"text": text, "flags": _flag_params(ctx)}
        )
        click.echo("assistant>")
        click.echo(result["response"])
        click.echo("")
    click.echo("bye")


@cli.command()
@click.option("--store", required=True, help="target document store")
@click.option("--file", "file_path", required=True, type=click.Path(exists=True), help="JSONL documents")
@click.pass_context
def ingest(ctx: click.Context, store: str, file_path: str) -> None:
    """Add documents from a JSONL file to a store."""
    rows = []
    for lineno, line in enumerate(Path(file_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise click.UsageError(f"{file_path}:{lineno}: bad JSON: {exc}") from exc
    result = _client(ctx).request("POST", f"/stores/{store}/documents", {"documents": rows})
    click.echo(f"{result['store']}: +{result['added']} documents ({result['documents']} total)")


@cli.command()
@click.option("--store", required=True, help="document store to rebuild")
@click.pass_context
def index(ctx: click.Context, store: str) -> None:
    """Rebuild a store's inverted index and embeddings."""
    result = _client(ctx).request("POST", f"/stores/{store}/index", None)
    click.echo(f"{result['store']}: {result['documents']} documents, {result['terms']} terms")


def _write_report(out_dir: str | None, name: str, report: dict) -> None:
    if not out_dir:
        return
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(
        json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    click.echo(f"wrote {path}")


def _summary_lines(report: dict) -> str:
    from .metrics import TEXT_METRICS

    lines = [
        f"fingerprint: {report['fingerprint']}",
        f"instances:   {report['scored']}/{report['count']} scored, {len(report['errors'])} errors",
        f"intent_f1:   {report['intent_f1']:.4f}",
    ]
    for metric in TEXT_METRICS:
        lines.append(f"{metric:<16} {report['means'][metric]:8.3f}")
    return "\n".join(lines)


@cli.command()
@click.option("--bench", "bench_path", required=True, type=click.Path(exists=True), help="benchmark JSONL")
@click.option("--out", "out_dir", type=click.Path(), help="directory for the JSON report")
@click.option("--sweep-stages", is_flag=True, help="run at every granularity 2-6 instead")
@click.pass_context
def bench(ctx: click.Context, bench_path: str, out_dir: str | None, sweep_stages: bool) -> None:
    """Score the engine against a benchmark file."""
    body = {"path": str(Path(bench_path).resolve()), "flags": _flag_params(ctx)}
    if sweep_stages:
        report = _client(ctx).request("POST", "/sweep", body)
        for k, cell in report["granularities"].items():
            click.echo(f"=== {k} stages ===")
            click.echo(_summary_lines(cell))
        _write_report(out_dir, "sweep.json", report)
        return
    report = _client(ctx).request("POST", "/bench", body)
    click.echo(_summary_lines(report))
    _write_report(out_dir, "bench.json", report)


@cli.command()
@click.option("--bench", "bench_path", required=True, type=click.Path(exists=True), help="benchmark JSONL")
@click.option("--out", "out_dir", type=click.Path(), help="directory for the JSON report")
@click.option("--cells", help="comma-separated subset of ablation cells")
@click.pass_context
def ablate(ctx: click.Context, bench_path: str, out_dir: str | None, cells: str | None) -> None:
    """Run the ablation matrix against a benchmark file."""
    body: dict = {"path": str(Path(bench_path).resolve()), "flags": _flag_params(ctx)}
    if cells:
        body["cells"] = [cell.strip() for cell in cells.split(",") if cell.strip()]
    report = _client(ctx).request("POST", "/ablate", body)
    for name, cell in report["cells"].items():
        click.echo(f"=== {name} ===")
        click.echo(_summary_lines(cell))
    _write_report(out_dir, "ablation.json", report)


@cli.command("export-trace")
@click.option("--session", "session_id", required=True, help="session id to export")
@click.option("--out", "out_path", required=True, type=click.Path(), help="output JSONL file")
@click.pass_context
def export_trace(ctx: click.Context, session_id: str, out_path: str) -> None:
    """Write a session's collaboration trace as JSONL."""
    result = _client(ctx).request("GET", f"/sessions/{session_id}/trace", None)
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for event in result["events"]:
            handle.write(json.dumps(event, sort_keys=True, ensure_ascii=False) + "\n")
    click.echo(f"wrote {path} ({len(result['events'])} events, digest {result['digest'][:12]})")


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.pass_context
def serve(ctx: click.Context, host: str, port: int) -> None:
    """Run the HTTP service under uvicorn."""
    import uvicorn

    from .service import create_app

    config_path = ctx.obj["config_path"]
    if not config_path:
        raise click.UsageError("--config is required for serve")
    uvicorn.run(create_app(load_config(config_path)), host=host, port=port)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
        return 0
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return 2
    except (MedAideError, httpx.HTTPError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
