"""Command-line front-end: datastream lifecycle, samples, policies, service,
scenarios, benches, and figure rendering.

Exit codes: 0 success, 1 usage error, 2 transport failure, 3 service error
(the error code is printed), 4 policy wait timed out.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import httpx

from . import __version__, report as report_mod
from .api import EmbeddedServer, Engine
from .authz import Authenticator, StaticTokenStore
from .config import ServiceConfig
from .harness import bench, scenario as scenario_mod
from .harness.bench import bench_ingest, bench_metrics
from .harness.scenario import ScenarioAborted, ScenarioRunner
from .policy import WaitRegistry
from .ratelimit import RateLimiter
from .store import SampleStore

EXIT_USAGE = 1
EXIT_TRANSPORT = 2
EXIT_API_ERROR = 3
EXIT_WAIT_TIMEOUT = 4


class TransportFailure(click.ClickException):
    exit_code = EXIT_TRANSPORT


class ApiFailure(click.ClickException):
    exit_code = EXIT_API_ERROR

    def __init__(self, code: str, message: str, raw: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.raw = raw


class WaitTimedOut(click.ClickException):
    exit_code = EXIT_WAIT_TIMEOUT


class Session:
    """Resolved connection settings plus a raw-passthrough HTTP helper."""

    def __init__(self, url: str, token: str | None, output: str):
        self.url = url.rstrip("/")
        self.token = token
        self.output = output
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.client = httpx.Client(timeout=httpx.Timeout(60.0, connect=5.0), headers=headers)

    def call(self, method: str, path: str, body=None, params=None) -> httpx.Response:
        try:
            return self.client.request(method, self.url + path, json=body, params=params)
        except httpx.HTTPError as exc:
            # Never echo the token: httpx errors only carry the URL.
            raise TransportFailure(f"cannot reach {self.url}: {exc.__class__.__name__}")

    def done(self, resp: httpx.Response) -> None:
        """Print the response and exit non-zero on API errors."""
        if resp.status_code >= 400:
            if self.output == "json":
                click.echo(resp.text, err=True)
            code, message = _error_parts(resp)
            raise ApiFailure(code, message, resp.text)
        if self.output == "json":
            click.echo(resp.text)  # byte-identical passthrough of the API body
        else:
            self.print_table(resp.json())

    def print_table(self, body) -> None:
        if isinstance(body, dict) and "datastreams" in body:
            for ds in body["datastreams"]:
                click.echo(f"{ds['id']}  {ds['name']}  owner={ds['owner']}  samples={ds['sample_count']}")
            click.echo(f"total={body['total']}")
        elif isinstance(body, dict):
            for key, value in body.items():
                click.echo(f"{key}: {json.dumps(value)}")
        else:
            click.echo(json.dumps(body))


def _error_parts(resp: httpx.Response) -> tuple[str, str]:
    try:
        err = resp.json()["error"]
        return err.get("code", str(resp.status_code)), err.get("message", "")
    except Exception:
        return str(resp.status_code), resp.text[:200]


def _resolve_token(token: str | None, token_file: str | None) -> str | None:
    if token:
        return token
    if token_file:
        return Path(token_file).read_text(encoding="utf-8").strip()
    env_file = os.environ.get("STEER_TOKEN_FILE")
    if os.environ.get("STEER_TOKEN"):
        return os.environ["STEER_TOKEN"]
    if env_file:
        return Path(env_file).read_text(encoding="utf-8").strip()
    return None


def _load_json_arg(value: str, flag: str):
    """Inline JSON, @file, or '-' for stdin; bare strings pass through."""
    if value == "-":
        raw = sys.stdin.read()
    elif value.startswith("@"):
        raw = Path(value[1:]).read_text(encoding="utf-8")
    else:
        raw = value
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if value.startswith("@") or value == "-":
            raise click.UsageError(f"{flag} does not contain valid JSON")
        return value  # bare string decision like `proceed`


def _split_principals(values: tuple[str, ...]) -> list[str]:
    out: list[str] = []
    for chunk in values:
        out.extend(p.strip() for p in chunk.split(",") if p.strip())
    return out


@click.group()
@click.option("--url", envvar="STEER_URL", default="http://127.0.0.1:8787", show_default=True, help="Service base URL.")
@click.option("--token", default=None, help="Bearer token (or STEER_TOKEN / --token-file).")
@click.option("--token-file", default=None, help="File containing the bearer token.")
@click.option("--output", type=click.Choice(["table", "json"]), default="table", show_default=True)
@click.version_option(__version__)
@click.pass_context
def cli(ctx, url, token, token_file, output):
    """Steer a fleet: datastreams, samples, and policy decisions."""
    ctx.obj = Session(url, _resolve_token(token, token_file), output)


# -- datastream ------------------------------------------------------------------


@cli.group()
def datastream():
    """Datastream lifecycle and role management."""


@datastream.command("create")
@click.option("--name", required=True)
@click.option("--providers", multiple=True, help="Identity/group ids (repeatable or comma-separated).")
@click.option("--queriers", multiple=True)
@click.option("--default-decision", default=None, help="Inline JSON or @file.")
@click.option("--retention-cap", type=int, default=None)
@click.pass_obj
def datastream_create(session: Session, name, providers, queriers, default_decision, retention_cap):
    body = {
        "name": name,
        "providers": _split_principals(providers),
        "queriers": _split_principals(queriers),
        "default_decision": None if default_decision is None else _load_json_arg(default_decision, "--default-decision"),
    }
    if retention_cap is not None:
        body["retention_cap"] = retention_cap
    resp = session.call("POST", "/datastreams", body)
    if resp.status_code < 400 and session.output == "table":
        click.echo(resp.json()["id"])
        return
    session.done(resp)


@datastream.command("list")
@click.option("--limit", type=int, default=100)
@click.option("--offset", type=int, default=0)
@click.pass_obj
def datastream_list(session: Session, limit, offset):
    session.done(session.call("GET", "/datastreams", params={"limit": limit, "offset": offset}))


@datastream.command("show")
@click.argument("datastream_id")
@click.pass_obj
def datastream_show(session: Session, datastream_id):
    session.done(session.call("GET", f"/datastreams/{datastream_id}"))


@datastream.command("update")
@click.argument("datastream_id")
@click.option("--name", default=None)
@click.option("--owner", default=None)
@click.option("--providers", multiple=True)
@click.option("--queriers", multiple=True)
@click.option("--default-decision", default=None, help="Inline JSON or @file.")
@click.pass_obj
def datastream_update(session: Session, datastream_id, name, owner, providers, queriers, default_decision):
    patch = {}
    if name is not None:
        patch["name"] = name
    if owner is not None:
        patch["owner"] = owner
    if providers:
        patch["providers"] = _split_principals(providers)
    if queriers:
        patch["queriers"] = _split_principals(queriers)
    if default_decision is not None:
        patch["default_decision"] = _load_json_arg(default_decision, "--default-decision")
    if not patch:
        raise click.UsageError("nothing to update")
    session.done(session.call("PATCH", f"/datastreams/{datastream_id}", patch))


@datastream.command("delete")
@click.argument("datastream_id")
@click.pass_obj
def datastream_delete(session: Session, datastream_id):
    session.done(session.call("DELETE", f"/datastreams/{datastream_id}"))


# -- samples ---------------------------------------------------------------------


@cli.group()
def sample():
    """Add samples to datastreams."""


@sample.command("add")
@click.option("--datastream", "datastream_id", required=True)
@click.option("--value", type=float, default=None)
@click.option("--values", default=None, help="Comma-separated batch.")
@click.pass_obj
def sample_add(session: Session, datastream_id, value, values):
    if (value is None) == (values is None):
        raise click.UsageError("provide exactly one of --value or --values")
    body: dict = {"datastream_id": datastream_id}
    if values is not None:
        body["values"] = [float(v) for v in values.split(",") if v.strip()]
    else:
        body["value"] = value
    resp = session.call("POST", "/add_sample", body)
    if resp.status_code < 400 and session.output == "table":
        parsed = resp.json()
        seqs = [s["seq"] for s in parsed["samples"]] if "samples" in parsed else [parsed["seq"]]
        click.echo(" ".join(str(s) for s in seqs))
        return
    session.done(resp)


# -- policies --------------------------------------------------------------------


@cli.group()
def policy():
    """Evaluate policies and wait on policy decisions."""


@policy.command("eval")
@click.option("--spec", required=True, help="Policy JSON: file path, inline JSON, or - for stdin.")
@click.pass_obj
def policy_eval(session: Session, spec):
    body = _load_policy_spec(spec)
    session.done(session.call("POST", "/policy_eval", body))


def _load_policy_spec(spec: str) -> dict:
    if spec != "-" and not spec.lstrip().startswith("{") and Path(spec).exists():
        spec = "@" + spec
    body = _load_json_arg(spec, "--spec")
    if not isinstance(body, dict):
        raise click.UsageError("--spec must be a JSON object")
    return body


@policy.command("wait")
@click.option("--spec", required=True, help="Policy JSON: file path, inline JSON, or - for stdin.")
@click.option("--wait-for", required=True, help="Decision to wait for (JSON or bare string).")
@click.option("--timeout", type=float, default=300.0, show_default=True)
@click.pass_obj
def policy_wait(session: Session, spec, wait_for, timeout):
    body = _load_policy_spec(spec)
    body["wait_for_decision"] = _load_json_arg(wait_for, "--wait-for")
    body["timeout_s"] = timeout
    resp = session.call("POST", "/policy_wait", body, params={"block": "true"})
    while resp.status_code < 400 and resp.json().get("status") == "active":
        resp = session.call(
            "GET", f"/policy_wait/{resp.json()['wait_id']}", params={"block": "true"}
        )
    if resp.status_code == 408:
        if session.output == "json":
            click.echo(resp.text, err=True)
        raise WaitTimedOut("policy wait timed out")
    if resp.status_code >= 400:
        session.done(resp)
        return
    handle = resp.json()
    if handle["status"] == "timed_out":
        raise WaitTimedOut("policy wait timed out")
    if handle["status"] != "succeeded":
        raise ApiFailure("WaitNotSucceeded", f"wait ended with status {handle['status']}", resp.text)
    session.done(resp)


# -- service ----------------------------------------------------------------------


@cli.command("serve")
@click.option("--config", "config_path", default=None, help="JSON config file (STEER_* env vars override).")
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
def serve_cmd(config_path, host, port):
    """Run the service in the foreground."""
    from .api import serve

    try:
        config = ServiceConfig.load(config_path)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise click.ClickException(f"bad config: {exc}")
    if host:
        config.host = host
    if port:
        config.port = port
    click.echo(f"serving on http://{config.host}:{config.port} (storage={config.storage})")
    serve(config)


def _self_served(tokens: dict, retention_cap: int | None = None) -> EmbeddedServer:
    """Spin up an in-process service seeded with the given token map."""
    config = ServiceConfig(
        tick_interval_s=0.2,
        ingest_rate=1_000_000,
        ingest_burst=1_000_000,
        evaluate_rate=1_000_000,
        evaluate_burst=1_000_000,
    )
    if retention_cap:
        config.default_retention_cap = retention_cap
    store = SampleStore(default_retention_cap=config.default_retention_cap)
    engine = Engine(
        config=config,
        store=store,
        authenticator=Authenticator(introspector=StaticTokenStore(tokens)),
        registry=WaitRegistry(store, tick_interval_s=config.tick_interval_s),
        limiter=RateLimiter({}),
    )
    return EmbeddedServer(config=config, engine=engine).start()


DEFAULT_BENCH_TOKENS = {"tkn-bench": {"identity": "bench", "groups": []}}


# -- scenarios ----------------------------------------------------------------------


@cli.group()
def scenario():
    """Run fleet scenarios against a live service."""


@scenario.command("run")
@click.option("--config", "config_path", required=True, help="Scenario JSON file.")
@click.option("--out-dir", default="scenario-out", show_default=True)
@click.option("--url", default=None, help="Service base URL (omit with --serve).")
@click.option("--serve", "self_serve", is_flag=True, help="Serve an in-process instance seeded from the scenario's tokens.")
def scenario_run(config_path, out_dir, url, self_serve):
    with open(config_path, encoding="utf-8") as fh:
        config = json.load(fh)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    server = None
    if self_serve:
        if "tokens" not in config:
            raise click.UsageError("--serve needs a 'tokens' map in the scenario config")
        server = _self_served(config["tokens"])
        url = server.base_url
    elif not url:
        raise click.UsageError("provide --url or --serve")
    try:
        summary = scenario_mod.run_scenario(config, url, log_path=str(out / "events.jsonl"))
    except ScenarioAborted as exc:
        raise click.ClickException(f"scenario aborted: {exc}")
    finally:
        if server is not None:
            server.stop()
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    click.echo(json.dumps(summary.to_dict(), indent=2))


# -- benches --------------------------------------------------------------------------


@cli.group("bench")
def bench_group():
    """Ingest-throughput and metric-latency micro-benchmarks."""


@bench_group.command("ingest")
@click.option("--clients", default="1", show_default=True, help="Comma-separated client counts.")
@click.option("--duration", type=float, default=5.0, show_default=True)
@click.option("--out", "out_csv", default="bench-ingest.csv", show_default=True)
@click.option("--url", default=None)
@click.option("--token", default=None)
@click.option("--serve", "self_serve", is_flag=True, help="Benchmark an in-process instance.")
def bench_ingest_cmd(clients, duration, out_csv, url, token, self_serve):
    client_counts = [int(c) for c in clients.split(",") if c.strip()]
    server = None
    if self_serve:
        server = _self_served(DEFAULT_BENCH_TOKENS)
        url, token = server.base_url, "tkn-bench"
    elif not url or not token:
        raise click.UsageError("provide --url and --token, or --serve")
    try:
        report = bench_ingest(url, token, client_counts, duration, out_csv=out_csv)
    finally:
        if server is not None:
            server.stop()
    for row in report.rows:
        click.echo(json.dumps(row))
    click.echo(f"wrote {out_csv}")


@bench_group.command("metrics")
@click.option("--sizes", default="10,1000,1000000", show_default=True)
@click.option("--reps", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_csv", default="bench-metrics.csv", show_default=True)
@click.option("--url", default=None)
@click.option("--token", default=None)
@click.option("--serve", "self_serve", is_flag=True, help="Benchmark an in-process instance.")
def bench_metrics_cmd(sizes, reps, seed, out_csv, url, token, self_serve):
    size_list = [int(s) for s in sizes.split(",") if s.strip()]
    server = None
    if self_serve:
        server = _self_served(DEFAULT_BENCH_TOKENS)
        url, token = server.base_url, "tkn-bench"
    elif not url or not token:
        raise click.UsageError("provide --url and --token, or --serve")
    try:
        report = bench_metrics(url, token, size_list, repetitions=reps, seed=seed, out_csv=out_csv)
    finally:
        if server is not None:
            server.stop()
    for size in size_list:
        worst = max(report.median_latency_ms(size, op) for op in bench.ALL_OPS)
        click.echo(f"size={size}: worst median latency {worst:.1f} ms")
    click.echo(f"wrote {out_csv}")


# -- figures ---------------------------------------------------------------------------


@cli.group("report")
def report_group():
    """Render figures from scenario logs and bench CSVs."""


@report_group.command("scenario")
@click.option("--events", required=True, help="events.jsonl from a scenario run.")
@click.option("--out-dir", default=".", show_default=True)
@click.option("--scores", default=None, help="Datastream key whose samples to overlay.")
def report_scenario(events, out_dir, scores):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = report_mod.scenario_progress_figure(events, out / "scenario-progress.png", score_datastream=scores)
    click.echo(f"wrote {path}")


@report_group.command("bench-metrics")
@click.option("--csv", "csv_path", required=True)
@click.option("--out-dir", default=".", show_default=True)
def report_bench_metrics(csv_path, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = report_mod.bench_metrics_figure(csv_path, out / "bench-metrics.png")
    click.echo(f"wrote {path}")


@report_group.command("bench-ingest")
@click.option("--csv", "csv_path", required=True)
@click.option("--out-dir", default=".", show_default=True)
def report_bench_ingest(csv_path, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = report_mod.bench_ingest_figure(csv_path, out / "bench-ingest.png")
    click.echo(f"wrote {path}")


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        sys.exit(EXIT_USAGE)
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(EXIT_USAGE)


if __name__ == "__main__":
    main()
