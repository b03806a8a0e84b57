"""HTTP surface: JSON over HTTP/1.1 with bearer tokens and rate limiting.

Endpoints
  POST /datastreams            create            GET  /datastreams         list
  GET  /datastreams/{id}       fetch             PATCH/DELETE              update/delete
  POST /datastreams/{id}/samples               ingest one value or a batch
  POST /add_sample             flow-facing ingest {datastream_id, value}
  POST /policy_eval            evaluate a policy
  POST /policy_wait[?block=]   create a policy-wait (optionally long-polling)
  GET  /policy_wait/{id}[?block=]              poll (optionally long-polling)
  DELETE /policy_wait/{id}     cancel
  GET  /healthz                liveness/build info (no auth)

All timestamps in bodies are ISO-8601 UTC.  Errors use a fixed envelope
``{"error": {"code", "message", "detail"}}`` with a stable code->status map.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any

import uvicorn
from fastapi import Depends, FastAPI, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict
from starlette.concurrency import run_in_threadpool

from . import __version__, metrics, policy
from .authz import Authenticator, HttpIntrospector, Identity, StaticTokenStore, principal_matches
from .config import ServiceConfig
from .errors import (
    ForbiddenError,
    InvalidParameterError,
    RateLimitedError,
    ServiceError,
    UnauthenticatedError,
    WaitTimeoutError,
)
from .policy import PolicyResult, PolicySpec, WaitHandle, WaitRegistry, evaluate_policy
from .ratelimit import RateLimiter
from .store import Datastream, FileBackend, MemoryBackend, Sample, SampleStore

logger = logging.getLogger(__name__)


def iso_utc(epoch_s: float) -> str:
    return datetime.fromtimestamp(epoch_s, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def iso_utc_micros(micros: int) -> str:
    return iso_utc(micros / 1e6)


# ---------------------------------------------------------------------------
# Engine: everything the handlers need, wired once
# ---------------------------------------------------------------------------


@dataclass
class Engine:
    config: ServiceConfig
    store: SampleStore
    authenticator: Authenticator
    registry: WaitRegistry
    limiter: RateLimiter

    @classmethod
    def from_config(cls, config: ServiceConfig) -> "Engine":
        if config.storage == "file":
            backend: MemoryBackend | FileBackend = FileBackend(config.data_dir)
        elif config.storage == "memory":
            backend = MemoryBackend()
        else:
            raise ValueError(f"unknown storage backend {config.storage!r}")
        store = SampleStore(backend=backend, default_retention_cap=config.default_retention_cap)
        if config.introspection_url:
            introspector: Any = HttpIntrospector(config.introspection_url)
        elif config.token_store_path:
            introspector = StaticTokenStore.from_file(config.token_store_path)
        else:
            introspector = StaticTokenStore()
        registry = WaitRegistry(
            store,
            tick_interval_s=config.tick_interval_s,
            handle_retention_s=config.wait_retention_s,
            max_timeout_s=config.max_wait_timeout_s,
        )
        limiter = RateLimiter(
            {
                "ingest": (config.ingest_rate, config.ingest_burst),
                "evaluate": (config.evaluate_rate, config.evaluate_burst),
            }
        )
        authenticator = Authenticator(introspector=introspector, ttl_s=config.auth_cache_ttl_s)
        return cls(config=config, store=store, authenticator=authenticator, registry=registry, limiter=limiter)

    def close(self) -> None:
        self.registry.shutdown()
        self.store.close()


# ---------------------------------------------------------------------------
# Request bodies
# ---------------------------------------------------------------------------


class CreateDatastreamBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: str
    providers: list[str] = []
    queriers: list[str] = []
    default_decision: Any = None
    retention_cap: int | None = None


class PatchDatastreamBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    name: str | None = None
    owner: str | None = None
    providers: list[str] | None = None
    queriers: list[str] | None = None
    default_decision: Any = None


class AddSamplesBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    value: Any = None
    values: list[Any] | None = None


class AddSampleActionBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    datastream_id: str
    value: Any = None
    values: list[Any] | None = None


class MetricBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    datastream_id: str
    op: str
    op_param: float | None = None
    decision: Any = None


class PolicyEvalBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    metrics: list[MetricBody]
    policy_start_time: float | None = None
    policy_end_time: float | None = None
    policy_start_limit: int | None = None
    policy_end_limit: int | None = None
    target: str


class PolicyWaitBody(PolicyEvalBody):
    wait_for_decision: Any
    timeout_s: float = 300.0


def build_policy_spec(body: PolicyEvalBody) -> PolicySpec:
    interval = metrics.IntervalSpec(
        start_time=body.policy_start_time,
        end_time=body.policy_end_time,
        start_limit=body.policy_start_limit,
        end_limit=body.policy_end_limit,
    )
    specs = []
    for i, m in enumerate(body.metrics):
        op = metrics.parse_op(m.op, field_name=f"metrics[{i}].op")
        specs.append(
            metrics.MetricSpec(
                datastream_id=m.datastream_id,
                op=op,
                op_param=m.op_param,
                interval=None,
                decision=m.decision,
            )
        )
    return PolicySpec(metrics=tuple(specs), target=body.target, interval=interval)


# ---------------------------------------------------------------------------
# Wire views
# ---------------------------------------------------------------------------


def datastream_wire(meta: Datastream, sample_count: int) -> dict[str, Any]:
    return {
        "id": meta.id,
        "name": meta.name,
        "owner": meta.owner,
        "providers": sorted(meta.providers),
        "queriers": sorted(meta.queriers),
        "default_decision": meta.default_decision,
        "created_at": iso_utc_micros(meta.created_at_micros),
        "retention_cap": meta.retention_cap,
        "sample_count": sample_count,
    }


def sample_wire(ds_id: str, sample: Sample) -> dict[str, Any]:
    return {
        "datastream_id": ds_id,
        "seq": sample.seq,
        "timestamp": iso_utc_micros(sample.timestamp_micros),
        "value": sample.value,
    }


def policy_result_wire(result: PolicyResult) -> dict[str, Any]:
    return {
        "decision": result.decision,
        "selected_index": result.selected_index,
        "metric_values": [
            v if not isinstance(v, str) else {"error": v} for v in result.metric_values
        ],
        "evaluated_at": iso_utc(result.evaluated_at),
        "upper_seqs": result.upper_seqs,
    }


def policy_spec_wire(spec: PolicySpec) -> dict[str, Any]:
    out: dict[str, Any] = {
        "metrics": [
            {
                "datastream_id": m.datastream_id,
                "op": m.op,
                "op_param": m.op_param,
                "decision": m.decision,
            }
            for m in spec.metrics
        ]
    }
    interval = spec.interval
    if interval is not None:
        for wire_key, value in (
            ("policy_start_time", interval.start_time),
            ("policy_end_time", interval.end_time),
            ("policy_start_limit", interval.start_limit),
            ("policy_end_limit", interval.end_limit),
        ):
            if value is not None:
                out[wire_key] = value
    out["target"] = spec.target
    return out


def wait_wire(handle: WaitHandle) -> dict[str, Any]:
    return {
        "wait_id": handle.wait_id,
        "status": handle.status,
        "wait_for_decision": handle.wait_for_decision,
        "spec": policy_spec_wire(handle.spec),
        "created_at": iso_utc(handle.created_at),
        "deadline": iso_utc(handle.deadline),
        "last_result": None if handle.last_result is None else policy_result_wire(handle.last_result),
        "last_error": handle.last_error,
    }


# ---------------------------------------------------------------------------
# App factory
# ---------------------------------------------------------------------------


def create_app(config: ServiceConfig | None = None, engine: Engine | None = None) -> FastAPI:
    config = config or ServiceConfig()
    engine = engine or Engine.from_config(config)

    request_log_lock = threading.Lock()
    request_log = open(config.request_log_path, "a", encoding="utf-8") if config.request_log_path else None

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        engine.close()
        if request_log is not None:
            request_log.close()

    app = FastAPI(title="steer", version=__version__, lifespan=lifespan)
    app.state.engine = engine

    async def caller(request: Request) -> Identity:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise UnauthenticatedError("missing bearer token")
        token = header[7:].strip()
        identity = engine.authenticator.peek(token)
        if identity is None:
            # Introspection may be a remote call; keep it off the event loop.
            identity = await run_in_threadpool(engine.authenticator.authenticate, token)
        request.state.identity_id = identity.id
        return identity

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        headers = {}
        if isinstance(exc, RateLimitedError):
            headers["Retry-After"] = str(max(1, round(exc.retry_after_s)))
        return JSONResponse(status_code=exc.http_status, content=exc.to_wire(), headers=headers)

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(request: Request, exc: RequestValidationError):
        errors = [
            {
                "field": ".".join(str(p) for p in err.get("loc", ()) if p != "body"),
                "message": err.get("msg", "invalid"),
            }
            for err in exc.errors()
        ]
        wire = InvalidParameterError("request body failed validation", detail={"errors": errors}).to_wire()
        return JSONResponse(status_code=400, content=wire)

    @app.middleware("http")
    async def log_requests(request: Request, call_next):
        started = time.monotonic()
        response = await call_next(request)
        if request_log is not None:
            record = {
                "ts": iso_utc(time.time()),
                "method": request.method,
                "path": request.url.path,
                "status": response.status_code,
                "identity": getattr(request.state, "identity_id", None),
                "latency_ms": round((time.monotonic() - started) * 1000, 3),
            }
            with request_log_lock:
                request_log.write(json.dumps(record) + "\n")
                request_log.flush()
        return response

    # -- datastream lifecycle ------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "service": "steer", "version": __version__}

    @app.post("/datastreams", status_code=201)
    def create_datastream(body: CreateDatastreamBody, identity: Identity = Depends(caller)):
        meta = engine.store.create_datastream(
            name=body.name,
            creator=identity,
            providers=body.providers,
            queriers=body.queriers,
            default_decision=body.default_decision,
            retention_cap=body.retention_cap,
        )
        return datastream_wire(meta, sample_count=0)

    @app.get("/datastreams")
    def list_datastreams(
        identity: Identity = Depends(caller),
        limit: int = Query(default=100, ge=1, le=1000),
        offset: int = Query(default=0, ge=0),
    ):
        visible = engine.store.list_datastreams(caller=identity)
        page = visible[offset : offset + limit]
        return {
            "datastreams": [datastream_wire(m, engine.store.sample_count(m.id)) for m in page],
            "total": len(visible),
            "limit": limit,
            "offset": offset,
        }

    def _visible_datastream(ds_id: str, identity: Identity) -> Datastream:
        meta = engine.store.get_datastream(ds_id)
        held = meta.owner == identity.id or any(
            principal_matches(identity, p) for p in meta.providers | meta.queriers
        )
        if not held:
            raise ForbiddenError("no role held on this datastream", detail={"datastream_id": ds_id})
        return meta

    @app.get("/datastreams/{ds_id}")
    def get_datastream(ds_id: str, identity: Identity = Depends(caller)):
        meta = _visible_datastream(ds_id, identity)
        return datastream_wire(meta, engine.store.sample_count(ds_id))

    @app.patch("/datastreams/{ds_id}")
    def patch_datastream(ds_id: str, body: PatchDatastreamBody, identity: Identity = Depends(caller)):
        patch = body.model_dump(exclude_unset=True)
        meta = engine.store.update_datastream(ds_id, patch, identity)
        return datastream_wire(meta, engine.store.sample_count(ds_id))

    @app.delete("/datastreams/{ds_id}")
    def delete_datastream(ds_id: str, identity: Identity = Depends(caller)):
        engine.store.delete_datastream(ds_id, identity)
        return {"deleted": ds_id}

    # -- ingest ----------------------------------------------------------------

    def _ingest(ds_id: str, body_value: Any, body_values: list[Any] | None, identity: Identity):
        engine.limiter.check(identity.id, "ingest")
        if (body_value is None) == (body_values is None):
            raise InvalidParameterError(
                "provide exactly one of 'value' or 'values'", detail={"field": "value"}
            )
        if body_values is not None:
            samples = engine.store.ingest_batch(ds_id, body_values, identity)
            return {"samples": [sample_wire(ds_id, s) for s in samples]}
        sample = engine.store.ingest_sample(ds_id, body_value, identity)
        return sample_wire(ds_id, sample)

    # Ingest handlers run on the event loop: the store append is lock-bounded
    # microsecond work and skipping the threadpool hop roughly doubles
    # single-client throughput.
    @app.post("/datastreams/{ds_id}/samples")
    async def add_samples(ds_id: str, body: AddSamplesBody, identity: Identity = Depends(caller)):
        return _ingest(ds_id, body.value, body.values, identity)

    @app.post("/add_sample")
    async def add_sample_action(body: AddSampleActionBody, identity: Identity = Depends(caller)):
        return _ingest(body.datastream_id, body.value, body.values, identity)

    # -- policies ----------------------------------------------------------------

    @app.post("/policy_eval")
    def policy_eval(body: PolicyEvalBody, identity: Identity = Depends(caller)):
        engine.limiter.check(identity.id, "evaluate")
        spec = build_policy_spec(body)
        result = evaluate_policy(engine.store, spec, identity)
        return policy_result_wire(result)

    @app.post("/policy_wait")
    def policy_wait(
        body: PolicyWaitBody,
        identity: Identity = Depends(caller),
        block: bool = Query(default=True),
    ):
        engine.limiter.check(identity.id, "evaluate")
        spec = build_policy_spec(body)
        handle = engine.registry.create_wait(spec, body.wait_for_decision, body.timeout_s, identity)
        if block and not handle.is_terminal():
            handle = engine.registry.block_until_terminal(handle, config.long_poll_cap_s)
            if handle.status == policy.TIMED_OUT:
                raise WaitTimeoutError("policy wait timed out", detail={"wait": wait_wire(handle)})
        return wait_wire(handle)

    @app.get("/policy_wait/{wait_id}")
    def get_wait(
        wait_id: str,
        identity: Identity = Depends(caller),
        block: bool = Query(default=False),
    ):
        handle = engine.registry.get_wait(wait_id, identity)
        if block and not handle.is_terminal():
            handle = engine.registry.block_until_terminal(handle, config.long_poll_cap_s)
            if handle.status == policy.TIMED_OUT:
                raise WaitTimeoutError("policy wait timed out", detail={"wait": wait_wire(handle)})
        return wait_wire(handle)

    @app.delete("/policy_wait/{wait_id}")
    def cancel_wait(wait_id: str, identity: Identity = Depends(caller)):
        handle = engine.registry.cancel_wait(wait_id, identity)
        return wait_wire(handle)

    return app


# ---------------------------------------------------------------------------
# Serving
# ---------------------------------------------------------------------------


def serve(config: ServiceConfig) -> None:
    """Run the service in the foreground (used by the CLI)."""
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")


class EmbeddedServer:
    """A uvicorn server on an ephemeral loopback port, for tests and benches."""

    def __init__(self, config: ServiceConfig | None = None, engine: Engine | None = None):
        self.config = config or ServiceConfig()
        self.engine = engine or Engine.from_config(self.config)
        self.app = create_app(self.config, self.engine)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.bind((self.config.host, 0))
        self.port = sock.getsockname()[1]
        self._sock = sock
        self._server = uvicorn.Server(
            uvicorn.Config(self.app, log_level="error", workers=1, limit_concurrency=512)
        )
        self._thread = threading.Thread(
            target=self._server.run, kwargs={"sockets": [sock]}, name="steer-server", daemon=True
        )

    @property
    def base_url(self) -> str:
        return f"http://{self.config.host}:{self.port}"

    def start(self) -> "EmbeddedServer":
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("embedded server failed to start")
            time.sleep(0.01)
        return self

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)
        self._sock.close()
