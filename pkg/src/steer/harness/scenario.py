"""Scenario engine: emulate fleets of flows as step machines over the HTTP API.

A scenario config (JSON) declares datastreams to create, background monitor
feeders, flow templates (ordered steps), and a launch schedule.  Each flow
instance runs as an independent sequential task against a live service;
everything observable lands in an append-only JSON-lines event log from
which the run summary is computed.

Step kinds:
  transfer_stub / finalize_stub   sleep for duration_s
  compute_stub                    sleep, then produce a score from its script
  add_sample                      POST a value (literal or from a result key)
  policy_eval                     POST /policy_eval, storing the result
  policy_wait                     POST /policy_wait and block until terminal

Policy specs inside a scenario name datastreams by their scenario key via
``"datastream"``; the runner substitutes the created ids before sending.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any

import httpx

logger = logging.getLogger(__name__)


class ScenarioAborted(Exception):
    pass


class ApiCallError(Exception):
    def __init__(self, status: int, code: str, body: Any):
        super().__init__(f"{status} {code}")
        self.status = status
        self.code = code
        self.body = body


class ServiceClient:
    """Minimal HTTP client for the harness: bearer token, typed failures."""

    def __init__(self, base_url: str, token: str, timeout_s: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(
            timeout=httpx.Timeout(timeout_s, connect=5.0),
            headers={"Authorization": f"Bearer {token}"},
        )

    def call(self, method: str, path: str, body: Any = None, params: dict | None = None) -> Any:
        try:
            resp = self._client.request(method, self.base_url + path, json=body, params=params)
        except httpx.HTTPError as exc:
            raise ScenarioAborted(f"service unreachable: {exc!r}") from exc
        if resp.status_code >= 400:
            try:
                code = resp.json()["error"]["code"]
            except Exception:
                code = str(resp.status_code)
            raise ApiCallError(resp.status_code, code, resp.text)
        return resp.json()

    def close(self) -> None:
        self._client.close()


class EventLog:
    """Serialized multi-producer event sink, optionally mirrored to a file."""

    def __init__(self, path: str | None = None):
        self.records: list[dict] = []
        self._lock = threading.Lock()
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def emit(self, **record: Any) -> dict:
        with self._lock:
            record["seq"] = len(self.records)
            record["t"] = time.time()
            self.records.append(record)
            if self._fh is not None:
                self._fh.write(json.dumps(record) + "\n")
                self._fh.flush()
        return record

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


@dataclass
class Summary:
    flows_launched: dict[str, int]
    flows_completed: dict[str, int]
    launches_by_phase: dict[str, int]
    max_concurrency: int
    trigger_scan_index: int | None
    scans_after_trigger: int | None
    decision_sequence: list[tuple[int, Any]]
    phase_values_in_seq_order: list[float]
    errors: list[str]

    def to_dict(self) -> dict:
        return {
            "flows_launched": self.flows_launched,
            "flows_completed": self.flows_completed,
            "launches_by_phase": self.launches_by_phase,
            "max_concurrency": self.max_concurrency,
            "trigger_scan_index": self.trigger_scan_index,
            "scans_after_trigger": self.scans_after_trigger,
            "decision_sequence": [[i, d] for i, d in self.decision_sequence],
            "phase_values_in_seq_order": self.phase_values_in_seq_order,
            "errors": self.errors,
        }


def _lookup(context: dict, path: str) -> Any:
    node: Any = context
    for part in path.split("."):
        if isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise ScenarioAborted(f"value source {path!r} not found in flow state")
    return node


class ScenarioRunner:
    def __init__(self, config: dict, base_url: str, log_path: str | None = None):
        self.config = config
        self.base_url = base_url
        self.log = EventLog(log_path)
        self.rng = random.Random(config.get("seed", 0))
        self.stop = threading.Event()
        self.abort_reason: str | None = None
        self._gauge_lock = threading.Lock()
        self._active_flows = 0
        self._max_concurrency = 0
        self._phase = 0.0
        self._stream_ids: dict[str, str] = {}
        self._clients: dict[str, ServiceClient] = {}
        self._flow_threads: list[threading.Thread] = []
        self._monitor_threads: list[threading.Thread] = []
        self.errors: list[str] = []

    # -- infrastructure ---------------------------------------------------------

    def client(self, token: str) -> ServiceClient:
        if token not in self._clients:
            self._clients[token] = ServiceClient(self.base_url, token)
        return self._clients[token]

    def _gauges(self, delta: int = 0) -> tuple[int, float]:
        with self._gauge_lock:
            self._active_flows += delta
            self._max_concurrency = max(self._max_concurrency, self._active_flows)
            return self._active_flows, self._phase

    def _note_phase_sample(self, stream_key: str, value: float) -> None:
        if stream_key != self.config.get("phase_datastream"):
            return
        with self._gauge_lock:
            self._phase = max(self._phase, float(value))

    def _abort(self, reason: str) -> None:
        self.abort_reason = self.abort_reason or reason
        self.errors.append(reason)
        self.stop.set()

    def stream_id(self, ref: str) -> str:
        if ref in self._stream_ids:
            return self._stream_ids[ref]
        return ref  # literal datastream id passthrough

    def resolve_policy_spec(self, spec: dict) -> dict:
        out = dict(spec)
        out["metrics"] = []
        for m in spec.get("metrics", []):
            m = dict(m)
            if "datastream" in m:
                m["datastream_id"] = self.stream_id(m.pop("datastream"))
            out["metrics"].append(m)
        return out

    # -- setup -------------------------------------------------------------------

    def setup_datastreams(self) -> None:
        admin_token = self.config.get("defaults", {}).get("admin_token", "tkn-admin")
        for ds in self.config.get("datastreams", []):
            token = ds.get("token", admin_token)
            body = {
                "name": ds["name"],
                "providers": ds.get("providers", []),
                "queriers": ds.get("queriers", []),
                "default_decision": ds.get("default_decision"),
            }
            if ds.get("retention_cap"):
                body["retention_cap"] = ds["retention_cap"]
            created = self.client(token).call("POST", "/datastreams", body)
            self._stream_ids[ds["key"]] = created["id"]
            seeder = self.client(ds.get("initial_samples_token", token))
            for value in ds.get("initial_samples", []):
                ack = seeder.call(
                    "POST", "/add_sample", {"datastream_id": created["id"], "value": value}
                )
                self._note_phase_sample(ds["key"], value)
                active, phase = self._gauges()
                self.log.emit(
                    flow="setup", template=None, index=None, step="add_sample",
                    outcome="ok", concurrency=active, phase=phase,
                    detail={"datastream": ds["key"], "value": value, "ack_seq": ack["seq"]},
                )

    # -- monitors -----------------------------------------------------------------

    def run_monitor(self, spec: dict) -> None:
        """One sample per period (jitter <= 10%) until the scenario stops."""
        token = spec.get("token", self.config.get("defaults", {}).get("monitor_token", "tkn-monitor"))
        client = self.client(token)
        ds_id = self.stream_id(spec["datastream"])
        values = spec["values"]
        period = float(spec["period_s"])
        rng = random.Random(self.rng.randint(0, 2**31))
        i = 0
        while not self.stop.is_set():
            value = values[i % len(values)]
            i += 1
            attempt = 0
            while True:
                try:
                    ack = client.call("POST", "/add_sample", {"datastream_id": ds_id, "value": value})
                    active, phase = self._gauges()
                    self.log.emit(
                        flow=f"monitor-{spec['datastream']}", template=None, index=None,
                        step="add_sample", outcome="ok", concurrency=active, phase=phase,
                        detail={"datastream": spec["datastream"], "value": value, "ack_seq": ack["seq"]},
                    )
                    break
                except ApiCallError as exc:
                    if exc.code == "RateLimited":
                        attempt += 1
                        if self.stop.wait(min(period, 0.05 * (2**attempt))):
                            return
                        continue
                    if exc.code == "Forbidden":
                        self.log.emit(
                            flow=f"monitor-{spec['datastream']}", template=None, index=None,
                            step="add_sample", outcome="error:Forbidden",
                            concurrency=self._gauges()[0], phase=self._phase, detail={},
                        )
                        self._abort(f"monitor on {spec['datastream']} lost provider role")
                        return
                    self._abort(f"monitor on {spec['datastream']} failed: {exc.code}")
                    return
                except ScenarioAborted as exc:
                    self._abort(str(exc))
                    return
            if self.stop.wait(period * (1 + rng.uniform(-0.1, 0.1))):
                return

    # -- flows --------------------------------------------------------------------

    def run_flow(self, template_name: str, index: int, token: str) -> None:
        template = self.config["templates"][template_name]
        flow_name = f"{template_name}-{index}"
        client = self.client(token)
        context: dict[str, Any] = {"flow_index": index}
        active, phase = self._gauges(+1)
        self.log.emit(
            flow=flow_name, template=template_name, index=index, step="start",
            outcome="ok", concurrency=active, phase=phase, detail={},
        )
        try:
            for step in template["steps"]:
                if self.stop.is_set():
                    self.log.emit(
                        flow=flow_name, template=template_name, index=index, step="aborted",
                        outcome="error:ScenarioAborted", concurrency=self._gauges()[0],
                        phase=self._phase, detail={},
                    )
                    return
                self._run_step(client, flow_name, template_name, index, step, context)
            self.log.emit(
                flow=flow_name, template=template_name, index=index, step="done",
                outcome="ok", concurrency=self._gauges()[0], phase=self._phase, detail={},
            )
        except (ApiCallError, ScenarioAborted) as exc:
            reason = exc.code if isinstance(exc, ApiCallError) else str(exc)
            self.log.emit(
                flow=flow_name, template=template_name, index=index, step="failed",
                outcome=f"error:{reason}", concurrency=self._gauges()[0], phase=self._phase, detail={},
            )
            self._abort(f"flow {flow_name} failed: {reason}")
        finally:
            self._gauges(-1)

    def _score_for(self, step: dict, index: int) -> float:
        script = step.get("score", {})
        if "by_index" in script:
            series = script["by_index"]
            return float(series[min(index - 1, len(series) - 1)])
        if "constant" in script:
            return float(script["constant"])
        raise ScenarioAborted(f"compute_stub has no usable score script: {script!r}")

    def _run_step(self, client, flow_name, template_name, index, step, context) -> None:
        kind = step["kind"]
        detail: dict[str, Any] = {}
        outcome = "ok"
        try:
            if kind in ("transfer_stub", "finalize_stub"):
                time.sleep(float(step.get("duration_s", 0.0)))
            elif kind == "compute_stub":
                time.sleep(float(step.get("duration_s", 0.0)))
                score = self._score_for(step, index)
                result = {"score": score, "result_quality": score}
                context[step.get("result_key", "ComputationResult")] = result
                detail["score"] = score
            elif kind == "add_sample":
                ds_key = step["datastream"]
                value = _lookup(context, step["value_from"]) if "value_from" in step else step["value"]
                ack = client.call(
                    "POST", "/add_sample", {"datastream_id": self.stream_id(ds_key), "value": value}
                )
                self._note_phase_sample(ds_key, value)
                context[step.get("result_key", "SampleResult")] = ack
                detail = {"datastream": ds_key, "value": value, "ack_seq": ack["seq"]}
            elif kind == "policy_eval":
                result = client.call("POST", "/policy_eval", self.resolve_policy_spec(step["spec"]))
                context[step.get("result_key", "PolicyDecision")] = result
                detail = {"decision": result["decision"], "selected_index": result["selected_index"]}
            elif kind == "policy_wait":
                body = self.resolve_policy_spec(step["spec"])
                body["wait_for_decision"] = step["wait_for"]
                body["timeout_s"] = step.get("timeout_s", 60.0)
                handle = client.call("POST", "/policy_wait", body, params={"block": "true"})
                while handle["status"] == "active" and not self.stop.is_set():
                    handle = client.call(
                        "GET", f"/policy_wait/{handle['wait_id']}", params={"block": "true"}
                    )
                context[step.get("result_key", "WaitPolicyDecision")] = handle
                detail = {"status": handle["status"], "wait_id": handle["wait_id"]}
                if handle["status"] != "succeeded":
                    raise ScenarioAborted(f"wait ended {handle['status']} in {flow_name}")
            else:
                raise ScenarioAborted(f"unknown step kind {kind!r}")
        except ApiCallError as exc:
            if exc.code == "WaitTimeout":
                detail, outcome = {"status": "timed_out"}, "error:WaitTimeout"
            else:
                outcome = f"error:{exc.code}"
            if not step.get("allow_error"):
                self.log.emit(
                    flow=flow_name, template=template_name, index=index, step=kind,
                    outcome=outcome, concurrency=self._gauges()[0], phase=self._phase, detail=detail,
                )
                raise
        active, phase = self._gauges()
        self.log.emit(
            flow=flow_name, template=template_name, index=index, step=kind,
            outcome=outcome, concurrency=active, phase=phase, detail=detail,
        )

    # -- schedule ------------------------------------------------------------------

    def run(self) -> Summary:
        try:
            self.setup_datastreams()
        except (ApiCallError, ScenarioAborted) as exc:
            raise ScenarioAborted(f"scenario setup failed: {exc}") from exc

        for monitor in self.config.get("monitors", []):
            thread = threading.Thread(target=self.run_monitor, args=(monitor,), daemon=True)
            self._monitor_threads.append(thread)
            thread.start()

        flow_token_default = self.config.get("defaults", {}).get("flow_token", "tkn-runner")
        for launch in self.config.get("launches", []):
            template = launch["template"]
            token = launch.get("token", flow_token_default)
            spawn_at = {s["index"]: s for s in launch.get("spawn_at_index", [])}
            interarrival = float(launch.get("interarrival_s", 0.0))
            for index in range(1, int(launch["count"]) + 1):
                if self.stop.is_set():
                    break
                active, phase = self._gauges()
                self.log.emit(
                    flow="scheduler", template=template, index=index, step="launch",
                    outcome="ok", concurrency=active, phase=phase, detail={},
                )
                thread = threading.Thread(target=self.run_flow, args=(template, index, token), daemon=True)
                self._flow_threads.append(thread)
                thread.start()
                if index in spawn_at:
                    extra = spawn_at[index]
                    self.log.emit(
                        flow="scheduler", template=extra["template"], index=1, step="launch",
                        outcome="ok", concurrency=self._gauges()[0], phase=self._phase, detail={},
                    )
                    extra_thread = threading.Thread(
                        target=self.run_flow,
                        args=(extra["template"], 1, extra.get("token", token)),
                        daemon=True,
                    )
                    self._flow_threads.append(extra_thread)
                    extra_thread.start()
                if interarrival and index < int(launch["count"]):
                    if self.stop.wait(interarrival):
                        break

        for thread in self._flow_threads:
            thread.join(timeout=120)
        self.stop.set()
        for thread in self._monitor_threads:
            thread.join(timeout=10)
        for client in self._clients.values():
            client.close()
        self.log.close()
        if self.abort_reason is not None:
            raise ScenarioAborted(self.abort_reason)
        return self.summarize()

    # -- summary -------------------------------------------------------------------

    def summarize(self) -> Summary:
        records = self.log.records
        launched: dict[str, int] = {}
        completed: dict[str, int] = {}
        launches_by_phase: dict[str, int] = {"1": 0, "2": 0, "3": 0}
        for r in records:
            if r["flow"] == "scheduler" and r["step"] == "launch":
                launched[r["template"]] = launched.get(r["template"], 0) + 1
                bucket = str(int(r["phase"])) if r["phase"] else "1"
                launches_by_phase[bucket] = launches_by_phase.get(bucket, 0) + 1
            if r["step"] == "done":
                completed[r["template"]] = completed.get(r["template"], 0) + 1

        trigger_template = self.config.get("trigger_template")
        completion = self.config.get("completion_decision")
        decision_sequence: list[tuple[int, Any]] = []
        trigger_index: int | None = None
        if trigger_template is not None:
            evals = [
                r for r in records
                if r["template"] == trigger_template and r["step"] == "policy_eval" and r["outcome"] == "ok"
            ]
            decision_sequence = sorted((r["index"], r["detail"]["decision"]) for r in evals)
            if completion is not None:
                matching = [i for i, d in decision_sequence if d == completion]
                trigger_index = min(matching) if matching else None

        scans_after = None
        if trigger_index is not None and trigger_template in launched:
            scans_after = launched[trigger_template] - trigger_index

        phase_key = self.config.get("phase_datastream")
        phase_samples = sorted(
            (r["detail"]["ack_seq"], r["detail"]["value"])
            for r in records
            if r["step"] == "add_sample" and r["outcome"] == "ok"
            and r["detail"].get("datastream") == phase_key
        )
        phase_values = [v for _, v in phase_samples]

        return Summary(
            flows_launched=launched,
            flows_completed=completed,
            launches_by_phase=launches_by_phase,
            max_concurrency=self._max_concurrency,
            trigger_scan_index=trigger_index,
            scans_after_trigger=scans_after,
            decision_sequence=decision_sequence,
            phase_values_in_seq_order=phase_values,
            errors=self.errors,
        )


def run_scenario(config: dict, base_url: str, log_path: str | None = None) -> Summary:
    return ScenarioRunner(config, base_url, log_path=log_path).run()
