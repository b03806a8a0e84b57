"""Policy evaluation (min/max selection over metrics) and blocking waits.

A policy computes every metric against snapshots taken together, selects
the extreme value for its target (ties break to the earliest-listed
metric), and returns the winning metric's decision payload, falling back
to the winning datastream's default decision.

A policy-wait registers a policy plus a target decision; the registry
re-evaluates it on every ingest to a referenced datastream and on a
periodic tick (trailing time windows change as samples age out even with
no ingest), completing the wait when the evaluated decision structurally
equals the target.
"""

from __future__ import annotations

import logging
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

from . import authz
from .authz import Action, Identity
from .errors import (
    DATA_DEPENDENT_METRIC_ERRORS,
    ForbiddenError,
    InvalidParameterError,
    MissingDecisionError,
    NotFoundError,
    PolicyUndecidableError,
    ServiceError,
)
from .metrics import IntervalSpec, MetricSpec, compute_metric
from .store import SampleStore

logger = logging.getLogger(__name__)


def decisions_equal(a: Any, b: Any) -> bool:
    """Deep structural equality over JSON-compatible values.

    Numbers compare by value (2 == 2.0) but bools never equal numbers,
    mirroring the JSON type split rather than Python's bool/int subtyping.
    """
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return float(a) == float(b)
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(decisions_equal(v, b[k]) for k, v in a.items())
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(decisions_equal(x, y) for x, y in zip(a, b))
    return type(a) is type(b) and a == b


@dataclass(frozen=True)
class PolicySpec:
    """Ordered metrics plus the comparison target and a shared interval."""

    metrics: tuple[MetricSpec, ...]
    target: str  # "min" | "max"
    interval: IntervalSpec | None = None

    def __post_init__(self) -> None:
        if self.target not in ("min", "max"):
            raise InvalidParameterError(
                f"policy target must be 'min' or 'max', not {self.target!r}", detail={"field": "target"}
            )
        if not self.metrics:
            raise InvalidParameterError("a policy needs at least one metric", detail={"field": "metrics"})

    def datastream_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for m in self.metrics:
            seen.setdefault(m.datastream_id)
        return list(seen)


@dataclass
class PolicyResult:
    """Outcome of one evaluation: the winning decision and the evidence."""

    decision: Any
    selected_index: int
    metric_values: list[float | str]  # value, or the error code for that metric
    evaluated_at: float
    upper_seqs: dict[str, int]


def evaluate_policy(
    store: SampleStore,
    spec: PolicySpec,
    caller: Identity | None,
    eval_time_s: float | None = None,
) -> PolicyResult:
    """Evaluate a policy for a caller (None skips authorization re-checks).

    Data-dependent metric failures (empty interval, too few samples) are
    recorded per metric and excluded from selection; when nothing remains
    the policy is undecidable.  Malformed specs raise immediately.
    """
    ids = spec.datastream_ids()
    streams = {ds_id: store.get_datastream(ds_id) for ds_id in ids}
    if caller is not None:
        for ds_id, meta in streams.items():
            if not authz.authorize(caller, meta, Action.QUERY):
                raise ForbiddenError(
                    "querier role required to evaluate policies",
                    detail={"datastream_id": ds_id},
                )
    snapshots = {ds_id: store.snapshot(ds_id) for ds_id in ids}
    now = time.time() if eval_time_s is None else eval_time_s

    values: list[float | str] = []
    for metric in spec.metrics:
        interval = metric.interval if metric.interval is not None else spec.interval
        effective = MetricSpec(
            datastream_id=metric.datastream_id,
            op=metric.op,
            op_param=metric.op_param,
            interval=interval,
            decision=metric.decision,
        )
        try:
            values.append(compute_metric(effective, snapshots[metric.datastream_id], now))
        except DATA_DEPENDENT_METRIC_ERRORS as exc:
            values.append(exc.code)

    selected = -1
    best: float | None = None
    for i, value in enumerate(values):
        if isinstance(value, str):
            continue
        if best is None or (value > best if spec.target == "max" else value < best):
            best, selected = value, i
    if selected < 0:
        raise PolicyUndecidableError(
            "every metric evaluation failed", detail={"metric_values": values}
        )

    winner = spec.metrics[selected]
    decision = winner.decision
    if decision is None:
        decision = streams[winner.datastream_id].default_decision
    if decision is None:
        raise MissingDecisionError(
            "selected metric has neither an explicit nor a default decision",
            detail={"selected_index": selected, "datastream_id": winner.datastream_id},
        )
    return PolicyResult(
        decision=decision,
        selected_index=selected,
        metric_values=values,
        evaluated_at=now,
        upper_seqs={ds_id: snapshots[ds_id].upper_seq for ds_id in ids},
    )


# ---------------------------------------------------------------------------
# Policy waits
# ---------------------------------------------------------------------------

ACTIVE = "active"
SUCCEEDED = "succeeded"
FAILED = "failed"
TIMED_OUT = "timed_out"
CANCELLED = "cancelled"
TERMINAL = (SUCCEEDED, FAILED, TIMED_OUT, CANCELLED)


@dataclass
class WaitHandle:
    """A registered policy-wait.  Terminal statuses are final."""

    wait_id: str
    spec: PolicySpec
    wait_for_decision: Any
    created_by: str
    created_at: float
    deadline: float
    status: str = ACTIVE
    last_result: PolicyResult | None = None
    last_error: str | None = None
    terminal_at: float | None = None
    _cond: threading.Condition = field(default_factory=threading.Condition, repr=False)

    def is_terminal(self) -> bool:
        return self.status in TERMINAL

    def _finish(self, status: str) -> None:
        # Callers hold self._cond.
        self.status = status
        self.terminal_at = time.time()
        self._cond.notify_all()


class WaitRegistry:
    """Tracks active waits, triggering re-evaluation on ingest and on a tick.

    Authorization is checked when the wait is created, not on re-evaluation;
    revoking a querier role takes effect for new requests only.  Terminal
    handles are retained for ``handle_retention_s`` so callers can poll the
    outcome, then forgotten.
    """

    def __init__(
        self,
        store: SampleStore,
        tick_interval_s: float = 5.0,
        handle_retention_s: float = 3600.0,
        max_timeout_s: float = 86400.0,
        executor_workers: int = 4,
    ):
        self._store = store
        self.tick_interval_s = tick_interval_s
        self.handle_retention_s = handle_retention_s
        self.max_timeout_s = max_timeout_s
        self._lock = threading.Lock()
        self._handles: dict[str, WaitHandle] = {}
        self._by_stream: dict[str, set[str]] = {}
        self._executor = ThreadPoolExecutor(max_workers=executor_workers, thread_name_prefix="wait-eval")
        self._stop = threading.Event()
        self._ticker = threading.Thread(target=self._tick_loop, name="wait-tick", daemon=True)
        store.on_ingest(self.notify_ingest)
        store.on_delete(self.notify_delete)
        self._ticker.start()

    # -- lifecycle -------------------------------------------------------------

    def create_wait(
        self,
        spec: PolicySpec,
        wait_for_decision: Any,
        timeout_s: float,
        caller: Identity,
    ) -> WaitHandle:
        if not isinstance(timeout_s, (int, float)) or isinstance(timeout_s, bool) or timeout_s <= 0:
            raise InvalidParameterError("timeout_s must be positive", detail={"field": "timeout_s"})
        if timeout_s > self.max_timeout_s:
            raise InvalidParameterError(
                f"timeout_s exceeds the configured maximum of {self.max_timeout_s}s",
                detail={"field": "timeout_s"},
            )
        now = time.time()
        handle = WaitHandle(
            wait_id=uuid.uuid4().hex,
            spec=spec,
            wait_for_decision=wait_for_decision,
            created_by=caller.id,
            created_at=now,
            deadline=now + float(timeout_s),
        )
        # Initial evaluation runs with the caller's authorization; failures
        # (Forbidden, NotFound, undecidable...) propagate to the caller.
        result = evaluate_policy(self._store, spec, caller)
        with handle._cond:
            handle.last_result = result
            if decisions_equal(result.decision, wait_for_decision):
                handle._finish(SUCCEEDED)
        with self._lock:
            self._handles[handle.wait_id] = handle
        if handle.is_terminal():
            return handle
        # Subscribe, then re-check: an ingest racing with registration must
        # not be lost.
        with self._lock:
            for ds_id in spec.datastream_ids():
                self._by_stream.setdefault(ds_id, set()).add(handle.wait_id)
        self._reevaluate(handle)
        return handle

    def get_wait(self, wait_id: str, caller: Identity) -> WaitHandle:
        handle = self._get(wait_id)
        if handle.created_by != caller.id:
            for ds_id in handle.spec.datastream_ids():
                try:
                    meta = self._store.get_datastream(ds_id)
                except NotFoundError:
                    continue
                if not authz.authorize(caller, meta, Action.QUERY):
                    raise ForbiddenError(
                        "not the wait creator and not a querier of every referenced datastream",
                        detail={"wait_id": wait_id},
                    )
        return handle

    def cancel_wait(self, wait_id: str, caller: Identity) -> WaitHandle:
        handle = self._get(wait_id)
        if handle.created_by != caller.id:
            raise ForbiddenError("only the wait creator may cancel it", detail={"wait_id": wait_id})
        with handle._cond:
            if not handle.is_terminal():
                handle._finish(CANCELLED)
        self._unsubscribe(handle)
        return handle

    def block_until_terminal(self, handle: WaitHandle, max_block_s: float) -> WaitHandle:
        """Long-poll helper: wait until terminal, the wait deadline, or the cap."""
        deadline = time.monotonic() + max_block_s
        with handle._cond:
            while not handle.is_terminal():
                now = time.time()
                if now >= handle.deadline:
                    handle._finish(TIMED_OUT)
                    break
                remaining = min(deadline - time.monotonic(), handle.deadline - now)
                if remaining <= 0:
                    break
                handle._cond.wait(timeout=remaining)
        return handle

    def _get(self, wait_id: str) -> WaitHandle:
        with self._lock:
            handle = self._handles.get(wait_id)
        if handle is None:
            raise NotFoundError(f"wait {wait_id} not found", detail={"wait_id": wait_id})
        return handle

    def _unsubscribe(self, handle: WaitHandle) -> None:
        with self._lock:
            for ds_id in handle.spec.datastream_ids():
                self._by_stream.get(ds_id, set()).discard(handle.wait_id)

    # -- triggers ---------------------------------------------------------------

    def notify_ingest(self, ds_id: str) -> None:
        with self._lock:
            wait_ids = list(self._by_stream.get(ds_id, ()))
            handles = [self._handles[w] for w in wait_ids if w in self._handles]
        for handle in handles:
            self._executor.submit(self._reevaluate, handle)

    def notify_delete(self, ds_id: str) -> None:
        with self._lock:
            wait_ids = list(self._by_stream.pop(ds_id, ()))
            handles = [self._handles[w] for w in wait_ids if w in self._handles]
        for handle in handles:
            with handle._cond:
                if not handle.is_terminal():
                    handle.last_error = "NotFound"
                    handle._finish(FAILED)
            self._unsubscribe(handle)

    def _reevaluate(self, handle: WaitHandle) -> None:
        if handle.is_terminal():
            return
        try:
            # System re-evaluation: authorization was checked at creation.
            result = evaluate_policy(self._store, handle.spec, caller=None)
            error = None
        except NotFoundError:
            with handle._cond:
                if not handle.is_terminal():
                    handle.last_error = "NotFound"
                    handle._finish(FAILED)
            self._unsubscribe(handle)
            return
        except ServiceError as exc:
            result, error = None, exc.code
        except Exception:  # pragma: no cover - defensive
            logger.exception("wait %s re-evaluation failed unexpectedly", handle.wait_id)
            result, error = None, "Internal"
        with handle._cond:
            if handle.is_terminal():
                return
            if result is not None:
                handle.last_result = result
                handle.last_error = None
                if decisions_equal(result.decision, handle.wait_for_decision):
                    handle._finish(SUCCEEDED)
            else:
                # Evaluation errors while waiting do not terminate the wait.
                handle.last_error = error
            if handle.status == ACTIVE and time.time() >= handle.deadline:
                handle._finish(TIMED_OUT)
        if handle.is_terminal():
            self._unsubscribe(handle)

    def _tick_loop(self) -> None:
        while not self._stop.wait(self.tick_interval_s):
            self.tick()

    def tick(self) -> None:
        """One maintenance pass: re-evaluate active waits, expire, purge."""
        now = time.time()
        with self._lock:
            handles = list(self._handles.values())
        for handle in handles:
            if handle.is_terminal():
                if handle.terminal_at is not None and now - handle.terminal_at > self.handle_retention_s:
                    with self._lock:
                        self._handles.pop(handle.wait_id, None)
                    self._unsubscribe(handle)
                continue
            if now >= handle.deadline:
                with handle._cond:
                    if not handle.is_terminal():
                        handle._finish(TIMED_OUT)
                self._unsubscribe(handle)
            else:
                self._reevaluate(handle)

    def active_count(self) -> int:
        with self._lock:
            return sum(1 for h in self._handles.values() if not h.is_terminal())

    def shutdown(self) -> None:
        """Stop the tick loop and wake every blocked poller with current state."""
        self._stop.set()
        self._ticker.join(timeout=2.0)
        self._executor.shutdown(wait=True)
        with self._lock:
            handles = list(self._handles.values())
        for handle in handles:
            with handle._cond:
                handle._cond.notify_all()
