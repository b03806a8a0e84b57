"""Datastream lifecycle, sample ingestion, retention, and snapshot reads.

Samples for one datastream live in a pair of parallel numpy columns
(timestamps in microseconds, float64 values) with a logical ``[start, end)``
window.  Retained seqs always form a contiguous run, so seq numbers are
implicit: ``first_seq + offset``.  Eviction advances ``start`` without moving
data and growth always allocates a fresh buffer, which makes snapshot views
stable for their whole lifetime even while ingest continues.

Persistence is pluggable: an in-memory backend (nothing survives the
process) and a file backend writing an append-only JSON-lines sample log
plus one metadata file per datastream, compacted once enough dead records
accumulate.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np

from . import authz
from .authz import Action, ANY_AUTHENTICATED, Identity
from .errors import ForbiddenError, InvalidParameterError, NotFoundError


@dataclass(frozen=True)
class Sample:
    """One retained measurement: per-stream seq, service timestamp, value."""

    seq: int
    timestamp_micros: int
    value: float


@dataclass
class Datastream:
    """Datastream metadata record; sample data lives in the store."""

    id: str
    name: str
    owner: str
    providers: set[str]
    queriers: set[str]
    default_decision: Any
    created_at_micros: int
    retention_cap: int

    def view(self) -> "Datastream":
        """Defensive copy handed to callers so grants stay store-owned."""
        return dataclasses.replace(self, providers=set(self.providers), queriers=set(self.queriers))


@dataclass(frozen=True)
class Snapshot:
    """Immutable view of one datastream's retained samples.

    ``timestamps`` and ``values`` are read-only numpy views ordered by
    (timestamp, seq); because service timestamps are non-decreasing in seq
    order this is also plain seq order.  ``first_seq`` is the seq of the
    first sample in the view; ``upper_seq`` the highest seq assigned at
    snapshot time (0 for a never-written stream).
    """

    datastream_id: str
    first_seq: int
    upper_seq: int
    timestamps: np.ndarray
    values: np.ndarray

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def sample(self, offset: int) -> Sample:
        return Sample(
            seq=self.first_seq + offset,
            timestamp_micros=int(self.timestamps[offset]),
            value=float(self.values[offset]),
        )

    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(self.n)]


class _Columns:
    """Growable (timestamp, value) columns with a logical live window."""

    def __init__(self, capacity: int = 1024):
        self.ts = np.empty(capacity, dtype=np.int64)
        self.val = np.empty(capacity, dtype=np.float64)
        self.start = 0
        self.end = 0
        self.first_seq = 1  # seq of the sample at index `start`

    @property
    def count(self) -> int:
        return self.end - self.start

    @property
    def next_seq(self) -> int:
        return self.first_seq + self.count

    def _ensure_room(self, extra: int) -> None:
        if self.end + extra <= self.ts.shape[0]:
            return
        live = self.count
        capacity = max(1024, 2 * (live + extra))
        # Fresh buffers, never in-place moves: existing snapshot views keep
        # referencing the old arrays untouched.
        ts = np.empty(capacity, dtype=np.int64)
        val = np.empty(capacity, dtype=np.float64)
        ts[:live] = self.ts[self.start : self.end]
        val[:live] = self.val[self.start : self.end]
        self.ts, self.val = ts, val
        self.start, self.end = 0, live

    def append(self, timestamps: Sequence[int], values: Sequence[float]) -> None:
        k = len(values)
        self._ensure_room(k)
        self.ts[self.end : self.end + k] = timestamps
        self.val[self.end : self.end + k] = values
        self.end += k

    def evict_to(self, cap: int) -> int:
        """Drop lowest-seq samples until count <= cap; returns evicted count."""
        excess = self.count - cap
        if excess <= 0:
            return 0
        self.start += excess
        self.first_seq += excess
        return excess

    def snapshot_views(self) -> tuple[np.ndarray, np.ndarray]:
        ts = self.ts[self.start : self.end]
        val = self.val[self.start : self.end]
        ts.flags.writeable = False
        val.flags.writeable = False
        return ts, val

    def live_records(self) -> Iterator[tuple[int, int, float]]:
        for i in range(self.start, self.end):
            yield self.first_seq + (i - self.start), int(self.ts[i]), float(self.val[i])


@dataclass
class _StreamState:
    meta: Datastream
    cols: _Columns
    lock: threading.Lock
    last_ts: int = 0


# ---------------------------------------------------------------------------
# Persistence backends
# ---------------------------------------------------------------------------


class MemoryBackend:
    """Volatile backend: nothing persisted, nothing loaded."""

    def load(self) -> tuple[list[Datastream], dict[str, list[tuple[int, int, float]]]]:
        return [], {}

    def put_meta(self, meta: Datastream) -> None:
        pass

    def delete_meta(self, ds_id: str, dead_samples: int) -> None:
        pass

    def append(self, ds_id: str, records: list[tuple[int, int, float]], evicted: int) -> None:
        pass

    def wants_compaction(self) -> bool:
        return False

    def rewrite(self, records: Iterable[tuple[str, int, int, float]]) -> None:
        pass

    def close(self) -> None:
        pass


class FileBackend:
    """Append-log persistence under one directory.

    Layout:
      ``<root>/samples.log``   one JSON object per line with fields
                               (datastream_id, seq, timestamp_micros, value)
      ``<root>/meta/<id>.json``  datastream metadata (name, roles,
                               default_decision, retention cap)

    Eviction and deletion leave dead lines in the log; once ``compact_threshold``
    dead records accumulate the store rewrites the log with live data only.
    """

    def __init__(self, root: str | Path, compact_threshold: int = 100_000):
        self.root = Path(root)
        self.meta_dir = self.root / "meta"
        self.log_path = self.root / "samples.log"
        self.meta_dir.mkdir(parents=True, exist_ok=True)
        self.compact_threshold = compact_threshold
        self._dead = 0
        self._log = open(self.log_path, "a", encoding="utf-8")

    def load(self) -> tuple[list[Datastream], dict[str, list[tuple[int, int, float]]]]:
        metas = []
        for path in sorted(self.meta_dir.glob("*.json")):
            with open(path, encoding="utf-8") as fh:
                m = json.load(fh)
            metas.append(
                Datastream(
                    id=m["id"],
                    name=m["name"],
                    owner=m["owner"],
                    providers=set(m["providers"]),
                    queriers=set(m["queriers"]),
                    default_decision=m["default_decision"],
                    created_at_micros=m["created_at_micros"],
                    retention_cap=m["retention_cap"],
                )
            )
        known = {m.id: m for m in metas}
        samples: dict[str, list[tuple[int, int, float]]] = {m.id: [] for m in metas}
        if self.log_path.exists():
            with open(self.log_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    ds_id = rec["datastream_id"]
                    if ds_id not in known:
                        self._dead += 1
                        continue
                    samples[ds_id].append((rec["seq"], rec["timestamp_micros"], rec["value"]))
        for ds_id, recs in samples.items():
            cap = known[ds_id].retention_cap
            if len(recs) > cap:
                self._dead += len(recs) - cap
                samples[ds_id] = recs[-cap:]
        return metas, samples

    def put_meta(self, meta: Datastream) -> None:
        doc = {
            "id": meta.id,
            "name": meta.name,
            "owner": meta.owner,
            "providers": sorted(meta.providers),
            "queriers": sorted(meta.queriers),
            "default_decision": meta.default_decision,
            "created_at_micros": meta.created_at_micros,
            "retention_cap": meta.retention_cap,
        }
        tmp = self.meta_dir / f".{meta.id}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
        os.replace(tmp, self.meta_dir / f"{meta.id}.json")

    def delete_meta(self, ds_id: str, dead_samples: int) -> None:
        try:
            os.unlink(self.meta_dir / f"{ds_id}.json")
        except FileNotFoundError:
            pass
        self._dead += dead_samples

    def append(self, ds_id: str, records: list[tuple[int, int, float]], evicted: int) -> None:
        lines = [
            json.dumps(
                {"datastream_id": ds_id, "seq": seq, "timestamp_micros": ts, "value": value}
            )
            for seq, ts, value in records
        ]
        self._log.write("\n".join(lines) + "\n")
        self._log.flush()
        self._dead += evicted

    def wants_compaction(self) -> bool:
        return self._dead >= self.compact_threshold

    def rewrite(self, records: Iterable[tuple[str, int, int, float]]) -> None:
        tmp = self.root / ".samples.log.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for ds_id, seq, ts, value in records:
                fh.write(
                    json.dumps(
                        {"datastream_id": ds_id, "seq": seq, "timestamp_micros": ts, "value": value}
                    )
                    + "\n"
                )
        self._log.close()
        os.replace(tmp, self.log_path)
        self._log = open(self.log_path, "a", encoding="utf-8")
        self._dead = 0

    def close(self) -> None:
        self._log.close()


# ---------------------------------------------------------------------------
# The store
# ---------------------------------------------------------------------------


def _now_micros() -> int:
    return time.time_ns() // 1000


class SampleStore:
    """Role-checked datastream store with retention and snapshot reads.

    Per-datastream appends are linearized under a stream lock; snapshots are
    wait-free reads of a consistent view.  Listeners registered via
    ``on_ingest``/``on_delete`` fire outside the stream lock so they may call
    back into the store.
    """

    def __init__(
        self,
        backend: MemoryBackend | FileBackend | None = None,
        default_retention_cap: int = 1_000_000,
        clock_micros: Callable[[], int] = _now_micros,
    ):
        self._backend = backend or MemoryBackend()
        self.default_retention_cap = default_retention_cap
        self._clock = clock_micros
        self._lock = threading.RLock()
        self._streams: dict[str, _StreamState] = {}
        self._ingest_listeners: list[Callable[[str], None]] = []
        self._delete_listeners: list[Callable[[str], None]] = []
        self._load()

    def _load(self) -> None:
        metas, samples = self._backend.load()
        for meta in metas:
            cols = _Columns(capacity=max(1024, len(samples.get(meta.id, ())) + 16))
            recs = samples.get(meta.id, [])
            if recs:
                cols.first_seq = recs[0][0]
                cols.append([r[1] for r in recs], [r[2] for r in recs])
            state = _StreamState(meta=meta, cols=cols, lock=threading.Lock())
            state.last_ts = int(cols.ts[cols.end - 1]) if cols.count else 0
            self._streams[meta.id] = state

    # -- listener registration -------------------------------------------------

    def on_ingest(self, callback: Callable[[str], None]) -> None:
        self._ingest_listeners.append(callback)

    def on_delete(self, callback: Callable[[str], None]) -> None:
        self._delete_listeners.append(callback)

    # -- lifecycle ---------------------------------------------------------------

    def create_datastream(
        self,
        name: str,
        creator: Identity,
        providers: Iterable[str] = (),
        queriers: Iterable[str] = (),
        default_decision: Any = None,
        retention_cap: int | None = None,
    ) -> Datastream:
        if not isinstance(name, str) or not name.strip():
            raise InvalidParameterError("datastream name must be non-empty", detail={"field": "name"})
        cap = self.default_retention_cap if retention_cap is None else retention_cap
        if not isinstance(cap, int) or cap < 1:
            raise InvalidParameterError(
                "retention_cap must be a positive integer", detail={"field": "retention_cap"}
            )
        meta = Datastream(
            id=uuid.uuid4().hex,
            name=name,
            owner=creator.id,
            providers=authz.validate_principals(providers, "providers"),
            queriers=authz.validate_principals(queriers, "queriers"),
            default_decision=default_decision,
            created_at_micros=self._clock(),
            retention_cap=cap,
        )
        state = _StreamState(meta=meta, cols=_Columns(), lock=threading.Lock())
        with self._lock:
            self._streams[meta.id] = state
        self._backend.put_meta(meta)
        return meta.view()

    def _state(self, ds_id: str) -> _StreamState:
        with self._lock:
            state = self._streams.get(ds_id)
        if state is None:
            raise NotFoundError(f"datastream {ds_id} not found", detail={"datastream_id": ds_id})
        return state

    def get_datastream(self, ds_id: str) -> Datastream:
        return self._state(ds_id).meta.view()

    def list_datastreams(self, caller: Identity | None = None) -> list[Datastream]:
        """All datastreams, or only those where the caller holds any role."""
        with self._lock:
            states = list(self._streams.values())
        out = []
        for state in states:
            meta = state.meta
            if caller is not None:
                held = meta.owner == caller.id or any(
                    authz.principal_matches(caller, p) for p in meta.providers | meta.queriers
                )
                if not held:
                    continue
            out.append(meta.view())
        out.sort(key=lambda m: (m.created_at_micros, m.id))
        return out

    def sample_count(self, ds_id: str) -> int:
        return self._state(ds_id).cols.count

    _PATCH_FIELDS = ("name", "owner", "providers", "queriers", "default_decision")

    def update_datastream(self, ds_id: str, patch: dict[str, Any], caller: Identity) -> Datastream:
        for key in patch:
            if key not in self._PATCH_FIELDS:
                raise InvalidParameterError(f"unknown patch field {key!r}", detail={"field": key})
        state = self._state(ds_id)
        with state.lock:
            meta = state.meta
            if not authz.authorize(caller, meta, Action.MANAGE):
                raise ForbiddenError(
                    "only the owner may update a datastream", detail={"datastream_id": ds_id}
                )
            if "name" in patch:
                if not isinstance(patch["name"], str) or not patch["name"].strip():
                    raise InvalidParameterError("datastream name must be non-empty", detail={"field": "name"})
                meta.name = patch["name"]
            if "owner" in patch:
                new_owner = patch["owner"]
                if not isinstance(new_owner, str) or not new_owner.strip() or new_owner == ANY_AUTHENTICATED:
                    raise InvalidParameterError(
                        "owner must be a single identity reference", detail={"field": "owner"}
                    )
                meta.owner = new_owner
            if "providers" in patch:
                meta.providers = authz.validate_principals(patch["providers"], "providers")
            if "queriers" in patch:
                meta.queriers = authz.validate_principals(patch["queriers"], "queriers")
            if "default_decision" in patch:
                meta.default_decision = patch["default_decision"]
            self._backend.put_meta(meta)
            return meta.view()

    def delete_datastream(self, ds_id: str, caller: Identity) -> None:
        state = self._state(ds_id)
        with state.lock:
            if not authz.authorize(caller, state.meta, Action.MANAGE):
                raise ForbiddenError(
                    "only the owner may delete a datastream", detail={"datastream_id": ds_id}
                )
            with self._lock:
                self._streams.pop(ds_id, None)
            self._backend.delete_meta(ds_id, dead_samples=state.cols.count)
        for callback in self._delete_listeners:
            callback(ds_id)
        self._maybe_compact()

    # -- ingest -------------------------------------------------------------------

    @staticmethod
    def _validate_value(value: Any) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidParameterError("sample value must be numeric", detail={"field": "value"})
        v = float(value)
        if not math.isfinite(v):
            raise InvalidParameterError("sample value must be finite", detail={"field": "value"})
        return v

    def ingest_sample(self, ds_id: str, value: Any, caller: Identity) -> Sample:
        return self.ingest_batch(ds_id, [value], caller)[0]

    def ingest_batch(self, ds_id: str, values: Sequence[Any], caller: Identity) -> list[Sample]:
        state = self._state(ds_id)
        with state.lock:
            if not authz.authorize(caller, state.meta, Action.INGEST):
                raise ForbiddenError(
                    "provider role required to add samples", detail={"datastream_id": ds_id}
                )
            clean = [self._validate_value(v) for v in values]  # all-or-nothing
            if not clean:
                return []
            cols = state.cols
            first = cols.next_seq
            ts = max(self._clock(), state.last_ts)
            stamps = [ts] * len(clean)
            cols.append(stamps, clean)
            state.last_ts = ts
            evicted = cols.evict_to(state.meta.retention_cap)
            out = [Sample(seq=first + i, timestamp_micros=ts, value=v) for i, v in enumerate(clean)]
            self._backend.append(ds_id, [(s.seq, s.timestamp_micros, s.value) for s in out], evicted)
        for callback in self._ingest_listeners:
            callback(ds_id)
        self._maybe_compact()
        return out

    def snapshot(self, ds_id: str) -> Snapshot:
        state = self._state(ds_id)
        with state.lock:
            ts, val = state.cols.snapshot_views()
            first_seq = state.cols.first_seq
            upper_seq = state.cols.next_seq - 1
        return Snapshot(
            datastream_id=ds_id,
            first_seq=first_seq,
            upper_seq=upper_seq,
            timestamps=ts,
            values=val,
        )

    # -- persistence upkeep --------------------------------------------------------

    def _maybe_compact(self) -> None:
        if not self._backend.wants_compaction():
            return
        self._backend.rewrite(self._iter_live())

    def _iter_live(self) -> Iterator[tuple[str, int, int, float]]:
        with self._lock:
            states = list(self._streams.values())
        for state in states:
            with state.lock:
                records = list(state.cols.live_records())
            for seq, ts, value in records:
                yield state.meta.id, seq, ts, value

    def close(self) -> None:
        self._backend.close()
