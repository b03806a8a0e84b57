"""Local micro-benchmarks: ingest throughput and metric evaluation latency.

Reports are plain rows of dicts, also writable as CSV with stable headers so
they can be plotted externally (see the ``report`` command).
"""

from __future__ import annotations

import csv
import random
import threading
import time
from dataclasses import dataclass
from statistics import median
from typing import Any, Sequence

from .scenario import ApiCallError, ServiceClient

INGEST_CSV_HEADERS = [
    "clients", "duration_s", "requests", "errors", "mean_rps", "peak_rps",
    "p50_ms", "p95_ms", "p99_ms",
]
METRIC_CSV_HEADERS = ["size", "op", "rep", "order_index", "latency_ms"]

ALL_OPS = (
    "average", "stddev", "count", "sum", "min", "max", "mode",
    "percentile_cont", "percentile_disc", "last", "first", "constant",
)


def _percentile_ms(latencies: list[float], p: float) -> float:
    if not latencies:
        return 0.0
    ordered = sorted(latencies)
    k = min(len(ordered) - 1, max(0, round(p * (len(ordered) - 1))))
    return round(ordered[k] * 1000, 3)


@dataclass
class IngestBenchReport:
    rows: list[dict[str, Any]]

    def sustained_rps(self, clients: int = 1) -> float:
        for row in self.rows:
            if row["clients"] == clients:
                return row["mean_rps"]
        raise KeyError(clients)


@dataclass
class MetricBenchReport:
    rows: list[dict[str, Any]]
    order: list[tuple[int, str, int]]  # the seeded (size, op, rep) execution order

    def median_latency_ms(self, size: int, op: str) -> float:
        values = [r["latency_ms"] for r in self.rows if r["size"] == size and r["op"] == op]
        return median(values)


def write_csv(path: str, headers: Sequence[str], rows: list[dict[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(headers))
        writer.writeheader()
        writer.writerows(rows)


def bench_ingest(
    base_url: str,
    token: str,
    client_counts: Sequence[int],
    duration_s: float,
    out_csv: str | None = None,
) -> IngestBenchReport:
    """Closed-loop ingest: each client hammers its own datastream for the duration."""
    rows = []
    for n_clients in client_counts:
        admin = ServiceClient(base_url, token)
        stream_ids = []
        for i in range(n_clients):
            created = admin.call(
                "POST",
                "/datastreams",
                {
                    "name": f"bench-ingest-{n_clients}-{i}",
                    "providers": ["any-authenticated"],
                    "queriers": ["any-authenticated"],
                },
            )
            stream_ids.append(created["id"])
        admin.close()

        latencies: list[list[float]] = [[] for _ in range(n_clients)]
        stamps: list[list[float]] = [[] for _ in range(n_clients)]
        errors = [0] * n_clients
        stop = threading.Event()

        def worker(slot: int) -> None:
            client = ServiceClient(base_url, token)
            ds_id = stream_ids[slot]
            value = 0.0
            while not stop.is_set():
                started = time.perf_counter()
                try:
                    client.call("POST", "/add_sample", {"datastream_id": ds_id, "value": value})
                    latencies[slot].append(time.perf_counter() - started)
                    stamps[slot].append(time.perf_counter())
                except ApiCallError:
                    errors[slot] += 1
                value += 1.0
            client.close()

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(n_clients)]
        bench_start = time.perf_counter()
        for t in threads:
            t.start()
        time.sleep(duration_s)
        stop.set()
        for t in threads:
            t.join()

        flat_latencies = [l for slot in latencies for l in slot]
        flat_stamps = sorted(s for slot in stamps for s in slot)
        requests = len(flat_stamps)
        buckets: dict[int, int] = {}
        for s in flat_stamps:
            buckets[int(s - bench_start)] = buckets.get(int(s - bench_start), 0) + 1
        rows.append(
            {
                "clients": n_clients,
                "duration_s": duration_s,
                "requests": requests,
                "errors": sum(errors),
                "mean_rps": round(requests / duration_s, 2),
                "peak_rps": max(buckets.values()) if buckets else 0,
                "p50_ms": _percentile_ms(flat_latencies, 0.50),
                "p95_ms": _percentile_ms(flat_latencies, 0.95),
                "p99_ms": _percentile_ms(flat_latencies, 0.99),
            }
        )
    if out_csv:
        write_csv(out_csv, INGEST_CSV_HEADERS, rows)
    return IngestBenchReport(rows=rows)


def shuffled_combinations(
    sizes: Sequence[int], ops: Sequence[str], repetitions: int, seed: int
) -> list[tuple[int, str, int]]:
    """The randomized (size x op x rep) execution order, reproducible by seed."""
    combos = [(size, op, rep) for size in sizes for op in ops for rep in range(repetitions)]
    random.Random(seed).shuffle(combos)
    return combos


def bench_metrics(
    base_url: str,
    token: str,
    sizes: Sequence[int],
    repetitions: int = 10,
    seed: int = 0,
    ops: Sequence[str] = ALL_OPS,
    out_csv: str | None = None,
    fill_batch: int = 10_000,
) -> MetricBenchReport:
    """Latency of every (datastream size x operator) pair, in seeded random order."""
    client = ServiceClient(base_url, token, timeout_s=120.0)
    rng = random.Random(seed)
    stream_by_size: dict[int, str] = {}
    for size in sizes:
        created = client.call(
            "POST",
            "/datastreams",
            {
                "name": f"bench-metrics-{size}",
                "providers": ["any-authenticated"],
                "queriers": ["any-authenticated"],
            },
        )
        stream_by_size[size] = created["id"]
        remaining = size
        while remaining > 0:
            chunk = min(fill_batch, remaining)
            values = [rng.random() for _ in range(chunk)]
            client.call("POST", "/add_sample", {"datastream_id": created["id"], "values": values})
            remaining -= chunk

    order = shuffled_combinations(sizes, ops, repetitions, seed)
    rows = []
    for order_index, (size, op, rep) in enumerate(order):
        metric: dict[str, Any] = {"datastream_id": stream_by_size[size], "op": op, "decision": "x"}
        if op in ("percentile_cont", "percentile_disc"):
            metric["op_param"] = 0.9
        if op == "constant":
            metric["op_param"] = 1.0
        body = {"metrics": [metric], "target": "max"}
        started = time.perf_counter()
        client.call("POST", "/policy_eval", body)
        rows.append(
            {
                "size": size,
                "op": op,
                "rep": rep,
                "order_index": order_index,
                "latency_ms": round((time.perf_counter() - started) * 1000, 3),
            }
        )
    client.close()
    rows.sort(key=lambda r: (r["size"], r["op"], r["rep"]))
    if out_csv:
        write_csv(out_csv, METRIC_CSV_HEADERS, rows)
    return MetricBenchReport(rows=rows, order=order)
