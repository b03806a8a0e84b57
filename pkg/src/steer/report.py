"""Render figures from harness outputs (event-log JSONL, bench CSVs).

The harness itself only emits delimited data; this module is the plotting
consumer, writing PNG files next to those outputs.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from statistics import median

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

PHASE_COLORS = {1.0: "#f4cccc", 2.0: "#fff2cc", 3.0: "#d9ead3"}


def load_events(events_path: str | Path) -> list[dict]:
    records = []
    with open(events_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def scenario_progress_figure(
    events_path: str | Path, out_path: str | Path, score_datastream: str | None = None
) -> Path:
    """Concurrency over the run with phase shading, plus sampled scores if named."""
    records = load_events(events_path)
    if not records:
        raise ValueError(f"no events in {events_path}")
    t0 = records[0]["t"]
    times = [r["t"] - t0 for r in records]
    concurrency = [r.get("concurrency", 0) for r in records]
    phases = [r.get("phase") or 1.0 for r in records]

    fig, ax = plt.subplots(figsize=(9, 4.5))
    span_start, current = times[0], phases[0]
    for t, p in zip(times, phases):
        if p != current:
            ax.axvspan(span_start, t, color=PHASE_COLORS.get(current, "#eeeeee"), alpha=0.6, lw=0)
            span_start, current = t, p
    ax.axvspan(span_start, times[-1], color=PHASE_COLORS.get(current, "#eeeeee"), alpha=0.6, lw=0)

    ax.step(times, concurrency, where="post", color="tab:blue", label="active flows")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("active flows")

    if score_datastream is not None:
        pts = [
            (r["t"] - t0, r["detail"]["value"])
            for r in records
            if r["step"] == "add_sample"
            and r.get("outcome") == "ok"
            and r.get("detail", {}).get("datastream") == score_datastream
        ]
        if pts:
            ax2 = ax.twinx()
            ax2.plot([p[0] for p in pts], [p[1] for p in pts], ".", color="tab:red", label="score")
            ax2.set_ylabel("score")

    ax.set_title("scenario progress (shading = experiment phase)")
    ax.legend(loc="upper left")
    out_path = Path(out_path)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def bench_metrics_figure(csv_path: str | Path, out_path: str | Path) -> Path:
    """Median evaluation latency vs datastream size, one line per operator."""
    by_op: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            by_op[row["op"]][int(row["size"])].append(float(row["latency_ms"]))

    fig, ax = plt.subplots(figsize=(8, 5))
    for op, per_size in sorted(by_op.items()):
        sizes = sorted(per_size)
        ax.plot(sizes, [median(per_size[s]) for s in sizes], marker="o", label=op)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("datastream size (samples)")
    ax.set_ylabel("median latency (ms)")
    ax.set_title("metric evaluation latency vs datastream size")
    ax.legend(fontsize=7, ncol=2)
    out_path = Path(out_path)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def bench_ingest_figure(csv_path: str | Path, out_path: str | Path) -> Path:
    """Throughput and error counts against concurrent client count."""
    rows = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    rows.sort(key=lambda r: int(r["clients"]))
    clients = [int(r["clients"]) for r in rows]

    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(clients, [float(r["mean_rps"]) for r in rows], marker="o", label="mean req/s")
    ax.plot(clients, [float(r["peak_rps"]) for r in rows], marker="s", label="peak req/s")
    ax.set_xlabel("concurrent clients")
    ax.set_ylabel("requests / s")
    errors = [int(r["errors"]) for r in rows]
    if any(errors):
        ax2 = ax.twinx()
        ax2.plot(clients, errors, marker="x", color="tab:red", label="errors")
        ax2.set_ylabel("errors")
    ax.set_title("ingest throughput vs concurrent clients")
    ax.legend(loc="upper left")
    out_path = Path(out_path)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
