"""Metric operators and interval resolution over datastream snapshots.

A metric turns a snapshot into a single summarization value: one of twelve
operators applied to the samples selected by an interval.  Intervals are
given either as time bounds (seconds: negative values are offsets from the
evaluation time, non-negative values are absolute epoch seconds) or as
count bounds (signed 1-based positions: positive counts from the oldest
sample, negative counts from the newest), never both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import EmptyIntervalError, InsufficientSamplesError, InvalidParameterError
from .store import Snapshot

#: Canonical operator names, in the order they are usually enumerated.
OPS = (
    "average",
    "stddev",
    "count",
    "sum",
    "min",
    "max",
    "mode",
    "percentile_cont",
    "percentile_disc",
    "last",
    "first",
    "constant",
)

#: Accepted spellings seen in the wild mapped onto canonical names.
OP_ALIASES = {
    "avg": "average",
    "mean": "average",
    "std": "stddev",
    "standard_deviation": "stddev",
    "minimum": "min",
    "maximum": "max",
    "continuous_percentile": "percentile_cont",
    "discrete_percentile": "percentile_disc",
}

PERCENTILE_OPS = ("percentile_cont", "percentile_disc")


def parse_op(name: Any, field_name: str = "op") -> str:
    if isinstance(name, str):
        canonical = OP_ALIASES.get(name, name)
        if canonical in OPS:
            return canonical
    raise InvalidParameterError(f"unknown metric operator {name!r}", detail={"field": field_name})


@dataclass(frozen=True)
class IntervalSpec:
    """Bounds on the sample sub-sequence a metric is computed over.

    Time bounds are signed seconds: negative means "evaluation time plus
    this offset", non-negative is an absolute epoch timestamp.  Count
    bounds are signed sample positions: +n is the n-th oldest sample, -n
    the n-th newest.  Mixing time and count bounds is rejected.
    """

    start_time: float | None = None
    end_time: float | None = None
    start_limit: int | None = None
    end_limit: int | None = None

    def __post_init__(self) -> None:
        has_time = self.start_time is not None or self.end_time is not None
        has_count = self.start_limit is not None or self.end_limit is not None
        if has_time and has_count:
            raise InvalidParameterError(
                "time bounds and count bounds are mutually exclusive",
                detail={"field": "interval"},
            )
        for name in ("start_limit", "end_limit"):
            limit = getattr(self, name)
            if limit is not None and (not isinstance(limit, int) or limit == 0):
                raise InvalidParameterError(
                    f"{name} must be a non-zero integer", detail={"field": name}
                )

    @property
    def is_empty(self) -> bool:
        return (
            self.start_time is None
            and self.end_time is None
            and self.start_limit is None
            and self.end_limit is None
        )


@dataclass(frozen=True)
class MetricSpec:
    """One metric: datastream, operator, optional parameter and interval.

    The decision payload rides along untouched; policy evaluation returns
    the winning metric's decision (or its datastream's default).
    """

    datastream_id: str
    op: str
    op_param: float | None = None
    interval: IntervalSpec | None = None
    decision: Any = None

    def __post_init__(self) -> None:
        if self.op not in OPS:
            raise InvalidParameterError(f"unknown metric operator {self.op!r}", detail={"field": "op"})
        if self.op in PERCENTILE_OPS:
            p = self.op_param
            if p is None or isinstance(p, bool) or not isinstance(p, (int, float)) or not 0.0 < p <= 1.0:
                raise InvalidParameterError(
                    f"{self.op} requires op_param in (0, 1]", detail={"field": "op_param"}
                )
        if self.op == "constant":
            c = self.op_param
            if c is None or isinstance(c, bool) or not isinstance(c, (int, float)) or not math.isfinite(c):
                raise InvalidParameterError(
                    "constant requires a finite op_param", detail={"field": "op_param"}
                )


def _resolve_time_bound(bound: float, eval_time_s: float) -> float:
    return eval_time_s + bound if bound < 0 else bound


def resolve_interval(
    interval: IntervalSpec | None, snapshot: Snapshot, eval_time_s: float
) -> tuple[int, int]:
    """Resolve an interval to a [lo, hi) index range into the snapshot.

    Samples are ordered by (timestamp, seq).  Raises InvalidParameter when
    the resolved start lands after the resolved end; a window that simply
    misses every retained sample resolves to an empty range instead.
    """
    n = snapshot.n
    if interval is None or interval.is_empty:
        return 0, n

    if interval.start_time is not None or interval.end_time is not None:
        start_s = None if interval.start_time is None else _resolve_time_bound(interval.start_time, eval_time_s)
        # A missing end means "up to the evaluation time": a trailing window.
        end_s = eval_time_s if interval.end_time is None else _resolve_time_bound(interval.end_time, eval_time_s)
        if start_s is not None and start_s > end_s:
            raise InvalidParameterError(
                "interval start is after interval end", detail={"field": "interval"}
            )
        lo = 0 if start_s is None else int(np.searchsorted(snapshot.timestamps, round(start_s * 1e6), side="left"))
        hi = int(np.searchsorted(snapshot.timestamps, round(end_s * 1e6), side="right"))
        return lo, max(lo, hi)

    # Count bounds: signed 1-based positions over the ordered samples.
    if n == 0:
        return 0, 0

    def position(limit: int) -> int:
        return n + limit + 1 if limit < 0 else limit

    start_pos = 1 if interval.start_limit is None else position(interval.start_limit)
    end_pos = n if interval.end_limit is None else position(interval.end_limit)
    if start_pos > end_pos:
        raise InvalidParameterError("interval start is after interval end", detail={"field": "interval"})
    if start_pos > n or end_pos < 1:
        return 0, 0
    return max(1, start_pos) - 1, min(n, end_pos)


def discrete_rank(p: float, n: int) -> int:
    """Smallest 1-based rank k with cumulative share k/n >= p.

    This is the classical discrete-percentile convention; computing the
    predicate with the same float division on both sides keeps results
    stable for parameters like 0.9 that are not exactly representable.
    """
    k = min(n, max(1, math.ceil(p * n)))
    while k > 1 and (k - 1) / n >= p:
        k -= 1
    while k < n and k / n < p:
        k += 1
    return k


def compute_metric(spec: MetricSpec, snapshot: Snapshot, eval_time_s: float) -> float:
    """Compute the single summarization value for one metric.

    Raises EmptyInterval when the resolved interval holds no samples (count
    returns 0 and constant its parameter instead) and InsufficientSamples
    for stddev over fewer than two samples.
    """
    if spec.op == "constant":
        return float(spec.op_param)  # type: ignore[arg-type]

    lo, hi = resolve_interval(spec.interval, snapshot, eval_time_s)
    values = snapshot.values[lo:hi]
    n = int(values.shape[0])

    if spec.op == "count":
        return float(n)
    if n == 0:
        raise EmptyIntervalError(
            "no samples in the resolved interval", detail={"datastream_id": spec.datastream_id}
        )

    if spec.op == "average":
        return float(np.sum(values)) / n
    if spec.op == "sum":
        return float(np.sum(values))
    if spec.op == "min":
        return float(np.min(values))
    if spec.op == "max":
        return float(np.max(values))
    if spec.op == "first":
        return float(values[0])
    if spec.op == "last":
        return float(values[n - 1])
    if spec.op == "stddev":
        if n < 2:
            raise InsufficientSamplesError(
                "sample standard deviation needs at least two samples",
                detail={"datastream_id": spec.datastream_id},
            )
        mean = float(np.sum(values)) / n
        return math.sqrt(float(np.sum((values - mean) ** 2)) / (n - 1))
    if spec.op == "mode":
        uniques, counts = np.unique(values, return_counts=True)
        # np.unique sorts ascending and argmax takes the first maximum, so
        # frequency ties break to the smallest value.
        return float(uniques[int(np.argmax(counts))])
    if spec.op == "percentile_disc":
        k = discrete_rank(float(spec.op_param), n)  # type: ignore[arg-type]
        return float(np.partition(values, k - 1)[k - 1])
    if spec.op == "percentile_cont":
        p = float(spec.op_param)  # type: ignore[arg-type]
        ordered = np.sort(values)
        h = (n - 1) * p
        lo_idx = math.floor(h)
        gamma = h - lo_idx
        if lo_idx + 1 >= n:
            return float(ordered[n - 1])
        return float(ordered[lo_idx]) * (1.0 - gamma) + float(ordered[lo_idx + 1]) * gamma
    raise InvalidParameterError(f"unknown metric operator {spec.op!r}", detail={"field": "op"})
