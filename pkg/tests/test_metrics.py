from __future__ import annotations

import math
import random

import numpy as np
import pytest

from oracles import OracleError, metric_oracle, resolve_interval_oracle
from steer.errors import (
    EmptyIntervalError,
    InsufficientSamplesError,
    InvalidParameterError,
)
from steer.metrics import (
    OPS,
    IntervalSpec,
    MetricSpec,
    compute_metric,
    parse_op,
    resolve_interval,
)
from steer.store import Snapshot

EXACT_OPS = ("count", "min", "max", "mode", "first", "last", "percentile_disc", "constant")
CLOSE_OPS = ("average", "sum", "stddev", "percentile_cont")


def snap(values, timestamps=None, first_seq=1):
    """Build a snapshot directly: timestamps default to 1s spacing from epoch 1000s."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if timestamps is None:
        timestamps = (1000 + np.arange(n)) * 1_000_000
    ts = np.asarray(timestamps, dtype=np.int64)
    values.flags.writeable = False
    ts.flags.writeable = False
    return Snapshot(
        datastream_id="ds",
        first_seq=first_seq,
        upper_seq=first_seq + n - 1,
        timestamps=ts,
        values=values,
    )


def spec(op, param=None, **interval_kwargs):
    interval = IntervalSpec(**interval_kwargs) if interval_kwargs else None
    return MetricSpec(datastream_id="ds", op=op, op_param=param, interval=interval)


# -- operator aliases ---------------------------------------------------------


def test_parse_op_accepts_aliases_and_rejects_junk():
    assert parse_op("avg") == "average"
    assert parse_op("discrete_percentile") == "percentile_disc"
    assert parse_op("continuous_percentile") == "percentile_cont"
    assert parse_op("last") == "last"
    with pytest.raises(InvalidParameterError):
        parse_op("median")
    with pytest.raises(InvalidParameterError):
        parse_op(7)


# -- fixed examples -------------------------------------------------------------


def test_constant_ignores_samples():
    assert compute_metric(spec("constant", 0.95), snap([]), 0) == 0.95
    assert compute_metric(spec("constant", 0.95), snap([1, 2, 3]), 0) == 0.95


def test_average_of_1_2_3():
    assert compute_metric(spec("average"), snap([1, 2, 3]), 2000) == 2.0


def test_percentile_disc_ninth_of_ten():
    values = [0.5] + [0.96] * 9
    assert compute_metric(spec("percentile_disc", 0.9), snap(values), 2000) == 0.96


def test_percentile_cont_two_point_median():
    assert compute_metric(spec("percentile_cont", 0.5), snap([1, 3]), 2000) == 2.0


def test_stddev_of_2_4():
    got = compute_metric(spec("stddev"), snap([2, 4]), 2000)
    assert got == pytest.approx(1.4142135624, abs=1e-9)


def test_mode_tie_breaks_to_smallest():
    assert compute_metric(spec("mode"), snap([1, 1, 2, 2, 3]), 2000) == 1.0
    assert compute_metric(spec("mode"), snap([3, 2, 2, 1, 1]), 2000) == 1.0


def test_first_and_last_follow_order():
    s = snap([5, 1, 9])
    assert compute_metric(spec("first"), s, 2000) == 5.0
    assert compute_metric(spec("last"), s, 2000) == 9.0


# -- interval resolution ----------------------------------------------------------


def test_trailing_time_window():
    # samples at t=1000..1019s; eval at 1019; start_time -5 keeps [1014, 1019]
    s = snap(list(range(20)))
    lo, hi = resolve_interval(IntervalSpec(start_time=-5), s, 1019.0)
    assert (lo, hi) == (14, 20)


def test_absolute_time_bounds():
    s = snap(list(range(20)))
    lo, hi = resolve_interval(IntervalSpec(start_time=1005.0, end_time=1010.0), s, 1019.0)
    assert (lo, hi) == (5, 11)  # inclusive bounds


def test_absolute_start_with_relative_end():
    s = snap(list(range(20)))
    lo, hi = resolve_interval(IntervalSpec(start_time=1005.0, end_time=-10), s, 1019.0)
    assert (lo, hi) == (5, 10)  # end = eval_time - 10 = 1009


def test_count_window_newest():
    s = snap(list(range(25)))
    lo, hi = resolve_interval(IntervalSpec(start_limit=-10), s, 2000.0)
    assert (lo, hi) == (15, 25)


def test_count_window_oldest():
    s = snap(list(range(25)))
    lo, hi = resolve_interval(IntervalSpec(end_limit=10), s, 2000.0)
    assert (lo, hi) == (0, 10)


def test_count_window_clamps_short_stream():
    s = snap([1, 2, 3])
    lo, hi = resolve_interval(IntervalSpec(start_limit=-10), s, 2000.0)
    assert (lo, hi) == (0, 3)


def test_no_bounds_takes_everything():
    s = snap(list(range(7)))
    assert resolve_interval(None, s, 0.0) == (0, 7)
    assert resolve_interval(IntervalSpec(), s, 0.0) == (0, 7)


def test_mixed_bounds_rejected():
    with pytest.raises(InvalidParameterError):
        IntervalSpec(start_time=-5, end_limit=3)


def test_inverted_bounds_rejected():
    s = snap(list(range(10)))
    with pytest.raises(InvalidParameterError):
        resolve_interval(IntervalSpec(start_time=1010.0, end_time=1002.0), s, 2000.0)
    with pytest.raises(InvalidParameterError):
        resolve_interval(IntervalSpec(start_limit=5, end_limit=2), s, 2000.0)


def test_zero_count_bound_rejected():
    with pytest.raises(InvalidParameterError):
        IntervalSpec(start_limit=0)


# -- error contract ---------------------------------------------------------------


def test_empty_interval_errors_except_count_and_constant():
    empty = snap([])
    for op in OPS:
        if op == "count":
            assert compute_metric(spec(op), empty, 0) == 0.0
        elif op == "constant":
            assert compute_metric(spec(op, 0.5), empty, 0) == 0.5
        elif op in ("percentile_cont", "percentile_disc"):
            with pytest.raises(EmptyIntervalError):
                compute_metric(spec(op, 0.5), empty, 0)
        else:
            with pytest.raises(EmptyIntervalError):
                compute_metric(spec(op), empty, 0)


def test_stddev_needs_two_samples():
    with pytest.raises(InsufficientSamplesError):
        compute_metric(spec("stddev"), snap([4.0]), 0)


def test_percentile_param_bounds():
    for p in (0.0, -0.1, 1.5, None):
        with pytest.raises(InvalidParameterError):
            MetricSpec(datastream_id="ds", op="percentile_disc", op_param=p)
    MetricSpec(datastream_id="ds", op="percentile_disc", op_param=1.0)  # inclusive top


def test_constant_requires_param():
    with pytest.raises(InvalidParameterError):
        MetricSpec(datastream_id="ds", op="constant")


# -- randomized oracle properties ------------------------------------------------


def random_case(rng: random.Random):
    n = rng.randint(0, 400)
    style = rng.randrange(3)
    if style == 0:
        values = [rng.uniform(-100, 100) for _ in range(n)]
    elif style == 1:
        values = [round(rng.uniform(-5, 5), 1) for _ in range(n)]  # duplicates for mode
    else:
        values = [float(rng.randint(-10, 10)) for _ in range(n)]
    base = rng.randint(1, 10_000)
    stamps = []
    t = base * 1_000_000
    for _ in range(n):
        t += rng.randint(0, 3_000_000)
        stamps.append(t)
    eval_time = (t / 1e6) + rng.uniform(0, 5)

    kind = rng.randrange(3)
    if kind == 0 or n == 0:
        interval = {}
    elif kind == 1:
        span = eval_time - base
        start = -rng.uniform(0, span * 1.2) if rng.random() < 0.7 else base + rng.uniform(0, span)
        interval = {"start_time": start}
        if rng.random() < 0.5:
            interval["end_time"] = -rng.uniform(0, 3) if rng.random() < 0.5 else eval_time - rng.uniform(0, 2)
            if interval["end_time"] >= 0 and interval["end_time"] < (interval["start_time"] if interval["start_time"] >= 0 else 0):
                del interval["end_time"]
    else:
        interval = {"start_limit": -rng.randint(1, n + 5)} if rng.random() < 0.7 else {"end_limit": rng.randint(1, n + 5)}
    return values, stamps, eval_time, interval


def test_randomized_interval_matches_linear_scan_oracle():
    rng = random.Random(20260810)
    for _ in range(300):
        values, stamps, eval_time, interval = random_case(rng)
        s = snap(values, stamps)
        kwargs = {k: interval.get(k) for k in ("start_time", "end_time", "start_limit", "end_limit")}
        expected = resolve_interval_oracle(list(zip(stamps, values)), eval_time_s=eval_time, **kwargs)
        lo, hi = resolve_interval(IntervalSpec(**interval) if interval else None, s, eval_time)
        assert list(s.values[lo:hi]) == expected


def test_randomized_ops_match_value_oracle():
    rng = random.Random(97)
    for _ in range(300):
        values, stamps, eval_time, interval = random_case(rng)
        s = snap(values, stamps)
        kwargs = {k: interval.get(k) for k in ("start_time", "end_time", "start_limit", "end_limit")}
        window = resolve_interval_oracle(list(zip(stamps, values)), eval_time_s=eval_time, **kwargs)
        p = rng.choice([0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0])
        for op in OPS:
            param = p if op in ("percentile_disc", "percentile_cont") else (0.42 if op == "constant" else None)
            try:
                expected = metric_oracle(op, window, param)
            except OracleError as exc:
                with pytest.raises({"EmptyInterval": EmptyIntervalError, "InsufficientSamples": InsufficientSamplesError}[exc.code]):
                    compute_metric(spec(op, param, **interval), s, eval_time)
                continue
            got = compute_metric(spec(op, param, **interval), s, eval_time)
            if op in EXACT_OPS:
                assert got == expected, (op, interval)
            else:
                assert got == pytest.approx(expected, rel=1e-9, abs=1e-12), (op, interval)


def test_percentiles_bounded_by_extremes():
    rng = random.Random(7)
    for _ in range(100):
        n = rng.randint(1, 50)
        values = [rng.uniform(-10, 10) for _ in range(n)]
        s = snap(values)
        p = rng.uniform(0.001, 1.0)
        lo, hi = min(values), max(values)
        assert lo <= compute_metric(spec("percentile_disc", p), s, 2000) <= hi
        assert lo <= compute_metric(spec("percentile_cont", p), s, 2000) <= hi


def test_count_additivity_over_adjacent_windows():
    rng = random.Random(13)
    for _ in range(50):
        n = rng.randint(2, 60)
        s = snap([rng.random() for _ in range(n)])
        k = rng.randint(1, n - 1)
        left = compute_metric(spec("count", end_limit=k), s, 2000)
        right = compute_metric(spec("count", start_limit=k + 1), s, 2000)
        assert left + right == compute_metric(spec("count"), s, 2000) == n


def test_shift_invariance():
    rng = random.Random(5)
    shifted_ops = ("average", "min", "max", "percentile_cont", "percentile_disc", "first", "last", "mode")
    for _ in range(50):
        n = rng.randint(2, 80)
        values = [round(rng.uniform(-5, 5), 1) for _ in range(n)]
        c = rng.choice([-3.25, -1.0, 0.5, 2.75])
        s, shifted = snap(values), snap([v + c for v in values])
        for op in shifted_ops:
            p = 0.7 if "percentile" in op else None
            base = compute_metric(spec(op, p), s, 2000)
            moved = compute_metric(spec(op, p), shifted, 2000)
            assert moved == pytest.approx(base + c, rel=1e-9, abs=1e-9), op
        assert compute_metric(spec("stddev"), shifted, 2000) == pytest.approx(
            compute_metric(spec("stddev"), s, 2000), rel=1e-9, abs=1e-9
        )
        assert compute_metric(spec("count"), shifted, 2000) == n


def test_determinism():
    s = snap([3, 1, 4, 1, 5, 9, 2, 6])
    results = {compute_metric(spec("percentile_cont", 0.37), s, 2000.0) for _ in range(20)}
    assert len(results) == 1


def test_discrete_rank_survives_float_parameters():
    # 0.9 * 10 rounds above 9.0 in binary, but rank must stay 9
    values = list(range(1, 11))
    got = compute_metric(spec("percentile_disc", 0.9), snap(values), 2000)
    assert got == 9.0
    got = compute_metric(spec("percentile_disc", 0.2), snap(values), 2000)
    assert got == 2.0
