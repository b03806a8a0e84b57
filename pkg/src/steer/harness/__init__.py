from .bench import bench_ingest, bench_metrics, write_csv
from .scenario import EventLog, ScenarioAborted, ScenarioRunner, Summary, run_scenario

__all__ = [
    "EventLog",
    "ScenarioAborted",
    "ScenarioRunner",
    "Summary",
    "run_scenario",
    "bench_ingest",
    "bench_metrics",
    "write_csv",
]
