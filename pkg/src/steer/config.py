"""Service configuration: JSON config file with environment overrides.

Every key can be set three ways, later wins: built-in default, config file
entry, then a ``STEER_<KEY>`` environment variable (upper-cased key).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8787
    storage: str = "memory"  # "memory" | "file"
    data_dir: str = "./steer-data"
    token_store_path: str | None = None
    introspection_url: str | None = None
    auth_cache_ttl_s: float = 60.0
    default_retention_cap: int = 1_000_000
    ingest_rate: float = 50.0
    ingest_burst: int = 100
    evaluate_rate: float = 20.0
    evaluate_burst: int = 40
    tick_interval_s: float = 5.0
    long_poll_cap_s: float = 30.0
    max_wait_timeout_s: float = 86400.0
    wait_retention_s: float = 3600.0
    request_log_path: str | None = None

    @classmethod
    def load(cls, path: str | Path | None = None, env: dict[str, str] | None = None) -> "ServiceConfig":
        raw: dict[str, Any] = {}
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                raw.update(json.load(fh))
        env = os.environ if env is None else env
        for f in fields(cls):
            var = f"STEER_{f.name.upper()}"
            if var in env:
                raw[f.name] = env[var]
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, value in raw.items():
            target = known[name].type
            if isinstance(value, str) and target in ("int", "float", "int | None", "float | None"):
                value = float(value) if "float" in target else int(value)
            kwargs[name] = value
        return cls(**kwargs)
