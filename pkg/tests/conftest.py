from __future__ import annotations

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))  # for oracles.py

from steer.api import EmbeddedServer, Engine
from steer.authz import Authenticator, Identity, StaticTokenStore
from steer.config import ServiceConfig
from steer.policy import WaitRegistry
from steer.ratelimit import RateLimiter
from steer.store import SampleStore

ALICE = Identity("alice")
BOB = Identity("bob", groups=frozenset({"grp-ops"}))
CAROL = Identity("carol")

TOKENS = {
    "tkn-alice": {"identity": "alice", "groups": []},
    "tkn-bob": {"identity": "bob", "groups": ["grp-ops"]},
    "tkn-carol": {"identity": "carol", "groups": []},
    "tkn-admin": {"identity": "admin", "groups": []},
    "tkn-monitor": {"identity": "monitor", "groups": []},
    "tkn-runner": {"identity": "runner", "groups": []},
}


def build_engine(
    config: ServiceConfig | None = None,
    tokens: dict | None = None,
    store: SampleStore | None = None,
) -> Engine:
    config = config or ServiceConfig(tick_interval_s=0.2, wait_retention_s=60.0)
    store = store or SampleStore(default_retention_cap=config.default_retention_cap)
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
    introspector = StaticTokenStore(tokens if tokens is not None else TOKENS)
    return Engine(
        config=config,
        store=store,
        authenticator=Authenticator(introspector=introspector, ttl_s=config.auth_cache_ttl_s),
        registry=registry,
        limiter=limiter,
    )


@pytest.fixture
def engine():
    eng = build_engine()
    yield eng
    eng.close()


@pytest.fixture
def live_server():
    """A real uvicorn server on loopback with generous rate limits."""
    config = ServiceConfig(
        tick_interval_s=0.2,
        ingest_rate=100_000,
        ingest_burst=100_000,
        evaluate_rate=100_000,
        evaluate_burst=100_000,
    )
    server = EmbeddedServer(config=config, engine=build_engine(config)).start()
    yield server
    server.stop()


def pytest_collection_modifyitems(config, items):
    if os.environ.get("STEER_LONG_TESTS") == "1":
        return
    skip = pytest.mark.skip(reason="long soak test; set STEER_LONG_TESTS=1 to run")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)
