"""Per-identity token-bucket rate limiting for ingest and evaluate requests."""

from __future__ import annotations

import threading
import time
from typing import Callable

from .errors import RateLimitedError


class TokenBucket:
    def __init__(self, rate: float, burst: int, clock: Callable[[], float] = time.monotonic):
        self.rate = float(rate)
        self.burst = float(burst)
        self.clock = clock
        self.tokens = float(burst)
        self.updated = clock()

    def try_acquire(self) -> tuple[bool, float]:
        """Take one token if available; returns (admitted, retry_after_s)."""
        now = self.clock()
        self.tokens = min(self.burst, self.tokens + self.rate * (now - self.updated))
        self.updated = now
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True, 0.0
        retry_after = (1.0 - self.tokens) / self.rate if self.rate > 0 else float("inf")
        return False, retry_after


class RateLimiter:
    """One bucket per (identity, request class); classes configure rate/burst."""

    def __init__(
        self,
        limits: dict[str, tuple[float, int]],
        clock: Callable[[], float] = time.monotonic,
    ):
        self.limits = limits
        self.clock = clock
        self._buckets: dict[tuple[str, str], TokenBucket] = {}
        self._lock = threading.Lock()

    def check(self, identity_id: str, request_class: str) -> None:
        """Admit or raise RateLimited with a retry-after hint."""
        limit = self.limits.get(request_class)
        if limit is None:
            return
        rate, burst = limit
        key = (identity_id, request_class)
        with self._lock:
            bucket = self._buckets.get(key)
            if bucket is None:
                bucket = self._buckets[key] = TokenBucket(rate, burst, self.clock)
            admitted, retry_after = bucket.try_acquire()
        if not admitted:
            raise RateLimitedError(
                f"{request_class} rate limit exceeded",
                detail={"retry_after_s": round(retry_after, 3), "class": request_class},
                retry_after_s=retry_after,
            )
