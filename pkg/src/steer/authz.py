"""Token authentication and the owner/provider/querier role matrix.

Authentication is pluggable: a token introspector turns a bearer token into
an identity plus group memberships.  Two introspectors ship here: a static
JSON token store for development and testing, and a client for a generic
OAuth-style remote introspection endpoint.  Authorization itself is a pure
decision over a datastream's role grants.

Roles are deliberately non-hierarchical: owning a datastream grants manage
rights only.  An owner who wants to ingest or query must grant themselves
the provider or querier role explicitly.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Protocol

import httpx

from .errors import InvalidParameterError, UnauthenticatedError

#: Grant principal matching any successfully authenticated identity.
ANY_AUTHENTICATED = "any-authenticated"


@dataclass(frozen=True)
class Identity:
    """An authenticated caller: opaque id plus group memberships."""

    id: str
    groups: frozenset[str] = frozenset()


class Action(str, Enum):
    MANAGE = "manage"
    INGEST = "ingest"
    QUERY = "query"


class HasRoles(Protocol):
    """Structural view of anything carrying datastream role grants."""

    owner: str
    providers: set[str]
    queriers: set[str]


def principal_matches(identity: Identity, principal: str) -> bool:
    """True when a grant principal covers the identity (id, group, or wildcard)."""
    if principal == ANY_AUTHENTICATED:
        return True
    return principal == identity.id or principal in identity.groups


def authorize(identity: Identity, datastream: HasRoles, action: Action) -> bool:
    """Pure role-matrix decision: manage<->owner, ingest<->provider, query<->querier."""
    if action is Action.MANAGE:
        return datastream.owner == identity.id
    grants = datastream.providers if action is Action.INGEST else datastream.queriers
    return any(principal_matches(identity, p) for p in grants)


def validate_principals(principals: Iterable[str], field_name: str) -> set[str]:
    """Reject empty or non-string principal references."""
    out = set()
    for p in principals:
        if not isinstance(p, str) or not p.strip():
            raise InvalidParameterError(
                f"malformed identity reference in {field_name}", detail={"field": field_name}
            )
        out.add(p)
    return out


class TokenIntrospector(Protocol):
    def introspect(self, token: str) -> Identity | None:
        """Resolve a token to an identity, or None when unknown/expired."""
        ...


class StaticTokenStore:
    """Dev/test introspector backed by a JSON map: token -> {identity, groups}.

    Tracks how many introspections were served so cache behaviour is
    observable from tests.
    """

    def __init__(self, tokens: dict[str, dict] | None = None):
        self._tokens: dict[str, Identity] = {}
        self.calls = 0
        for token, entry in (tokens or {}).items():
            self._tokens[token] = Identity(
                id=entry["identity"], groups=frozenset(entry.get("groups", []))
            )

    @classmethod
    def from_file(cls, path: str | Path) -> "StaticTokenStore":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def add(self, token: str, identity: str, groups: Iterable[str] = ()) -> None:
        self._tokens[token] = Identity(id=identity, groups=frozenset(groups))

    def introspect(self, token: str) -> Identity | None:
        self.calls += 1
        return self._tokens.get(token)


class HttpIntrospector:
    """Client for a remote OAuth-style introspection endpoint.

    POSTs ``token=<value>`` as form data and expects a JSON body with at
    least ``{"active": bool, "sub": str}``; group ids are read from an
    optional ``groups`` array.
    """

    def __init__(self, url: str, timeout_s: float = 5.0):
        self.url = url
        self._client = httpx.Client(timeout=timeout_s)
        self.calls = 0

    def introspect(self, token: str) -> Identity | None:
        self.calls += 1
        resp = self._client.post(self.url, data={"token": token})
        if resp.status_code != 200:
            return None
        body = resp.json()
        if not body.get("active"):
            return None
        sub = body.get("sub") or body.get("identity")
        if not sub:
            return None
        return Identity(id=sub, groups=frozenset(body.get("groups", [])))


@dataclass
class _CacheEntry:
    identity: Identity
    expires_at: float


@dataclass
class Authenticator:
    """Introspector front-end with a TTL cache on successful lookups.

    The TTL models the periodic credential re-validation a remote auth
    service imposes: within the TTL a repeated token costs no introspector
    call; after it, the next request pays the full validation round trip.
    """

    introspector: TokenIntrospector
    ttl_s: float = 60.0
    clock: Callable[[], float] = time.monotonic
    _cache: dict[str, _CacheEntry] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def peek(self, token: str) -> Identity | None:
        """Cache-only lookup; None means the caller must pay for introspection."""
        with self._lock:
            entry = self._cache.get(token)
            if entry is not None and entry.expires_at > self.clock():
                return entry.identity
        return None

    def authenticate(self, token: str) -> Identity:
        if not token:
            raise UnauthenticatedError("missing bearer token")
        now = self.clock()
        with self._lock:
            entry = self._cache.get(token)
            if entry is not None and entry.expires_at > now:
                return entry.identity
        identity = self.introspector.introspect(token)
        if identity is None:
            raise UnauthenticatedError("unknown or expired token")
        with self._lock:
            self._cache[token] = _CacheEntry(identity, now + self.ttl_s)
        return identity

    def invalidate(self, token: str | None = None) -> None:
        with self._lock:
            if token is None:
                self._cache.clear()
            else:
                self._cache.pop(token, None)
