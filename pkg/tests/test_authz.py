from __future__ import annotations

import itertools

import pytest

from steer.authz import (
    ANY_AUTHENTICATED,
    Action,
    Authenticator,
    Identity,
    StaticTokenStore,
    authorize,
    principal_matches,
)
from steer.errors import UnauthenticatedError
from steer.store import Datastream

ME = Identity("me", groups=frozenset({"grp-a"}))


def grants(owner=False, provider=False, querier=False) -> Datastream:
    return Datastream(
        id="d",
        name="d",
        owner="me" if owner else "someone-else",
        providers={"me"} if provider else set(),
        queriers={"me"} if querier else set(),
        default_decision=None,
        created_at_micros=0,
        retention_cap=10,
    )


def test_role_matrix_is_exact_over_all_grant_subsets():
    # manage<->owner, ingest<->provider, query<->querier; no implication between roles.
    for owner, provider, querier in itertools.product([False, True], repeat=3):
        ds = grants(owner, provider, querier)
        assert authorize(ME, ds, Action.MANAGE) is owner
        assert authorize(ME, ds, Action.INGEST) is provider
        assert authorize(ME, ds, Action.QUERY) is querier


def test_group_grants_match_membership():
    ds = grants()
    ds.providers = {"grp-a"}
    ds.queriers = {"grp-b"}
    assert authorize(ME, ds, Action.INGEST)
    assert not authorize(ME, ds, Action.QUERY)


def test_wildcard_matches_any_authenticated():
    ds = grants()
    ds.queriers = {ANY_AUTHENTICATED}
    assert authorize(ME, ds, Action.QUERY)
    assert authorize(Identity("stranger"), ds, Action.QUERY)


def test_revocation_takes_effect_immediately():
    ds = grants(provider=True)
    assert authorize(ME, ds, Action.INGEST)
    ds.providers = set()
    assert not authorize(ME, ds, Action.INGEST)


def test_principal_matching():
    assert principal_matches(ME, "me")
    assert principal_matches(ME, "grp-a")
    assert principal_matches(ME, ANY_AUTHENTICATED)
    assert not principal_matches(ME, "grp-z")


def test_static_store_lookup():
    store = StaticTokenStore({"tkn-alice": {"identity": "alice", "groups": ["grp-ops"]}})
    auth = Authenticator(introspector=store)
    identity = auth.authenticate("tkn-alice")
    assert identity.id == "alice" and identity.groups == frozenset({"grp-ops"})
    with pytest.raises(UnauthenticatedError):
        auth.authenticate("tkn-nobody")
    with pytest.raises(UnauthenticatedError):
        auth.authenticate("")


def test_token_cache_skips_introspector_within_ttl():
    store = StaticTokenStore({"t": {"identity": "u", "groups": []}})
    fake_now = [0.0]
    auth = Authenticator(introspector=store, ttl_s=60.0, clock=lambda: fake_now[0])
    auth.authenticate("t")
    auth.authenticate("t")
    auth.authenticate("t")
    assert store.calls == 1  # cache hits within TTL
    fake_now[0] = 61.0
    auth.authenticate("t")
    assert store.calls == 2  # TTL expiry forces re-introspection


def test_cache_invalidation_forces_lookup():
    store = StaticTokenStore({"t": {"identity": "u", "groups": []}})
    auth = Authenticator(introspector=store, ttl_s=60.0)
    auth.authenticate("t")
    auth.invalidate("t")
    auth.authenticate("t")
    assert store.calls == 2
