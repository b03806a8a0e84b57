from __future__ import annotations

import threading

import pytest

from conftest import ALICE, BOB, CAROL
from steer.errors import ForbiddenError, InvalidParameterError, NotFoundError
from steer.store import FileBackend, SampleStore


def make_store(**kwargs) -> SampleStore:
    return SampleStore(**kwargs)


def open_stream(store, cap=None, providers=("alice",), queriers=("alice",)):
    return store.create_datastream(
        "stream", ALICE, providers=set(providers), queriers=set(queriers), retention_cap=cap
    )


def test_create_assigns_fresh_id_and_owner():
    store = make_store()
    a = store.create_datastream("cluster1", ALICE, default_decision={"cluster_id": "c1"})
    b = store.create_datastream("cluster1", ALICE)
    assert a.id != b.id
    assert a.owner == "alice"
    assert a.default_decision == {"cluster_id": "c1"}
    assert store.get_datastream(a.id).default_decision == {"cluster_id": "c1"}


def test_create_rejects_empty_name_and_bad_principals():
    store = make_store()
    with pytest.raises(InvalidParameterError):
        store.create_datastream("", ALICE)
    with pytest.raises(InvalidParameterError):
        store.create_datastream("x", ALICE, providers={""})


def test_minimal_create_leaves_roles_empty():
    store = make_store()
    ds = store.create_datastream("x", ALICE)
    assert ds.providers == set() and ds.queriers == set()
    with pytest.raises(ForbiddenError):
        store.ingest_sample(ds.id, 1.0, ALICE)  # ownership does not imply provider


def test_update_patch_semantics_and_ownership_transfer():
    store = make_store()
    ds = open_stream(store)
    unchanged = store.update_datastream(ds.id, {}, ALICE)
    assert unchanged.name == ds.name and unchanged.owner == ds.owner

    updated = store.update_datastream(ds.id, {"owner": "bob"}, ALICE)
    assert updated.owner == "bob"
    with pytest.raises(ForbiddenError):
        store.update_datastream(ds.id, {"name": "mine-again"}, ALICE)
    renamed = store.update_datastream(ds.id, {"name": "theirs"}, BOB)
    assert renamed.name == "theirs"


def test_update_rejects_non_owner_and_unknown_fields():
    store = make_store()
    ds = open_stream(store, providers=("bob",))
    with pytest.raises(ForbiddenError):
        store.update_datastream(ds.id, {"name": "nope"}, BOB)
    with pytest.raises(InvalidParameterError):
        store.update_datastream(ds.id, {"retention_cap": 2}, ALICE)


def test_delete_requires_owner_then_404s():
    store = make_store()
    ds = open_stream(store, queriers=("carol",))
    with pytest.raises(ForbiddenError):
        store.delete_datastream(ds.id, CAROL)
    store.delete_datastream(ds.id, ALICE)
    with pytest.raises(NotFoundError):
        store.get_datastream(ds.id)
    with pytest.raises(NotFoundError):
        store.snapshot(ds.id)


def test_ingest_assigns_increasing_seqs_and_timestamps():
    store = make_store()
    ds = open_stream(store)
    samples = [store.ingest_sample(ds.id, v, ALICE) for v in (1, 2, 3)]
    assert [s.seq for s in samples] == [1, 2, 3]
    stamps = [s.timestamp_micros for s in samples]
    assert stamps == sorted(stamps)


def test_ingest_requires_provider_and_finite_value():
    store = make_store()
    ds = open_stream(store, providers=("bob",))
    with pytest.raises(ForbiddenError):
        store.ingest_sample(ds.id, 1.0, CAROL)
    with pytest.raises(InvalidParameterError):
        store.ingest_sample(ds.id, float("nan"), BOB)
    with pytest.raises(InvalidParameterError):
        store.ingest_sample(ds.id, True, BOB)
    with pytest.raises(NotFoundError):
        store.ingest_sample("no-such-id", 1.0, BOB)


def test_eviction_keeps_newest_at_cap():
    store = make_store()
    ds = open_stream(store, cap=5)
    for v in range(1, 7):
        store.ingest_sample(ds.id, float(v), ALICE)
    snap = store.snapshot(ds.id)
    assert [s.seq for s in snap.samples()] == [2, 3, 4, 5, 6]
    assert [s.value for s in snap.samples()] == [2.0, 3.0, 4.0, 5.0, 6.0]


def test_batch_is_atomic_and_contiguous():
    store = make_store()
    ds = open_stream(store, cap=5)
    store.ingest_sample(ds.id, 0.0, ALICE)
    out = store.ingest_batch(ds.id, [1, 2, 3], ALICE)
    assert [s.seq for s in out] == [2, 3, 4]
    with pytest.raises(InvalidParameterError):
        store.ingest_batch(ds.id, [4, float("inf"), 5], ALICE)
    assert store.sample_count(ds.id) == 4  # nothing from the bad batch landed

    store.ingest_batch(ds.id, list(range(10)), ALICE)
    snap = store.snapshot(ds.id)
    assert snap.n == 5
    assert [s.value for s in snap.samples()] == [5.0, 6.0, 7.0, 8.0, 9.0]


def test_snapshot_is_immutable_under_concurrent_ingest():
    store = make_store()
    ds = open_stream(store, cap=100)
    store.ingest_batch(ds.id, [1, 2, 3], ALICE)
    snap = store.snapshot(ds.id)
    store.ingest_batch(ds.id, list(range(200)), ALICE)  # grows and evicts
    assert snap.n == 3
    assert [s.value for s in snap.samples()] == [1.0, 2.0, 3.0]
    with pytest.raises(ValueError):
        snap.values[0] = 99.0  # read-only view


def test_empty_snapshot():
    store = make_store()
    ds = open_stream(store)
    snap = store.snapshot(ds.id)
    assert snap.n == 0 and snap.upper_seq == 0


def test_snapshot_after_eviction_excludes_evicted():
    store = make_store()
    ds = open_stream(store, cap=3)
    store.ingest_batch(ds.id, list(range(8)), ALICE)
    snap = store.snapshot(ds.id)
    assert snap.first_seq == 6 and snap.upper_seq == 8
    assert all(s.seq > 5 for s in snap.samples())


def test_concurrent_ingest_yields_gap_free_seqs():
    store = make_store()
    ds = open_stream(store, cap=10_000)
    errors = []

    def worker():
        try:
            for _ in range(200):
                store.ingest_sample(ds.id, 1.0, ALICE)
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    snap = store.snapshot(ds.id)
    seqs = [s.seq for s in snap.samples()]
    assert seqs == list(range(1, 1601))
    stamps = snap.timestamps
    assert all(stamps[i] <= stamps[i + 1] for i in range(len(stamps) - 1))


def test_file_backend_round_trip(tmp_path):
    backend = FileBackend(tmp_path)
    store = SampleStore(backend=backend)
    ds = open_stream(store, cap=4)
    store.ingest_batch(ds.id, [1, 2, 3, 4, 5, 6], ALICE)
    other = store.create_datastream("other", ALICE, providers={"alice"})
    store.ingest_sample(other.id, 9.0, ALICE)
    before = [(s.seq, s.timestamp_micros, s.value) for s in store.snapshot(ds.id).samples()]
    store.close()

    reopened = SampleStore(backend=FileBackend(tmp_path))
    meta = reopened.get_datastream(ds.id)
    assert meta.name == "stream" and meta.retention_cap == 4
    after = [(s.seq, s.timestamp_micros, s.value) for s in reopened.snapshot(ds.id).samples()]
    assert after == before
    assert reopened.sample_count(other.id) == 1
    reopened.close()


def test_file_backend_compaction_drops_dead_records(tmp_path):
    backend = FileBackend(tmp_path, compact_threshold=10)
    store = SampleStore(backend=backend)
    ds = open_stream(store, cap=2)
    for v in range(20):  # 18 evictions > threshold
        store.ingest_sample(ds.id, float(v), ALICE)
    store.close()
    lines = [l for l in (tmp_path / "samples.log").read_text().splitlines() if l.strip()]
    # compaction ran at least once: far fewer lines than the 20 ingested,
    # bounded by live records plus one threshold's worth of new appends
    assert len(lines) <= 2 + 10
    reopened = SampleStore(backend=FileBackend(tmp_path))
    assert [s.value for s in reopened.snapshot(ds.id).samples()] == [18.0, 19.0]
    reopened.close()


def test_delete_persists_across_reopen(tmp_path):
    store = SampleStore(backend=FileBackend(tmp_path))
    ds = open_stream(store)
    store.ingest_sample(ds.id, 1.0, ALICE)
    store.delete_datastream(ds.id, ALICE)
    store.close()
    reopened = SampleStore(backend=FileBackend(tmp_path))
    with pytest.raises(NotFoundError):
        reopened.get_datastream(ds.id)
    reopened.close()


@pytest.mark.long
def test_retention_soak_at_production_cap():
    store = make_store()
    ds = open_stream(store, cap=1_000_000)
    chunk = list(map(float, range(10_000)))
    for _ in range(110):  # 1.1M samples
        store.ingest_batch(ds.id, chunk, ALICE)
    assert store.sample_count(ds.id) == 1_000_000
    snap = store.snapshot(ds.id)
    assert snap.first_seq == 100_001 and snap.upper_seq == 1_100_000
