"""Replicated announcement store: LWW merge semilattice, TTL expiry, gossip
convergence on simulated topologies, and the live bootstrap seed."""

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmlm.allocation import BlockRange
from swarmlm.errors import InputError
from swarmlm.registry import (
    DEFAULT_TTL_MS,
    RegistryReplica,
    RegistrySeed,
    ServerEntry,
    merge,
    new_server_id,
    snapshot_from_json,
    snapshot_to_json,
)
from swarmlm.transport import MSG, rpc_call


def entry(sid="a" * 32, start=0, end=2, tp=5.0, at=1000, ttl=DEFAULT_TTL_MS, state="online", address="127.0.0.1:1"):
    return ServerEntry(
        server_id=sid, address=address, range=BlockRange(start, end),
        throughput=tp, announced_at=at, ttl_ms=ttl, state=state,
    )


# -- entries -------------------------------------------------------------------


def test_new_server_id_format():
    sid = new_server_id()
    assert len(sid) == 32
    assert sid != new_server_id()
    bytes.fromhex(sid)  # hex-decodable


def test_entry_round_trip_json():
    e = entry()
    assert ServerEntry.from_dict(e.to_dict()) == e


def test_entry_expiry():
    e = entry(at=0, ttl=30000)
    assert not e.expired(29999)
    assert e.expired(30001)


def test_entry_rejects_bad_range():
    with pytest.raises(InputError):
        entry(start=3, end=3)


# -- announce / lookup -----------------------------------------------------------


def test_announce_then_read():
    r = RegistryReplica()
    r.announce(entry())
    assert len(r.get_module_infos(BlockRange(0, 4), now=2000)) == 1


def test_announce_lww_keeps_newer():
    r = RegistryReplica()
    r.announce(entry(at=10, tp=1.0))
    r.announce(entry(at=5, tp=2.0))
    (e,) = r.get_module_infos(BlockRange(0, 4), now=20)
    assert e.announced_at == 10
    assert e.throughput == 1.0


def test_lookup_interval_intersection():
    r = RegistryReplica()
    r.announce(entry(start=0, end=4, at=0))
    assert len(r.get_module_infos(BlockRange(3, 5), now=1)) == 1
    assert len(r.get_module_infos(BlockRange(4, 5), now=1)) == 0


def test_lookup_excludes_expired():
    r = RegistryReplica()
    r.announce(entry(at=0, ttl=30000))
    assert len(r.get_module_infos(BlockRange(0, 4), now=30001)) == 0


def test_lookup_excludes_offline():
    r = RegistryReplica()
    r.announce(entry(at=0, state="offline"))
    assert len(r.get_module_infos(BlockRange(0, 4), now=1)) == 0


def test_lookup_sorted_by_start_then_id():
    r = RegistryReplica()
    r.announce(entry(sid="b" * 32, start=2, end=4, at=0, address="127.0.0.1:2"))
    r.announce(entry(sid="c" * 32, start=0, end=2, at=0, address="127.0.0.1:3"))
    r.announce(entry(sid="a" * 32, start=0, end=2, at=0, address="127.0.0.1:4"))
    got = [e.server_id for e in r.get_module_infos(BlockRange(0, 4), now=1)]
    assert got == ["a" * 32, "c" * 32, "b" * 32]


# -- merge semilattice -------------------------------------------------------------


entry_strategy = st.builds(
    entry,
    sid=st.sampled_from(["a" * 32, "b" * 32, "c" * 32]),
    start=st.integers(0, 2),
    end=st.integers(3, 4),
    tp=st.floats(0.1, 10, allow_nan=False),
    at=st.integers(0, 100),
    state=st.sampled_from(["online", "offline", "joining"]),
)

snapshot_strategy = st.lists(entry_strategy, max_size=5).map(
    lambda es: {e.server_id: e for e in es}
)


def test_merge_disjoint_union():
    a = {"x": entry(sid="x" * 32)}
    b = {"y": entry(sid="y" * 32)}
    assert set(merge(a, b)) == {"x", "y"}


@settings(max_examples=200, deadline=None)
@given(snapshot_strategy)
def test_merge_idempotent(a):
    assert merge(a, a) == a


@settings(max_examples=200, deadline=None)
@given(snapshot_strategy, snapshot_strategy)
def test_merge_commutative(a, b):
    assert merge(a, b) == merge(b, a)


@settings(max_examples=200, deadline=None)
@given(snapshot_strategy, snapshot_strategy, snapshot_strategy)
def test_merge_associative(a, b, c):
    assert merge(merge(a, b), c) == merge(a, merge(b, c))


def test_snapshot_json_round_trip():
    snap = {"a" * 32: entry(), "b" * 32: entry(sid="b" * 32, state="offline")}
    assert snapshot_from_json(snapshot_to_json(snap)) == snap


# -- gossip simulation ---------------------------------------------------------------


def simulate_gossip(replicas, edges, rounds):
    """Synchronous push-pull rounds over a fixed peer graph."""
    for _ in range(rounds):
        for i, j in edges:
            snap_i, snap_j = replicas[i].snapshot(), replicas[j].snapshot()
            replicas[i].merge_remote(snap_j)
            replicas[j].merge_remote(snap_i)


def test_two_node_convergence_one_round():
    a, b = RegistryReplica(), RegistryReplica()
    a.announce(entry(sid="a" * 32))
    b.announce(entry(sid="b" * 32, address="127.0.0.1:2"))
    simulate_gossip([a, b], [(0, 1)], 1)
    assert a.snapshot() == b.snapshot()
    assert len(a.snapshot()) == 2


def test_ring_of_four_converges_in_three_rounds():
    replicas = [RegistryReplica() for _ in range(4)]
    for i, r in enumerate(replicas):
        r.announce(entry(sid=f"{i}" * 32, address=f"127.0.0.1:{i + 1}"))
    ring = [(0, 1), (1, 2), (2, 3), (3, 0)]
    simulate_gossip(replicas, ring, 3)
    snaps = [r.snapshot() for r in replicas]
    assert all(s == snaps[0] for s in snaps)
    assert len(snaps[0]) == 4


def test_ttl_expiry_on_every_replica():
    replicas = [RegistryReplica() for _ in range(4)]
    replicas[0].announce(entry(sid="z" * 32, at=0, ttl=100))
    simulate_gossip(replicas, [(0, 1), (1, 2), (2, 3), (3, 0)], 3)
    for r in replicas:
        assert len(r.get_module_infos(BlockRange(0, 4), now=50)) == 1
        assert len(r.get_module_infos(BlockRange(0, 4), now=101)) == 0


def test_prune_drops_long_expired():
    r = RegistryReplica()
    r.announce(entry(at=0, ttl=100))
    r.prune(now=10 * 100)
    assert r.snapshot() == {}


# -- live seed over RPC -----------------------------------------------------------


def test_registry_seed_announce_lookup():
    import json

    from swarmlm.registry import now_ms

    seed = RegistrySeed("127.0.0.1", 0).start()
    try:
        e = entry(at=now_ms())
        rpc_call(seed.address, MSG.ANNOUNCE, json.dumps(e.to_dict()).encode(), 3000.0)
        reply = rpc_call(seed.address, MSG.LOOKUP, json.dumps({"start": 0, "end": 4}).encode(), 3000.0)
        entries = [ServerEntry.from_dict(d) for d in json.loads(reply.decode())]
        assert [x.server_id for x in entries] == [e.server_id]
    finally:
        seed.stop()


def test_registry_seed_ping():
    seed = RegistrySeed("127.0.0.1", 0).start()
    try:
        assert rpc_call(seed.address, MSG.PING, b"", 3000.0) == b""
    finally:
        seed.stop()
