"""Replicated server-announcement store: last-writer-wins entries with TTL
expiry, merged by gossip anti-entropy. Every server node embeds a replica; a
standalone registry process acts as a bootstrap seed.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, replace

from .allocation import BlockRange
from .errors import InputError, SwarmError
from .transport import MSG

DEFAULT_TTL_MS = 30_000
TOMBSTONE_TTL_MS = 10_000
DEFAULT_GOSSIP_PERIOD_MS = 2_000

STATE_JOINING = "joining"
STATE_ONLINE = "online"
STATE_OFFLINE = "offline"


def new_server_id() -> str:
    return os.urandom(16).hex()


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class ServerEntry:
    server_id: str  # 16 random bytes, hex-encoded
    address: str
    range: BlockRange
    throughput: float
    announced_at: int  # unix millis
    ttl_ms: int = DEFAULT_TTL_MS
    state: str = STATE_ONLINE

    def __post_init__(self):
        if self.state not in (STATE_JOINING, STATE_ONLINE, STATE_OFFLINE):
            raise InputError(f"bad state {self.state!r}")
        if self.state == STATE_ONLINE and self.throughput <= 0:
            raise InputError("online entries need positive throughput")
        if self.ttl_ms <= 0:
            raise InputError("ttl must be positive")

    def expired(self, now: int) -> bool:
        return now >= self.announced_at + self.ttl_ms

    def to_dict(self) -> dict:
        return {
            "id": self.server_id,
            "address": self.address,
            "start": self.range.start,
            "end": self.range.end,
            "throughput": self.throughput,
            "announced_at": self.announced_at,
            "ttl_ms": self.ttl_ms,
            "state": self.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ServerEntry":
        return cls(
            server_id=d["id"],
            address=d["address"],
            range=BlockRange(d["start"], d["end"]),
            throughput=d["throughput"],
            announced_at=d["announced_at"],
            ttl_ms=d["ttl_ms"],
            state=d["state"],
        )


def _wins(a: ServerEntry, b: ServerEntry) -> ServerEntry:
    """LWW per server_id. Entries being compared share the id, so timestamp
    ties fall back to serialized content, keeping the merge a semilattice."""
    if a.announced_at != b.announced_at:
        return a if a.announced_at > b.announced_at else b
    # Same id, same timestamp: pick deterministically by serialized content.
    return a if json.dumps(a.to_dict(), sort_keys=True) >= json.dumps(b.to_dict(), sort_keys=True) else b


def merge(local: dict[str, ServerEntry], remote: dict[str, ServerEntry]) -> dict[str, ServerEntry]:
    """Join-semilattice merge of two snapshots (idempotent, commutative,
    associative)."""
    out = dict(local)
    for sid, entry in remote.items():
        mine = out.get(sid)
        out[sid] = entry if mine is None else _wins(mine, entry)
    return out


def snapshot_to_json(snap: dict[str, ServerEntry]) -> bytes:
    return json.dumps([e.to_dict() for e in snap.values()], sort_keys=True).encode()


def snapshot_from_json(data: bytes) -> dict[str, ServerEntry]:
    try:
        entries = [ServerEntry.from_dict(d) for d in json.loads(data.decode())]
    except (ValueError, KeyError, InputError) as e:
        raise InputError(f"malformed snapshot: {e}") from e
    return {e.server_id: e for e in entries}


class RegistryReplica:
    """Thread-safe snapshot holder; one per node."""

    def __init__(self):
        self._snap: dict[str, ServerEntry] = {}
        self._lock = threading.Lock()

    def announce(self, entry: ServerEntry) -> None:
        with self._lock:
            mine = self._snap.get(entry.server_id)
            self._snap[entry.server_id] = entry if mine is None else _wins(mine, entry)

    def snapshot(self) -> dict[str, ServerEntry]:
        with self._lock:
            return dict(self._snap)

    def merge_remote(self, remote: dict[str, ServerEntry]) -> None:
        with self._lock:
            self._snap = merge(self._snap, remote)

    def get_module_infos(self, query: BlockRange, now: int | None = None) -> list[ServerEntry]:
        """Unexpired online entries intersecting the query range."""
        now = now_ms() if now is None else now
        snap = self.snapshot()
        hits = [
            e
            for e in snap.values()
            if e.state == STATE_ONLINE and not e.expired(now) and e.range.intersects(query)
        ]
        return sorted(hits, key=lambda e: (e.range.start, e.server_id))

    def prune(self, now: int | None = None) -> None:
        """Drop entries expired long enough that LWW can never resurrect them."""
        now = now_ms() if now is None else now
        with self._lock:
            self._snap = {sid: e for sid, e in self._snap.items() if now < e.announced_at + 2 * e.ttl_ms}


def gossip_with_peer(replica: RegistryReplica, peer_address: str, pool, deadline_ms: float = 3000.0) -> bool:
    """One push-pull exchange; returns True when the peer answered."""
    payload = snapshot_to_json(replica.snapshot())
    try:
        reply = pool.get(peer_address).call(MSG.GOSSIP, payload, deadline_ms)
        replica.merge_remote(snapshot_from_json(reply))
        return True
    except SwarmError as e:
        logging.getLogger(__name__).debug("gossip with %s failed: %s", peer_address, e)
        pool.drop(peer_address)
        return False


def handle_gossip(replica: RegistryReplica, payload: bytes) -> bytes:
    """Server side of the exchange: merge theirs, reply with ours."""
    replica.merge_remote(snapshot_from_json(payload))
    return snapshot_to_json(replica.snapshot())


class RegistrySeed:
    """Standalone bootstrap node: a registry replica with no model blocks."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, n_blocks: int | None = None):
        from .transport import RpcServer  # avoid a cycle at import time

        self.replica = RegistryReplica()
        self.n_blocks = n_blocks
        self.rpc = RpcServer(host, port, self._dispatch)

    @property
    def address(self) -> str:
        return self.rpc.address

    def start(self) -> "RegistrySeed":
        self.rpc.start()
        return self

    def stop(self):
        self.rpc.stop()

    def _dispatch(self, msg_type: int, payload: bytes):
        from .errors import ERR_BAD_REQUEST, RemoteError

        if msg_type == MSG.PING:
            return MSG.PING, b""
        if msg_type == MSG.ANNOUNCE:
            self.replica.announce(ServerEntry.from_dict(json.loads(payload.decode())))
            return MSG.ANNOUNCE, b""
        if msg_type == MSG.LOOKUP:
            q = json.loads(payload.decode())
            hits = self.replica.get_module_infos(BlockRange(q["start"], q["end"]))
            return MSG.LOOKUP, json.dumps([e.to_dict() for e in hits]).encode()
        if msg_type == MSG.GOSSIP:
            return MSG.GOSSIP, handle_gossip(self.replica, payload)
        raise RemoteError(ERR_BAD_REQUEST, f"registry seed cannot serve 0x{msg_type:02x}")
