"""Server node: hosts a contiguous block range, serves inference steps with
per-session KV caches and forward/backward for training, announces itself to
the replicated registry, and periodically considers rebalancing.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import registry as reg
from .allocation import BlockRange, SwarmView, block_throughputs, choose_interval, server_throughput, should_rebalance
from .errors import (
    ERR_BAD_REQUEST,
    ERR_BUSY,
    ERR_CAPACITY,
    ERR_DESYNC,
    ERR_UNKNOWN_SESSION,
    ERR_UNKNOWN_TAPE,
    InputError,
    RemoteError,
    SwarmError,
)
from .model import Checkpoint, KvCache, block_backward, block_forward, load_checkpoint
from .quant import QuantizedBlockWeights
from .transport import MSG, ConnectionPool, LinkShape, RpcServer, decode_tensor, encode_tensor
from .transport.wire import ENC_F32, ENC_INT8

log = logging.getLogger(__name__)

DEFAULT_CAPACITY = 64
DEFAULT_CACHE_BUDGET = 65536
SESSION_IDLE_TIMEOUT_S = 120.0
TAPE_TTL_S = 60.0
SERVER_VERSION = "0.1.0"
DEFAULT_NET_BYTES_PER_S = 1.25e8  # assume ~1 Gbit/s when the link is unshaped


@dataclass
class ServerConfig:
    checkpoint_path: str
    host: str = "127.0.0.1"
    port: int = 0
    blocks: str | tuple[int, int] = "auto"  # "auto" or explicit (start, end)
    span: int | None = None  # used by the auto policy
    quantize: str = "none"  # none | activations | weights | both
    bootstrap: list[str] = field(default_factory=list)
    shape: LinkShape | None = None
    capacity: int = DEFAULT_CAPACITY
    cache_budget_tokens: int = DEFAULT_CACHE_BUDGET
    ttl_ms: int = reg.DEFAULT_TTL_MS
    gossip_period_ms: int = reg.DEFAULT_GOSSIP_PERIOD_MS
    rebalance_eps: float = 0.2
    rebalance_period_s: tuple[float, float] = (5.0, 10.0)
    measure_steps: int = 100
    net_bytes_per_s: float = DEFAULT_NET_BYTES_PER_S
    remeasure_period_s: float = 60.0


class _Session:
    def __init__(self, session_id: bytes, n_blocks: int, config, max_len: int):
        self.session_id = session_id
        self.caches = [KvCache.empty(config) for _ in range(n_blocks)]
        self.position = 0
        self.max_len = max_len
        self.last_active = time.monotonic()
        self.lock = threading.Lock()
        self.last_step: tuple[int, bytes, bytes] | None = None  # (start_pos, input digest, reply)


class ServerNode:
    """One server process (runnable in-process for tests)."""

    def __init__(self, config: ServerConfig, checkpoint: Checkpoint | None = None):
        self.config = config
        self.ckpt = checkpoint if checkpoint is not None else load_checkpoint(config.checkpoint_path)
        self.server_id = reg.new_server_id()
        self.replica = reg.RegistryReplica()
        self.pool = ConnectionPool(shape=None)  # peer gossip links stay unshaped
        self._sessions: dict[bytes, _Session] = {}
        self._sessions_lock = threading.Lock()
        self._tapes: dict[bytes, tuple[float, list]] = {}
        self._tapes_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.range: BlockRange | None = None
        self.throughput = 0.0
        self._qweights: list[QuantizedBlockWeights] | None = None
        self.rpc: RpcServer | None = None
        self.events: list[dict] = []  # rebalance/announce event log for tests and churn metrics

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "ServerNode":
        self.rpc = RpcServer(self.config.host, self.config.port, self._dispatch, shape=self.config.shape)
        self.rpc.start()
        self._bootstrap_pull()
        self.range = self._pick_range()
        if self.config.quantize in ("weights", "both"):
            self._qweights = [
                QuantizedBlockWeights.from_block(self.ckpt.blocks[i])
                for i in range(self.range.start, self.range.end)
            ]
        self._announce(reg.STATE_JOINING, throughput=1e-6)
        self.throughput = self.measure_throughput()
        self._announce(reg.STATE_ONLINE)
        self._push_to_peers()
        for target in (self._announce_loop, self._gossip_loop, self._rebalance_loop, self._janitor_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        log.info("server %s serving blocks [%d, %d) at %s", self.server_id[:8], self.range.start, self.range.end, self.address)
        return self

    @property
    def address(self) -> str:
        return self.rpc.address

    def stop(self):
        """Graceful shutdown: tombstone first so departure propagates fast."""
        if self._stop.is_set():
            return
        self._announce(reg.STATE_OFFLINE, ttl_ms=reg.TOMBSTONE_TTL_MS)
        self._push_to_peers()
        self._stop.set()
        self.rpc.stop()
        self.pool.close_all()

    def kill(self):
        """Crash simulation: vanish without announcing anything."""
        self._stop.set()
        self.rpc.kill()
        self.pool.close_all()

    # -- startup helpers ----------------------------------------------------

    def _bootstrap_pull(self):
        for peer in self.config.bootstrap:
            reg.gossip_with_peer(self.replica, peer, self.pool)

    def _pick_range(self) -> BlockRange:
        L = self.ckpt.config.n_layers
        if self.config.blocks != "auto":
            s, e = self.config.blocks
            if not (0 <= s < e <= L):
                raise InputError(f"explicit block range [{s}, {e}) outside [0, {L})")
            return BlockRange(s, e)
        k = self.config.span or L
        if k > L:
            raise InputError("span exceeds layer count")
        view = self._swarm_view()
        start = choose_interval(block_throughputs(view), k, max(self.throughput, 1.0))
        return BlockRange(start, start + k)

    def _swarm_view(self) -> SwarmView:
        entries = self.replica.get_module_infos(BlockRange(0, self.ckpt.config.n_layers))
        return SwarmView(
            self.ckpt.config.n_layers,
            [(e.server_id, e.range, e.throughput) for e in entries],
        )

    def _entry(self, state: str, throughput: float | None = None, ttl_ms: int | None = None) -> reg.ServerEntry:
        return reg.ServerEntry(
            server_id=self.server_id,
            address=self.address,
            range=self.range,
            throughput=throughput if throughput is not None else max(self.throughput, 1e-6),
            announced_at=reg.now_ms(),
            ttl_ms=ttl_ms or self.config.ttl_ms,
            state=state,
        )

    def _announce(self, state: str, throughput: float | None = None, ttl_ms: int | None = None):
        self.replica.announce(self._entry(state, throughput, ttl_ms))
        self.events.append({"t": reg.now_ms(), "event": "announce", "state": state, "range": [self.range.start, self.range.end]})

    def _gossip_peers(self) -> list[str]:
        peers = set(self.config.bootstrap)
        for e in self.replica.snapshot().values():
            if e.server_id != self.server_id and e.state != reg.STATE_OFFLINE:
                peers.add(e.address)
        return sorted(peers)

    def _push_to_peers(self):
        for peer in self._gossip_peers():
            reg.gossip_with_peer(self.replica, peer, self.pool)

    # -- periodic loops -----------------------------------------------------

    def _announce_loop(self):
        period = self.config.ttl_ms / 3000.0
        last_measure = time.monotonic()
        while not self._stop.wait(period):
            if time.monotonic() - last_measure > self.config.remeasure_period_s:
                self.throughput = self.measure_throughput()
                last_measure = time.monotonic()
            self._announce(reg.STATE_ONLINE)

    def _gossip_loop(self):
        while not self._stop.wait(self.config.gossip_period_ms / 1000.0):
            peers = self._gossip_peers()
            if peers:
                reg.gossip_with_peer(self.replica, random.choice(peers), self.pool)
            self.replica.prune()

    def _rebalance_loop(self):
        lo, hi = self.config.rebalance_period_s
        while not self._stop.wait(random.uniform(lo, hi)):
            try:
                self.maybe_rebalance()
            except SwarmError as e:
                log.warning("rebalance check failed: %s", e)

    def _janitor_loop(self):
        while not self._stop.wait(5.0):
            now = time.monotonic()
            with self._sessions_lock:
                stale = [sid for sid, s in self._sessions.items() if now - s.last_active > SESSION_IDLE_TIMEOUT_S]
                for sid in stale:
                    del self._sessions[sid]
            with self._tapes_lock:
                dead = [tid for tid, (born, _) in self._tapes.items() if now - born > TAPE_TTL_S]
                for tid in dead:
                    del self._tapes[tid]

    def maybe_rebalance(self) -> bool:
        """One rebalancing check; moves and re-announces when worthwhile."""
        view = self._swarm_view()
        if not any(s[0] == self.server_id for s in view.servers):
            return False
        new_start = should_rebalance(view, self.server_id, len(self.range), self.config.rebalance_eps)
        if new_start is None:
            return False
        old = self.range
        self._announce(reg.STATE_OFFLINE, ttl_ms=reg.TOMBSTONE_TTL_MS)
        self.range = BlockRange(new_start, new_start + len(old))
        if self.config.quantize in ("weights", "both"):
            self._qweights = [
                QuantizedBlockWeights.from_block(self.ckpt.blocks[i])
                for i in range(self.range.start, self.range.end)
            ]
        with self._sessions_lock:
            self._sessions.clear()  # pinned sessions fail over via client recovery
        self.throughput = self.measure_throughput()
        self._announce(reg.STATE_ONLINE)
        self._push_to_peers()
        self.events.append({"t": reg.now_ms(), "event": "rebalance", "from": [old.start, old.end], "to": [self.range.start, self.range.end]})
        log.info("server %s rebalanced [%d,%d) -> [%d,%d)", self.server_id[:8], old.start, old.end, self.range.start, self.range.end)
        return True

    # -- measurement --------------------------------------------------------

    def measure_throughput(self) -> float:
        """min(compute, network) tokens/s over the hosted span."""
        cfg = self.ckpt.config
        steps = max(1, self.config.measure_steps)
        hidden = np.zeros((1, cfg.hidden), np.float32)
        caches = [KvCache.empty(cfg) for _ in range(len(self.range))]
        t0 = time.perf_counter()
        pos = 0
        for _ in range(steps):
            if pos >= cfg.max_seq:
                caches = [KvCache.empty(cfg) for _ in range(len(self.range))]
                pos = 0
            h = hidden
            for j, b in enumerate(range(self.range.start, self.range.end)):
                h, caches[j], _ = block_forward(self.ckpt.blocks[b], h, caches[j], pos, cfg)
            pos += 1
        compute_tps = steps / max(time.perf_counter() - t0, 1e-9)
        net = self.config.net_bytes_per_s
        if self.config.shape is not None and not np.isinf(self.config.shape.bandwidth_bits_per_s):
            net = self.config.shape.bandwidth_bits_per_s / 8.0
        return server_throughput(compute_tps, net, 4.0 * cfg.hidden)

    # -- weight integrity ---------------------------------------------------

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for i in range(self.range.start, self.range.end):
            for _, arr in self.ckpt.blocks[i].tensors():
                h.update(np.ascontiguousarray(arr, "<f4").tobytes())
        return h.hexdigest()

    # -- RPC dispatch -------------------------------------------------------

    def _dispatch(self, msg_type: int, payload: bytes):
        if msg_type == MSG.PING:
            return MSG.PING, b""
        if msg_type == MSG.INFO:
            return MSG.INFO, self._info_payload()
        if msg_type == MSG.OPEN_SESSION:
            return MSG.OPEN_SESSION, self._open_session(payload)
        if msg_type == MSG.STEP:
            return MSG.STEP, self._step(payload)
        if msg_type == MSG.CLOSE_SESSION:
            return MSG.CLOSE_SESSION, self._close_session(payload)
        if msg_type == MSG.FORWARD:
            return MSG.FORWARD, self._forward(payload)
        if msg_type == MSG.BACKWARD:
            return MSG.BACKWARD, self._backward(payload)
        if msg_type == MSG.ANNOUNCE:
            entry = reg.ServerEntry.from_dict(json.loads(payload.decode()))
            self.replica.announce(entry)
            return MSG.ANNOUNCE, b""
        if msg_type == MSG.LOOKUP:
            q = json.loads(payload.decode())
            hits = self.replica.get_module_infos(BlockRange(q["start"], q["end"]))
            return MSG.LOOKUP, json.dumps([e.to_dict() for e in hits]).encode()
        if msg_type == MSG.GOSSIP:
            return MSG.GOSSIP, reg.handle_gossip(self.replica, payload)
        raise RemoteError(ERR_BAD_REQUEST, f"unknown message type 0x{msg_type:02x}")

    def _info_payload(self) -> bytes:
        return json.dumps(
            {
                "server_id": self.server_id,
                "range": [self.range.start, self.range.end],
                "throughput": self.throughput,
                "position_capacity": self.config.cache_budget_tokens,
                "version": SERVER_VERSION,
                "weights_hash": self.weights_hash(),
                "quantize": self.config.quantize,
            }
        ).encode()

    def _reply_encoding(self) -> int:
        return ENC_INT8 if self.config.quantize in ("activations", "both") else ENC_F32

    # -- inference sessions --------------------------------------------------

    def _open_session(self, payload: bytes) -> bytes:
        if len(payload) != 20:
            raise RemoteError(ERR_BAD_REQUEST, "OPEN_SESSION wants 16-byte id + u32 max_len")
        sid, (max_len,) = payload[:16], struct.unpack(">I", payload[16:])
        if max_len < 1 or max_len > self.ckpt.config.max_seq:
            raise RemoteError(ERR_BAD_REQUEST, f"max_len must be in [1, {self.ckpt.config.max_seq}]")
        with self._sessions_lock:
            if sid in self._sessions:
                raise RemoteError(ERR_BAD_REQUEST, "duplicate session id")
            if len(self._sessions) >= self.config.capacity:
                raise RemoteError(ERR_BUSY, "session capacity exhausted")
            self._sessions[sid] = _Session(sid, len(self.range), self.ckpt.config, max_len)
        return b""

    def _get_session(self, sid: bytes) -> _Session:
        with self._sessions_lock:
            session = self._sessions.get(sid)
        if session is None:
            raise RemoteError(ERR_UNKNOWN_SESSION, "unknown session")
        return session

    def _step(self, payload: bytes) -> bytes:
        if len(payload) < 20:
            raise RemoteError(ERR_BAD_REQUEST, "short STEP payload")
        sid = payload[:16]
        (start_pos,) = struct.unpack(">I", payload[16:20])
        session = self._get_session(sid)
        digest = hashlib.sha256(payload[20:]).digest()
        hidden = decode_tensor(payload[20:])
        if hidden.ndim != 2:
            raise RemoteError(ERR_BAD_REQUEST, "STEP tensor must be 2-D [t, d]")
        t = hidden.shape[0]
        with session.lock:
            session.last_active = time.monotonic()
            if session.last_step is not None and start_pos + t == session.position:
                last_pos, last_digest, last_reply = session.last_step
                if last_pos == start_pos and last_digest == digest:
                    return last_reply  # idempotent retry of the previous step
            if start_pos != session.position:
                raise RemoteError(ERR_DESYNC, f"position mismatch: got {start_pos}, have {session.position}")
            if start_pos + t > session.max_len:
                raise RemoteError(ERR_CAPACITY, "session exceeds max_len")
            h = hidden
            for j, b in enumerate(range(self.range.start, self.range.end)):
                qw = self._qweights[j] if self._qweights else None
                h, session.caches[j], _ = block_forward(self.ckpt.blocks[b], h, session.caches[j], start_pos, self.ckpt.config, qw=qw)
            session.position += t
            reply = encode_tensor(h, self._reply_encoding())
            session.last_step = (start_pos, digest, reply)
        self._enforce_cache_budget()
        return reply

    def _close_session(self, payload: bytes) -> bytes:
        with self._sessions_lock:
            self._sessions.pop(payload[:16], None)
        return b""

    def _enforce_cache_budget(self):
        with self._sessions_lock:
            total = sum(s.position * len(self.range) for s in self._sessions.values())
            if total <= self.config.cache_budget_tokens:
                return
            by_idle = sorted(self._sessions.values(), key=lambda s: s.last_active)
            for victim in by_idle:
                del self._sessions[victim.session_id]
                total -= victim.position * len(self.range)
                if total <= self.config.cache_budget_tokens:
                    break

    # -- training ------------------------------------------------------------

    def _forward(self, payload: bytes) -> bytes:
        batch = decode_tensor(payload)
        if batch.ndim != 3:
            raise RemoteError(ERR_BAD_REQUEST, "FORWARD tensor must be [B, t, d]")
        cfg = self.ckpt.config
        tapes = []
        out = np.empty_like(batch)
        for r in range(batch.shape[0]):
            h = batch[r]
            row_tapes = []
            for b in range(self.range.start, self.range.end):
                h, _, tape = block_forward(self.ckpt.blocks[b], h, KvCache.empty(cfg), 0, cfg, want_tape=True)
                row_tapes.append(tape)
            out[r] = h
            tapes.append(row_tapes)
        tape_id = os.urandom(16)
        with self._tapes_lock:
            self._tapes[tape_id] = (time.monotonic(), tapes)
        return tape_id + encode_tensor(out, self._reply_encoding())

    def _backward(self, payload: bytes) -> bytes:
        if len(payload) < 16:
            raise RemoteError(ERR_BAD_REQUEST, "short BACKWARD payload")
        tape_id = payload[:16]
        with self._tapes_lock:
            item = self._tapes.pop(tape_id, None)  # consume-once
        if item is None:
            raise RemoteError(ERR_UNKNOWN_TAPE, "unknown or expired tape")
        _, tapes = item
        grad = decode_tensor(payload[16:])
        if grad.ndim != 3 or grad.shape[0] != len(tapes):
            raise RemoteError(ERR_BAD_REQUEST, "BACKWARD grad shape mismatch")
        out = np.empty_like(grad)
        for r, row_tapes in enumerate(tapes):
            g = grad[r]
            for b, tape in zip(range(self.range.end - 1, self.range.start - 1, -1), reversed(row_tapes)):
                g = block_backward(self.ckpt.blocks[b], tape, g, self.ckpt.config)
            out[r] = g
        # gradients are exchanged at full precision to avoid compounding error
        return encode_tensor(out, ENC_F32)
