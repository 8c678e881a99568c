"""Client library: discovery and pings, minimum-latency chain planning via
beam search, fault-tolerant inference sessions with replay recovery, and
distributed forward/backward for training.
"""

from __future__ import annotations

import json
import logging
import os
import statistics
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .allocation import BlockRange
from .errors import (
    ERR_BUSY,
    ERR_DESYNC,
    ERR_UNKNOWN_SESSION,
    ERR_UNKNOWN_TAPE,
    CapacityError,
    InputError,
    NoRouteError,
    RemoteError,
    SessionError,
    SwarmError,
    TimeoutError_,
    TransportError,
)
from .model import Checkpoint, embed, lm_head, load_checkpoint, sample_next
from .registry import ServerEntry, snapshot_from_json
from .transport import MSG, ConnectionPool, LinkShape, decode_tensor, encode_tensor
from .transport.wire import ENC_F32

log = logging.getLogger(__name__)

DEFAULT_BEAM_WIDTH = 8
PING_FANOUT = 16
ASSUMED_SERVER_BANDWIDTH_BPS = 1e8  # cost-model default when entries carry no link info
RECOVERY_BACKOFFS_S = (1.0, 2.0, 4.0)


@dataclass
class HopPlan:
    entry: ServerEntry
    blocks: BlockRange
    est_rtt_ms: float
    est_cost_s: float


def ping_servers(entries: list[ServerEntry], pool: ConnectionPool, attempts: int = 3, deadline_ms: float = 2000.0) -> dict[str, float]:
    """Median round-trip time per reachable server, in milliseconds."""

    def ping_one(entry: ServerEntry):
        samples = []
        for _ in range(attempts):
            t0 = time.monotonic()
            try:
                pool.get(entry.address).call(MSG.PING, b"", deadline_ms)
            except SwarmError:
                return entry.server_id, None
            samples.append((time.monotonic() - t0) * 1000.0)
        return entry.server_id, statistics.median(samples)

    results: dict[str, float] = {}
    with ThreadPoolExecutor(max_workers=PING_FANOUT) as ex:
        for sid, rtt in ex.map(ping_one, entries):
            if rtt is not None:
                results[sid] = rtt
    return results


def _plan_cover(
    entries: list[ServerEntry],
    rtts: dict[str, float],
    first_block: int,
    last_block: int,
    payload_bytes: int,
    beam_width: int,
) -> list[HopPlan]:
    """Beam search for the cheapest chain tiling [first_block, last_block).

    State = (next uncovered block, server of the previous hop). Hop cost is
    latency to reach the server, payload transfer, and compute time for its
    blocks; the final hop pays the return leg to the client. With beam width
    >= number of servers the search is exhaustive.
    """
    if beam_width < 1:
        raise InputError("beam_width must be >= 1")
    usable = [e for e in entries if e.server_id in rtts]
    covered = set()
    for e in usable:
        covered.update(range(max(e.range.start, first_block), min(e.range.end, last_block)))
    missing = [b for b in range(first_block, last_block) if b not in covered]
    if missing:
        raise NoRouteError(missing)

    def hop_cost(prev: ServerEntry | None, s: ServerEntry, n_blocks: int) -> float:
        rtt_s = rtts[s.server_id] / 1000.0
        lat = rtt_s / 2.0 if prev is None else (rtts[prev.server_id] / 1000.0 + rtt_s) / 4.0
        transfer = payload_bytes * 8.0 / ASSUMED_SERVER_BANDWIDTH_BPS
        return lat + transfer + n_blocks / s.throughput

    # states per next_block: {last_server_id: (cost, chain)}
    levels: dict[int, dict[str | None, tuple[float, list[HopPlan]]]] = {first_block: {None: (0.0, [])}}
    best_complete: tuple[float, list[HopPlan]] | None = None
    for nb in range(first_block, last_block):
        states = levels.pop(nb, None)
        if not states:
            continue
        ranked = sorted(states.items(), key=lambda kv: kv[1][0])[:beam_width]
        for _, (cost, chain) in ranked:
            prev = chain[-1].entry if chain else None
            for s in usable:
                if not (s.range.start <= nb < s.range.end):
                    continue
                if prev is not None and s.server_id == prev.server_id:
                    continue
                end = min(s.range.end, last_block)
                span = BlockRange(nb, end)
                c = cost + hop_cost(prev, s, len(span))
                hop = HopPlan(s, span, rtts[s.server_id], c)
                new_chain = chain + [hop]
                if end == last_block:
                    total = c + rtts[s.server_id] / 2000.0  # return leg to the client
                    if best_complete is None or total < best_complete[0]:
                        best_complete = (total, new_chain)
                else:
                    lvl = levels.setdefault(end, {})
                    old = lvl.get(s.server_id)
                    if old is None or c < old[0]:
                        lvl[s.server_id] = (c, new_chain)
    if best_complete is None:
        raise NoRouteError(missing_blocks=list(range(first_block, last_block)))
    return best_complete[1]


def plan_chain(
    entries: list[ServerEntry],
    rtts: dict[str, float],
    n_blocks: int,
    payload_bytes: int,
    beam_width: int = DEFAULT_BEAM_WIDTH,
) -> list[HopPlan]:
    """Cheapest chain covering all blocks [0, n_blocks)."""
    return _plan_cover(entries, rtts, 0, n_blocks, payload_bytes, beam_width)


@dataclass
class _Hop:
    plan: HopPlan
    session_id: bytes
    replay: list[tuple[int, np.ndarray]] = field(default_factory=list)


class SwarmClient:
    """Entry point for talking to a swarm; holds the local model halves."""

    def __init__(
        self,
        checkpoint: Checkpoint | str,
        bootstrap: list[str],
        shape: LinkShape | None = None,
        encoding: int = ENC_F32,
        beam_width: int = DEFAULT_BEAM_WIDTH,
    ):
        self.ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        self.bootstrap = list(bootstrap)
        self.pool = ConnectionPool(shape=shape)
        self.encoding = encoding
        self.beam_width = beam_width
        self._known_peers = list(bootstrap)

    @property
    def n_blocks(self) -> int:
        return self.ckpt.config.n_layers

    def close(self):
        self.pool.close_all()

    # -- discovery ----------------------------------------------------------

    def lookup(self, block_range: BlockRange | None = None) -> list[ServerEntry]:
        block_range = block_range or BlockRange(0, self.n_blocks)
        payload = json.dumps({"start": block_range.start, "end": block_range.end}).encode()
        last_err: SwarmError | None = None
        for peer in list(self._known_peers):
            try:
                reply = self.pool.get(peer).call(MSG.LOOKUP, payload, 5000.0)
            except SwarmError as e:
                last_err = e
                self.pool.drop(peer)
                continue
            entries = [ServerEntry.from_dict(d) for d in json.loads(reply.decode())]
            for e in entries:
                if e.address not in self._known_peers:
                    self._known_peers.append(e.address)
            return entries
        raise TransportError(f"no registry peer reachable: {last_err}")

    def plan(self, payload_bytes: int | None = None, exclude: set[str] = frozenset(), block_range: BlockRange | None = None) -> list[HopPlan]:
        block_range = block_range or BlockRange(0, self.n_blocks)
        entries = [e for e in self.lookup(block_range) if e.server_id not in exclude]
        rtts = ping_servers(entries, self.pool)
        payload = payload_bytes if payload_bytes is not None else 4 * self.ckpt.config.hidden
        return _plan_cover(entries, rtts, block_range.start, block_range.end, payload, self.beam_width)

    # -- inference ----------------------------------------------------------

    def create_session(self, max_len: int | None = None) -> "InferenceSession":
        max_len = max_len or self.ckpt.config.max_seq
        exclude: set[str] = set()
        last_err: Exception | None = None
        for _ in range(4):
            chain = self.plan(exclude=exclude)
            try:
                return InferenceSession(self, chain, max_len)
            except _OpenFailure as e:
                if isinstance(e.cause, RemoteError) and e.cause.code != ERR_BUSY:
                    raise e.cause
                exclude.add(e.server_id)  # route around busy or dead servers
                last_err = e.cause
        raise SessionError(f"could not open a session: {last_err}")

    def generate(
        self,
        prompt_tokens,
        max_new_tokens: int,
        strategy: str = "greedy",
        temperature: float = 1.0,
        seed: int = 0,
        on_token=None,
    ) -> list[int]:
        prompt_tokens = list(prompt_tokens)
        if not prompt_tokens:
            raise InputError("empty prompt")
        session = self.create_session(max_len=len(prompt_tokens) + max_new_tokens)
        try:
            out: list[int] = []
            pending = prompt_tokens
            for step in range(max_new_tokens):
                hidden = embed(self.ckpt, pending)
                hidden = session.step(hidden)
                logits = lm_head(self.ckpt, hidden)
                nxt = sample_next(logits[-1], strategy, temperature, seed, step)
                out.append(nxt)
                pending = [nxt]
                if on_token is not None:
                    on_token(nxt)
            return out
        finally:
            session.close()


class InferenceSession:
    """A stateful generation context over one chain of servers.

    Callers must serialize step() calls; recovery is transparent as long as a
    replacement for a failed hop exists somewhere in the swarm.
    """

    def __init__(self, client: SwarmClient, chain: list[HopPlan], max_len: int):
        self.client = client
        self.max_len = max_len
        self.position = 0
        self.hops: list[_Hop] = []
        self.recoveries = 0
        self.recovery_times: list[float] = []
        self.wire_bytes_per_step: list[int] = []
        self._failed_ids: set[str] = set()
        self._closed = False
        for plan in chain:
            try:
                self.hops.append(self._open_hop(plan))
            except (RemoteError, TransportError, TimeoutError_) as e:
                self.close()
                raise _OpenFailure(plan.entry.server_id, e) from e

    def _open_hop(self, plan: HopPlan) -> _Hop:
        sid = os.urandom(16)
        payload = sid + struct.pack(">I", self.max_len)
        self.client.pool.get(plan.entry.address).call(MSG.OPEN_SESSION, payload, 10_000.0)
        return _Hop(plan, sid)

    def step(self, hidden: np.ndarray) -> np.ndarray:
        """Run new positions through every hop; recovers from hop failures."""
        if self._closed:
            raise SessionError("session is closed")
        hidden = np.asarray(hidden, np.float32)
        t = hidden.shape[0]
        if self.position + t > self.max_len:
            raise CapacityError(f"position {self.position + t} exceeds max_len {self.max_len}")
        attempts = 0
        while True:
            try:
                out, step_bytes = self._try_step(hidden)
                self.position += t
                self.wire_bytes_per_step.append(step_bytes)
                return out
            except _HopFailure as f:
                attempts += 1
                if attempts > 8:
                    raise SessionError("too many consecutive hop failures") from f.cause
                log.info("hop %d (%s) failed: %s; recovering", f.hop_index, f.server_id[:8], f.cause)
                self.recover(f.hop_index)

    def _try_step(self, hidden: np.ndarray) -> tuple[np.ndarray, int]:
        h = hidden
        total_bytes = 0
        start_pos = self.position
        t = hidden.shape[0]
        for i, hop in enumerate(self.hops):
            payload = hop.session_id + struct.pack(">I", start_pos) + encode_tensor(h, self.client.encoding)
            try:
                reply = self.client.pool.get(hop.plan.entry.address).call(MSG.STEP, payload, 30_000.0)
            except (TransportError, TimeoutError_) as e:
                raise _HopFailure(i, hop.plan.entry.server_id, e) from e
            except RemoteError as e:
                if e.code in (ERR_DESYNC, ERR_UNKNOWN_SESSION, ERR_BUSY):
                    raise _HopFailure(i, hop.plan.entry.server_id, e) from e
                raise
            if not hop.replay or hop.replay[-1][0] != start_pos:
                hop.replay.append((start_pos, h.copy()))
            total_bytes += len(payload) - 20 + len(reply)
            h = decode_tensor(reply)
        return h, total_bytes

    def recover(self, failed_index: int):
        """Replace a failed hop: replan its blocks, replay logged inputs."""
        t0 = time.monotonic()
        failed = self.hops[failed_index]
        self._failed_ids.add(failed.plan.entry.server_id)
        blocks = failed.plan.blocks
        plans: list[HopPlan] | None = None
        for backoff in RECOVERY_BACKOFFS_S:
            try:
                plans = self.client.plan(exclude=self._failed_ids, block_range=blocks)
                break
            except (NoRouteError, TransportError) as e:
                log.info("replanning blocks [%d, %d) failed (%s); retrying", blocks.start, blocks.end, e)
                time.sleep(backoff)
        if plans is None:
            raise SessionError(f"no replacement for blocks [{blocks.start}, {blocks.end})")
        new_hops = [self._open_hop(p) for p in plans]
        # Rebuild the replacement servers' KV caches from the replay log.
        for start_pos, hidden in failed.replay:
            h = hidden
            for hop in new_hops:
                payload = hop.session_id + struct.pack(">I", start_pos) + encode_tensor(h, ENC_F32)
                reply = self.client.pool.get(hop.plan.entry.address).call(MSG.STEP, payload, 30_000.0)
                hop.replay.append((start_pos, h.copy()))
                h = decode_tensor(reply)
        self.hops[failed_index : failed_index + 1] = new_hops
        self.recoveries += 1
        self.recovery_times.append(time.monotonic() - t0)

    def close(self):
        self._closed = True
        for hop in self.hops:
            try:
                self.client.pool.get(hop.plan.entry.address).call(MSG.CLOSE_SESSION, hop.session_id, 2000.0)
            except SwarmError:
                pass


class _OpenFailure(Exception):
    def __init__(self, server_id: str, cause: Exception):
        super().__init__(str(cause))
        self.server_id = server_id
        self.cause = cause


class _HopFailure(Exception):
    def __init__(self, hop_index: int, server_id: str, cause: Exception):
        super().__init__(str(cause))
        self.hop_index = hop_index
        self.server_id = server_id
        self.cause = cause


# -- distributed training ---------------------------------------------------


@dataclass
class _StagePart:
    address: str
    tape_id: bytes
    rows: list[int]
    inputs: np.ndarray  # saved for one re-forward if the tape expired


@dataclass
class ForwardHandles:
    stages: list[tuple[BlockRange, list[_StagePart]]]


def split_rows(n_rows: int, weights: list[float]) -> list[list[int]]:
    """Proportional split with round-robin remainder; every weight > 0."""
    total = sum(weights)
    shares = [int(n_rows * w / total) for w in weights]
    rr = 0
    while sum(shares) < n_rows:
        shares[rr % len(shares)] += 1
        rr += 1
    out, cursor = [], 0
    for s in shares:
        out.append(list(range(cursor, cursor + s)))
        cursor += s
    return out


class DistributedModel:
    """FORWARD/BACKWARD over a planned chain, with per-stage batch splitting."""

    def __init__(self, client: SwarmClient, parallel: bool = True):
        self.client = client
        self.parallel = parallel
        self.chain = client.plan()

    def _stage_servers(self, stage: BlockRange, primary: ServerEntry, exclude: set[str]) -> list[ServerEntry]:
        if not self.parallel:
            return [primary]
        entries = self.client.lookup(stage)
        full = [
            e
            for e in entries
            if e.range.start <= stage.start and e.range.end >= stage.end and e.server_id not in exclude
        ]
        rtts = ping_servers(full, self.client.pool, attempts=1)
        live = [e for e in full if e.server_id in rtts]
        if not live and primary.server_id not in exclude:
            live = [primary]
        if not live:
            raise NoRouteError(list(range(stage.start, stage.end)))
        return live

    def forward(self, batch: np.ndarray) -> tuple[np.ndarray, ForwardHandles]:
        batch = np.asarray(batch, np.float32)
        if batch.ndim != 3:
            raise InputError("batch must be [B, t, d]")
        h = batch
        stages = []
        for hop in self.chain:
            dead: set[str] = set()
            while True:
                servers = self._stage_servers(hop.blocks, hop.entry, dead)
                groups = split_rows(h.shape[0], [max(s.throughput, 1e-9) for s in servers])
                parts: list[_StagePart] = []
                out = np.empty_like(h)
                try:
                    for server, rows in zip(servers, groups):
                        if not rows:
                            continue
                        inputs = h[rows]
                        reply = self.client.pool.get(server.address).call(
                            MSG.FORWARD, encode_tensor(inputs, self.client.encoding), 60_000.0
                        )
                        tape_id, tensor = reply[:16], decode_tensor(reply[16:])
                        out[rows] = tensor
                        parts.append(_StagePart(server.address, tape_id, rows, inputs))
                except (TransportError, TimeoutError_):
                    dead.add(server.server_id)
                    continue  # redistribute this stage over the survivors
                h = out
                stages.append((hop.blocks, parts))
                break
        return h, ForwardHandles(stages)

    def backward(self, handles: ForwardHandles, grad: np.ndarray) -> np.ndarray:
        g = np.asarray(grad, np.float32)
        for blocks, parts in reversed(handles.stages):
            out = np.empty_like(g)
            for part in parts:
                try:
                    reply = self._backward_part(part, g[part.rows])
                except RemoteError as e:
                    if e.code != ERR_UNKNOWN_TAPE:
                        raise
                    # tape expired: re-run the forward once, then retry
                    fwd = self.client.pool.get(part.address).call(
                        MSG.FORWARD, encode_tensor(part.inputs, ENC_F32), 60_000.0
                    )
                    part.tape_id = fwd[:16]
                    reply = self._backward_part(part, g[part.rows])
                out[part.rows] = reply
            g = out
        return g

    def _backward_part(self, part: _StagePart, grad_rows: np.ndarray) -> np.ndarray:
        reply = self.client.pool.get(part.address).call(
            MSG.BACKWARD, part.tape_id + encode_tensor(grad_rows, ENC_F32), 60_000.0
        )
        return decode_tensor(reply)
