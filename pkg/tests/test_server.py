"""Server node behavior: session lifecycle, idempotent retries, capacity,
isolation, training tapes, weight immutability, and the auto block policy."""

import json
import os
import struct

import numpy as np
import pytest

from swarmlm.errors import (
    ERR_BUSY,
    ERR_DESYNC,
    ERR_UNKNOWN_SESSION,
    ERR_UNKNOWN_TAPE,
    RemoteError,
)
from swarmlm.model import KvCache, block_backward, block_forward, embed, forward_blocks
from swarmlm.transport import ENC_F32, MSG, decode_tensor, encode_tensor, rpc_call

from conftest import SMALL


def open_session(address, sid=None, max_len=64):
    sid = sid or os.urandom(16)
    rpc_call(address, MSG.OPEN_SESSION, sid + struct.pack(">I", max_len), 5000.0)
    return sid


def step(address, sid, start_pos, hidden):
    payload = sid + struct.pack(">I", start_pos) + encode_tensor(hidden, ENC_F32)
    return decode_tensor(rpc_call(address, MSG.STEP, payload, 10000.0))


def info(address):
    return json.loads(rpc_call(address, MSG.INFO, b"", 5000.0).decode())


# -- lifecycle and INFO -----------------------------------------------------------


def test_single_server_serves_whole_model(swarm):
    swarm.add_server((0, 4))
    client = swarm.client()
    try:
        from swarmlm.model import reference_generate

        got = client.generate([1, 2, 3], 8)
        assert got == reference_generate(swarm.ckpt, [1, 2, 3], 8)
    finally:
        client.close()


def test_info_rpc(swarm):
    node = swarm.add_server((0, 2))
    d = info(node.address)
    assert d["server_id"] == node.server_id
    assert d["range"] == [0, 2]
    assert d["throughput"] > 0
    assert len(d["weights_hash"]) == 64


def test_auto_policy_two_servers_disjoint(swarm):
    a = swarm.add_server("auto", span=2)
    b = swarm.add_server("auto", span=2)
    ranges = sorted([(a.range.start, a.range.end), (b.range.start, b.range.end)])
    assert ranges == [(0, 2), (2, 4)]


def test_startup_failure_missing_checkpoint(tmp_path):
    from swarmlm.server import ServerConfig, ServerNode

    with pytest.raises(Exception):
        ServerNode(ServerConfig(checkpoint_path=str(tmp_path / "nope.ptck")))


# -- sessions ---------------------------------------------------------------------


def test_step_matches_reference(swarm):
    node = swarm.add_server((0, 4))
    sid = open_session(node.address)
    h = embed(swarm.ckpt, [1, 2, 3])
    out = step(node.address, sid, 0, h)
    want = forward_blocks(swarm.ckpt, h)
    assert np.array_equal(out, want)


def test_incremental_session_steps(swarm):
    node = swarm.add_server((0, 4))
    sid = open_session(node.address)
    tokens = [5, 9, 2, 7]
    outs = []
    for i, tok in enumerate(tokens):
        outs.append(step(node.address, sid, i, embed(swarm.ckpt, [tok])))
    want = forward_blocks(swarm.ckpt, embed(swarm.ckpt, tokens))
    got = np.concatenate(outs)
    assert float(np.max(np.abs(got - want))) <= 1e-5


def test_duplicate_session_id_rejected(swarm):
    node = swarm.add_server((0, 4))
    sid = open_session(node.address)
    with pytest.raises(RemoteError):
        open_session(node.address, sid=sid)


def test_unknown_session(swarm):
    node = swarm.add_server((0, 4))
    with pytest.raises(RemoteError) as ei:
        step(node.address, os.urandom(16), 0, embed(swarm.ckpt, [1]))
    assert ei.value.code == ERR_UNKNOWN_SESSION


def test_position_gap_desync(swarm):
    node = swarm.add_server((0, 4))
    sid = open_session(node.address)
    step(node.address, sid, 0, embed(swarm.ckpt, [1]))
    with pytest.raises(RemoteError) as ei:
        step(node.address, sid, 5, embed(swarm.ckpt, [2]))
    assert ei.value.code == ERR_DESYNC


def test_idempotent_retry_returns_cached_reply(swarm):
    node = swarm.add_server((0, 4))
    sid = open_session(node.address)
    h = embed(swarm.ckpt, [3])
    first = step(node.address, sid, 0, h)
    again = step(node.address, sid, 0, h)  # network retry of the same step
    assert np.array_equal(first, again)
    # position advanced exactly once: the next step at pos 1 succeeds
    step(node.address, sid, 1, embed(swarm.ckpt, [4]))


def test_retry_with_different_payload_desyncs(swarm):
    node = swarm.add_server((0, 4))
    sid = open_session(node.address)
    step(node.address, sid, 0, embed(swarm.ckpt, [3]))
    with pytest.raises(RemoteError) as ei:
        step(node.address, sid, 0, embed(swarm.ckpt, [4]))
    assert ei.value.code == ERR_DESYNC


def test_capacity_busy(swarm):
    node = swarm.add_server((0, 4), capacity=2)
    open_session(node.address)
    open_session(node.address)
    with pytest.raises(RemoteError) as ei:
        open_session(node.address)
    assert ei.value.code == ERR_BUSY


def test_close_frees_capacity(swarm):
    node = swarm.add_server((0, 4), capacity=1)
    sid = open_session(node.address)
    rpc_call(node.address, MSG.CLOSE_SESSION, sid, 5000.0)
    open_session(node.address)  # no BUSY


def test_session_isolation(swarm):
    node = swarm.add_server((0, 4))
    sid_a = open_session(node.address)
    sid_b = open_session(node.address)
    # interleave two sessions with different prompts
    a0 = step(node.address, sid_a, 0, embed(swarm.ckpt, [1]))
    b0 = step(node.address, sid_b, 0, embed(swarm.ckpt, [9]))
    a1 = step(node.address, sid_a, 1, embed(swarm.ckpt, [2]))
    b1 = step(node.address, sid_b, 1, embed(swarm.ckpt, [8]))
    # solo runs must match exactly
    sid_c = open_session(node.address)
    c0 = step(node.address, sid_c, 0, embed(swarm.ckpt, [1]))
    c1 = step(node.address, sid_c, 1, embed(swarm.ckpt, [2]))
    assert np.array_equal(a0, c0)
    assert np.array_equal(a1, c1)
    assert not np.array_equal(a1, b1)


def test_cache_budget_eviction_causes_desync(swarm):
    node = swarm.add_server((0, 4), cache_budget_tokens=8)
    sid_a = open_session(node.address)
    for i in range(3):
        step(node.address, sid_a, i, embed(swarm.ckpt, [1]))
    sid_b = open_session(node.address)
    # b's growth pushes total tokens over budget; a (idle longest) is evicted
    for i in range(3):
        step(node.address, sid_b, i, embed(swarm.ckpt, [2]))
    with pytest.raises(RemoteError) as ei:
        step(node.address, sid_a, 3, embed(swarm.ckpt, [1]))
    assert ei.value.code in (ERR_UNKNOWN_SESSION, ERR_DESYNC)


# -- training RPCs -----------------------------------------------------------------


def test_forward_backward_matches_local_oracle(swarm):
    node = swarm.add_server((1, 2))  # single hosted block
    rng = np.random.default_rng(0)
    batch = rng.uniform(-0.5, 0.5, (2, 3, 16)).astype(np.float32)
    reply = rpc_call(node.address, MSG.FORWARD, encode_tensor(batch, ENC_F32), 10000.0)
    tape_id, acts = reply[:16], decode_tensor(reply[16:])
    grad = rng.uniform(-1, 1, (2, 3, 16)).astype(np.float32)
    gin = decode_tensor(
        rpc_call(node.address, MSG.BACKWARD, tape_id + encode_tensor(grad, ENC_F32), 10000.0)
    )
    blk = swarm.ckpt.blocks[1]
    for r in range(2):
        out, _, tape = block_forward(blk, batch[r], KvCache.empty(SMALL), 0, SMALL, want_tape=True)
        assert np.array_equal(acts[r], out)
        assert np.array_equal(gin[r], block_backward(blk, tape, grad[r], SMALL))


def test_backward_consume_once(swarm):
    node = swarm.add_server((0, 1))
    batch = np.zeros((1, 2, 16), np.float32)
    reply = rpc_call(node.address, MSG.FORWARD, encode_tensor(batch, ENC_F32), 10000.0)
    tape_id = reply[:16]
    grad = encode_tensor(np.zeros((1, 2, 16), np.float32), ENC_F32)
    rpc_call(node.address, MSG.BACKWARD, tape_id + grad, 10000.0)
    with pytest.raises(RemoteError) as ei:
        rpc_call(node.address, MSG.BACKWARD, tape_id + grad, 10000.0)
    assert ei.value.code == ERR_UNKNOWN_TAPE


def test_backward_zero_grad_zero_out(swarm):
    node = swarm.add_server((0, 4))
    rng = np.random.default_rng(1)
    batch = rng.uniform(-0.5, 0.5, (1, 2, 16)).astype(np.float32)
    reply = rpc_call(node.address, MSG.FORWARD, encode_tensor(batch, ENC_F32), 10000.0)
    gin = decode_tensor(
        rpc_call(
            node.address,
            MSG.BACKWARD,
            reply[:16] + encode_tensor(np.zeros_like(batch), ENC_F32),
            10000.0,
        )
    )
    assert np.array_equal(gin, np.zeros_like(batch))


def test_weights_hash_unchanged_by_workload(swarm):
    node = swarm.add_server((0, 4))
    before = info(node.address)["weights_hash"]
    sid = open_session(node.address)
    for i in range(4):
        step(node.address, sid, i, embed(swarm.ckpt, [i + 1]))
    batch = np.ones((2, 2, 16), np.float32) * 0.1
    reply = rpc_call(node.address, MSG.FORWARD, encode_tensor(batch, ENC_F32), 10000.0)
    rpc_call(node.address, MSG.BACKWARD, reply[:16] + encode_tensor(batch, ENC_F32), 10000.0)
    assert info(node.address)["weights_hash"] == before


# -- throughput measurement ---------------------------------------------------------


def test_measure_throughput_positive_and_monotone(swarm):
    narrow = swarm.add_server((0, 1))
    wide = swarm.add_server((1, 4))
    assert narrow.throughput > 0
    assert wide.throughput > 0
    # more hosted blocks -> more compute per token -> lower compute-bound rate
    assert wide.measure_throughput() < narrow.measure_throughput()


def test_network_bound_throughput(swarm):
    node = swarm.add_server((0, 1), net_bytes_per_s=64.0)
    # 16 f32 hidden = 64 bytes/token -> network caps at ~1 tok/s
    assert node.measure_throughput() == pytest.approx(1.0)


# -- quantized serving ---------------------------------------------------------------


def test_activation_quantized_reply(swarm):
    node = swarm.add_server((0, 4), quantize="activations")
    sid = open_session(node.address)
    h = embed(swarm.ckpt, [1, 2])
    payload = sid + struct.pack(">I", 0) + encode_tensor(h, ENC_F32)
    reply = rpc_call(node.address, MSG.STEP, payload, 10000.0)
    assert reply[0] == 1  # ENC_INT8 on the wire
    out = decode_tensor(reply)
    want = forward_blocks(swarm.ckpt, h)
    cos = float(
        np.dot(out.ravel(), want.ravel())
        / (np.linalg.norm(out) * np.linalg.norm(want))
    )
    assert cos >= 0.99


def test_weight_quantized_serving_close_to_f32(swarm):
    node = swarm.add_server((0, 4), quantize="weights")
    sid = open_session(node.address)
    h = embed(swarm.ckpt, [1, 2, 3])
    out = step(node.address, sid, 0, h)
    want = forward_blocks(swarm.ckpt, h)
    rel = np.linalg.norm(out - want) / np.linalg.norm(want)
    assert rel <= 0.05


# -- rebalancing -------------------------------------------------------------------


def test_rebalance_moves_to_cover_gap(swarm):
    # two servers crowd [0,2); blocks [2,4) are uncovered
    a = swarm.add_server((0, 2))
    b = swarm.add_server((0, 2))
    moved = a.maybe_rebalance() or b.maybe_rebalance()
    assert moved
    ranges = sorted([(a.range.start, a.range.end), (b.range.start, b.range.end)])
    assert ranges == [(0, 2), (2, 4)]
    assert any(e.get("event") == "rebalance" for e in a.events + b.events)


def test_no_rebalance_when_balanced(swarm):
    a = swarm.add_server((0, 2))
    b = swarm.add_server((2, 4))
    assert not a.maybe_rebalance()
    assert not b.maybe_rebalance()
