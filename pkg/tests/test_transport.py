"""Wire protocol: frame layout, tensor encoding, RPC semantics, link shaper."""

import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from swarmlm.errors import ProtocolError, RemoteError, TimeoutError_, TransportError
from swarmlm.transport import (
    ENC_F32,
    ENC_INT8,
    MSG,
    Connection,
    LinkShape,
    RpcServer,
    decode_frame,
    decode_tensor,
    encode_frame,
    encode_tensor,
    parse_shape,
    rpc_call,
)
from swarmlm.transport.shaper import ShapedSocket


finite_f32 = st.floats(-1e6, 1e6, width=32, allow_nan=False, allow_infinity=False)


# -- frame codec ---------------------------------------------------------------


def test_ping_frame_exact_bytes():
    raw = encode_frame(MSG.PING, 7, b"")
    assert raw.hex() == "50540101000000000000000700000000"


def test_frame_round_trip():
    raw = encode_frame(MSG.STEP, 0xDEADBEEF, b"payload!")
    f = decode_frame(raw)
    assert f.msg_type == MSG.STEP
    assert f.request_id == 0xDEADBEEF
    assert f.payload == b"payload!"


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 255), st.integers(0, 2 ** 64 - 1), st.binary(max_size=512))
def test_frame_round_trip_property(msg_type, request_id, payload):
    f = decode_frame(encode_frame(msg_type, request_id, payload))
    assert (f.msg_type, f.request_id, f.payload) == (msg_type, request_id, payload)


def test_frame_rejects_bad_magic():
    raw = bytearray(encode_frame(MSG.PING, 1, b""))
    raw[0] = 0x00
    with pytest.raises(ProtocolError):
        decode_frame(bytes(raw))


def test_frame_rejects_bad_version():
    raw = bytearray(encode_frame(MSG.PING, 1, b""))
    raw[2] = 9
    with pytest.raises(ProtocolError):
        decode_frame(bytes(raw))


def test_frame_rejects_truncation():
    raw = encode_frame(MSG.PING, 1, b"hello")
    with pytest.raises(ProtocolError):
        decode_frame(raw[:-2])


def test_frame_rejects_oversized_payload():
    from swarmlm.errors import InputError

    with pytest.raises(InputError):
        encode_frame(MSG.STEP, 1, b"\x00" * (64 * 1024 * 1024 + 1))


# -- tensor codec --------------------------------------------------------------


def test_tensor_f32_exact_bytes():
    # layout: encoding u8, ndim u8, dims u32 BE, f32 LE data
    raw = encode_tensor(np.array([1.0, -1.0], np.float32))
    assert raw[0] == ENC_F32
    assert raw[1] == 1
    assert raw[2:6] == (2).to_bytes(4, "big")
    assert raw[6:10] == bytes.fromhex("0000803f")  # 1.0f LE
    assert raw[10:14] == bytes.fromhex("000080bf")  # -1.0f LE


def test_tensor_f32_round_trip():
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    assert np.array_equal(decode_tensor(encode_tensor(x)), x)


def test_tensor_int8_size_ratio():
    x = np.random.default_rng(0).normal(size=256).astype(np.float32)
    f32_bytes = len(encode_tensor(x, ENC_F32))
    int8_bytes = len(encode_tensor(x, ENC_INT8))
    assert int8_bytes < 0.51 * f32_bytes


def test_tensor_int8_error_bound():
    x = np.random.default_rng(1).normal(size=(4, 64)).astype(np.float32)
    back = decode_tensor(encode_tensor(x, ENC_INT8, block_size=64))
    scale = np.abs(x).reshape(-1, 64).max(axis=1) / 127.0
    err = np.abs(back - x).reshape(-1, 64).max(axis=1)
    assert np.all(err <= scale / 2 + 1e-6)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, array_shapes(max_dims=3, max_side=8), elements=finite_f32))
def test_tensor_f32_round_trip_property(x):
    assert np.array_equal(decode_tensor(encode_tensor(x)), x)


# -- shaper --------------------------------------------------------------------


def test_parse_shape():
    s = parse_shape("50:100")
    assert s.one_way_latency_ms == 50.0
    assert s.bandwidth_bits_per_s == 100e6
    assert parse_shape(None) is None
    assert parse_shape("0:inf").is_passthrough


def test_shape_delay_arithmetic():
    s = LinkShape(0.0, 100e6)
    assert s.delay_for(2 ** 20) == pytest.approx(2 ** 20 * 8 / 100e6)  # ~83.9 ms
    s2 = LinkShape(50.0, float("inf"))
    assert s2.delay_for(1) == pytest.approx(0.050)


def _echo_server():
    srv = RpcServer("127.0.0.1", 0, lambda t, p: (t, p))
    srv.start()
    return srv


def test_shaped_rtt_latency_floor():
    srv = _echo_server()
    try:
        shape = LinkShape(25.0, float("inf"))
        conn = Connection(srv.address, shape=shape)
        t0 = time.monotonic()
        conn.call(MSG.PING, b"", 5000.0)
        rtt = time.monotonic() - t0
        conn.close()
        # send-side shaping on the client only: one-way delay each request
        assert rtt >= 0.025
    finally:
        srv.stop()


def test_shaped_bandwidth_delay():
    srv = _echo_server()
    try:
        payload = b"\x00" * (2 ** 18)  # 256 KiB
        shape = LinkShape(0.0, 50e6)  # 50 Mbit/s -> ~42 ms one way
        conn = Connection(srv.address, shape=shape)
        t0 = time.monotonic()
        conn.call(MSG.STEP, payload, 10000.0)
        elapsed = time.monotonic() - t0
        conn.close()
        assert elapsed >= 2 ** 18 * 8 / 50e6 * 0.9
    finally:
        srv.stop()


def test_unshaped_passthrough_fast():
    srv = _echo_server()
    try:
        t0 = time.monotonic()
        rpc_call(srv.address, MSG.PING, b"", 5000.0)
        assert time.monotonic() - t0 < 0.5
    finally:
        srv.stop()


# -- rpc ----------------------------------------------------------------------


def test_rpc_echo():
    srv = _echo_server()
    try:
        assert rpc_call(srv.address, MSG.PING, b"hi", 5000.0) == b"hi"
    finally:
        srv.stop()


def test_rpc_connection_refused():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(TransportError):
        rpc_call(f"127.0.0.1:{port}", MSG.PING, b"", 1000.0)


def test_rpc_deadline():
    def slow_handler(t, p):
        time.sleep(1.0)
        return t, p

    srv = RpcServer("127.0.0.1", 0, slow_handler)
    srv.start()
    try:
        with pytest.raises(TimeoutError_):
            rpc_call(srv.address, MSG.PING, b"", 150.0)
    finally:
        srv.stop()


def test_rpc_error_propagation():
    def failing(t, p):
        raise RemoteError(6, "bad request")

    srv = RpcServer("127.0.0.1", 0, failing)
    srv.start()
    try:
        with pytest.raises(RemoteError) as ei:
            rpc_call(srv.address, MSG.STEP, b"", 2000.0)
        assert ei.value.code == 6
        assert "bad request" in ei.value.message
    finally:
        srv.stop()


def test_rpc_pipelined_out_of_order_replies():
    def handler(t, p):
        if p == b"slow":
            time.sleep(0.2)
        return t, p

    srv = RpcServer("127.0.0.1", 0, handler)
    srv.start()
    try:
        conn = Connection(srv.address)
        results = {}

        def call(tag):
            results[tag] = conn.call(MSG.STEP, tag, 5000.0)

        threads = [threading.Thread(target=call, args=(t,)) for t in (b"slow", b"fast")]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {b"slow": b"slow", b"fast": b"fast"}
        conn.close()
    finally:
        srv.stop()


def test_malformed_frame_does_not_crash_server():
    srv = _echo_server()
    try:
        host, port = srv.address.rsplit(":", 1)
        with socket.create_connection((host, int(port))) as s:
            s.sendall(b"garbage-not-a-frame-at-all")
        time.sleep(0.1)
        # server must still answer well-formed requests on a fresh connection
        assert rpc_call(srv.address, MSG.PING, b"ok", 2000.0) == b"ok"
    finally:
        srv.stop()


def test_byte_counters():
    srv = _echo_server()
    try:
        conn = Connection(srv.address)
        conn.call(MSG.STEP, b"x" * 100, 5000.0)
        assert conn.bytes_sent >= 100
        assert conn.bytes_received >= 100
        conn.close()
    finally:
        srv.stop()
