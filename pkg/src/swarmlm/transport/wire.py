"""Binary frame protocol and tensor wire encoding.

Frame layout: magic 0x50 0x54, version u8=1, msg_type u8, request_id u64 BE,
payload_len u32 BE, payload bytes.

Tensor layout: encoding u8 (0 = raw f32, 1 = blockwise int8), ndim u8, dims as
u32 BE; then either little-endian f32 data, or block_size u32 BE followed by
the f32 LE scales and the i8 codes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import InputError, ProtocolError
from ..quant import QuantizedBlockwise, dequantize_blockwise, quantize_blockwise

MAGIC = b"\x50\x54"
VERSION = 1
FRAME_HEADER_LEN = 16
MAX_PAYLOAD = 64 * 1024 * 1024

ENC_F32 = 0
ENC_INT8 = 1


class MSG:
    PING = 0x01
    INFO = 0x02
    OPEN_SESSION = 0x10
    STEP = 0x11
    CLOSE_SESSION = 0x12
    FORWARD = 0x20
    BACKWARD = 0x21
    ANNOUNCE = 0x30
    LOOKUP = 0x31
    GOSSIP = 0x32
    ERROR = 0x7F


@dataclass(frozen=True)
class Frame:
    msg_type: int
    request_id: int
    payload: bytes


def encode_frame(msg_type: int, request_id: int, payload: bytes) -> bytes:
    if len(payload) >= MAX_PAYLOAD:
        raise InputError(f"payload {len(payload)} exceeds {MAX_PAYLOAD} byte cap")
    return MAGIC + struct.pack(">BBQI", VERSION, msg_type, request_id, len(payload)) + payload


def decode_frame(data: bytes) -> Frame:
    """Decode one complete frame; raises ProtocolError on any malformation."""
    if len(data) < FRAME_HEADER_LEN:
        raise ProtocolError("truncated frame header")
    if data[:2] != MAGIC:
        raise ProtocolError("bad magic")
    version, msg_type, request_id, plen = struct.unpack(">BBQI", data[2:FRAME_HEADER_LEN])
    if version != VERSION:
        raise ProtocolError(f"unknown protocol version {version}")
    if plen > MAX_PAYLOAD:
        raise ProtocolError("oversized payload")
    if len(data) != FRAME_HEADER_LEN + plen:
        raise ProtocolError("payload length mismatch")
    return Frame(msg_type, request_id, data[FRAME_HEADER_LEN:])


def read_frame(recv_exact) -> Frame:
    """Read one frame via a recv_exact(n) -> bytes callable (socket stream)."""
    header = recv_exact(FRAME_HEADER_LEN)
    if header[:2] != MAGIC:
        raise ProtocolError("bad magic")
    version, msg_type, request_id, plen = struct.unpack(">BBQI", header[2:])
    if version != VERSION:
        raise ProtocolError(f"unknown protocol version {version}")
    if plen > MAX_PAYLOAD:
        raise ProtocolError("oversized payload")
    return Frame(msg_type, request_id, recv_exact(plen) if plen else b"")


def encode_tensor(t: np.ndarray, encoding: int = ENC_F32, block_size: int = 64) -> bytes:
    t = np.asarray(t, np.float32)
    if not np.all(np.isfinite(t)):
        raise InputError("non-finite tensor")
    if t.ndim > 255:
        raise InputError("too many dimensions")
    if t.size and math.prod(t.shape) * 4 > MAX_PAYLOAD:
        raise InputError("tensor exceeds frame cap")
    head = struct.pack(">BB", encoding, t.ndim) + b"".join(struct.pack(">I", d) for d in t.shape)
    if encoding == ENC_F32:
        return head + np.ascontiguousarray(t, "<f4").tobytes()
    if encoding == ENC_INT8:
        q = quantize_blockwise(t, block_size)
        return (
            head
            + struct.pack(">I", q.block_size)
            + q.scales.astype("<f4").tobytes()
            + q.codes.tobytes()
        )
    raise InputError(f"unknown tensor encoding {encoding}")


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 2:
        raise ProtocolError("truncated tensor header")
    encoding, ndim = struct.unpack(">BB", data[:2])
    off = 2
    if len(data) < off + 4 * ndim:
        raise ProtocolError("truncated tensor dims")
    dims = struct.unpack(f">{ndim}I", data[off : off + 4 * ndim]) if ndim else ()
    off += 4 * ndim
    n = int(math.prod(dims)) if ndim else 1
    if ndim == 0:
        n = 1
    if encoding == ENC_F32:
        if len(data) != off + 4 * n:
            raise ProtocolError("f32 tensor size mismatch")
        return np.frombuffer(data, "<f4", count=n, offset=off).reshape(dims).copy()
    if encoding == ENC_INT8:
        if len(data) < off + 4:
            raise ProtocolError("truncated int8 tensor")
        (block_size,) = struct.unpack(">I", data[off : off + 4])
        off += 4
        if block_size < 1:
            raise ProtocolError("bad block size")
        n_blocks = math.ceil(n / block_size) if n else 0
        if len(data) != off + 4 * n_blocks + n:
            raise ProtocolError("int8 tensor size mismatch")
        scales = np.frombuffer(data, "<f4", count=n_blocks, offset=off).copy()
        codes = np.frombuffer(data, np.int8, count=n, offset=off + 4 * n_blocks).copy()
        return dequantize_blockwise(QuantizedBlockwise(block_size, scales, codes, tuple(dims)))
    raise ProtocolError(f"unknown tensor encoding {encoding}")
