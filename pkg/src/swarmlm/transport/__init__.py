from .wire import (
    ENC_F32,
    ENC_INT8,
    MSG,
    Frame,
    decode_frame,
    decode_tensor,
    encode_frame,
    encode_tensor,
    read_frame,
    FRAME_HEADER_LEN,
    MAX_PAYLOAD,
)
from .shaper import LinkShape, ShapedSocket, parse_shape
from .rpc import RpcServer, Connection, ConnectionPool, rpc_call

__all__ = [
    "ENC_F32",
    "ENC_INT8",
    "MSG",
    "Frame",
    "encode_frame",
    "decode_frame",
    "read_frame",
    "encode_tensor",
    "decode_tensor",
    "FRAME_HEADER_LEN",
    "MAX_PAYLOAD",
    "LinkShape",
    "ShapedSocket",
    "parse_shape",
    "RpcServer",
    "Connection",
    "ConnectionPool",
    "rpc_call",
]
