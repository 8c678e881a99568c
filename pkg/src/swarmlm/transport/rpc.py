"""Length-framed RPC over TCP with pipelined requests, deadlines, and
per-connection byte accounting. Replies are matched to requests by id, so
out-of-order completion is fine.
"""

from __future__ import annotations

import itertools
import logging
import socket
import struct
import threading
from concurrent.futures import ThreadPoolExecutor

from ..errors import ProtocolError, RemoteError, TimeoutError_, TransportError
from .shaper import LinkShape, ShapedSocket
from .wire import MSG, encode_frame, read_frame

log = logging.getLogger(__name__)


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except OSError as e:
            raise TransportError(f"recv failed: {e}") from e
        if not chunk:
            raise TransportError("connection closed by peer")
        buf.extend(chunk)
    return bytes(buf)


def encode_error(code: int, message: str) -> bytes:
    return struct.pack(">H", code) + message.encode()


def decode_error(payload: bytes) -> RemoteError:
    if len(payload) < 2:
        return RemoteError(0, "malformed error payload")
    (code,) = struct.unpack(">H", payload[:2])
    return RemoteError(code, payload[2:].decode(errors="replace"))


class _Waiter:
    __slots__ = ("event", "frame")

    def __init__(self):
        self.event = threading.Event()
        self.frame = None


class Connection:
    """Client side of one TCP connection; safe for concurrent calls."""

    def __init__(self, address: str, shape: LinkShape | None = None, connect_timeout: float = 5.0):
        host, port = address.rsplit(":", 1)
        try:
            sock = socket.create_connection((host, int(port)), timeout=connect_timeout)
        except OSError as e:
            raise TransportError(f"connect to {address} failed: {e}") from e
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.address = address
        self._sock = sock
        self._shaped = ShapedSocket(sock, shape)
        self._send_lock = threading.Lock()
        self._pending: dict[int, _Waiter] = {}
        self._pending_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._closed = False
        self.bytes_sent = 0
        self.bytes_received = 0
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        try:
            while True:
                frame = read_frame(lambda n: _recv_exact(self._sock, n))
                self.bytes_received += len(frame.payload)
                with self._pending_lock:
                    waiter = self._pending.pop(frame.request_id, None)
                if waiter is not None:
                    waiter.frame = frame
                    waiter.event.set()
        except (TransportError, ProtocolError, OSError):
            self._fail_all()

    def _fail_all(self):
        self._closed = True
        with self._pending_lock:
            waiters = list(self._pending.values())
            self._pending.clear()
        for w in waiters:
            w.event.set()

    def call(self, msg_type: int, payload: bytes = b"", deadline_ms: float = 30000.0) -> bytes:
        if deadline_ms <= 0:
            raise TimeoutError_("deadline must be positive")
        if self._closed:
            raise TransportError(f"connection to {self.address} is closed")
        rid = next(self._ids)
        waiter = _Waiter()
        with self._pending_lock:
            self._pending[rid] = waiter
        data = encode_frame(msg_type, rid, payload)
        try:
            with self._send_lock:
                self._shaped.sendall(data)
        except OSError as e:
            self._fail_all()
            raise TransportError(f"send to {self.address} failed: {e}") from e
        self.bytes_sent += len(payload)
        if not waiter.event.wait(deadline_ms / 1000.0):
            with self._pending_lock:
                self._pending.pop(rid, None)
            raise TimeoutError_(f"rpc to {self.address} timed out after {deadline_ms} ms")
        if waiter.frame is None:
            raise TransportError(f"connection to {self.address} lost mid-call")
        if waiter.frame.msg_type == MSG.ERROR:
            raise decode_error(waiter.frame.payload)
        return waiter.frame.payload

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self):
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass


def rpc_call(address: str, msg_type: int, payload: bytes = b"", deadline_ms: float = 30000.0, shape: LinkShape | None = None) -> bytes:
    """One-shot call on a fresh connection."""
    conn = Connection(address, shape=shape, connect_timeout=min(5.0, deadline_ms / 1000.0))
    try:
        return conn.call(msg_type, payload, deadline_ms)
    finally:
        conn.close()


class ConnectionPool:
    """Reusable client connections keyed by address."""

    def __init__(self, shape: LinkShape | None = None):
        self.shape = shape
        self._conns: dict[str, Connection] = {}
        self._lock = threading.Lock()

    def get(self, address: str) -> Connection:
        with self._lock:
            conn = self._conns.get(address)
            if conn is not None and not conn.closed:
                return conn
            conn = Connection(address, shape=self.shape)
            self._conns[address] = conn
            return conn

    def drop(self, address: str):
        with self._lock:
            conn = self._conns.pop(address, None)
        if conn is not None:
            conn.close()

    def close_all(self):
        with self._lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for c in conns:
            c.close()


class RpcServer:
    """TCP listener dispatching framed requests to a handler.

    handler(msg_type, payload) returns (reply_type, reply_payload); raising
    RemoteError sends an ERROR frame; any other exception sends a generic
    ERROR and is logged. A malformed frame drops only that connection.
    """

    def __init__(self, host: str, port: int, handler, shape: LinkShape | None = None, max_workers: int = 64):
        self.handler = handler
        self.shape = shape
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(128)
        self.host = host
        self.port = self._listener.getsockname()[1]
        self._pool = ThreadPoolExecutor(max_workers=max_workers)
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._stopping = False
        self._accept_thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self):
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while not self._stopping:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._conns_lock:
                self._conns.add(sock)
            threading.Thread(target=self._conn_loop, args=(sock,), daemon=True).start()

    def _conn_loop(self, sock: socket.socket):
        shaped = ShapedSocket(sock, self.shape)
        send_lock = threading.Lock()
        try:
            while True:
                frame = read_frame(lambda n: _recv_exact(sock, n))
                self._pool.submit(self._handle, frame, shaped, send_lock)
        except ProtocolError as e:
            log.warning("protocol error, dropping connection: %s", e)
        except (TransportError, OSError):
            pass
        except RuntimeError:
            pass  # executor shut down during stop
        finally:
            with self._conns_lock:
                self._conns.discard(sock)
            try:
                sock.close()
            except OSError:
                pass

    def _handle(self, frame, shaped, send_lock):
        try:
            reply_type, reply = self.handler(frame.msg_type, frame.payload)
        except RemoteError as e:
            reply_type, reply = MSG.ERROR, encode_error(e.code, e.message)
        except Exception as e:  # noqa: BLE001 - a handler bug must not kill the server
            log.exception("handler failed for msg_type 0x%02x", frame.msg_type)
            reply_type, reply = MSG.ERROR, encode_error(1, f"internal error: {e}")
        try:
            with send_lock:
                shaped.sendall(encode_frame(reply_type, frame.request_id, reply))
        except OSError:
            pass

    def stop(self):
        """Graceful shutdown: stop accepting, close connections."""
        self._stopping = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.close()
            except OSError:
                pass
        self._pool.shutdown(wait=False, cancel_futures=True)

    def kill(self):
        """Abrupt shutdown, simulating a crash: no goodbye of any kind."""
        self.stop()
