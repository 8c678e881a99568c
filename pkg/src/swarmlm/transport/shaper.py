"""In-process network-condition shaping: one-way latency plus token-bucket
transmission delay applied to every send on a wrapped socket.

Each endpoint shapes its own outgoing messages, so a link configured on both
sides behaves like a symmetric shaped pipe (RTT = 2 x latency + transfer).
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass

from ..errors import InputError


@dataclass(frozen=True)
class LinkShape:
    one_way_latency_ms: float = 0.0
    bandwidth_bits_per_s: float = math.inf

    def __post_init__(self):
        if self.one_way_latency_ms < 0 or self.bandwidth_bits_per_s <= 0:
            raise InputError("invalid link shape")

    @property
    def is_passthrough(self) -> bool:
        return self.one_way_latency_ms == 0 and math.isinf(self.bandwidth_bits_per_s)

    def delay_for(self, n_bytes: int) -> float:
        tx = 0.0 if math.isinf(self.bandwidth_bits_per_s) else n_bytes * 8.0 / self.bandwidth_bits_per_s
        return self.one_way_latency_ms / 1000.0 + tx


def parse_shape(spec: str | None) -> LinkShape | None:
    """Parse 'latency_ms:bandwidth_mbps' ('inf' bandwidth allowed)."""
    if not spec:
        return None
    try:
        lat_s, bw_s = spec.split(":")
        lat = float(lat_s)
        bw = math.inf if bw_s in ("inf", "") else float(bw_s) * 1e6
    except ValueError as e:
        raise InputError(f"bad --shape value {spec!r}") from e
    return LinkShape(lat, bw)


class ShapedSocket:
    """Socket wrapper delaying sends by latency + serialization time.

    Transmission time is serialized per connection (a shared pipe); the
    latency component overlaps between messages.
    """

    def __init__(self, sock, shape: LinkShape | None):
        self._sock = sock
        self._shape = shape
        self._lock = threading.Lock()
        self._busy_until = 0.0

    def sendall(self, data: bytes) -> None:
        shape = self._shape
        if shape is not None and not shape.is_passthrough:
            tx = 0.0
            if not math.isinf(shape.bandwidth_bits_per_s):
                tx = len(data) * 8.0 / shape.bandwidth_bits_per_s
            with self._lock:
                now = time.monotonic()
                self._busy_until = max(now, self._busy_until) + tx
                deliver_at = self._busy_until + shape.one_way_latency_ms / 1000.0
            delay = deliver_at - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        self._sock.sendall(data)

    def __getattr__(self, name):
        return getattr(self._sock, name)
