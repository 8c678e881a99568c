"""Shared exception types."""


class SwarmError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SwarmError):
    """Caller passed malformed or out-of-contract input."""


class CapacityError(SwarmError):
    """A resource limit (sequence length, session slots) was exceeded."""


class ProtocolError(SwarmError):
    """Malformed bytes on the wire; the connection must be dropped."""


class TransportError(SwarmError):
    """Connection-level failure (refused, reset, unreachable)."""


class TimeoutError_(SwarmError):
    """An RPC deadline elapsed before the reply arrived."""


class RemoteError(SwarmError):
    """The peer replied with an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.message = message


# Remote error codes carried in ERROR frames (u16).
ERR_GENERIC = 1
ERR_BUSY = 2
ERR_DESYNC = 3
ERR_UNKNOWN_SESSION = 4
ERR_UNKNOWN_TAPE = 5
ERR_BAD_REQUEST = 6
ERR_CAPACITY = 7


class NoRouteError(SwarmError):
    """No chain of servers covers the requested block range."""

    def __init__(self, missing_blocks):
        self.missing_blocks = list(missing_blocks)
        super().__init__(f"no route: blocks {self.missing_blocks} uncovered")


class SessionError(SwarmError):
    """An inference session failed and could not be recovered."""
