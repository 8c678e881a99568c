"""Block-interval selection, swarm throughput, and rebalancing decisions.

All functions are pure; the server node feeds them registry snapshots and the
test suite checks them against brute-force oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True, order=True)
class BlockRange:
    start: int
    end: int  # half-open

    def __post_init__(self):
        if self.start < 0 or self.start >= self.end:
            raise InputError(f"invalid block range [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def contains(self, block: int) -> bool:
        return self.start <= block < self.end

    def intersects(self, other: "BlockRange") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass
class SwarmView:
    n_blocks: int
    servers: list  # (server_id, BlockRange, throughput)


def block_throughputs(view: SwarmView) -> np.ndarray:
    """Per-block summed throughput of the servers hosting that block."""
    t = np.zeros(view.n_blocks, np.float64)
    for _, rng, tput in view.servers:
        t[rng.start : rng.end] += tput
    return t


def swarm_throughput(t: np.ndarray) -> float:
    """Bottleneck: the minimum per-block throughput."""
    if len(t) < 1:
        raise InputError("need at least one block")
    return float(np.min(t))


def _sorted_after_join(t: np.ndarray, start: int, k: int, my_throughput: float) -> tuple:
    t2 = np.array(t, np.float64)
    t2[start : start + k] += my_throughput
    return tuple(np.sort(t2))


def choose_interval(t: np.ndarray, k: int, my_throughput: float) -> int:
    """Best contiguous start for a joining server of span k.

    Candidates are ranked by the ascending-sorted post-join throughput vector,
    compared lexicographically (maximize the minimum, then the next minimum,
    and so on); ties go to the smallest start.
    """
    L = len(t)
    if not 1 <= k <= L:
        raise InputError(f"span {k} out of range for {L} blocks")
    best_start, best_key = 0, None
    for start in range(L - k + 1):
        key = _sorted_after_join(t, start, k, my_throughput)
        if best_key is None or key > best_key:
            best_start, best_key = start, key
    return best_start


def should_rebalance(view: SwarmView, self_id, k_self: int, eps: float = 0.2):
    """Return a better start for `self_id`, or None if staying put.

    Simulates leaving and rejoining via choose_interval; a move is proposed
    only if it lifts the bottleneck by a factor (1 + eps). When the current
    bottleneck is zero, any strict lexicographic improvement qualifies so
    coverage gaps get closed even if one move cannot fix them all.
    """
    if eps <= 0:
        raise InputError("eps must be > 0")
    mine = [s for s in view.servers if s[0] == self_id]
    if not mine:
        raise InputError(f"server {self_id!r} not in view")
    _, cur_range, my_tput = mine[0]
    if len(cur_range) != k_self:
        raise InputError("k_self does not match the server's current span")

    others = SwarmView(view.n_blocks, [s for s in view.servers if s[0] != self_id])
    t_without = block_throughputs(others)
    new_start = choose_interval(t_without, k_self, my_tput)
    if new_start == cur_range.start:
        return None

    current_tp = swarm_throughput(block_throughputs(view))
    new_key = _sorted_after_join(t_without, new_start, k_self, my_tput)
    if current_tp == 0.0:
        stay_key = _sorted_after_join(t_without, cur_range.start, k_self, my_tput)
        return new_start if new_key > stay_key else None
    return new_start if new_key[0] >= (1.0 + eps) * current_tp else None


def server_throughput(compute_tps: float, net_bytes_per_s: float, bytes_per_token: float) -> float:
    """min(compute, network) in tokens/s."""
    if compute_tps <= 0 or net_bytes_per_s <= 0 or bytes_per_token <= 0:
        raise InputError("throughput inputs must be positive")
    return min(compute_tps, net_bytes_per_s / bytes_per_token)
