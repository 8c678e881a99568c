"""Shared fixtures: deterministic toy checkpoints and in-process swarms.

Servers are launched in-process (threads) for speed; the bench harness tests
cover the real-subprocess path separately.
"""

from __future__ import annotations

import contextlib

import pytest

from swarmlm.model import ModelConfig, gen_checkpoint
from swarmlm.registry import RegistrySeed
from swarmlm.server import ServerConfig, ServerNode


TINY = ModelConfig(n_layers=2, hidden=8, n_heads=2, vocab=32, max_seq=64)
SMALL = ModelConfig(n_layers=4, hidden=16, n_heads=2, vocab=32, max_seq=128)


@pytest.fixture(scope="session")
def tiny_ckpt():
    return gen_checkpoint(42, TINY)


@pytest.fixture(scope="session")
def small_ckpt():
    return gen_checkpoint(42, SMALL)


@pytest.fixture(scope="session")
def small_ckpt_path(small_ckpt, tmp_path_factory):
    from swarmlm.model import save_checkpoint

    path = tmp_path_factory.mktemp("ckpt") / "small.ptck"
    save_checkpoint(small_ckpt, str(path))
    return str(path)


class InProcSwarm:
    """Registry seed plus ServerNode threads sharing one loaded checkpoint."""

    def __init__(self, ckpt, ckpt_path: str):
        self.ckpt = ckpt
        self.ckpt_path = ckpt_path
        self.seed = RegistrySeed("127.0.0.1", 0, n_blocks=ckpt.config.n_layers).start()
        self.servers: list[ServerNode] = []
        self._stack = contextlib.ExitStack()

    def add_server(self, blocks, quantize="none", **kw) -> ServerNode:
        cfg = ServerConfig(
            checkpoint_path=self.ckpt_path,
            host="127.0.0.1",
            port=0,
            blocks=blocks,
            quantize=quantize,
            bootstrap=[self.seed.address],
            measure_steps=kw.pop("measure_steps", 5),
            **kw,
        )
        node = ServerNode(cfg, checkpoint=self.ckpt).start()
        self.servers.append(node)
        return node

    def client(self, **kw):
        from swarmlm.client import SwarmClient

        return SwarmClient(self.ckpt, [self.seed.address], **kw)

    def stop(self):
        for s in self.servers:
            with contextlib.suppress(Exception):
                s.stop()
        self.seed.stop()


@pytest.fixture
def swarm(small_ckpt, small_ckpt_path):
    sw = InProcSwarm(small_ckpt, small_ckpt_path)
    yield sw
    sw.stop()
