"""Decentralized pipeline-parallel serving of a deterministic toy transformer:
servers each host a contiguous span of blocks, clients plan minimum-latency
chains, sessions survive server churn via replay recovery, and activations can
ride the wire as blockwise int8.
"""

from .model import Checkpoint, ModelConfig, gen_checkpoint, load_checkpoint, save_checkpoint
from .client import SwarmClient, InferenceSession, DistributedModel, plan_chain, ping_servers
from .server import ServerConfig, ServerNode
from .registry import RegistrySeed, ServerEntry
from .allocation import BlockRange

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ModelConfig",
    "gen_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "SwarmClient",
    "InferenceSession",
    "DistributedModel",
    "plan_chain",
    "ping_servers",
    "ServerConfig",
    "ServerNode",
    "RegistrySeed",
    "ServerEntry",
    "BlockRange",
    "__version__",
]
