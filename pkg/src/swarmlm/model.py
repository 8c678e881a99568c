"""Deterministic toy transformer: embeddings, pre-LN blocks with ALiBi attention
and KV caches, tied LM head, exact forward/backward. This is the single-process
reference that every distributed path is tested against.

Weights are generated from SplitMix64 streams keyed per tensor path, so the
same (seed, config) yields byte-identical checkpoints on any platform.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, InputError

LN_EPS = 1e-5

_SM64_GOLDEN = 0x9E3779B97F4A7C15
_SM64_MIX1 = 0xBF58476D1E4B21D5
_SM64_MIX2 = 0x94D049BB133111EB
_U64 = 0xFFFFFFFFFFFFFFFF


def splitmix64_next(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + _SM64_GOLDEN) & _U64
    z = state
    z = ((z ^ (z >> 30)) * _SM64_MIX1) & _U64
    z = ((z ^ (z >> 27)) * _SM64_MIX2) & _U64
    return state, z ^ (z >> 31)


def splitmix64_array(seed: int, n: int) -> np.ndarray:
    """Vectorized SplitMix64: the first n outputs of the stream seeded by `seed`."""
    idx = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (np.uint64(seed) + idx * np.uint64(_SM64_GOLDEN)).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM64_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM64_MIX2)
        z = z ^ (z >> np.uint64(31))
    return z


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _U64
    return h


def uniform_from_u64(z: np.ndarray) -> np.ndarray:
    """Map u64 words to f32 uniform in [-0.05, 0.05)."""
    u = (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)  # [0, 1)
    return ((u - 0.5) * 0.1).astype(np.float32)


def tensor_stream(seed: int, path: str, n: int) -> np.ndarray:
    """Deterministic weight values for one named tensor."""
    return uniform_from_u64(splitmix64_array(seed ^ fnv1a64(path.encode()), n))


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden: int
    n_heads: int
    vocab: int
    max_seq: int
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1 or self.n_heads < 1:
            raise InputError("layers, hidden and heads must be positive")
        if self.vocab < 1 or self.max_seq < 1 or self.mlp_ratio < 1:
            raise InputError("vocab, max_seq and mlp_ratio must be positive")
        if self.hidden % self.n_heads != 0:
            raise InputError("hidden must be a multiple of n_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads


@dataclass
class BlockWeights:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wqkv: np.ndarray  # [d, 3d]
    bqkv: np.ndarray
    wo: np.ndarray  # [d, d]
    bo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    wmlp_in: np.ndarray  # [d, r*d]
    bmlp_in: np.ndarray
    wmlp_out: np.ndarray  # [r*d, d]
    bmlp_out: np.ndarray

    def tensors(self):
        """(name, array) pairs in the fixed file traversal order."""
        return [
            ("ln1.gamma", self.ln1_gamma),
            ("ln1.beta", self.ln1_beta),
            ("wqkv", self.wqkv),
            ("bqkv", self.bqkv),
            ("wo", self.wo),
            ("bo", self.bo),
            ("ln2.gamma", self.ln2_gamma),
            ("ln2.beta", self.ln2_beta),
            ("wmlp_in", self.wmlp_in),
            ("bmlp_in", self.bmlp_in),
            ("wmlp_out", self.wmlp_out),
            ("bmlp_out", self.bmlp_out),
        ]


@dataclass
class Checkpoint:
    config: ModelConfig
    embed: np.ndarray  # [V, d]
    blocks: list[BlockWeights]
    final_ln_gamma: np.ndarray
    final_ln_beta: np.ndarray

    def tensors(self):
        out = [("embed", self.embed)]
        for i, blk in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{name}", arr) for name, arr in blk.tensors())
        out.append(("final_ln.gamma", self.final_ln_gamma))
        out.append(("final_ln.beta", self.final_ln_beta))
        return out


@dataclass
class KvCache:
    """Per-block attention cache. Single-writer: one session step at a time."""

    keys: np.ndarray  # [t, H, dh]
    values: np.ndarray

    @classmethod
    def empty(cls, config: ModelConfig) -> "KvCache":
        shape = (0, config.n_heads, config.head_dim)
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32))

    @property
    def length(self) -> int:
        return self.keys.shape[0]


@dataclass
class ActivationTape:
    """Intermediates of one block_forward, enough for an exact backward."""

    x: np.ndarray
    start_pos: int
    xhat1: np.ndarray
    inv_std1: np.ndarray
    h1: np.ndarray
    q: np.ndarray  # [t, H, dh]
    k_all: np.ndarray  # [T, H, dh]
    v_all: np.ndarray
    probs: np.ndarray  # [H, t, T]
    ctx: np.ndarray  # [t, d] merged heads
    mid: np.ndarray
    xhat2: np.ndarray
    inv_std2: np.ndarray
    h2: np.ndarray
    pre_act: np.ndarray
    act: np.ndarray


def gen_checkpoint(seed: int, config: ModelConfig) -> Checkpoint:
    """Deterministic pseudo-pretrained weights; gammas 1, betas/biases 0."""
    d, r = config.hidden, config.mlp_ratio

    def mat(path, rows, cols):
        return tensor_stream(seed, path, rows * cols).reshape(rows, cols)

    embed = mat("embed", config.vocab, d)
    blocks = []
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        blocks.append(
            BlockWeights(
                ln1_gamma=np.ones(d, np.float32),
                ln1_beta=np.zeros(d, np.float32),
                wqkv=mat(p + "wqkv", d, 3 * d),
                bqkv=np.zeros(3 * d, np.float32),
                wo=mat(p + "wo", d, d),
                bo=np.zeros(d, np.float32),
                ln2_gamma=np.ones(d, np.float32),
                ln2_beta=np.zeros(d, np.float32),
                wmlp_in=mat(p + "wmlp_in", d, r * d),
                bmlp_in=np.zeros(r * d, np.float32),
                wmlp_out=mat(p + "wmlp_out", r * d, d),
                bmlp_out=np.zeros(d, np.float32),
            )
        )
    return Checkpoint(
        config=config,
        embed=embed,
        blocks=blocks,
        final_ln_gamma=np.ones(d, np.float32),
        final_ln_beta=np.zeros(d, np.float32),
    )


# ---------------------------------------------------------------------------
# Checkpoint file format: magic "PTCK", version u8=1, config as big-endian u32,
# then tensors in traversal order as little-endian f32.

CKPT_MAGIC = b"PTCK"
CKPT_VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    c = ckpt.config
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("B", CKPT_VERSION))
        f.write(struct.pack(">6I", c.n_layers, c.hidden, c.n_heads, c.vocab, c.max_seq, c.mlp_ratio))
        for _, arr in ckpt.tensors():
            f.write(np.ascontiguousarray(arr, "<f4").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    if data[4] != CKPT_VERSION:
        raise InputError(f"unsupported checkpoint version {data[4]}")
    L, d, h, v, ms, r = struct.unpack(">6I", data[5:29])
    config = ModelConfig(L, d, h, v, ms, r)
    off = 29

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(data, "<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
        return arr

    embed = take((v, d))
    blocks = []
    for _ in range(L):
        blocks.append(
            BlockWeights(
                ln1_gamma=take((d,)), ln1_beta=take((d,)),
                wqkv=take((d, 3 * d)), bqkv=take((3 * d,)),
                wo=take((d, d)), bo=take((d,)),
                ln2_gamma=take((d,)), ln2_beta=take((d,)),
                wmlp_in=take((d, r * d)), bmlp_in=take((r * d,)),
                wmlp_out=take((r * d, d)), bmlp_out=take((d,)),
            )
        )
    fg, fb = take((d,)), take((d,))
    if off != len(data):
        raise InputError("checkpoint has trailing bytes")
    return Checkpoint(config, embed, blocks, fg, fb)


# ---------------------------------------------------------------------------
# Forward / backward math (fp32 throughout).


def layer_norm(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return (gamma * xhat + beta).astype(np.float32), xhat.astype(np.float32), inv_std.astype(np.float32)


def layer_norm_backward(dy, xhat, inv_std, gamma):
    dxhat = dy * gamma
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    return ((dxhat - m1 - xhat * m2) * inv_std).astype(np.float32)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    return (0.5 * x * (1.0 + np.tanh(u))).astype(np.float32)


def gelu_grad(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)).astype(np.float32)


def alibi_slopes(n_heads: int) -> np.ndarray:
    return np.array([2.0 ** (-8.0 * h / n_heads) for h in range(1, n_heads + 1)], np.float32)


def _mm(x: np.ndarray, w, qw=None) -> np.ndarray:
    """x @ w, optionally via the mixed int8 path (qw quantizes w transposed)."""
    if qw is not None:
        from .quant import matmul_mixed

        return np.ascontiguousarray(matmul_mixed(qw, x.T).T)
    return x @ w


def block_forward(
    w: BlockWeights,
    hidden: np.ndarray,
    cache: KvCache,
    start_pos: int,
    config: ModelConfig,
    want_tape: bool = False,
    qw=None,
):
    """One pre-LN transformer block over t new positions.

    Returns (hidden', cache', tape or None). `qw`, when given, is a
    QuantizedBlockWeights companion routing the four matmuls through the
    mixed int8 path.
    """
    if hidden.ndim != 2 or hidden.shape[1] != config.hidden:
        raise InputError(f"hidden must be [t, {config.hidden}]")
    if start_pos != cache.length:
        raise InputError(f"start_pos {start_pos} != cache length {cache.length}")
    t = hidden.shape[0]
    if start_pos + t > config.max_seq:
        raise CapacityError(f"position {start_pos + t} exceeds max_seq {config.max_seq}")

    x = hidden.astype(np.float32)
    H, dh = config.n_heads, config.head_dim

    h1, xhat1, inv_std1 = layer_norm(x, w.ln1_gamma, w.ln1_beta)
    qkv = _mm(h1, w.wqkv, None if qw is None else qw.wqkv) + w.bqkv
    q = qkv[:, : config.hidden].reshape(t, H, dh)
    k_new = qkv[:, config.hidden : 2 * config.hidden].reshape(t, H, dh)
    v_new = qkv[:, 2 * config.hidden :].reshape(t, H, dh)
    k_all = np.concatenate([cache.keys, k_new], axis=0)
    v_all = np.concatenate([cache.values, v_new], axis=0)
    T = k_all.shape[0]

    # scores[h, i, j] with query at global position start_pos + i
    scores = np.einsum("ihd,jhd->hij", q, k_all).astype(np.float32) / np.float32(math.sqrt(dh))
    pos_q = np.arange(start_pos, start_pos + t, dtype=np.float32)
    pos_k = np.arange(T, dtype=np.float32)
    rel = pos_k[None, :] - pos_q[:, None]  # j - i, <= 0 on the causal part
    scores += alibi_slopes(H)[:, None, None] * rel[None, :, :]
    scores = np.where(rel[None, :, :] > 0, np.float32(-np.inf), scores)

    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores, dtype=np.float32)
    probs = e / e.sum(axis=-1, keepdims=True)

    ctx = np.einsum("hij,jhd->ihd", probs, v_all).astype(np.float32).reshape(t, config.hidden)
    attn_out = _mm(ctx, w.wo, None if qw is None else qw.wo) + w.bo

    mid = x + attn_out
    h2, xhat2, inv_std2 = layer_norm(mid, w.ln2_gamma, w.ln2_beta)
    pre_act = _mm(h2, w.wmlp_in, None if qw is None else qw.wmlp_in) + w.bmlp_in
    act = gelu(pre_act)
    out = mid + _mm(act, w.wmlp_out, None if qw is None else qw.wmlp_out) + w.bmlp_out
    out = out.astype(np.float32)

    new_cache = KvCache(k_all, v_all)
    tape = None
    if want_tape:
        tape = ActivationTape(
            x=x, start_pos=start_pos, xhat1=xhat1, inv_std1=inv_std1, h1=h1,
            q=q, k_all=k_all, v_all=v_all, probs=probs, ctx=ctx,
            mid=mid, xhat2=xhat2, inv_std2=inv_std2, h2=h2,
            pre_act=pre_act, act=act,
        )
    return out, new_cache, tape


def block_backward(w: BlockWeights, tape: ActivationTape, grad_out: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Exact gradient of block_forward w.r.t. its input hidden states.

    Cached keys/values (positions before tape.start_pos) are treated as
    constants; weight gradients are never computed.
    """
    if grad_out.shape != tape.x.shape:
        raise InputError("grad_out shape does not match tape input")
    t = tape.x.shape[0]
    H, dh = config.n_heads, config.head_dim
    s0 = tape.start_pos
    g = grad_out.astype(np.float32)

    # out = mid + gelu(LN2(mid) @ Win + bin) @ Wout + bout
    dact = g @ w.wmlp_out.T
    dpre = dact * gelu_grad(tape.pre_act)
    dh2 = dpre @ w.wmlp_in.T
    dmid = g + layer_norm_backward(dh2, tape.xhat2, tape.inv_std2, w.ln2_gamma)

    # mid = x + Attn(LN1(x))
    dctx = (dmid @ w.wo.T).reshape(t, H, dh)
    dprobs = np.einsum("ihd,jhd->hij", dctx, tape.v_all).astype(np.float32)
    dv_all = np.einsum("hij,ihd->jhd", tape.probs, dctx).astype(np.float32)
    row = (dprobs * tape.probs).sum(axis=-1, keepdims=True)
    dscores = tape.probs * (dprobs - row)
    inv_sq = np.float32(1.0 / math.sqrt(dh))
    dq = np.einsum("hij,jhd->ihd", dscores, tape.k_all).astype(np.float32) * inv_sq
    dk_all = np.einsum("hij,ihd->jhd", dscores, tape.q).astype(np.float32) * inv_sq

    d = config.hidden
    dqkv = np.concatenate(
        [dq.reshape(t, d), dk_all[s0:].reshape(t, d), dv_all[s0:].reshape(t, d)], axis=1
    )
    dh1 = dqkv @ w.wqkv.T
    dx = dmid + layer_norm_backward(dh1, tape.xhat1, tape.inv_std1, w.ln1_gamma)
    return dx.astype(np.float32)


def embed(ckpt: Checkpoint, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= ckpt.config.vocab):
        raise InputError("token out of range")
    return ckpt.embed[tokens].astype(np.float32)


def lm_head(ckpt: Checkpoint, hidden: np.ndarray) -> np.ndarray:
    """Final LayerNorm then projection onto the tied embedding transpose."""
    if hidden.ndim != 2 or hidden.shape[1] != ckpt.config.hidden:
        raise InputError("hidden must be [t, d]")
    h, _, _ = layer_norm(hidden, ckpt.final_ln_gamma, ckpt.final_ln_beta)
    return (h @ ckpt.embed.T).astype(np.float32)


def sample_next(logits_row: np.ndarray, strategy: str = "greedy", temperature: float = 1.0, seed: int = 0, step: int = 0) -> int:
    """Pick the next token from one logits row.

    Greedy: argmax, lowest index wins ties. Temperature: softmax(logits/tau)
    sampled with a SplitMix64 uniform keyed by (seed, step).
    """
    logits_row = np.asarray(logits_row, np.float32)
    if not np.all(np.isfinite(logits_row)):
        raise InputError("non-finite logits")
    if strategy == "greedy":
        return int(np.argmax(logits_row))
    if strategy != "temperature":
        raise InputError(f"unknown strategy {strategy!r}")
    if temperature <= 0:
        raise InputError("temperature must be > 0")
    z = logits_row.astype(np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    _, word = splitmix64_next((seed ^ fnv1a64(str(step).encode())) & _U64)
    u = (word >> 11) * (2.0 ** -53)
    return int(np.searchsorted(np.cumsum(p), u, side="right").clip(0, len(p) - 1))


# ---------------------------------------------------------------------------
# Single-process reference paths.


def forward_blocks(ckpt: Checkpoint, hidden: np.ndarray, block_range=None) -> np.ndarray:
    """One-shot forward through a range of blocks, no cache."""
    start, end = block_range if block_range is not None else (0, ckpt.config.n_layers)
    for i in range(start, end):
        hidden, _, _ = block_forward(ckpt.blocks[i], hidden, KvCache.empty(ckpt.config), 0, ckpt.config)
    return hidden


def reference_generate(ckpt: Checkpoint, prompt_tokens, max_new_tokens: int, strategy: str = "greedy", temperature: float = 1.0, seed: int = 0) -> list[int]:
    """Local incremental generation: the oracle for the distributed runtime."""
    config = ckpt.config
    tokens = list(prompt_tokens)
    caches = [KvCache.empty(config) for _ in range(config.n_layers)]
    pos = 0
    new_tokens: list[int] = []
    pending = tokens
    for step in range(max_new_tokens):
        hidden = embed(ckpt, pending)
        for i in range(config.n_layers):
            hidden, caches[i], _ = block_forward(ckpt.blocks[i], hidden, caches[i], pos, config)
        logits = lm_head(ckpt, hidden)
        nxt = sample_next(logits[-1], strategy, temperature, seed, step)
        pos += len(pending)
        pending = [nxt]
        new_tokens.append(nxt)
    return new_tokens
