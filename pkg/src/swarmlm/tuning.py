"""Client-side parameter-efficient training: trainable soft prompts plus a
linear classification head, optimized with Adam while all server weights stay
frozen. Forward/backward for the transformer body runs over the swarm.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SwarmError
from .model import embed, tensor_stream

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_LR = 1e-3

TUNE_MAGIC = b"PTAD"
TUNE_VERSION = 1


@dataclass
class PromptTuneState:
    prompts: np.ndarray  # [p, d]
    head_w: np.ndarray  # [d, C]
    head_b: np.ndarray  # [C]
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def init(cls, pre_seq_len: int, hidden: int, n_classes: int, seed: int = 0) -> "PromptTuneState":
        if pre_seq_len < 1 or n_classes < 2:
            raise InputError("need pre_seq_len >= 1 and n_classes >= 2")
        prompts = tensor_stream(seed, "tune.prompts", pre_seq_len * hidden).reshape(pre_seq_len, hidden)
        head_w = tensor_stream(seed, "tune.head_w", hidden * n_classes).reshape(hidden, n_classes)
        head_b = np.zeros(n_classes, np.float32)
        state = cls(prompts=prompts, head_w=head_w, head_b=head_b)
        for name, arr in state.params().items():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state

    def params(self) -> dict[str, np.ndarray]:
        return {"prompts": self.prompts, "head_w": self.head_w, "head_b": self.head_b}

    @property
    def pre_seq_len(self) -> int:
        return self.prompts.shape[0]


def adam_update(state: PromptTuneState, grads: dict[str, np.ndarray], lr: float = DEFAULT_LR) -> None:
    """Bias-corrected Adam on prompts + head only."""
    state.step_count += 1
    t = state.step_count
    for name, p in state.params().items():
        g = grads[name].astype(np.float32)
        state.m[name] = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / (1 - ADAM_BETA1 ** t)
        v_hat = state.v[name] / (1 - ADAM_BETA2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(np.float32)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify_forward(state: PromptTuneState, pooled: np.ndarray) -> np.ndarray:
    return pooled @ state.head_w + state.head_b


def train_step(state: PromptTuneState, model, ckpt, token_batch, labels, lr: float = DEFAULT_LR, return_grads: bool = False):
    """One optimization step: returns (loss, state) with state updated in place,
    or (loss, state, grads) when return_grads is set (for gradient checks).

    `model` provides forward(batch)->(acts, handles) and backward(handles,
    grad)->grad_in; in production that's client.DistributedModel, in unit
    tests a local stand-in.
    """
    tokens = np.asarray(token_batch)
    labels = np.asarray(labels)
    if tokens.ndim != 2 or labels.ndim != 1 or tokens.shape[0] != labels.shape[0]:
        raise InputError("want tokens [B, t] and labels [B]")
    n_classes = state.head_b.shape[0]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InputError("label out of range")
    B, t = tokens.shape
    p = state.pre_seq_len

    tok_embeds = np.stack([embed(ckpt, row) for row in tokens])  # [B, t, d]
    inputs = np.concatenate([np.broadcast_to(state.prompts, (B, p, state.prompts.shape[1])), tok_embeds], axis=1)
    acts, handles = model.forward(inputs.astype(np.float32))

    pooled = acts[:, -1, :]  # last-position representation
    logits = classify_forward(state, pooled)
    probs = softmax(logits.astype(np.float64))
    loss = float(-np.mean(np.log(probs[np.arange(B), labels] + 1e-12)))
    if not np.isfinite(loss):
        raise SwarmError(f"non-finite loss {loss}; aborting training step")

    dlogits = probs.astype(np.float32)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    grads = {
        "head_w": pooled.T @ dlogits,
        "head_b": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ state.head_w.T
    dacts = np.zeros_like(acts)
    dacts[:, -1, :] = dpooled
    dinputs = model.backward(handles, dacts)
    grads["prompts"] = dinputs[:, :p, :].sum(axis=0)

    adam_update(state, grads, lr)
    if return_grads:
        return loss, state, grads
    return loss, state


def save_tune_state(state: PromptTuneState, path: str) -> None:
    """Prompt-tune checkpoint: magic "PTAD", version, dims, f32 arrays."""
    p, d = state.prompts.shape
    c = state.head_b.shape[0]
    with open(path, "wb") as f:
        f.write(TUNE_MAGIC)
        f.write(struct.pack("B", TUNE_VERSION))
        f.write(struct.pack(">4I", p, d, c, state.step_count))
        for arr in (state.prompts, state.head_w, state.head_b):
            f.write(np.ascontiguousarray(arr, "<f4").tobytes())
        for group in (state.m, state.v):
            for name in ("prompts", "head_w", "head_b"):
                f.write(np.ascontiguousarray(group[name], "<f4").tobytes())


def load_tune_state(path: str) -> PromptTuneState:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != TUNE_MAGIC:
        raise InputError("not a prompt-tune checkpoint (bad magic)")
    if data[4] != TUNE_VERSION:
        raise InputError(f"unsupported tune checkpoint version {data[4]}")
    p, d, c, steps = struct.unpack(">4I", data[5:21])
    off = 21

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(data, "<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
        return arr

    state = PromptTuneState(prompts=take((p, d)), head_w=take((d, c)), head_b=take((c,)), step_count=steps)
    for group in ("m", "v"):
        getattr(state, group)["prompts"] = take((p, d))
        getattr(state, group)["head_w"] = take((d, c))
        getattr(state, group)["head_b"] = take((c,))
    if off != len(data):
        raise InputError("tune checkpoint has trailing bytes")
    return state
