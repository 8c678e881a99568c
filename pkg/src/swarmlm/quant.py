"""Blockwise int8 quantization for activations in transit, int8 weight storage
with outlier-column decomposition, and memory-footprint arithmetic."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

DEFAULT_BLOCK_SIZE = 64
DEFAULT_OUTLIER_THRESHOLD = 6.0


@dataclass
class QuantizedBlockwise:
    block_size: int
    scales: np.ndarray  # f32, one per block of the flattened tensor
    codes: np.ndarray  # i8, one per element
    shape: tuple

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_blockwise(x: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedBlockwise:
    """Per-block absmax int8 coding: scale = absmax/127, code = round(x/scale)."""
    if block_size < 1:
        raise InputError("block_size must be >= 1")
    x = np.asarray(x, np.float32)
    if not np.all(np.isfinite(x)):
        raise InputError("non-finite input tensor")
    flat = x.reshape(-1)
    n = flat.size
    n_blocks = max(1, math.ceil(n / block_size)) if n else 0
    scales = np.zeros(n_blocks, np.float32)
    codes = np.zeros(n, np.int8)
    for b in range(n_blocks):
        chunk = flat[b * block_size : (b + 1) * block_size]
        absmax = float(np.abs(chunk).max()) if chunk.size else 0.0
        if absmax == 0.0:
            continue
        scale = np.float32(absmax / 127.0)
        scales[b] = scale
        c = _round_half_away(chunk.astype(np.float64) / float(scale))
        codes[b * block_size : b * block_size + chunk.size] = np.clip(c, -127, 127).astype(np.int8)
    return QuantizedBlockwise(block_size, scales, codes, tuple(x.shape))


def dequantize_blockwise(q: QuantizedBlockwise) -> np.ndarray:
    n = int(np.prod(q.shape))
    expected_blocks = max(1, math.ceil(n / q.block_size)) if n else 0
    if q.codes.size != n or q.scales.size != expected_blocks:
        raise InputError("corrupt quantized tensor: size/scale count mismatch")
    out = np.empty(n, np.float32)
    for b in range(expected_blocks):
        sl = slice(b * q.block_size, min((b + 1) * q.block_size, n))
        out[sl] = q.codes[sl].astype(np.float32) * q.scales[b]
    return out.reshape(q.shape)


@dataclass
class Int8Weights:
    """Per-column int8 weights with full-precision outlier columns."""

    regular_codes: np.ndarray  # i8 [rows, cols], outlier columns zeroed
    col_scales: np.ndarray  # f32 per column (0 for outlier columns)
    outlier_cols: np.ndarray  # sorted int indices
    outlier_data: np.ndarray  # f32 [rows, n_outliers]
    threshold: float
    shape: tuple


def quantize_weights_int8(w: np.ndarray, threshold: float = DEFAULT_OUTLIER_THRESHOLD) -> Int8Weights:
    """A column is an outlier iff max|w[:, c]| > threshold; it stays f32."""
    w = np.asarray(w, np.float32)
    if w.ndim != 2:
        raise InputError("weights must be a 2-D matrix")
    if not np.all(np.isfinite(w)):
        raise InputError("non-finite weights")
    if threshold <= 0:
        raise InputError("threshold must be > 0")
    col_absmax = np.abs(w).max(axis=0) if w.size else np.zeros(w.shape[1], np.float32)
    outlier_mask = col_absmax > threshold
    outlier_cols = np.flatnonzero(outlier_mask)
    scales = np.where(outlier_mask, 0.0, col_absmax / 127.0).astype(np.float32)
    codes = np.zeros(w.shape, np.int8)
    regular = np.flatnonzero(~outlier_mask)
    for c in regular:
        if scales[c] > 0:
            codes[:, c] = np.clip(
                _round_half_away(w[:, c].astype(np.float64) / float(scales[c])), -127, 127
            ).astype(np.int8)
    return Int8Weights(
        regular_codes=codes,
        col_scales=scales,
        outlier_cols=outlier_cols,
        outlier_data=w[:, outlier_cols].copy(),
        threshold=float(threshold),
        shape=w.shape,
    )


def reconstruct_weights(wq: Int8Weights) -> np.ndarray:
    out = wq.regular_codes.astype(np.float32) * wq.col_scales[None, :]
    out[:, wq.outlier_cols] = wq.outlier_data
    return out


def matmul_mixed(wq: Int8Weights, x: np.ndarray) -> np.ndarray:
    """W @ x with regular columns dequantized and outlier columns in f32.

    Outlier columns of W pair with the matching rows of x.
    """
    x = np.asarray(x, np.float32)
    if x.ndim != 2 or x.shape[0] != wq.shape[1]:
        raise InputError(f"inner dimensions disagree: W {wq.shape} @ x {x.shape}")
    regular = wq.regular_codes.astype(np.float32) * wq.col_scales[None, :]
    result = regular @ x
    if wq.outlier_cols.size:
        result += wq.outlier_data @ x[wq.outlier_cols]
    return result.astype(np.float32)


@dataclass
class QuantizedBlockWeights:
    """Mixed-int8 companions of one block's matrices, stored transposed so
    `matmul_mixed(q, x.T).T == x @ W` for each matrix."""

    wqkv: Int8Weights
    wo: Int8Weights
    wmlp_in: Int8Weights
    wmlp_out: Int8Weights

    @classmethod
    def from_block(cls, blk, threshold: float = DEFAULT_OUTLIER_THRESHOLD) -> "QuantizedBlockWeights":
        return cls(
            wqkv=quantize_weights_int8(blk.wqkv.T, threshold),
            wo=quantize_weights_int8(blk.wo.T, threshold),
            wmlp_in=quantize_weights_int8(blk.wmlp_in.T, threshold),
            wmlp_out=quantize_weights_int8(blk.wmlp_out.T, threshold),
        )


@dataclass
class FootprintReport:
    params: int
    bits_per_param: int
    bytes_total: int
    servers_needed: int


def memory_footprint(params: int, bits: int, per_server_bytes: int) -> FootprintReport:
    if params <= 0 or bits <= 0 or per_server_bytes <= 0:
        raise InputError("footprint inputs must be positive")
    bytes_total = params * bits // 8
    return FootprintReport(
        params=int(params),
        bits_per_param=int(bits),
        bytes_total=int(bytes_total),
        servers_needed=int(math.ceil(bytes_total / per_server_bytes)),
    )
