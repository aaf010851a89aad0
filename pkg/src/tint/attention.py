"""Windowed multi-head self-attention and the transformer block built on it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import (
    BatchNormParams,
    LayerNormParams,
    MLPParams,
    Params,
    batchnorm,
    layernorm,
    mlp_block,
    trunc_normal,
)
from .tensor import Tensor


def relative_position_index(window: int) -> np.ndarray:
    """(w*w, w*w) map from a query/key pair to its relative-offset table slot.

    Tokens are numbered row-major inside the window; the slot for offset
    (dy, dx) is ``(dy + w - 1) * (2w - 1) + (dx + w - 1)``.
    """
    rows, cols = np.divmod(np.arange(window * window), window)
    dy = rows[:, None] - rows[None, :] + window - 1
    dx = cols[:, None] - cols[None, :] + window - 1
    return (dy * (2 * window - 1) + dx).astype(np.intp)


@dataclass
class AttentionParams(Params):
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    bias_table: Optional[Tensor]
    num_heads: int
    window_size: int
    bias_index: np.ndarray

    @classmethod
    def init(cls, rng, dim: int, num_heads: int, window: int, use_bias: bool = True,
             dtype=np.float32) -> "AttentionParams":
        if dim % num_heads:
            raise ShapeError(f"width {dim} is not divisible by {num_heads} heads")
        table = T.Tensor(np.zeros((num_heads, (2 * window - 1) ** 2), dtype=dtype)) if use_bias else None
        return cls(
            trunc_normal(rng, (dim, dim), dtype=dtype), trunc_normal(rng, (dim, dim), dtype=dtype),
            trunc_normal(rng, (dim, dim), dtype=dtype), trunc_normal(rng, (dim, dim), dtype=dtype),
            table, num_heads, window, relative_position_index(window),
        )

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.num_heads


def attention_bias_lookup(p: AttentionParams, window: int) -> Tensor:
    """Expand the bias table to a dense (m, w*w, w*w) logit offset."""
    if p.bias_table is None:
        raise ValueError("attention bias is disabled for these parameters")
    if window != p.window_size:
        raise ShapeError(f"bias table built for window {p.window_size}, asked for {window}")
    n = window * window
    gathered = T.take(p.bias_table, p.bias_index.reshape(-1), axis=1)
    return gathered.reshape(p.num_heads, n, n)


def _heads(x: Tensor, n: int, length: int, m: int, d: int) -> Tensor:
    return x.reshape(n, length, m, d).transpose(0, 2, 1, 3)


def attention_weights(z: Tensor, p: AttentionParams, bias: Optional[Tensor] = None) -> Tensor:
    """Softmax attention matrix (N, m, L, L) for every window and head."""
    n, length, c = z.shape
    m = p.num_heads
    if c != p.w_q.shape[0]:
        raise ShapeError(f"attention width {p.w_q.shape[0]} does not match input {z.shape}")
    if p.w_q.shape[1] % m:
        raise ShapeError(f"projection width {p.w_q.shape[1]} is not divisible by {m} heads")
    d = p.head_dim
    q = _heads(T.matmul(z, p.w_q), n, length, m, d)
    k = _heads(T.matmul(z, p.w_k), n, length, m, d)
    logits = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    if bias is not None:
        if bias.shape != (m, length, length):
            raise ShapeError(f"bias shape {bias.shape} != {(m, length, length)}")
        logits = logits + bias
    return T.softmax(logits, axis=-1)


def scaled_dot_attention(z: Tensor, p: AttentionParams, bias: Optional[Tensor] = None) -> Tensor:
    """Multi-head self-attention over (N, L, C) token groups, no residual.

    Each head computes ``softmax(Q K^T / sqrt(d) + B) V`` on its slice of the
    projections; heads are concatenated and mapped back by ``w_o``.
    """
    n, length, c = z.shape
    attn = attention_weights(z, p, bias)
    v = _heads(T.matmul(z, p.w_v), n, length, p.num_heads, p.head_dim)
    out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, length, p.num_heads * p.head_dim)
    return T.matmul(out, p.w_o)


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) -> (B * H/w * W/w, w*w, C), windows and tokens row-major."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"{h}x{w} grid is not divisible by window {window}")
    nh, nw = h // window, w // window
    x = x.reshape(b, nh, window, nw, window, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * nh * nw, window * window, c)


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    if h % window or w % window:
        raise ShapeError(f"{h}x{w} grid is not divisible by window {window}")
    nh, nw = h // window, w // window
    count, length, c = windows.shape
    if length != window * window or count % (nh * nw):
        raise ShapeError(f"{windows.shape} windows do not tile a {h}x{w} grid with window {window}")
    b = count // (nh * nw)
    x = windows.reshape(b, nh, nw, window, window, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


@dataclass
class TransformerBlockParams(Params):
    norm1: LayerNormParams
    attn: AttentionParams
    local_w: Tensor
    local_bn: BatchNormParams
    mlp: MLPParams

    @classmethod
    def init(cls, rng, dim: int, num_heads: int, window: int, mlp_ratio: int = 4,
             use_bias: bool = True, dtype=np.float32) -> "TransformerBlockParams":
        return cls(
            LayerNormParams.init(dim, dtype),
            AttentionParams.init(rng, dim, num_heads, window, use_bias, dtype),
            trunc_normal(rng, (dim, 1, 3, 3), dtype=dtype),
            BatchNormParams.init(dim, dtype),
            MLPParams.init(rng, dim, mlp_ratio, dtype),
        )


def window_attention(x: Tensor, p: AttentionParams, window: int) -> Tensor:
    """Self-attention inside non-overlapping windows of a (B, H, W, C) map."""
    _, h, w, _ = x.shape
    bias = attention_bias_lookup(p, window) if p.bias_table is not None else None
    out = scaled_dot_attention(window_partition(x, window), p, bias)
    return window_reverse(out, window, h, w)


def transformer_block(x: Tensor, p: TransformerBlockParams, window: int, mode: str = "eval") -> Tensor:
    """Pre-norm window attention, residual depthwise 3x3 conv, pre-norm MLP."""
    if x.ndim != 4:
        raise ShapeError(f"transformer block expects (B, H, W, C), got {x.shape}")
    a = x + window_attention(layernorm(x, p.norm1), p.attn, window)
    local = T.depthwise_conv2d(a.transpose(0, 3, 1, 2), p.local_w, pad=1)
    b = a + batchnorm(local, p.local_bn, mode).transpose(0, 2, 3, 1)
    return b + mlp_block(b, p.mlp)
