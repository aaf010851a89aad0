"""Convolutional and MLP building blocks plus the two normalization layers.

Blocks are plain functions over parameter dataclasses. A parameter dataclass
lists its tensors as fields; :class:`Params` walks the fields to produce
canonical dotted names for checkpoints and optimizers.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

MODES = ("train", "eval")


def buffer(**kw):
    """Dataclass field holding non-trainable state saved with the model."""
    return field(metadata={"buffer": True}, **kw)


class Params:
    """Mixin giving dataclasses deterministic parameter/buffer traversal.

    Tensor fields are trainable: they are flagged ``requires_grad`` on creation.
    """

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                value.requires_grad = True

    def _walk(self, prefix: str, want_buffers: bool) -> Iterator[tuple[str, object]]:
        for f in fields(self):
            value = getattr(self, f.name)
            name = prefix + f.name
            if isinstance(value, Tensor):
                if not want_buffers:
                    yield name, value
            elif isinstance(value, np.ndarray) and f.metadata.get("buffer"):
                if want_buffers:
                    yield name, value
            elif isinstance(value, Params):
                yield from value._walk(name + ".", want_buffers)
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Params):
                        yield from item._walk(f"{name}.{i}.", want_buffers)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self._walk(prefix, False)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield from self._walk(prefix, True)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    """N(0, std^2) truncated at +-2 std by resampling the tails."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2 * std
    return Tensor(vals.astype(dtype))


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


# ---------------------------------------------------------------- normalization


@dataclass
class BatchNormParams(Params):
    weight: Tensor
    bias: Tensor
    running_mean: np.ndarray = buffer()
    running_var: np.ndarray = buffer()
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(Tensor(np.ones(channels, dtype=dtype)), zeros(channels, dtype),
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class LayerNormParams(Params):
    weight: Tensor
    bias: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, width: int, dtype=np.float32) -> "LayerNormParams":
        return cls(Tensor(np.ones(width, dtype=dtype)), zeros(width, dtype))


def batchnorm(x: Tensor, p: BatchNormParams, mode: str) -> Tensor:
    """Per-channel normalization of (B, C, ...) input.

    Train mode normalizes with batch statistics and folds them into the
    running estimates (``running = momentum * running + (1 - momentum) * batch``,
    unbiased variance); eval mode uses the running estimates only.
    """
    check_mode(mode)
    c = p.weight.shape[0]
    if x.ndim < 2 or x.shape[1] != c:
        raise ShapeError(f"batchnorm expects {c} channels, got input {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gamma = p.weight.data.reshape(bshape)
    beta = p.bias.data.reshape(bshape)
    xd = x.data

    if mode == "train":
        n = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        invstd = 1.0 / np.sqrt(var + p.eps)
        xhat = (xd - mu) * invstd
        unbiased = var.reshape(c) * (n / (n - 1) if n > 1 else 1.0)
        p.running_mean[...] = p.momentum * p.running_mean + (1 - p.momentum) * mu.reshape(c)
        p.running_var[...] = p.momentum * p.running_var + (1 - p.momentum) * unbiased

        def bw(g):
            gxhat = g * gamma
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = invstd / n * (n * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        invstd = 1.0 / np.sqrt(p.running_var.reshape(bshape) + p.eps)
        xhat = (xd - p.running_mean.reshape(bshape)) * invstd

        def bw(g):
            return g * gamma * invstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return T.emit("batchnorm", (x, p.weight, p.bias), xhat * gamma + beta, bw)


def layernorm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize every token over its last axis."""
    c = p.weight.shape[0]
    if x.shape[-1] != c:
        raise ShapeError(f"layernorm width {c} does not match input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + p.eps)
    xhat = (xd - mu) * invstd
    gamma = p.weight.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gxhat = g * gamma
        s1 = gxhat.sum(axis=-1, keepdims=True)
        s2 = (gxhat * xhat).sum(axis=-1, keepdims=True)
        gx = invstd / c * (c * gxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return T.emit("layernorm", (x, p.weight, p.bias), xhat * gamma + p.bias.data, bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w (+ b)`` with ``w`` laid out (in, out)."""
    y = T.matmul(x, w)
    return y + b if b is not None else y


# ---------------------------------------------------------------- patch embedding


@dataclass
class PatchEmbedParams(Params):
    conv1_w: Tensor
    conv1_b: Tensor
    bn1: BatchNormParams
    conv2_w: Tensor
    conv2_b: Tensor
    bn2: BatchNormParams

    @classmethod
    def init(cls, rng, in_channels: int, dim: int, dtype=np.float32) -> "PatchEmbedParams":
        half = max(dim // 2, 1)
        return cls(
            trunc_normal(rng, (half, in_channels, 3, 3), dtype=dtype), zeros(half, dtype),
            BatchNormParams.init(half, dtype),
            trunc_normal(rng, (dim, half, 3, 3), dtype=dtype), zeros(dim, dtype),
            BatchNormParams.init(dim, dtype),
        )


def patch_embed_map(image: Tensor, p: PatchEmbedParams, mode: str) -> Tensor:
    """Two kernel-3 / stride-2 / pad-1 convs: (B, Cin, H, W) -> (B, C1, H/4, W/4)."""
    if image.ndim != 4:
        raise ShapeError(f"patch embedding expects (B, C, H, W), got {image.shape}")
    h, w = image.shape[2:]
    if h % 4 or w % 4:
        raise ShapeError(f"image size {h}x{w} is not divisible by 4")
    x = T.conv2d(image, p.conv1_w, p.conv1_b, stride=2, pad=1)
    x = T.gelu(batchnorm(x, p.bn1, mode))
    x = T.conv2d(x, p.conv2_w, p.conv2_b, stride=2, pad=1)
    return T.gelu(batchnorm(x, p.bn2, mode))


def patch_embed(image: Tensor, p: PatchEmbedParams, mode: str = "eval") -> Tensor:
    """Image to token sequence (B, (H/4)*(W/4), C1), tokens in row-major grid order."""
    x = patch_embed_map(image, p, mode)
    b, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(b, h * w, c)


@dataclass
class PositionalEmbedding(Params):
    table: Tensor

    @classmethod
    def init(cls, rng, length: int, dim: int, dtype=np.float32) -> "PositionalEmbedding":
        return cls(Tensor(rng.normal(0.0, 0.02, size=(length, dim)).astype(dtype)))


def add_positional(tokens: Tensor, pe: PositionalEmbedding) -> Tensor:
    if tokens.ndim != 3 or tokens.shape[1:] != pe.table.shape:
        raise ShapeError(f"tokens {tokens.shape} do not match positional table {pe.table.shape}")
    return tokens + pe.table


# ---------------------------------------------------------------- MBConv / downsample


@dataclass
class MBConvParams(Params):
    expand_w: Tensor
    bn1: BatchNormParams
    dw_w: Tensor
    bn2: BatchNormParams
    project_w: Tensor
    bn3: BatchNormParams

    @classmethod
    def init(cls, rng, channels: int, expand: int = 4, dtype=np.float32) -> "MBConvParams":
        hidden = channels * expand
        return cls(
            trunc_normal(rng, (hidden, channels, 1, 1), dtype=dtype), BatchNormParams.init(hidden, dtype),
            trunc_normal(rng, (hidden, 1, 3, 3), dtype=dtype), BatchNormParams.init(hidden, dtype),
            trunc_normal(rng, (channels, hidden, 1, 1), dtype=dtype), BatchNormParams.init(channels, dtype),
        )


def _inverted_bottleneck(x: Tensor, p, mode: str, stride: int) -> Tensor:
    h = T.gelu(batchnorm(T.conv2d(x, p.expand_w), p.bn1, mode))
    h = T.gelu(batchnorm(T.depthwise_conv2d(h, p.dw_w, stride=stride, pad=1), p.bn2, mode))
    return batchnorm(T.conv2d(h, p.project_w), p.bn3, mode)


def mbconv(x: Tensor, p: MBConvParams, mode: str = "eval") -> Tensor:
    """Residual inverted bottleneck: expand 1x1, depthwise 3x3, project 1x1."""
    c = p.project_w.shape[0]
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"mbconv expects (B, {c}, H, W), got {x.shape}")
    return x + _inverted_bottleneck(x, p, mode, stride=1)


@dataclass
class DownsampleParams(Params):
    expand_w: Tensor
    bn1: BatchNormParams
    dw_w: Tensor
    bn2: BatchNormParams
    project_w: Tensor
    bn3: BatchNormParams

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int, expand: int = 4, dtype=np.float32) -> "DownsampleParams":
        hidden = in_dim * expand
        return cls(
            trunc_normal(rng, (hidden, in_dim, 1, 1), dtype=dtype), BatchNormParams.init(hidden, dtype),
            trunc_normal(rng, (hidden, 1, 3, 3), dtype=dtype), BatchNormParams.init(hidden, dtype),
            trunc_normal(rng, (out_dim, hidden, 1, 1), dtype=dtype), BatchNormParams.init(out_dim, dtype),
        )


def downsample(x: Tensor, p: DownsampleParams, mode: str = "eval") -> Tensor:
    """Halve the resolution and move to the next stage width (no residual)."""
    cin = p.expand_w.shape[1]
    if x.ndim != 4 or x.shape[1] != cin:
        raise ShapeError(f"downsample expects (B, {cin}, H, W), got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"downsample needs even extents, got {x.shape[2]}x{x.shape[3]}")
    return _inverted_bottleneck(x, p, mode, stride=2)


# ---------------------------------------------------------------- MLP


@dataclass
class MLPParams(Params):
    norm: LayerNormParams
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def init(cls, rng, dim: int, ratio: int = 4, dtype=np.float32) -> "MLPParams":
        hidden = dim * ratio
        return cls(
            LayerNormParams.init(dim, dtype),
            trunc_normal(rng, (dim, hidden), dtype=dtype), zeros(hidden, dtype),
            trunc_normal(rng, (hidden, dim), dtype=dtype), zeros(dim, dtype),
        )


def mlp_block(x: Tensor, p: MLPParams) -> Tensor:
    """``fc2(gelu(fc1(layernorm(x))))`` per token; the caller adds the residual."""
    if x.shape[-1] != p.fc1_w.shape[0]:
        raise ShapeError(f"mlp width {p.fc1_w.shape[0]} does not match input {x.shape}")
    h = T.gelu(linear(layernorm(x, p.norm), p.fc1_w, p.fc1_b))
    return linear(h, p.fc2_w, p.fc2_b)
