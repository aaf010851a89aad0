"""Finite-difference verification of every block and of the full model.

Each block is checked in float64 on random inputs with random parameters.
Blocks are projected to a scalar through a fixed random tensor so that no
gradient vanishes by symmetry. BatchNorm layers run in eval mode with random
running statistics except in the dedicated train-mode check: in train mode a
bias feeding a BatchNorm has an exactly-zero gradient, and the relative error
of a zero gradient only measures rounding noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (
    AttentionParams,
    TransformerBlockParams,
    scaled_dot_attention,
    transformer_block,
    window_attention,
)
from .model import ModelConfig, TintModel, build
from .nn import (
    BatchNormParams,
    DownsampleParams,
    LayerNormParams,
    MBConvParams,
    MLPParams,
    Params,
    PatchEmbedParams,
    batchnorm,
    downsample,
    layernorm,
    mbconv,
    mlp_block,
    patch_embed,
)
from .tensor import Tensor

BLOCK_THRESHOLD = 1e-4
MODEL_THRESHOLD = 1e-3
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def ok(self) -> bool:
        return self.error < self.threshold


def randomize(p: Params, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Replace all tensors with generic float64 values (norm gains near 1)."""
    for name, t in p.named_parameters():
        noise = rng.normal(0.0, scale, size=t.shape)
        if name.endswith("weight") and t.ndim == 1:
            noise += 1.0
        t.data = np.asarray(noise, dtype=np.float64)
    for name, b in p.named_buffers():
        if name.endswith("running_var"):
            b[...] = rng.uniform(0.5, 2.0, size=b.shape)
        else:
            b[...] = rng.normal(0.0, scale, size=b.shape)


def _projected(fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    weights = {}

    def scalar():
        out = fn()
        if "r" not in weights:
            weights["r"] = Tensor(rng.normal(size=out.shape))
        return (out * weights["r"]).sum()

    return scalar


def _check(name: str, fn, inputs: list[Tensor], params: Params | None, rng, coords, threshold) -> CheckResult:
    tensors = list(inputs) + (params.parameters() if params is not None else [])
    scalar = _projected(fn, rng)
    err = T.grad_check(lambda *_: scalar(), tensors, eps=EPS, max_coords=coords,
                       seed=int(rng.integers(2**31)))
    return CheckResult(name, err, threshold)


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def block_checks(config: ModelConfig, seed: int = 0, coords: int | None = 24,
                 threshold: float = BLOCK_THRESHOLD) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    f64 = np.float64
    c1, c2 = config.embed_dims[0], config.embed_dims[1]
    heads = config.num_heads[0]
    e, r = config.mbconv_expand, config.mlp_ratio
    results = []

    pe = PatchEmbedParams.init(rng, config.in_channels, c1, f64)
    randomize(pe, rng)
    img = _rand(rng, 2, config.in_channels, 8, 8)
    results.append(_check("patch_embed", lambda: patch_embed(img, pe, "eval"), [img], pe, rng, coords, threshold))

    mb = MBConvParams.init(rng, c1, e, f64)
    randomize(mb, rng)
    x = _rand(rng, 2, c1, 4, 4)
    results.append(_check("mbconv", lambda: mbconv(x, mb, "eval"), [x], mb, rng, coords, threshold))

    ds = DownsampleParams.init(rng, c1, c2, e, f64)
    randomize(ds, rng)
    x = _rand(rng, 2, c1, 4, 4)
    results.append(_check("downsample", lambda: downsample(x, ds, "eval"), [x], ds, rng, coords, threshold))

    attn = AttentionParams.init(rng, c2, heads, 2, True, f64)
    randomize(attn, rng)
    x = _rand(rng, 1, 4, 4, c2)
    results.append(_check("window_msa", lambda: window_attention(x, attn, 2), [x], attn, rng, coords, threshold))
    z = _rand(rng, 2, 5, c2)
    results.append(_check("msa_no_bias", lambda: scaled_dot_attention(z, attn), [z], None, rng, coords, threshold))

    dw = Tensor(rng.normal(size=(c2, 1, 3, 3)))
    x = _rand(rng, 2, c2, 4, 4)
    results.append(_check("depthwise_conv",
                          lambda: T.depthwise_conv2d(x, dw, pad=1), [x, dw], None, rng, coords, threshold))

    mlp = MLPParams.init(rng, c2, r, f64)
    randomize(mlp, rng)
    x = _rand(rng, 1, 4, c2)
    results.append(_check("mlp", lambda: mlp_block(x, mlp), [x], mlp, rng, coords, threshold))

    tb = TransformerBlockParams.init(rng, c2, heads, 2, r, True, f64)
    randomize(tb, rng)
    x = _rand(rng, 1, 4, 4, c2)
    results.append(_check("transformer_block", lambda: transformer_block(x, tb, 2, "eval"),
                          [x], tb, rng, coords, threshold))

    bn = BatchNormParams.init(c1, f64)
    randomize(bn, rng)
    x = _rand(rng, 3, c1, 3, 3)
    results.append(_check("batchnorm_train", lambda: batchnorm(x, bn, "train"), [x], bn, rng, coords, threshold))
    results.append(_check("batchnorm_eval", lambda: batchnorm(x, bn, "eval"), [x], bn, rng, coords, threshold))

    ln = LayerNormParams.init(c2, f64)
    randomize(ln, rng)
    x = _rand(rng, 2, 3, c2)
    results.append(_check("layernorm", lambda: layernorm(x, ln), [x], ln, rng, coords, threshold))

    w = _rand(rng, c2)
    b = Tensor(rng.normal(size=()))
    feats = _rand(rng, 2, 4, c2)
    results.append(_check("head", lambda: (feats.mean(axis=1) * w).sum(axis=-1) + b,
                          [feats, w, b], None, rng, coords, threshold))
    return results


def model_check(config: ModelConfig, seed: int = 0, coords: int | None = 8,
                threshold: float = MODEL_THRESHOLD, batch: int = 2) -> CheckResult:
    """MSE loss of the whole network against random targets, all parameters probed."""
    rng = np.random.default_rng(seed + 1)
    model: TintModel = build(config, dtype=np.float64)
    randomize(model, rng)
    images = _rand(rng, batch, config.in_channels, config.input_size, config.input_size)
    targets = _rand(rng, batch)

    def loss():
        d = model(images, "eval") - targets
        return (d * d).mean()

    # A difference quotient of a loss of size |f| carries rounding noise of
    # roughly 1e-16 * |f| / EPS times the depth of the graph; gradients below
    # about 1e-6 * |f| are indistinguishable from zero at this step size.
    with T.no_record():
        scale = max(1.0, abs(loss().item()))
    err = T.grad_check(lambda *_: loss(), model.parameters(), eps=EPS, max_coords=coords, seed=seed,
                       floor=1e-6 * scale)
    return CheckResult("full_model_mse", err, threshold)


def run(config: ModelConfig, seed: int = 0, block_threshold: float = BLOCK_THRESHOLD,
        model_threshold: float = MODEL_THRESHOLD, coords: int | None = 24) -> list[CheckResult]:
    results = block_checks(config, seed, coords, block_threshold)
    results.append(model_check(config, seed, coords, model_threshold))
    return results
