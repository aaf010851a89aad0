"""The four-stage Tint network: configuration, assembly, forward pass, checkpoints."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import TransformerBlockParams, transformer_block
from .dataio import read_container, write_container
from .errors import CheckpointError, ConfigError, FormatError, ShapeError
from .nn import (
    DownsampleParams,
    MBConvParams,
    Params,
    PatchEmbedParams,
    PositionalEmbedding,
    add_positional,
    check_mode,
    downsample,
    mbconv,
    patch_embed,
    trunc_normal,
)
from .tensor import Tensor

CHECKPOINT_FORMAT = "tint-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_size: int = 224
    in_channels: int = 1
    embed_dims: tuple = (64, 128, 160, 320)
    depths: tuple = (2, 2, 6, 2)
    num_heads: tuple = (4, 5, 10)
    window_sizes: tuple = (7, 14, 7)
    mlp_ratio: int = 4
    mbconv_expand: int = 4
    use_positional: bool = True
    use_attention_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_dims", "depths", "num_heads", "window_sizes"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))

    @classmethod
    def test(cls, **overrides) -> "ModelConfig":
        """Small configuration used for gradient checks and CI training."""
        base = dict(input_size=32, embed_dims=(8, 16, 16, 16), depths=(1, 1, 1, 1),
                    num_heads=(2, 2, 2), window_sizes=(4, 2, 1))
        base.update(overrides)
        return cls(**base)

    @property
    def resolutions(self) -> tuple:
        return tuple(self.input_size // f for f in (4, 8, 16, 32))

    def validate(self) -> None:
        if len(self.embed_dims) != 4 or len(self.depths) != 4:
            raise ConfigError("embed_dims and depths need one entry per stage (4)")
        if len(self.num_heads) != 3 or len(self.window_sizes) != 3:
            raise ConfigError("num_heads and window_sizes need one entry per attention stage (3)")
        if not 1 <= self.in_channels <= 3:
            raise ConfigError(f"in_channels must be 1..3, got {self.in_channels}")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must be a positive multiple of 32")
        if any(d < 1 for d in self.embed_dims) or any(d < 0 for d in self.depths):
            raise ConfigError("embed_dims must be positive and depths non-negative")
        if self.mlp_ratio < 1 or self.mbconv_expand < 1:
            raise ConfigError("mlp_ratio and mbconv_expand must be positive")
        for s, (dim, heads) in enumerate(zip(self.embed_dims[1:], self.num_heads), start=2):
            if heads < 1 or dim % heads:
                raise ConfigError(f"stage {s}: width {dim} is not divisible by {heads} heads")
        for s, (res, win) in enumerate(zip(self.resolutions[1:], self.window_sizes), start=2):
            if win < 1 or res % win:
                raise ConfigError(f"stage {s}: resolution {res} is not divisible by window {win}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HeadParams(Params):
    w: Tensor
    b: Tensor


@dataclass
class ConvStage(Params):
    blocks: list
    downsample: Optional[DownsampleParams] = None


@dataclass
class AttentionStage(Params):
    blocks: list
    window: int = 1
    downsample: Optional[DownsampleParams] = None


@dataclass
class TintModel(Params):
    patch_embed: PatchEmbedParams
    pos_embed: Optional[PositionalEmbedding]
    stages: list
    head: HeadParams
    config: ModelConfig = field(default_factory=ModelConfig)

    def state(self) -> dict[str, np.ndarray]:
        """All parameters followed by all buffers, keyed by canonical name."""
        out = {name: t.data for name, t in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    @property
    def dtype(self):
        return self.head.w.dtype

    def astype(self, dtype) -> "TintModel":
        """Convert every parameter and buffer in place."""
        for _, t in self.named_parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        for obj in _walk_objects(self):
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, np.ndarray) and f.metadata.get("buffer"):
                    setattr(obj, f.name, v.astype(dtype))
        return self

    def features(self, images: Tensor, mode: str = "eval") -> dict[str, Tensor]:
        return _forward(self, images, mode, keep=True)

    def forward(self, images: Tensor, mode: str = "eval") -> Tensor:
        return _forward(self, images, mode, keep=False)["output"]

    __call__ = forward


def _walk_objects(obj):
    if isinstance(obj, Params):
        yield obj
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, list):
                for item in v:
                    yield from _walk_objects(item)
            else:
                yield from _walk_objects(v)


def build(config: ModelConfig, dtype=np.float32) -> TintModel:
    """Assemble and initialize a model; identical configs give identical weights."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dims, depths = config.embed_dims, config.depths
    res = config.resolutions

    patch = PatchEmbedParams.init(rng, config.in_channels, dims[0], dtype)
    pos = PositionalEmbedding.init(rng, res[0] * res[0], dims[0], dtype) if config.use_positional else None

    stages: list = [ConvStage([MBConvParams.init(rng, dims[0], config.mbconv_expand, dtype)
                               for _ in range(depths[0])])]
    for s in range(1, 4):
        heads, window = config.num_heads[s - 1], config.window_sizes[s - 1]
        blocks = [TransformerBlockParams.init(rng, dims[s], heads, window, config.mlp_ratio,
                                              config.use_attention_bias, dtype)
                  for _ in range(depths[s])]
        stages.append(AttentionStage(blocks, window))
    for s in range(3):
        stages[s].downsample = DownsampleParams.init(rng, dims[s], dims[s + 1], config.mbconv_expand, dtype)

    head = HeadParams(trunc_normal(rng, (dims[3],), dtype=dtype), Tensor(np.zeros((), dtype=dtype)))
    return TintModel(patch, pos, stages, head, config)


def count_params(model: TintModel) -> int:
    return int(sum(t.size for t in model.parameters()))


def _to_grid(tokens: Tensor, h: int, w: int) -> Tensor:
    b, _, c = tokens.shape
    return tokens.reshape(b, h, w, c)


def _forward(model: TintModel, images: Tensor, mode: str, keep: bool) -> dict[str, Tensor]:
    check_mode(mode)
    cfg = model.config
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=model.dtype))
    expect = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if images.ndim != 4 or images.shape[1:] != expect:
        raise ShapeError(f"expected images of shape (B, {', '.join(map(str, expect))}), got {images.shape}")
    out: dict[str, Tensor] = {}
    r0 = cfg.resolutions[0]

    tokens = patch_embed(images, model.patch_embed, mode)
    if keep:
        out["patch_embed"] = tokens
    if model.pos_embed is not None:
        tokens = add_positional(tokens, model.pos_embed)
    if keep:
        out["embedded"] = tokens

    # stage 1 works channel-first, attention stages channel-last
    x = _to_grid(tokens, r0, r0).transpose(0, 3, 1, 2)
    stage0 = model.stages[0]
    for blk in stage0.blocks:
        x = mbconv(x, blk, mode)
    if keep:
        out["stage1"] = x
    x = downsample(x, stage0.downsample, mode)
    for s, stage in enumerate(model.stages[1:], start=2):
        x = x.transpose(0, 2, 3, 1)
        if keep:
            out[f"stage{s}_in"] = x
        for blk in stage.blocks:
            x = transformer_block(x, blk, stage.window, mode)
        if keep:
            out[f"stage{s}"] = x
        if stage.downsample is not None:
            x = downsample(x.transpose(0, 3, 1, 2), stage.downsample, mode)

    b, h, w, c = x.shape
    pooled = x.reshape(b, h * w, c).mean(axis=1)
    if keep:
        out["pooled"] = pooled
    out["output"] = (pooled * model.head.w).sum(axis=-1) + model.head.b
    return out


# ---------------------------------------------------------------- checkpoints


def checkpoint_payload(model: TintModel, meta: Optional[dict] = None,
                       extra: Optional[dict[str, np.ndarray]] = None) -> tuple[dict, dict]:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "meta": meta or {},
    }
    tensors = dict(model.state())
    for name, arr in (extra or {}).items():
        if name in tensors:
            raise CheckpointError(f"extra tensor {name!r} collides with a model tensor")
        tensors[name] = arr
    return header, tensors


def save_checkpoint(model: TintModel, path, meta: Optional[dict] = None,
                    extra: Optional[dict[str, np.ndarray]] = None) -> Path:
    """Write config, parameters, buffers and optional extra tensors to ``path``."""
    if model.dtype != np.float32:
        raise CheckpointError("checkpoints store float32 models; convert with astype first")
    header, tensors = checkpoint_payload(model, meta, extra)
    write_container(path, header, tensors)
    return Path(path)


def read_checkpoint(path) -> tuple[TintModel, dict, dict[str, np.ndarray]]:
    """Load ``(model, meta, extra tensors)`` from a checkpoint file."""
    try:
        header, tensors = read_container(path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except FormatError as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    try:
        config = ModelConfig.from_dict(header["config"])
        model = build(config)
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: invalid embedded config ({e})") from None

    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    present = {k for k in tensors if k in expected}
    missing = expected - present
    if missing:
        raise CheckpointError(f"{path}: name-set mismatch, missing {sorted(missing)[:5]}")
    extra = {k: v for k, v in tensors.items() if k not in expected}
    unexpected = [k for k in extra if not k.startswith("optim.")]
    if unexpected:
        raise CheckpointError(f"{path}: name-set mismatch, unexpected {sorted(unexpected)[:5]}")
    for name, t in params.items():
        arr = tensors[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.copy()
    for name, buf in buffers.items():
        arr = tensors[name]
        if arr.shape != buf.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {buf.shape}")
        buf[...] = arr
    return model, header.get("meta", {}), extra


def load_checkpoint(path) -> TintModel:
    return read_checkpoint(path)[0]
