"""MSE training with a step-decay schedule, RMSE evaluation, saliency export."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .dataio import AugmentConfig, DatasetManifest, FrameCache, make_batches
from .errors import CheckpointError, ConfigError, ManifestError, NonFiniteError, ShapeError, TrainingDiverged
from .model import TintModel, read_checkpoint, save_checkpoint
from .tensor import Tensor

LOG_NAME = "train_log.tsv"
LOG_FIELDS = ("epoch", "step", "lr", "train_loss", "val_rmse")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 1e-5
    decay_epochs: tuple = (50, 75)
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    augment: bool = True
    shuffle: bool = True
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not (self.base_lr >= 0 and math.isfinite(self.base_lr)):
            raise ConfigError(f"learning rate must be a finite non-negative number, got {self.base_lr}")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError(f"decay epochs {d} must be strictly increasing")
        if d and (d[0] < 0 or d[-1] >= self.epochs):
            raise ConfigError(f"decay epochs {d} must lie in [0, epochs)")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when given")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, model: TintModel) -> "TrainState":
        m = {n: np.zeros_like(t.data) for n, t in model.named_parameters()}
        v = {n: np.zeros_like(t.data) for n, t in model.named_parameters()}
        return cls(m=m, v=v)

    def meta(self) -> dict:
        best = None if math.isinf(self.best_val) else self.best_val
        return {"epoch": self.epoch, "step": self.step, "best_val_rmse": best}

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{n}": a for n, a in self.m.items()}
        out.update({f"optim.v.{n}": a for n, a in self.v.items()})
        return out

    @classmethod
    def restore(cls, meta: dict, extra: dict[str, np.ndarray], model: TintModel) -> "TrainState":
        state = cls.fresh(model)
        try:
            state.epoch = int(meta["epoch"])
            state.step = int(meta["step"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError("checkpoint carries no training state") from None
        best = meta.get("best_val_rmse")
        state.best_val = math.inf if best is None else float(best)
        for name in state.m:
            try:
                state.m[name] = extra[f"optim.m.{name}"].copy()
                state.v[name] = extra[f"optim.v.{name}"].copy()
            except KeyError:
                raise CheckpointError(f"checkpoint lacks optimizer moments for {name}") from None
        return state


# ---------------------------------------------------------------- loss, schedule, optimizer


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.ndim != 1 or pred.shape != target.shape:
        raise ShapeError(f"mse_loss needs equal-length vectors, got {pred.shape} and {target.shape}")
    if pred.shape[0] == 0:
        raise ShapeError("mse_loss of an empty batch")
    diff = pred - target
    return (diff * diff).mean()


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step-decayed learning rate; a decay epoch applies from that epoch on (0-based)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    k = sum(1 for e in cfg.decay_epochs if e <= epoch)
    # decimal product keeps 1e-5 * 0.1 at exactly 1e-6
    return float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.decay_factor)) ** k)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: TrainState,
                   lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction; advances ``state.step``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} / moment {m.shape} vs parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- metrics


def rmse(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape or p.size == 0:
        raise ValueError(f"rmse needs equal non-zero lengths, got {p.size} and {t.size}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class EvalResult:
    rmse: float
    predictions: np.ndarray
    targets: np.ndarray
    entries: list

    def residual_rows(self) -> list[str]:
        rows = ["path\tstorm_id\tframe_index\ttarget\tprediction\tresidual"]
        for e, t, p in zip(self.entries, self.targets.tolist(), self.predictions.tolist()):
            rows.append(f"{e.path}\t{e.storm_id}\t{e.frame_index}\t{t!r}\t{p!r}\t{p - t!r}")
        return rows


def predict(model: TintModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions (float64 copy) for preprocessed images (N, C, S, S)."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model(Tensor(images[start:start + batch_size].astype(model.dtype)), "eval").data)
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def evaluate(model: TintModel, manifest: DatasetManifest, split: str, batch_size: int = 64,
             cache: Optional[FrameCache] = None) -> EvalResult:
    """RMSE in knots over a split, manifest order, no augmentation."""
    entries = manifest.split(split)
    if not entries:
        raise ManifestError(f"split {split!r} is empty")
    preds = []
    for images, _ in make_batches(manifest, split, batch_size, target_size=model.config.input_size,
                                  cache=cache):
        preds.append(predict(model, images, batch_size))
    # labels come straight from the manifest so they keep full float64 precision
    p = np.concatenate(preds)
    t = np.array([e.intensity for e in entries], dtype=np.float64)
    return EvalResult(rmse(p, t), p, t, list(entries))


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_rmse: float

    def line(self) -> str:
        return "\t".join([str(self.epoch), str(self.step), repr(self.lr),
                          repr(self.train_loss), repr(self.val_rmse)])


@dataclass
class FitResult:
    records: list
    best_path: Optional[Path]
    last_path: Path
    state: TrainState


def init_head_bias(model: TintModel, manifest: DatasetManifest) -> float:
    """Set the regression bias to the mean train label (knots) and return it.

    Labels are regressed in raw knots; starting the bias at zero would spend
    the first few hundred small-learning-rate steps just moving the output
    level, so fresh runs start from the constant-mean predictor instead.
    """
    labels = [e.intensity for e in manifest.split("train")]
    if not labels:
        raise ManifestError("train split is empty")
    model.head.b.data[...] = np.mean(np.asarray(labels, dtype=np.float64))
    return float(model.head.b.data)


def data_meta(manifest: DatasetManifest) -> dict:
    return {"modalities": list(manifest.modalities), "mean": list(manifest.mean), "std": list(manifest.std)}


def _checkpoint(model, path, cfg, state, manifest):
    meta = {"train": state.meta(), "train_config": cfg.to_dict(), "data": data_meta(manifest)}
    save_checkpoint(model, path, meta, state.tensors())


def fit(model: TintModel, manifest: DatasetManifest, cfg: TrainConfig, out_dir,
        resume: Optional[str] = None, echo: Optional[Callable[[str], None]] = None) -> FitResult:
    """Train with MSE + Adam, validating every epoch and keeping the best model.

    Writes ``train_log.tsv`` (tab-separated, one line per epoch),
    ``last.ckpt`` (with optimizer state, for resuming), ``best.ckpt`` and,
    when ``checkpoint_every`` is set, ``epoch_NNN.ckpt`` files. A run resumed
    from ``last.ckpt`` reproduces the uninterrupted run exactly.
    """
    cfg.validate()
    if manifest.channels != model.config.in_channels:
        raise ConfigError(f"model expects {model.config.in_channels} channels, dataset has {manifest.channels}")
    if not manifest.split("train"):
        raise ManifestError("train split is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME

    if resume is not None:
        loaded, meta, extra = read_checkpoint(resume)
        if loaded.config != model.config:
            raise CheckpointError("resume checkpoint was written for a different model config")
        for (_, dst), (_, src) in zip(model.named_parameters(), loaded.named_parameters()):
            dst.data = src.data
        for (_, dst), (_, src) in zip(model.named_buffers(), loaded.named_buffers()):
            dst[...] = src
        state = TrainState.restore(meta.get("train", {}), extra, model)
    else:
        state = TrainState.fresh(model)
        log_path.write_text("\t".join(LOG_FIELDS) + "\n", encoding="utf-8")

    params = dict(model.named_parameters())
    cache = FrameCache(manifest)
    size = model.config.input_size
    aug = AugmentConfig(target_size=size, seed=cfg.seed) if cfg.augment else None
    has_val = bool(manifest.split("val"))
    records = []
    best_path = out / "best.ckpt" if (out / "best.ckpt").exists() and resume else None

    for epoch in range(state.epoch, cfg.epochs):
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        lr = lr_at_epoch(cfg, epoch)
        total, seen = 0.0, 0
        batches = make_batches(manifest, "train", cfg.batch_size,
                               shuffle_seed=cfg.seed if cfg.shuffle else None,
                               augment_cfg=aug, target_size=size, epoch=epoch, cache=cache)
        for images, labels in batches:
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            try:
                with T.Tape() as tape:
                    loss = mse_loss(model(Tensor(images.astype(model.dtype)), "train"),
                                    Tensor(labels.astype(model.dtype)))
                T.backward(tape, loss)
            except NonFiniteError as e:
                raise TrainingDiverged(state.step + 1, str(e)) from None
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(state.step + 1)
            optimizer_step(params, {n: p.grad for n, p in params.items()}, state, lr,
                           cfg.beta1, cfg.beta2, cfg.eps)
            total += value * len(labels)
            seen += len(labels)
        val = evaluate(model, manifest, "val", cache=cache).rmse if has_val else math.nan
        rec = EpochRecord(epoch, state.step, lr, total / max(seen, 1), val)
        records.append(rec)
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(rec.line() + "\n")
        if echo is not None:
            echo(rec.line())

        state.epoch = epoch + 1
        improved = has_val and val < state.best_val
        if improved:
            state.best_val = val
        if improved or (not has_val) or best_path is None:
            best_path = out / "best.ckpt"
            _checkpoint(model, best_path, cfg, state, manifest)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _checkpoint(model, out / f"epoch_{epoch + 1:03d}.ckpt", cfg, state, manifest)
        _checkpoint(model, out / "last.ckpt", cfg, state, manifest)

    last = out / "last.ckpt"
    if not last.exists():
        _checkpoint(model, last, cfg, state, manifest)
    return FitResult(records, best_path, last, state)


# ---------------------------------------------------------------- saliency

SALIENCY_METHOD = "input-gradient (approximation of Grad-CAM)"


def saliency(model: TintModel, image: np.ndarray) -> tuple[np.ndarray, dict]:
    """Per-pixel ``max_c |dy/dx|`` for one preprocessed image (C, S, S), scaled to [0, 1].

    A gradient that is constant over the image (in particular all zero) has no
    spatial structure; the map is then all zeros and ``meta["degenerate"]`` is set.
    """
    x = Tensor(np.asarray(image, dtype=model.dtype)[None], requires_grad=True)
    with T.Tape() as tape:
        y = model(x, "eval").sum()
    T.backward(tape, y)
    mag = np.abs(x.grad[0].astype(np.float64)).max(axis=0)
    lo, hi = mag.min(), mag.max()
    degenerate = not hi > lo
    smap = np.zeros_like(mag) if degenerate else (mag - lo) / (hi - lo)
    return smap, {"method": SALIENCY_METHOD, "degenerate": degenerate, "prediction": float(y.item())}


def quantize(smap: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(smap, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(pixels: np.ndarray, comment: Optional[str] = None) -> bytes:
    """Binary greyscale PGM (P5, maxval 255)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    head = b"P5\n"
    if comment:
        head += b"# " + comment.replace("\n", " ").encode("ascii", "replace") + b"\n"
    head += f"{w} {h}\n255\n".encode("ascii")
    return head + pixels.tobytes()


def decode_pgm(raw: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise ValueError("not an 8-bit P5 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:]
    if len(body) != w * h:
        raise ValueError(f"PGM payload has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, smap: np.ndarray, meta: Optional[dict] = None) -> np.ndarray:
    """Quantize a [0, 1] map and write it; returns the stored pixels."""
    pixels = quantize(smap)
    comment = None
    if meta is not None:
        comment = f"tint saliency; method={meta.get('method')}; degenerate={int(bool(meta.get('degenerate')))}"
    Path(path).write_bytes(encode_pgm(pixels, comment))
    return pixels


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())
