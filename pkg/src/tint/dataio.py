"""On-disk formats, dataset manifests, preprocessing and the synthetic generator.

TNSR tensor file layout (little-endian, no padding)::

    b"TNSR" | u8 version=1 | u8 dtype (1=float32) | u8 rank | rank x u64 extents | payload

A dataset directory holds ``manifest.json`` plus one TNSR file per frame,
referenced by relative path. Anything that can produce that layout (for
instance a converter from the TCIR HDF5 release) can feed training.
"""
from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import FormatError, ManifestError

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4")}

CONTAINER_MAGIC = b"TCKP"
CONTAINER_VERSION = 1

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
MODALITIES = ("IR", "WV", "PMW")
SPLITS = ("train", "val", "test")
NATIVE_SIZE = 201


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------- TNSR


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise FormatError(f"TNSR stores float32 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = TNSR_MAGIC + struct.pack("<BBB", TNSR_VERSION, 1, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated data while reading {what}")
    return data


def decode_tensor(buf: io.BufferedIOBase) -> np.ndarray:
    """Read one TNSR record from a binary stream positioned at its magic."""
    magic = _read_exact(buf, 4, "magic")
    if magic != TNSR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TNSR_MAGIC!r}")
    version, code, rank = struct.unpack("<BBB", _read_exact(buf, 3, "header"))
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank, "extents"))
    dtype = DTYPE_CODES[code]
    count = math.prod(shape)
    payload = _read_exact(buf, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).astype(np.float32).reshape(shape)


def write_tensor_file(path, t) -> None:
    arr = t.data if hasattr(t, "data") and not isinstance(t, np.ndarray) else t
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    arr = decode_tensor(buf)
    if buf.tell() != len(raw):
        raise FormatError(f"{path}: {len(raw) - buf.tell()} trailing bytes")
    return arr


# ---------------------------------------------------------------- named-tensor container


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Header document plus named TNSR records, in the given name order.

    Layout: b"TCKP" | u8 version | u64 header length | canonical JSON header |
    u32 count | count x (u16 name length | utf-8 name | TNSR record).
    """
    body = canonical_json(header).encode("utf-8")
    out = [CONTAINER_MAGIC, struct.pack("<BQ", CONTAINER_VERSION, len(body)), body,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(encode_tensor(arr))
    Path(path).write_bytes(b"".join(out))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    magic = _read_exact(buf, 4, "container magic")
    if magic != CONTAINER_MAGIC:
        raise FormatError(f"bad container magic {magic!r}")
    version, hlen = struct.unpack("<BQ", _read_exact(buf, 9, "container header"))
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    try:
        header = json.loads(_read_exact(buf, hlen, "header document").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header document: {e}") from None
    (count,) = struct.unpack("<I", _read_exact(buf, 4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(buf, 2, "name length"))
        name = _read_exact(buf, nlen, "tensor name").decode("utf-8")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = decode_tensor(buf)
    if buf.tell() != len(raw):
        raise FormatError(f"{len(raw) - buf.tell()} trailing bytes after last tensor")
    return header, tensors


# ---------------------------------------------------------------- manifest


@dataclass
class Entry:
    path: str
    intensity: float
    storm_id: str
    frame_index: int
    extra: dict = field(default_factory=dict)

    @property
    def key(self) -> int:
        """Stable per-frame integer used to derive augmentation streams."""
        return zlib.crc32(f"{self.storm_id}/{self.frame_index}".encode("utf-8"))

    def to_dict(self) -> dict:
        d = {"path": self.path, "intensity": self.intensity,
             "storm_id": self.storm_id, "frame_index": self.frame_index}
        d.update(self.extra)
        return d


@dataclass
class DatasetManifest:
    modalities: list[str]
    mean: list[float]
    std: list[float]
    splits: dict[str, list[Entry]]
    root: Path = Path(".")
    version: int = MANIFEST_VERSION
    # indices into the stored channels when a modality subset is selected
    select: Optional[list[int]] = None

    @property
    def channels(self) -> int:
        return len(self.modalities)

    def split(self, name: str) -> list[Entry]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}; expected one of {SPLITS}")
        return self.splits.get(name, [])

    def resolve(self, entry: Entry) -> Path:
        return self.root / entry.path

    def read_frame(self, entry: Entry) -> np.ndarray:
        raw = read_tensor_file(self.resolve(entry))
        if self.select is not None:
            if raw.ndim != 3:
                raise FormatError(f"{entry.path}: expected (C, H, W), got {raw.shape}")
            raw = raw[self.select]
        return raw

    def with_modalities(self, modalities: Sequence[str]) -> "DatasetManifest":
        """View restricted to ``modalities`` (a subset of the stored ones)."""
        mods = [m.upper() for m in modalities]
        missing = [m for m in mods if m not in self.modalities]
        if missing or not mods:
            raise ManifestError(f"modalities {missing or mods} not available; dataset has {self.modalities}")
        base = self.select or list(range(self.channels))
        idx = [self.modalities.index(m) for m in mods]
        return DatasetManifest(mods, [self.mean[i] for i in idx], [self.std[i] for i in idx],
                               self.splits, self.root, self.version, [base[i] for i in idx])

    def to_dict(self) -> dict:
        return {
            "format_version": self.version,
            "modalities": list(self.modalities),
            "channel_mean": list(self.mean),
            "channel_std": list(self.std),
            "splits": {k: [e.to_dict() for e in self.splits.get(k, [])] for k in SPLITS},
        }

    def save(self, root=None) -> Path:
        root = Path(root) if root is not None else self.root
        path = root / MANIFEST_NAME
        path.write_text(canonical_json(self.to_dict()), encoding="utf-8")
        return path

    def validate(self, check_files: bool = True) -> None:
        if self.version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {self.version}")
        if not self.modalities:
            raise ManifestError("modality list is empty")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ManifestError(f"unknown modality {m!r}; expected a subset of {MODALITIES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ManifestError(f"duplicate modality in {self.modalities}")
        if len(self.mean) != self.channels or len(self.std) != self.channels:
            raise ManifestError("channel_mean/channel_std length differs from modality count")
        for i, s in enumerate(self.std):
            if not (s > 0 and math.isfinite(s)):
                raise ManifestError(f"channel {self.modalities[i]} has non-positive std {s}")
        for i, mu in enumerate(self.mean):
            if not math.isfinite(mu):
                raise ManifestError(f"channel {self.modalities[i]} has non-finite mean")
        for name, entries in self.splits.items():
            if name not in SPLITS:
                raise ManifestError(f"unknown split {name!r}; expected one of {SPLITS}")
            for e in entries:
                if not (e.intensity >= 0 and math.isfinite(e.intensity)):
                    raise ManifestError(f"{e.path}: intensity {e.intensity} is not a non-negative number")
                if check_files and not self.resolve(e).is_file():
                    raise ManifestError(f"missing tensor file {e.path} (split {name})")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Load ``manifest.json`` (or a directory containing it) and validate it."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: not a valid manifest document ({e})") from None
    try:
        splits = {}
        for name, items in doc.get("splits", {}).items():
            entries = []
            for item in items:
                item = dict(item)
                core = {k: item.pop(k) for k in ("path", "intensity", "storm_id", "frame_index")}
                entries.append(Entry(str(core["path"]), float(core["intensity"]),
                                     str(core["storm_id"]), int(core["frame_index"]), item))
            splits[name] = entries
        manifest = DatasetManifest(
            modalities=[str(m) for m in doc["modalities"]],
            mean=[float(v) for v in doc["channel_mean"]],
            std=[float(v) for v in doc["channel_std"]],
            splits=splits,
            root=path.parent,
            version=int(doc.get("format_version", -1)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{path}: malformed manifest field ({e!r})") from None
    manifest.validate(check_files)
    return manifest


# ---------------------------------------------------------------- preprocessing


@dataclass
class Sample:
    channels: np.ndarray  # (C, H, W) float32
    intensity: float
    storm_id: str = ""
    frame_index: int = 0


def clean_and_normalize(s: Sample, manifest: DatasetManifest) -> Sample:
    """Per-channel ``(x - mean) / std``; non-finite values become 0 afterwards."""
    x = np.asarray(s.channels, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != manifest.channels:
        raise FormatError(f"frame shape {x.shape} does not match {manifest.channels} manifest channels")
    mean = np.asarray(manifest.mean)[:, None, None]
    std = np.asarray(manifest.std)[:, None, None]
    with np.errstate(invalid="ignore", over="ignore"):
        y = (x - mean) / std
    y[~np.isfinite(y)] = 0.0
    return Sample(y.astype(np.float32), s.intensity, s.storm_id, s.frame_index)


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at fractional (rows, cols); points outside the grid give 0."""
    _, h, w = img.shape
    tol = 1e-9
    inside = (rows >= -tol) & (rows <= h - 1 + tol) & (cols >= -tol) & (cols <= w - 1 + tol)
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.minimum(np.floor(r).astype(np.intp), h - 2) if h > 1 else np.zeros_like(r, dtype=np.intp)
    c0 = np.minimum(np.floor(c).astype(np.intp), w - 2) if w > 1 else np.zeros_like(c, dtype=np.intp)
    fr = r - r0
    fc = c - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = img[:, r0, c0] * (1 - fc) + img[:, r0, c1] * fc
    bottom = img[:, r1, c0] * (1 - fc) + img[:, r1, c1] * fc
    out = top * (1 - fr) + bottom * fr
    return np.where(inside, out, 0.0)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of (C, H, W) to (C, size, size) on a corner-aligned grid."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[1] < 2 or img.shape[2] < 2:
        raise FormatError(f"resize needs (C, H, W) with H, W >= 2, got {img.shape}")
    if size < 2:
        raise FormatError(f"target size must be >= 2, got {size}")
    _, h, w = img.shape
    if (h, w) == (size, size):
        return img.astype(np.float32, copy=True)
    rows = np.linspace(0.0, h - 1, size)
    cols = np.linspace(0.0, w - 1, size)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _bilinear(img.astype(np.float64), rr, cc).astype(np.float32)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the centre, bilinear, zero fill."""
    img = np.asarray(img)
    _, h, w = img.shape
    if h != w:
        raise FormatError(f"rotation expects a square image, got {h}x{w}")
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    centre = (h - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xx - centre
    dy = centre - yy  # up is positive
    src_x = cos * dx + sin * dy
    src_y = -sin * dx + cos * dy
    return _bilinear(img.astype(np.float64), centre - src_y, centre + src_x).astype(np.float32)


@dataclass
class AugmentConfig:
    target_size: int = 224
    max_rotation: float = 20.0
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.max_rotation <= 20.0:
            raise ValueError(f"rotation range must lie in [0, 20] degrees, got {self.max_rotation}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip probability must lie in [0, 1], got {self.flip_prob}")


def random_rotation(img: np.ndarray, rng: np.random.Generator, max_degrees: float = 20.0) -> np.ndarray:
    return rotate(img, rng.uniform(0.0, max_degrees))


def random_flip(img: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Independent horizontal and vertical flips, each with probability ``p``."""
    horizontal, vertical = rng.random(2) < p
    out = img
    if horizontal:
        out = out[:, :, ::-1]
    if vertical:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotate at native resolution, flip, then resize."""
    img = random_rotation(img, rng, cfg.max_rotation)
    img = random_flip(img, rng, cfg.flip_prob)
    return resize_bilinear(img, cfg.target_size)


def sample_rng(seed: int, epoch: int, entry: Entry) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, entry.key])


# ---------------------------------------------------------------- batching


class FrameCache:
    """Normalized native frames of one manifest, loaded on first use."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._frames: dict[str, np.ndarray] = {}
        self._resized: dict[tuple[str, int], np.ndarray] = {}

    def normalized(self, entry: Entry) -> np.ndarray:
        frame = self._frames.get(entry.path)
        if frame is None:
            raw = self.manifest.read_frame(entry)
            frame = clean_and_normalize(Sample(raw, entry.intensity), self.manifest).channels
            self._frames[entry.path] = frame
        return frame

    def resized(self, entry: Entry, size: int) -> np.ndarray:
        key = (entry.path, size)
        out = self._resized.get(key)
        if out is None:
            out = self._resized[key] = resize_bilinear(self.normalized(entry), size)
        return out


def make_batches(manifest: DatasetManifest, split: str, batch_size: int,
                 shuffle_seed: Optional[int] = None, augment_cfg: Optional[AugmentConfig] = None,
                 target_size: int = 224, epoch: int = 0,
                 cache: Optional[FrameCache] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; the last batch may be short.

    Order is the manifest order, or a permutation drawn from
    ``(shuffle_seed, epoch)``. Augmentation draws from a stream keyed on
    ``(augment seed, epoch, frame identity)`` so it does not depend on which
    other frames share the batch.
    """
    entries = manifest.split(split)
    if not entries:
        raise ManifestError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    cache = cache or FrameCache(manifest)
    order = np.arange(len(entries))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(entries))
    size = augment_cfg.target_size if augment_cfg is not None else target_size
    for start in range(0, len(order), batch_size):
        chunk = [entries[i] for i in order[start:start + batch_size]]
        images = []
        for e in chunk:
            if augment_cfg is not None:
                rng = sample_rng(augment_cfg.seed, epoch, e)
                images.append(augment(cache.normalized(e), augment_cfg, rng))
            else:
                images.append(cache.resized(e, size))
        labels = np.array([e.intensity for e in chunk], dtype=np.float32)
        yield np.stack(images).astype(np.float32), labels


# ---------------------------------------------------------------- synthetic data

# WV and PMW are fixed affine re-mappings of the IR vortex field.
CHANNEL_AFFINE = {"IR": (1.0, 0.0), "WV": (0.8, 0.1), "PMW": (1.3, -0.2)}


@dataclass
class SynthSpec:
    count: int = 100
    seed: int = 0
    amplitude_range: tuple = (0.2, 1.0)
    sigma_range: tuple = (8.0, 40.0)
    noise_std: float = 0.05
    modalities: Sequence[str] = ("IR",)
    size: int = NATIVE_SIZE
    frames_per_storm: int = 1

    def __post_init__(self):
        for m in self.modalities:
            if m not in MODALITIES:
                raise ValueError(f"unknown modality {m!r}")
        if self.count < 1 or self.frames_per_storm < 1:
            raise ValueError("count and frames_per_storm must be positive")


def synth_intensity(amplitude: float, sigma: float) -> float:
    """Ground-truth label in knots: ``20 + 120 A + 30 (40 - sigma) / 32``."""
    return 20.0 + 120.0 * amplitude + 30.0 * (40.0 - sigma) / 32.0


def vortex_field(amplitude: float, sigma: float, size: int = NATIVE_SIZE) -> np.ndarray:
    centre = (size - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(size) - centre, np.arange(size) - centre, indexing="ij")
    return amplitude * np.exp(-(yy ** 2 + xx ** 2) / (2.0 * sigma ** 2))


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val


def synth_generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write a seeded synthetic dataset and its manifest to ``out_dir``.

    Every frame is a centred Gaussian vortex plus white noise; its label is
    :func:`synth_intensity` of the drawn ``(amplitude, sigma)``, which are
    kept in the manifest entry so labels can be recomputed independently.
    Storms (groups of ``frames_per_storm`` consecutive frames) are split
    80/10/10 into train/val/test.
    """
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n_storms = math.ceil(spec.count / spec.frames_per_storm)
    storm_split = np.repeat(np.array(SPLITS), split_counts(n_storms))
    storm_split = storm_split[rng.permutation(n_storms)]

    splits: dict[str, list[Entry]] = {k: [] for k in SPLITS}
    totals = np.zeros(len(spec.modalities))
    squares = np.zeros(len(spec.modalities))
    n_train_px = 0
    for i in range(spec.count):
        storm, frame = divmod(i, spec.frames_per_storm)
        amplitude = float(rng.uniform(*spec.amplitude_range))
        sigma = float(rng.uniform(*spec.sigma_range))
        base = vortex_field(amplitude, sigma, spec.size)
        chans = []
        for m in spec.modalities:
            gain, offset = CHANNEL_AFFINE[m]
            chans.append(gain * base + offset + rng.normal(0.0, spec.noise_std, size=base.shape))
        data = np.stack(chans).astype(np.float32)
        rel = f"frames/{i:06d}.tnsr"
        write_tensor_file(out / rel, data)
        name = str(storm_split[storm])
        splits[name].append(Entry(rel, synth_intensity(amplitude, sigma), f"S{storm:05d}", frame,
                                  {"amplitude": amplitude, "sigma": sigma}))
        if name == "train":
            d = data.astype(np.float64)
            totals += d.sum(axis=(1, 2))
            squares += (d ** 2).sum(axis=(1, 2))
            n_train_px += base.size

    if n_train_px:
        mean = totals / n_train_px
        std = np.sqrt(np.maximum(squares / n_train_px - mean ** 2, 0.0))
    else:
        mean, std = np.zeros(len(spec.modalities)), np.ones(len(spec.modalities))
    std = np.where(std > 0, std, 1.0)
    manifest = DatasetManifest(list(spec.modalities), [float(v) for v in mean],
                               [float(v) for v in std], splits, out)
    manifest.save()
    return manifest

