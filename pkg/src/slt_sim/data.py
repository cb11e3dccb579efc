"""Datasets: synthetic image tasks, IDX files, and device partitioning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IdxParseError, UsageError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (n, c, h, w) float32
    y: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.x.ndim != 4:
            raise UsageError(f"samples must be (n, c, h, w), got shape {self.x.shape}")
        if len(self.x) != len(self.y):
            raise UsageError(f"{len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise UsageError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.split)


# -- synthetic data --------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Class-conditional blob images.

    Every class owns ``modes`` prototypes; a prototype is a sum of ``blobs``
    anisotropic Gaussian bumps with random centres, widths and per-channel
    colours. A sample is a randomly shifted and rescaled prototype plus pixel
    noise. ``difficulty`` scales the noise and the spatial jitter.
    """

    classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_shape: tuple[int, int, int] = (3, 32, 32)
    difficulty: float = 1.0
    modes: int = 2
    blobs: int = 4
    separation: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        if self.classes < 2:
            raise ConfigError("dataset.classes", "need at least two classes")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("dataset.train_per_class", "need at least one sample per class")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError("dataset.image_shape", "expected (channels, height, width)")
        if self.difficulty < 0 or self.separation <= 0:
            raise ConfigError("dataset.difficulty", "difficulty >= 0 and separation > 0")
        if self.modes < 1 or self.blobs < 1:
            raise ConfigError("dataset.modes", "modes and blobs must be positive")


def _prototypes(spec: SynthSpec, rng) -> np.ndarray:
    c, h, w = spec.image_shape
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    protos = np.zeros((spec.classes, spec.modes, c, h, w))
    for k in range(spec.classes):
        for m in range(spec.modes):
            img = np.zeros((c, h, w))
            for _ in range(spec.blobs):
                cy, cx = rng.uniform(0.1, 0.9, size=2)
                sy, sx = rng.uniform(0.05, 0.25, size=2)
                colour = rng.standard_normal(c)
                bump = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
                img += colour[:, None, None] * bump[None]
            img /= np.sqrt((img ** 2).mean()) + 1e-12
            protos[k, m] = spec.separation * img
    return protos


def _draw(spec, protos, per_class, rng):
    c, h, w = spec.image_shape
    n = spec.classes * per_class
    y = np.repeat(np.arange(spec.classes), per_class)
    mode = rng.integers(spec.modes, size=n)
    base = protos[y, mode]
    shift = max(1, int(round(0.1 * spec.difficulty * min(h, w))))
    dy = rng.integers(-shift, shift + 1, size=n)
    dx = rng.integers(-shift, shift + 1, size=n)
    gain = rng.uniform(1 - 0.3 * min(spec.difficulty, 2) / 2, 1 + 0.3 * min(spec.difficulty, 2) / 2,
                       size=n)
    x = np.empty((n, c, h, w))
    for i in range(n):
        x[i] = gain[i] * np.roll(base[i], (dy[i], dx[i]), axis=(1, 2))
    x += spec.difficulty * rng.standard_normal(x.shape)
    order = rng.permutation(n)
    return x[order].astype(np.float32), y[order].astype(np.int64)


def synth_gen(spec: SynthSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair; the splits are drawn independently."""
    rng = np.random.default_rng([seed, 0x5E7])
    protos = _prototypes(spec, rng)
    x_tr, y_tr = _draw(spec, protos, spec.train_per_class, rng)
    x_te, y_te = _draw(spec, protos, spec.test_per_class, rng)
    return (Dataset(x_tr, y_tr, spec.classes, "train"),
            Dataset(x_te, y_te, spec.classes, "test"))


def hflip(x: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Flip a random half of the batch left-right."""
    flip = rng.random(len(x)) < p
    if not flip.any():
        return x
    out = x.copy()
    out[flip] = out[flip][..., ::-1]
    return out


# -- IDX files -----------------------------------------------------------

_IDX_TYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}


def parse_idx(buf: bytes) -> np.ndarray:
    """Decode an IDX byte string into an array of its native dtype."""
    if len(buf) < 4:
        raise IdxParseError(len(buf) if buf else 0, "truncated magic number")
    zero, code, ndim = struct.unpack_from(">HBB", buf, 0)
    if zero != 0:
        raise IdxParseError(0, f"bad magic 0x{zero:04x}{code:02x}{ndim:02x}")
    if code not in _IDX_TYPES:
        raise IdxParseError(2, f"unknown element type 0x{code:02x}")
    if ndim == 0:
        raise IdxParseError(3, "zero dimensions")
    if len(buf) < 4 + 4 * ndim:
        raise IdxParseError(len(buf), f"truncated header: need {ndim} dimension sizes")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    dtype = _IDX_TYPES[code]
    start = 4 + 4 * ndim
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - start < need:
        raise IdxParseError(len(buf), f"truncated data: need {need} bytes after offset {start}")
    if len(buf) - start > need:
        raise IdxParseError(start + need, "trailing bytes after data")
    arr = np.frombuffer(buf, dtype=dtype, count=need // dtype.itemsize, offset=start)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise UsageError(f"dtype {arr.dtype} has no IDX type code")
    head = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(_IDX_TYPES[code]).tobytes()


def write_idx(path, arr: np.ndarray):
    Path(path).write_bytes(encode_idx(arr))


def load_idx(images_path, labels_path=None, num_classes=None, split="train") -> Dataset:
    """Images as floats (bytes scaled to [0, 1]); 3-d image files gain a channel axis."""
    raw = read_idx(images_path)
    x = raw.astype(np.float32)
    if raw.dtype == np.uint8:
        x /= 255.0
    if x.ndim == 3:
        x = x[:, None]
    elif x.ndim != 4:
        raise IdxParseError(3, f"image file must have 3 or 4 dimensions, got {x.ndim}")
    if labels_path is None:
        y = np.zeros(len(x), dtype=np.int64)
    else:
        y = read_idx(labels_path).astype(np.int64)
        if y.ndim != 1:
            raise IdxParseError(3, "label file must be one-dimensional")
    k = num_classes if num_classes is not None else int(y.max()) + 1 if len(y) else 1
    return Dataset(x, y, k, split)


# -- partitioning --------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    alpha: float = 0.1
    devices: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet"):
            raise ConfigError("partition.kind", f"unknown partition {self.kind!r}")
        if not self.alpha > 0:
            raise ConfigError("partition.alpha", "alpha must be positive")
        if self.devices < 1:
            raise ConfigError("partition.devices", "need at least one device")


def partition(dataset: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Equal-sized disjoint shards (sorted index arrays), one per device.

    ``len(dataset) % devices`` samples are left out so every shard has the
    same size.
    """
    n, C = len(dataset), spec.devices
    if C > n:
        raise UsageError(f"{C} devices but only {n} samples")
    size = n // C
    if n % C:
        log.info("dropping %d samples to make %d equal shards", n % C, C)
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    if spec.kind == "iid":
        perm = rng.permutation(n)
        return [np.sort(perm[i * size:(i + 1) * size]) for i in range(C)]
    return _dirichlet(dataset, size, spec, rng)


def _dirichlet(dataset, size, spec, rng):
    K = dataset.num_classes
    pools = [rng.permutation(np.flatnonzero(dataset.y == k)) for k in range(K)]
    supply = np.array([len(p) for p in pools])
    taken = np.zeros(K, dtype=np.int64)
    mixes = rng.dirichlet(np.full(K, spec.alpha), size=spec.devices)
    shards: list[np.ndarray | None] = [None] * spec.devices
    # random visiting order so exhaustion effects do not pile onto the last ids
    for d in rng.permutation(spec.devices):
        counts = _apportion(mixes[d] * size, size)
        counts = np.minimum(counts, supply - taken)
        deficit = size - counts.sum()
        # refill from the classes the device prefers, within remaining capacity
        for k in np.argsort(-mixes[d], kind="stable"):
            if deficit == 0:
                break
            extra = min(deficit, supply[k] - taken[k] - counts[k])
            counts[k] += extra
            deficit -= extra
        parts = []
        for k in range(K):
            parts.append(pools[k][taken[k]:taken[k] + counts[k]])
            taken[k] += counts[k]
        shards[d] = np.sort(np.concatenate(parts))
    return shards


def _apportion(target: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``target`` to integers summing to ``total``."""
    base = np.floor(target).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(target - base), kind="stable")
    base[order[:rest]] += 1
    return base
