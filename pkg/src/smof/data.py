"""Dataset readers (IDX, CIFAR-10 binary), a synthetic fixture, and batch iteration."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [count, C, H, W] float32 in [0, 1] before normalization
    labels: np.ndarray  # [count] int64

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [count, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Raw unsigned-byte IDX array (images 0x803 or labels 0x801)."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise DatasetError(f"{path}: truncated IDX body ({len(raw) - head} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """IDX image file (plus optional label file) as [count, 1, H, W] images in [0, 1]."""
    imgs = read_idx(images_path)
    if imgs.ndim != 3:
        raise DatasetError(f"{images_path}: expected a 3-D image file, got {imgs.ndim} dims")
    if labels_path is None:
        labels = np.zeros(len(imgs), dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64)
        if labels.ndim != 1:
            raise DatasetError(f"{labels_path}: expected a 1-D label file")
    return Dataset((imgs.astype(np.float32) / 255.0)[:, None], labels)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES if array.ndim == 3 else IDX_LABELS if array.ndim == 1 else 0x800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_cifar10_binary(paths) -> Dataset:
    """One or more CIFAR-10 binary batch files (1 label byte + 3072 channel-major pixels per record)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise DatasetError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max(initial=0) > 9:
            raise DatasetError(f"{path}: label out of range 0..9")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images).astype(np.float32) / 255.0, np.concatenate(labels))


def synth_dataset(seed: int, classes: int, per_class: int, image_size: int, channels: int = 1,
                  noise: float = 0.3) -> Dataset:
    """Oriented bars on a noisy background; class k is a bar at angle k*pi/classes.

    Bar position and thickness jitter per sample, so a small CNN has to learn
    orientation rather than memorize pixels.
    """
    if min(classes, per_class, image_size, channels) < 1:
        raise ValueError("synthetic dataset sizes must be positive")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(n)]
    c = (image_size - 1) / 2
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    theta = labels * np.pi / classes + rng.normal(0, 0.05, n)
    shift = rng.uniform(-image_size / 6, image_size / 6, n)
    width = rng.uniform(0.8, 1.6, n)
    # signed distance of each pixel to the bar's center line
    d = ((xx[None] - c) * np.sin(theta)[:, None, None] - (yy[None] - c) * np.cos(theta)[:, None, None]) - shift[:, None, None]
    bars = np.exp(-0.5 * (d / width[:, None, None]) ** 2)
    imgs = bars[:, None] + noise * rng.standard_normal((n, channels, image_size, image_size))
    imgs = np.clip(imgs, 0, 1).astype(np.float32)
    return Dataset(imgs, labels.astype(np.int64))


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    train_paths: list[str] = field(default_factory=list)
    train_label_paths: list[str] = field(default_factory=list)
    test_paths: list[str] = field(default_factory=list)
    test_label_paths: list[str] = field(default_factory=list)
    # synthetic source
    classes: int = 4
    per_class: int = 200
    test_per_class: int = 50
    image_size: int = 16
    channels: int = 1
    noise: float = 0.3
    # augmentation
    random_crop: bool = False
    crop_padding: int = 4
    horizontal_flip: bool = False
    mean: list[float] = field(default_factory=list)
    std: list[float] = field(default_factory=list)
    # permute test labels (chance-level sanity fixture)
    shuffle_labels: bool = False

    def load(self, seed: int = 0) -> tuple[Dataset, Dataset]:
        if self.source == "synthetic":
            train = synth_dataset(seed, self.classes, self.per_class, self.image_size, self.channels, self.noise)
            test = synth_dataset(seed + 1_000_003, self.classes, self.test_per_class, self.image_size,
                                 self.channels, self.noise)
        elif self.source == "idx-images":
            train = _concat([load_idx(p, l) for p, l in zip(self.train_paths, _pad_list(self.train_label_paths, self.train_paths))])
            test = _concat([load_idx(p, l) for p, l in zip(self.test_paths, _pad_list(self.test_label_paths, self.test_paths))])
        elif self.source == "cifar10-binary":
            train = load_cifar10_binary(self.train_paths)
            test = load_cifar10_binary(self.test_paths)
        else:
            raise DatasetError(f"unknown dataset source {self.source!r}")
        if self.shuffle_labels:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
            test = Dataset(test.images, rng.permutation(test.labels))
        return self.normalize(train), self.normalize(test)

    def normalize(self, ds: Dataset) -> Dataset:
        if not self.mean:
            return ds
        c = ds.images.shape[1]
        mean = np.asarray(self.mean, dtype=np.float32).reshape(1, -1, 1, 1)
        std = np.asarray(self.std or [1.0] * c, dtype=np.float32).reshape(1, -1, 1, 1)
        return Dataset(((ds.images - mean) / std).astype(np.float32), ds.labels)


def _pad_list(labels, images):
    return list(labels) + [None] * (len(images) - len(labels))


def _concat(parts: list[Dataset]) -> Dataset:
    if not parts:
        raise DatasetError("no dataset files given")
    return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, epoch, stream)."""
    return np.random.Generator(np.random.Philox(key=(seed << 20) ^ stream, counter=epoch))


def augment(images: np.ndarray, rng: np.random.Generator, crop_padding: int = 0, flip: bool = False) -> np.ndarray:
    """Random crop from a zero-padded copy and/or random horizontal flip."""
    out = images
    if crop_padding:
        n, c, h, w = images.shape
        p = crop_padding
        padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, n)
        dx = rng.integers(0, 2 * p + 1, n)
        out = np.empty_like(images)
        for k in range(n):
            out[k] = padded[k, :, dy[k] : dy[k] + h, dx[k] : dx[k] + w]
    if flip:
        mask = rng.random(len(out)) < 0.5
        out = out.copy() if out is images else out
        out[mask] = out[mask, :, :, ::-1]
    return out


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int, spec: DatasetSpec | None = None):
    """Yield (images, labels) mini-batches in an order fixed by (seed, epoch)."""
    order = epoch_rng(seed, epoch, 0).permutation(len(ds))
    aug_rng = epoch_rng(seed, epoch, 1)
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        imgs = ds.images[idx]
        if spec is not None and (spec.random_crop or spec.horizontal_flip):
            imgs = augment(imgs, aug_rng, spec.crop_padding if spec.random_crop else 0, spec.horizontal_flip)
        yield np.ascontiguousarray(imgs), ds.labels[idx]
