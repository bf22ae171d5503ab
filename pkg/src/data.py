"""Dataset ingestion, preprocessing and batching.

Supported sources:

- IDX files (MNIST / Fashion-MNIST layout, optionally gzip-compressed).
- CIFAR-10 binary batches (``data_batch_1..5.bin``, ``test_batch.bin``).
- Gaussian clusters with identity covariance and means ``separation * e_c``,
  whose Bayes-optimal accuracy has a one-dimensional integral form.

All images are float32 arrays shaped ``[N, C, H, W]``; labels are int64.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
from collections.abc import Iterator
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .errors import ConfigError, FormatError

if TYPE_CHECKING:
    from .config import DatasetConfig

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_BATCH = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
AUGMENT_PAD = 4


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def head(self, n: int | None) -> Dataset:
        """First ``n`` examples (all of them when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return replace(self, images=self.images[:n], labels=self.labels[:n])


def _read_blob(path: str | os.PathLike) -> bytes:
    p = Path(path)
    if not p.exists():
        raise FormatError("file not found", path=p)
    if p.suffix == ".gz":
        with gzip.open(p, "rb") as fh:
            return fh.read()
    return p.read_bytes()


def _write_blob(path: str | os.PathLike, blob: bytes) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if p.suffix == ".gz":
        with gzip.GzipFile(filename=str(p), mode="wb", mtime=0) as fh:
            fh.write(blob)
    else:
        p.write_bytes(blob)


def _parse_idx_images(blob: bytes, path) -> np.ndarray:
    if len(blob) < 16:
        raise FormatError(f"image header needs 16 bytes, found {len(blob)}", path=path, offset=len(blob))
    magic, count, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", path=path, offset=0)
    if rows == 0 or cols == 0:
        raise FormatError(f"image dims must be positive, got {rows}x{cols}", path=path, offset=8)
    expected = 16 + count * rows * cols
    if len(blob) != expected:
        raise FormatError(
            f"image payload length mismatch: header implies {expected} bytes, file has {len(blob)}",
            path=path,
            offset=min(len(blob), expected),
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)
    return pixels.astype(np.float32) / np.float32(255.0)


def _parse_idx_labels(blob: bytes, path, num_classes: int) -> np.ndarray:
    if len(blob) < 8:
        raise FormatError(f"label header needs 8 bytes, found {len(blob)}", path=path, offset=len(blob))
    magic, count = struct.unpack_from(">II", blob, 0)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", path=path, offset=0)
    expected = 8 + count
    if len(blob) != expected:
        raise FormatError(
            f"label payload length mismatch: header implies {expected} bytes, file has {len(blob)}",
            path=path,
            offset=min(len(blob), expected),
        )
    labels = np.frombuffer(blob, dtype=np.uint8, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} outside [0, {num_classes})", path=path, offset=8 + int(bad[0]))
    return labels


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    images = _parse_idx_images(_read_blob(images_path), images_path)
    labels = _parse_idx_labels(_read_blob(labels_path), labels_path, num_classes)
    if len(images) != len(labels):
        raise FormatError(
            f"label count {len(labels)} does not match image count {len(images)}", path=labels_path, offset=4
        )
    return Dataset(images, labels, split, num_classes)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels rounded to bytes)."""
    n, c, rows, cols = dataset.images.shape
    if c != 1:
        raise ConfigError(f"IDX holds single-channel images, dataset has {c} channels")
    if dataset.num_classes > 256:
        raise ConfigError("IDX labels are single bytes")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    _write_blob(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    _write_blob(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def read_cifar10_batch(path, expected_records: int | None = CIFAR_RECORDS_PER_BATCH) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch into ``([n, 3, 32, 32] floats, labels)``.

    ``expected_records=None`` accepts any whole number of records.
    """
    blob = _read_blob(path)
    if len(blob) % CIFAR_RECORD_BYTES:
        raise FormatError(
            f"size {len(blob)} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
            path=path,
            offset=len(blob) - len(blob) % CIFAR_RECORD_BYTES,
        )
    n = len(blob) // CIFAR_RECORD_BYTES
    if expected_records is not None and n != expected_records:
        raise FormatError(
            f"wrong file size {len(blob)}, expected {expected_records * CIFAR_RECORD_BYTES} bytes",
            path=path,
            offset=len(blob),
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} outside [0, 10)", path=path, offset=int(bad[0]) * CIFAR_RECORD_BYTES)
    images = records[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def _cifar_dir(root: Path) -> Path:
    nested = root / "cifar-10-batches-bin"
    return nested if nested.is_dir() else root


def load_cifar10_bin(root, split: str = "train", expected_records: int | None = CIFAR_RECORDS_PER_BATCH) -> Dataset:
    base = _cifar_dir(Path(root))
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    missing = [n for n in names if not (base / n).exists()]
    if missing:
        raise FormatError(f"missing CIFAR-10 batch file(s): {', '.join(missing)}", path=base)
    parts = [read_cifar10_batch(base / n, expected_records) for n in names]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, split, 10)


@dataclass(frozen=True)
class Normalizer:
    """Per-channel standardization with statistics from a train split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train: Dataset) -> Normalizer:
        if train.split != "train":
            raise ConfigError(f"normalization statistics must come from the train split, got {train.split!r}")
        mean = train.images.mean(axis=(0, 2, 3))
        std = train.images.std(axis=(0, 2, 3))
        std = np.where(std > 1e-8, std, 1.0)
        return cls(mean.astype(np.float32), std.astype(np.float32))

    def apply(self, dataset: Dataset) -> Dataset:
        images = (dataset.images - self.mean.reshape(1, -1, 1, 1)) / self.std.reshape(1, -1, 1, 1)
        return replace(dataset, images=images.astype(np.float32))


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = AUGMENT_PAD) -> np.ndarray:
    """Random horizontal flip plus zero-pad-and-crop, independently per image."""
    n, _, h, w = images.shape
    flips = rng.random(n) < 0.5
    out = np.where(flips.reshape(-1, 1, 1, 1), images[..., ::-1], images)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    return np.stack([padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w] for i in range(n)]).astype(images.dtype)


def synth_clusters(
    num_classes: int,
    n_per_class: int,
    dim: int,
    separation: float,
    seed: int,
    n_test_per_class: int | None = None,
) -> tuple[Dataset, Dataset]:
    if num_classes < 2:
        raise ConfigError(f"synthetic clusters need at least 2 classes, got {num_classes}")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if dim < num_classes:
        raise ConfigError(f"dim ({dim}) must be >= num_classes ({num_classes})")
    if not math.isfinite(separation) or separation < 0:
        raise ConfigError(f"separation must be finite and >= 0, got {separation}")
    n_test = n_per_class if n_test_per_class is None else n_test_per_class
    rng = np.random.default_rng(seed)
    means = separation * np.eye(num_classes, dim)

    def draw(per_class: int, split: str) -> Dataset:
        labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
        points = means[labels] + rng.standard_normal((labels.size, dim))
        order = rng.permutation(labels.size)
        images = points[order].astype(np.float32).reshape(-1, 1, 1, dim)
        return Dataset(images, labels[order], split, num_classes)

    return draw(n_per_class, "train"), draw(n_test, "test")


def bayes_accuracy(num_classes: int, separation: float) -> float:
    """Accuracy of the optimal classifier on ``synth_clusters`` data.

    The true class coordinate is ``separation + z``; the optimal rule wins
    when it beats ``num_classes - 1`` independent standard normals.
    """

    def integrand(z: float) -> float:
        return norm.pdf(z - separation) * norm.cdf(z) ** (num_classes - 1)

    value, _ = integrate.quad(integrand, -np.inf, np.inf)
    return float(value)


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def batch_iter(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: int | None,
    epoch: int = 0,
    augment: bool = False,
) -> Iterator[Batch]:
    """Yield batches in a permutation fixed by ``(shuffle_seed, epoch)``; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng((shuffle_seed, epoch)).permutation(n)
    aug_rng = np.random.default_rng((0 if shuffle_seed is None else shuffle_seed, epoch, 1)) if augment else None
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        images = dataset.images[idx]
        if aug_rng is not None:
            images = augment_batch(images, aug_rng)
        yield Batch(images, dataset.labels[idx], idx)


def _find_idx_file(base: Path, stem: str) -> Path:
    for candidate in (base / stem, base / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FormatError(f"missing IDX file {stem}[.gz]", path=base / stem)


def _resolve_root(root, cfg: DatasetConfig) -> Path:
    if root is None:
        root = os.getenv("QKD_DATASET_ROOT")
    if not root:
        raise ConfigError(f"dataset kind {cfg.kind!r} needs a dataset root (--dataset-root or QKD_DATASET_ROOT)")
    base = Path(root)
    return base / cfg.name if cfg.name else base


def load_dataset(cfg: DatasetConfig, root=None) -> tuple[Dataset, Dataset]:
    """Resolve the configured dataset into normalized (train, test) splits."""
    if cfg.kind == "synthetic":
        s = cfg.synthetic
        train, test = synth_clusters(s.num_classes, s.n_per_class, s.dim, s.separation, s.seed, s.n_test_per_class)
    elif cfg.kind == "idx":
        base = _resolve_root(root, cfg)
        splits = {}
        for split, (img_stem, lbl_stem) in IDX_FILES.items():
            splits[split] = load_idx(
                _find_idx_file(base, img_stem), _find_idx_file(base, lbl_stem), split, cfg.num_classes
            )
        train, test = splits["train"], splits["test"]
    elif cfg.kind == "cifar10":
        base = _resolve_root(root, cfg)
        train = load_cifar10_bin(base, "train")
        test = load_cifar10_bin(base, "test")
    else:
        raise ConfigError(f"unknown dataset kind {cfg.kind!r}")
    train, test = train.head(cfg.train_subset), test.head(cfg.test_subset)
    if cfg.normalize:
        normalizer = Normalizer.fit(train)
        train, test = normalizer.apply(train), normalizer.apply(test)
    print(
        f"[data] loaded kind={cfg.kind} train={len(train)} test={len(test)} "
        f"shape={list(train.sample_shape)} classes={train.num_classes}"
    )
    return train, test
