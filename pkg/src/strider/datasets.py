"""Dataset ingestion: MNIST-format IDX files, CIFAR-10 binary batches, and
a deterministic synthetic set for data-free runs.

IDX (big-endian):
    images  u32 magic 0x00000803, u32 count, u32 rows, u32 cols, u8 pixels
    labels  u32 magic 0x00000801, u32 count, u8 labels
    Files may be raw or gzip-compressed (sniffed from the 1f 8b header).

CIFAR-10 binary: data_batch_1..5.bin and test_batch.bin, each a sequence
of 3073-byte records (u8 label + 3072 u8 pixels, channel-planar RGB,
32 x 32).

Pixels scale to [0, 1].  MNIST splits 50,000 / 10,000 / 10,000; CIFAR
splits 45,000 / 5,000 / 10,000 (validation carved off the back of the
training set).

The synthetic generator renders 10 class prototypes (sums of Gaussian
bumps at class-specific positions) with per-sample translation,
amplitude jitter, and pixel noise; it is seeded and shape-compatible
with either real dataset, so every pipeline command runs without data
files present.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError
from .rng import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class LabeledSet:
    images: np.ndarray  # (n, c, h, w) float32, values in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str = "train"
    n_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and int(self.labels.max()) >= self.n_classes:
            raise DatasetError(
                f"label {int(self.labels.max())} out of range for "
                f"{self.n_classes} classes"
            )

    def __len__(self):
        return len(self.images)

    def take(self, idx) -> "LabeledSet":
        return LabeledSet(self.images[idx], self.labels[idx], self.split, self.n_classes)

    def head(self, n: int) -> "LabeledSet":
        if n <= 0 or n >= len(self):
            return self
        return LabeledSet(self.images[:n], self.labels[:n], self.split, self.n_classes)


def _read_file(path) -> bytes:
    if not os.path.exists(path):
        gz = str(path) + ".gz"
        if os.path.exists(gz):
            path = gz
        else:
            raise DatasetError(f"dataset file not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx_images(path) -> np.ndarray:
    data = _read_file(path)
    if len(data) < 16:
        raise DatasetError(f"{path}: truncated IDX header ({len(data)} bytes)")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(
            f"{path}: bad images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    need = 16 + count * rows * cols
    if len(data) < need:
        raise DatasetError(
            f"{path}: truncated at byte {len(data)}, header implies {need}"
        )
    pixels = np.frombuffer(data, np.uint8, count * rows * cols, offset=16)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    data = _read_file(path)
    if len(data) < 8:
        raise DatasetError(f"{path}: truncated IDX header ({len(data)} bytes)")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DatasetError(
            f"{path}: bad labels magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    if len(data) < 8 + count:
        raise DatasetError(
            f"{path}: truncated at byte {len(data)}, header implies {8 + count}"
        )
    return np.frombuffer(data, np.uint8, count, offset=8).astype(np.int64)


def _scale(images_u8: np.ndarray) -> np.ndarray:
    return (images_u8.astype(np.float32) / 255.0).astype(np.float32)


def load_mnist(data_dir, val_count: int = 10000):
    """(train, validation, test) LabeledSets from the four canonical files."""
    imgs = read_idx_images(os.path.join(data_dir, MNIST_FILES["train_images"]))
    labels = read_idx_labels(os.path.join(data_dir, MNIST_FILES["train_labels"]))
    if len(imgs) != len(labels):
        raise DatasetError(
            f"{len(imgs)} training images but {len(labels)} training labels"
        )
    test_imgs = read_idx_images(os.path.join(data_dir, MNIST_FILES["test_images"]))
    test_labels = read_idx_labels(os.path.join(data_dir, MNIST_FILES["test_labels"]))
    if len(test_imgs) != len(test_labels):
        raise DatasetError(
            f"{len(test_imgs)} test images but {len(test_labels)} test labels"
        )
    if not 0 <= val_count < len(imgs):
        raise DatasetError(f"val_count {val_count} out of range for {len(imgs)} samples")
    x = _scale(imgs)[:, None, :, :]
    cut = len(imgs) - val_count
    return (
        LabeledSet(x[:cut], labels[:cut], "train"),
        LabeledSet(x[cut:], labels[cut:], "validation"),
        LabeledSet(_scale(test_imgs)[:, None, :, :], test_labels, "test"),
    )


def _read_cifar_batch(path):
    data = _read_file(path)
    if len(data) % CIFAR_RECORD:
        raise DatasetError(
            f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD}; "
            f"partial record starts at byte {len(data) - len(data) % CIFAR_RECORD}"
        )
    n = len(data) // CIFAR_RECORD
    raw = np.frombuffer(data, np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DatasetError(
            f"{path}: label {int(labels[bad])} >= 10 in record {bad}"
        )
    images = raw[:, 1:].reshape(n, 3, 32, 32)
    return images, labels


def load_cifar10(data_dir, val_count: int = 5000):
    """(train, validation, test) from the six canonical binary batch files."""
    imgs, labels = [], []
    for name in CIFAR_TRAIN_FILES:
        i, l = _read_cifar_batch(os.path.join(data_dir, name))
        imgs.append(i)
        labels.append(l)
    imgs = np.concatenate(imgs)
    labels = np.concatenate(labels)
    if not 0 <= val_count < len(imgs):
        raise DatasetError(f"val_count {val_count} out of range for {len(imgs)} samples")
    ti, tl = _read_cifar_batch(os.path.join(data_dir, CIFAR_TEST_FILE))
    x = _scale(imgs)
    cut = len(imgs) - val_count
    return (
        LabeledSet(x[:cut], labels[:cut], "train"),
        LabeledSet(x[cut:], labels[cut:], "validation"),
        LabeledSet(_scale(ti), tl, "test"),
    )


# -- writers (synthetic materialization and loader tests) ----------------


def write_idx_images(path, images_u8: np.ndarray) -> None:
    n, rows, cols = images_u8.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def write_cifar_batch(path, images_u8: np.ndarray, labels) -> None:
    n = len(images_u8)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images_u8.reshape(n, 3072)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


# -- synthetic data -------------------------------------------------------

_SPLIT_KEY = {"train": 0, "validation": 1, "test": 2}


def _prototypes(kind: str, seed: int, n_classes: int = 10) -> np.ndarray:
    c, side = (1, 28) if kind == "mnist" else (3, 32)
    rng = Rng(np.random.SeedSequence([seed, 97]))
    yy, xx = np.mgrid[0:side, 0:side]
    protos = np.zeros((n_classes, c, side, side), dtype=np.float64)
    for cls in range(n_classes):
        for _ in range(6):
            cy, cx = rng.gen.uniform(5, side - 5, size=2)
            sigma = rng.gen.uniform(1.6, 3.4)
            amp = rng.gen.uniform(0.6, 1.0)
            bump = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            mix = rng.gen.uniform(0.3, 1.0, size=c)
            protos[cls] += mix[:, None, None] * bump[None]
        protos[cls] /= protos[cls].max()
    return protos


def synthetic_set(
    kind: str,
    n: int,
    seed: int = 0,
    split: str = "train",
    shift: int = 3,
    noise: float = 0.25,
) -> LabeledSet:
    """Seeded synthetic classification set shaped like MNIST or CIFAR-10.

    Class structure is shared across splits for a given seed; sample
    noise and placements differ per split.
    """
    if kind not in ("mnist", "cifar10"):
        raise DatasetError(f"unknown synthetic kind {kind!r}")
    protos = _prototypes(kind, seed)
    n_classes, c, side, _ = protos.shape
    rng = Rng(np.random.SeedSequence([seed, _SPLIT_KEY[split]]))
    padded = np.pad(protos, ((0, 0), (0, 0), (shift, shift), (shift, shift)))
    labels = rng.gen.integers(0, n_classes, size=n).astype(np.int64)
    shifts = rng.gen.integers(-shift, shift + 1, size=(n, 2))
    amps = rng.gen.uniform(0.75, 1.25, size=n)
    images = np.empty((n, c, side, side), dtype=np.float32)
    for i in range(n):
        dy, dx = shifts[i]
        y0, x0 = shift + dy, shift + dx
        images[i] = amps[i] * padded[labels[i], :, y0 : y0 + side, x0 : x0 + side]
    images += rng.gen.standard_normal(images.shape, dtype=np.float32) * noise
    np.clip(images, 0.0, 1.0, out=images)
    return LabeledSet(images, labels, split)


def load_synthetic(kind: str, n_train: int, n_val: int, n_test: int, seed: int = 0):
    return (
        synthetic_set(kind, n_train, seed, "train"),
        synthetic_set(kind, n_val, seed, "validation"),
        synthetic_set(kind, n_test, seed, "test"),
    )
