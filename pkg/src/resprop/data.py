"""Dataset loading: CIFAR-10/100 binary files, deterministic subsets, and a
synthetic class-blob generator for offline CI.

CIFAR-10 binary records are 3073 bytes (1 label byte, then 1024 R + 1024 G +
1024 B row-major); CIFAR-100 records are 3074 bytes (coarse label, fine label,
then the same pixel layout). Images are normalized per channel with fixed
constants computed once from each training split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

# Per-channel (pixel/255 - mean) / std constants, from the training splits.
CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)
CIFAR100_MEAN = np.array([0.5071, 0.4865, 0.4409], dtype=np.float32)
CIFAR100_STD = np.array([0.2673, 0.2564, 0.2762], dtype=np.float32)

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
RECORDS_PER_FILE = 10000

DOWNLOAD_INFO = """\
CIFAR binaries are not downloaded automatically. Fetch and unpack them yourself:

  cifar-10-binary.tar.gz   https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz
                           md5 c32a1d4ab5d03f1284b67883e8d87530
  cifar-100-binary.tar.gz  https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz
                           md5 03b5dce01913d631647c71ecec9e9cb8

Point data.dir at the directory containing data_batch_1.bin .. data_batch_5.bin
and test_batch.bin (CIFAR-10) or train.bin / test.bin (CIFAR-100).
"""


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # (N, 3, S, S) float32, normalized
    labels: np.ndarray   # (N,) int64
    split: str
    num_classes: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


def read_cifar_records(path, record_len: int, label_bytes: int):
    """Decode one CIFAR binary file into (labels uint8 (N, label_bytes), images uint8)."""
    size = os.path.getsize(path)
    if size % record_len != 0 or size == 0:
        expected = (size // record_len + 1) * record_len if size % record_len else record_len
        raise DataError(f"{path}: file is {size} bytes, not a multiple of the {record_len}-byte "
                        f"record size (nearest valid size {expected})")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, record_len)
    labels = raw[:, :label_bytes]
    limit = 100 if label_bytes == 2 else 10
    check = labels[:, -1]
    bad = np.nonzero(check >= limit)[0]
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{path}: corrupt record {i} at byte offset {i * record_len}: "
                        f"label byte {int(check[i])} out of range [0, {limit})")
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32)
    return labels, images


def encode_cifar_records(labels: np.ndarray, images: np.ndarray) -> bytes:
    """Inverse of read_cifar_records, for byte-exactness checks."""
    labels = np.atleast_2d(np.asarray(labels, dtype=np.uint8))
    if labels.shape[0] == 1 and images.shape[0] != 1:
        labels = labels.T
    flat = images.reshape(images.shape[0], -1).astype(np.uint8)
    return np.concatenate([labels, flat], axis=1).tobytes()


def normalize_images(images_u8: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32) / np.float32(255.0)
    return (x - mean[None, :, None, None]) / std[None, :, None, None]


def _expect_records(path, record_len: int, expected: int) -> None:
    size = os.path.getsize(path)
    if size != expected * record_len:
        raise DataError(f"{path}: expected {expected * record_len} bytes "
                        f"({expected} records of {record_len}), found {size}")


def load_cifar10(data_dir) -> tuple[Dataset, Dataset]:
    """Decode data_batch_1..5.bin and test_batch.bin into normalized datasets."""
    train_imgs, train_labels = [], []
    for i in range(1, 6):
        path = os.path.join(data_dir, f"data_batch_{i}.bin")
        _expect_records(path, CIFAR10_RECORD, RECORDS_PER_FILE)
        lab, img = read_cifar_records(path, CIFAR10_RECORD, 1)
        train_labels.append(lab[:, 0])
        train_imgs.append(img)
    test_path = os.path.join(data_dir, "test_batch.bin")
    _expect_records(test_path, CIFAR10_RECORD, RECORDS_PER_FILE)
    test_lab, test_img = read_cifar_records(test_path, CIFAR10_RECORD, 1)

    train = Dataset(normalize_images(np.concatenate(train_imgs), CIFAR10_MEAN, CIFAR10_STD),
                    np.concatenate(train_labels).astype(np.int64), "train", 10)
    test = Dataset(normalize_images(test_img, CIFAR10_MEAN, CIFAR10_STD),
                   test_lab[:, 0].astype(np.int64), "test", 10)
    return train, test


def load_cifar100(data_dir) -> tuple[Dataset, Dataset]:
    """train.bin / test.bin with coarse+fine label bytes; fine labels are used."""
    out = []
    for fname, count, split in [("train.bin", 50000, "train"), ("test.bin", 10000, "test")]:
        path = os.path.join(data_dir, fname)
        _expect_records(path, CIFAR100_RECORD, count)
        lab, img = read_cifar_records(path, CIFAR100_RECORD, 2)
        out.append(Dataset(normalize_images(img, CIFAR100_MEAN, CIFAR100_STD),
                           lab[:, 1].astype(np.int64), split, 100))
    return out[0], out[1]


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Seeded class-stratified sample of n items (n divisible by the class count)."""
    if n > ds.n:
        raise DataError(f"subset of {n} requested from {ds.n} items")
    if n % ds.num_classes != 0:
        raise DataError(f"stratified subset size {n} is not divisible by {ds.num_classes} classes")
    per_class = n // ds.num_classes
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.num_classes):
        idx = np.nonzero(ds.labels == c)[0]
        if idx.size < per_class:
            raise DataError(f"class {c} has only {idx.size} items, need {per_class}")
        picks.append(rng.permutation(idx)[:per_class])
    order = rng.permutation(np.concatenate(picks))
    return Dataset(ds.images[order], ds.labels[order], ds.split, ds.num_classes)


def synthetic(n: int, classes: int = 10, size: int = 32, seed: int = 0,
              noise: float = 1.0) -> Dataset:
    """Class-conditional Gaussian blobs a small net can fit.

    Each class gets a fixed blob center on a ring and a fixed channel mix;
    images are the class template plus white noise, already in normalized
    (zero-mean, unit-ish variance) space.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    ring = size / 3.5
    sigma = size / 6.0
    templates = np.empty((classes, 3, size, size), dtype=np.float32)
    for c in range(classes):
        ang = 2.0 * np.pi * c / classes
        cy = size / 2.0 + ring * np.sin(ang)
        cx = size / 2.0 + ring * np.cos(ang)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
        mix = np.array([np.cos(ang), np.sin(ang), np.cos(2.0 * ang)], dtype=np.float64)
        mix = 1.5 * mix / np.linalg.norm(mix)
        templates[c] = (mix[:, None, None] * blob[None]).astype(np.float32)

    labels = np.concatenate([np.full(n // classes + (1 if c < n % classes else 0), c)
                             for c in range(classes)]).astype(np.int64)
    labels = labels[rng.permutation(n)]
    images = templates[labels] + rng.normal(0.0, noise, size=(n, 3, size, size)).astype(np.float32)
    return Dataset(images.astype(np.float32), labels, "synthetic", classes)
