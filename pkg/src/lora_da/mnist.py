"""IDX-format image datasets and the odd/even transfer split.

The IDX container is the classic MNIST binary layout: a big-endian magic
(0x00000803 for u8 image cubes, 0x00000801 for u8 label vectors), big-endian
dimension sizes, then the raw payload. Images are returned as float64 rows
scaled to [0, 1].

A deterministic synthetic digit generator is included so the full pipeline
can run where the real files are not available: each class gets a smooth
random prototype image and samples are noisy copies of it, written through
the same IDX writer the loader reads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

ODD_DIGITS = (1, 3, 5, 7, 9)
EVEN_DIGITS = (0, 2, 4, 6, 8)


@dataclass
class Dataset:
    """Flattened images in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"count mismatch: {self.images.shape[0]} images, {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def _read_idx(path, expect_magic, what):
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4:
            raise ValueError(f"{what} file {path}: truncated header")
        (magic,) = struct.unpack(">I", head)
        if magic != expect_magic:
            raise ValueError(
                f"{what} file {path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        payload = fh.read()
    count = int(np.prod(dims))
    if len(payload) < count:
        raise ValueError(f"{what} file {path}: payload has {len(payload)} bytes, needs {count}")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def load_mnist_idx(image_path, label_path) -> Dataset:
    """Load an IDX image/label pair; pixel values are scaled to [0, 1]."""
    raw = _read_idx(image_path, IMAGE_MAGIC, "image")
    labels = _read_idx(label_path, LABEL_MAGIC, "label")
    if raw.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image file has {raw.shape[0]} items but label file has {labels.shape[0]}"
        )
    images = raw.reshape(raw.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(images=images, labels=labels.astype(np.int64))


def write_idx_files(dataset: Dataset, image_path, label_path, side: int = 28) -> None:
    """Write a dataset as a standard IDX pair (u8 pixels, u8 labels)."""
    n = len(dataset)
    pixels = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, side, side))
        fh.write(pixels.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def split_odd_even(dataset: Dataset, n_odd: int, n_even: int, seed: int):
    """Carve (pretrain, finetune, eval) out of one labeled dataset.

    Pretrain gets ``n_odd`` odd-labeled images, fine-tune ``n_even``
    even-labeled images, and eval the remaining even-labeled images that the
    fine-tune subset did not consume. Selection order is a seeded permutation,
    so the split is deterministic for a given (dataset, seed).
    """
    odd_idx = np.flatnonzero(dataset.labels % 2 == 1)
    even_idx = np.flatnonzero(dataset.labels % 2 == 0)
    if len(odd_idx) < n_odd:
        raise ValueError(f"need {n_odd} odd-labeled items, dataset has {len(odd_idx)}")
    if len(even_idx) < n_even:
        raise ValueError(f"need {n_even} even-labeled items, dataset has {len(even_idx)}")
    rng = np.random.default_rng(seed)
    odd_perm = odd_idx[rng.permutation(len(odd_idx))]
    even_perm = even_idx[rng.permutation(len(even_idx))]
    pretrain = dataset.subset(odd_perm[:n_odd])
    finetune = dataset.subset(even_perm[:n_even])
    holdout = dataset.subset(even_perm[n_even:])
    return pretrain, finetune, holdout


def synthesize_digit_dataset(n: int, seed: int, side: int = 28, noise: float = 0.35) -> Dataset:
    """Deterministic stand-in for handwritten digits.

    Each class is a smooth random prototype image; samples are the prototype
    plus pixel noise, clipped to [0, 1] and quantized to u8 levels exactly as
    the IDX writer would store them. Classes overlap enough that a linear
    model is imperfect but a small MLP separates them well.
    """
    rng = np.random.default_rng(seed)
    protos = []
    for _ in range(10):
        field = gaussian_filter(rng.standard_normal((side, side)), sigma=3.0)
        field = (field - field.min()) / (field.max() - field.min() + 1e-12)
        protos.append(field)
    protos = np.asarray(protos)

    labels = rng.integers(0, 10, size=n)
    images = protos[labels] + noise * rng.standard_normal((n, side, side))
    images = np.clip(images, 0.0, 1.0)
    images = np.round(images * 255.0) / 255.0
    return Dataset(images=images.reshape(n, side * side), labels=labels.astype(np.int64))
