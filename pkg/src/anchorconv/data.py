"""CIFAR binary loading, channel statistics, and synthetic desk-scale data.

CIFAR record layout (all bytes): cifar10 = 1 label byte + 3072 pixel bytes,
cifar100 = 1 coarse label byte + 1 fine label byte + 3072 pixel bytes. Pixels
are stored plane-by-plane (R, G, B), row-major, and are scaled to [0, 1] on
load. The cifar100 coarse label is parsed and discarded; the 100 fine classes
are the targets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .tensor import Tensor

_IMAGE_BYTES = 3 * 32 * 32
_VARIANTS = {
    "cifar10": {"record": 1 + _IMAGE_BYTES, "classes": 10, "label_offset": 0},
    "cifar100": {"record": 2 + _IMAGE_BYTES, "classes": 100, "label_offset": 1},
}


@dataclass
class Dataset:
    """Images in [0, 1] as a Tensor[N, 3, H, W] plus integer labels."""

    images: Tensor
    labels: list[int]
    class_count: int
    name: str

    def __post_init__(self):
        if self.images.data.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"images must be (N, 3, H, W), got {list(self.images.shape)}")
        if self.images.shape[0] != len(self.labels):
            raise DataError(
                f"{self.images.shape[0]} images but {len(self.labels)} labels"
            )
        bad = [y for y in self.labels if not (0 <= y < self.class_count)]
        if bad:
            raise DataError(f"labels outside [0, {self.class_count}): {bad[:5]}")

    def __len__(self) -> int:
        return len(self.labels)


def load_cifar(path, variant: str) -> Dataset:
    """Parse one CIFAR binary file into a Dataset of fine-labelled images."""
    if variant not in _VARIANTS:
        raise DataError(f"unknown variant {variant!r}; expected cifar10 or cifar100")
    layout = _VARIANTS[variant]
    with open(path, "rb") as fh:
        blob = fh.read()
    record = layout["record"]
    if len(blob) == 0 or len(blob) % record:
        raise DataError(
            f"{path}: size {len(blob)} is not a positive multiple of the {record}-byte record"
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, layout["label_offset"]].astype(np.int64)
    k = layout["classes"]
    if labels.max(initial=0) >= k:
        raise DataError(f"{path}: label byte {labels.max()} >= class count {k}")
    pixels = raw[:, record - _IMAGE_BYTES :].reshape(-1, 3, 32, 32)
    images = Tensor(pixels.astype(np.float64) / 255.0)
    return Dataset(images, labels.tolist(), k, f"{variant}:{os.path.basename(str(path))}")


def save_cifar(data: Dataset, path, variant: str) -> None:
    """Write a Dataset back to the binary record format (round-trip exact).

    The cifar100 coarse label byte, which the loader discards, is written
    as 0.
    """
    if variant not in _VARIANTS:
        raise DataError(f"unknown variant {variant!r}; expected cifar10 or cifar100")
    layout = _VARIANTS[variant]
    if data.images.shape[1:] != (3, 32, 32):
        raise DataError(f"record format needs 3x32x32 images, got {list(data.images.shape[1:])}")
    n = len(data)
    records = np.zeros((n, layout["record"]), dtype=np.uint8)
    records[:, layout["label_offset"]] = np.asarray(data.labels, dtype=np.uint8)
    pixels = np.rint(data.images.data * 255.0)
    if pixels.min(initial=0.0) < 0 or pixels.max(initial=0.0) > 255:
        raise DataError("pixel values outside [0, 1] cannot be encoded")
    records[:, layout["record"] - _IMAGE_BYTES :] = pixels.reshape(n, _IMAGE_BYTES).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def load_cifar_dir(data_dir, variant: str | None = None) -> tuple[Dataset, Dataset]:
    """Load the standard train/test file layout from a directory.

    cifar10: data_batch_1.bin .. data_batch_5.bin + test_batch.bin;
    cifar100: train.bin + test.bin. The variant is detected from the files
    present when not given.
    """
    data_dir = str(data_dir)
    if variant is None:
        if os.path.exists(os.path.join(data_dir, "data_batch_1.bin")):
            variant = "cifar10"
        elif os.path.exists(os.path.join(data_dir, "train.bin")):
            variant = "cifar100"
        else:
            raise DataError(f"{data_dir}: no recognizable CIFAR binary files")
    if variant == "cifar10":
        train_files = [os.path.join(data_dir, f"data_batch_{i}.bin") for i in range(1, 6)]
        test_files = [os.path.join(data_dir, "test_batch.bin")]
    else:
        train_files = [os.path.join(data_dir, "train.bin")]
        test_files = [os.path.join(data_dir, "test.bin")]
    parts = [load_cifar(f, variant) for f in train_files]
    train = _concat(parts, f"{variant}:train")
    test = _concat([load_cifar(f, variant) for f in test_files], f"{variant}:test")
    return train, test


def _concat(parts: list[Dataset], name: str) -> Dataset:
    images = Tensor(np.concatenate([p.images.data for p in parts]))
    labels: list[int] = []
    for p in parts:
        labels.extend(p.labels)
    return Dataset(images, labels, parts[0].class_count, name)


def channel_stats(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and std per channel over every pixel of the dataset."""
    if len(data) < 2:
        raise DataError(f"need at least 2 samples for channel statistics, got {len(data)}")
    pixels = data.images.data
    means = pixels.mean(axis=(0, 2, 3))
    stds = pixels.std(axis=(0, 2, 3))
    return means, stds


def synthetic(seed: int, n: int, k: int, size: int) -> Dataset:
    """Deterministic classification set with learnable class structure.

    Each class owns a random low-frequency template (a 4x4 coefficient grid
    upsampled to the image plane); samples are the class template plus iid
    pixel noise, clipped to [0, 1]. Classes are balanced (label = index mod k)
    and linearly separable on raw pixels.
    """
    if n < 1 or k < 1 or size < 1:
        raise DataError(f"need n, k, size >= 1; got n={n}, k={k}, size={size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    block = max(1, -(-size // 4))  # ceil(size / 4)
    templates = np.empty((k, 3, size, size))
    for c in range(k):
        coarse = rng.standard_normal((3, 4, 4))
        up = np.kron(coarse, np.ones((block, block)))[:, :size, :size]
        up /= max(1e-12, np.abs(up).max())
        templates[c] = 0.5 + 0.25 * up

    labels = [i % k for i in range(n)]
    noise = rng.standard_normal((n, 3, size, size)) * 0.08
    images = np.clip(templates[np.asarray(labels)] + noise, 0.0, 1.0)
    return Dataset(Tensor(images), labels, k, f"synthetic(seed={seed},n={n},k={k},size={size})")
