"""MNIST IDX ingestion and deterministic batching.

Parses the big-endian IDX container bit-exactly; accepts gzip-compressed
files transparently. Pixels are scaled to [0, 1] by /255 — the input
quantizer's range observer absorbs any further calibration.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .faults import stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

IMAGE_FILES = {"train": "train-images-idx3-ubyte", "test": "t10k-images-idx3-ubyte"}
LABEL_FILES = {"train": "train-labels-idx1-ubyte", "test": "t10k-labels-idx1-ubyte"}


class DataFormatError(ValueError):
    """Raised for malformed or mismatched dataset files."""


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, 1, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in 0..9

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"image count {self.images.shape[0]} != label count {self.labels.shape[0]}"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, n: int) -> "LabeledDataset":
        n = min(n, len(self))
        return LabeledDataset(images=self.images[:n], labels=self.labels[:n])


def _read_file(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx_images(path: str | Path) -> np.ndarray:
    """Images as (N, 1, 28, 28) float32 scaled to [0, 1]."""
    raw = _read_file(path)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad image magic 0x{magic:08x} (expected 0x{IMAGE_MAGIC:08x})")
    if (rows, cols) != (28, 28):
        raise DataFormatError(f"{path}: expected 28x28 images, got {rows}x{cols}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for {count} images, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float32) / np.float32(255.0)
    return images


def load_idx_labels(path: str | Path) -> np.ndarray:
    raw = _read_file(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise DataFormatError(f"{path}: bad label magic 0x{magic:08x} (expected 0x{LABEL_MAGIC:08x})")
    if len(raw) != 8 + count:
        raise DataFormatError(f"{path}: expected {8 + count} bytes for {count} labels, got {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{path}: label {int(labels.max())} out of range 0..9")
    return labels


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise DataFormatError(f"missing {name}[.gz] under {data_dir}")


def load_dataset(data_dir: str | Path, split: str) -> LabeledDataset:
    """Load one MNIST split ("train" or "test") from the standard filenames."""
    if split not in IMAGE_FILES:
        raise ValueError(f"unknown split {split!r} (expected 'train' or 'test')")
    data_dir = Path(data_dir)
    images = load_idx_images(_find(data_dir, IMAGE_FILES[split]))
    labels = load_idx_labels(_find(data_dir, LABEL_FILES[split]))
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{split}: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    return LabeledDataset(images=images, labels=labels)


def batches(
    dataset: LabeledDataset, batch_size: int, shuffle_seed: int, epoch: int = 0
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Deterministic shuffled mini-batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = stream(shuffle_seed, "shuffle", epoch).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
