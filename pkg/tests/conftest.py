from __future__ import annotations

import gzip
import json
import os
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from qfi.checkpoint import load_checkpoint, save_checkpoint
from qfi.data import LabeledDataset
from qfi.faults import stream

REPO_ROOT = Path(__file__).resolve().parent.parent
CACHE_DIR = Path(__file__).resolve().parent / ".cache"
DATA_DIR = Path(os.environ.get("QFI_MNIST_DIR", REPO_ROOT / "data" / "mnist"))

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def mnist_available() -> bool:
    return all(
        (DATA_DIR / f).exists() or (DATA_DIR / f"{f}.gz").exists() for f in MNIST_FILES
    )


def require_mnist() -> Path:
    if not mnist_available():
        pytest.fail(
            f"MNIST IDX files not found under {DATA_DIR}; run scripts/fetch_mnist.py "
            f"or set QFI_MNIST_DIR (acceptance criteria need the real dataset)"
        )
    return DATA_DIR


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    return require_mnist()


def synthetic_dataset(n: int, seed: int = 0) -> LabeledDataset:
    """Ten trivially separable classes: a bright block per class position."""
    rng = stream(seed, "synthetic")
    labels = rng.integers(0, 10, size=n)
    images = (rng.random((n, 1, 28, 28)) * 0.2).astype(np.float32)
    for i, k in enumerate(labels):
        r = 4 + 12 * (int(k) // 5)
        c = 2 + 5 * (int(k) % 5)
        images[i, 0, r : r + 4, c : c + 4] = 1.0
    return LabeledDataset(images=images, labels=labels.astype(np.int64))


def write_idx_files(directory: Path, images_u8: np.ndarray, labels_u8: np.ndarray, split: str,
                    compress: bool = False) -> None:
    """Write a synthetic MNIST-format split for CLI tests."""
    from qfi.data import IMAGE_FILES, LABEL_FILES

    n = images_u8.shape[0]
    img = struct.pack(">IIII", 0x803, n, 28, 28) + images_u8.tobytes()
    lab = struct.pack(">II", 0x801, n) + labels_u8.tobytes()
    for name, payload in ((IMAGE_FILES[split], img), (LABEL_FILES[split], lab)):
        if compress:
            (directory / f"{name}.gz").write_bytes(gzip.compress(payload))
        else:
            (directory / name).write_bytes(payload)


def cached_artifact(tag: str, builder, loader, saver):
    """Build-or-load an expensive artifact under tests/.cache.

    Returns (artifact, info) where info records the original build wall time.
    Set QFI_TEST_CACHE=0 to force a cold rebuild.
    """
    CACHE_DIR.mkdir(exist_ok=True)
    path = CACHE_DIR / tag
    meta_path = CACHE_DIR / f"{tag}.meta.json"
    use_cache = os.environ.get("QFI_TEST_CACHE", "1") != "0"
    if use_cache and path.exists() and meta_path.exists():
        return loader(path), json.loads(meta_path.read_text())
    t0 = time.monotonic()
    artifact = builder()
    info = {"build_seconds": time.monotonic() - t0}
    saver(artifact, path)
    meta_path.write_text(json.dumps(info))
    return loader(path), info


def cached_checkpoint(tag: str, train_fn):
    return cached_artifact(
        f"{tag}.ckpt",
        train_fn,
        load_checkpoint,
        lambda ckpt, path: save_checkpoint(ckpt, path),
    )
