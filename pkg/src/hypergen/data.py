"""MNIST IDX parsing.

IDX layout (all integers big-endian): two zero bytes, a type byte (0x08 =
unsigned byte), a dimension-count byte, one uint32 per dimension, then the raw
values.  Images use magic 0x00000803 (3 dims), labels 0x00000801 (1 dim).
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_ENV = "HYPERGEN_MNIST_DIR"


class IDXError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, path="<bytes>") -> np.ndarray:
    if len(raw) < 4:
        raise IDXError(path, len(raw), "truncated before magic number")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise IDXError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXError(path, len(raw), "truncated inside dimension header")
    dims = tuple(int.from_bytes(raw[4 + 4 * k: 8 + 4 * k], "big") for k in range(ndim))
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) < expected:
        raise IDXError(path, len(raw), f"truncated: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise IDXError(path, expected, f"{len(raw) - expected} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_images(path) -> np.ndarray:
    """(N, rows, cols, 1) float32 images scaled to [0, 1]."""
    arr = parse_idx(read_bytes(path), IMAGE_MAGIC, path)
    return (arr.astype(np.float32) / 255.0)[..., None]


def load_labels(path) -> np.ndarray:
    return parse_idx(read_bytes(path), LABEL_MAGIC, path).astype(np.int64)


@dataclass
class DatasetSplit:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    def validation(self, n: int = 0):
        """First ``n`` test examples (all when ``n`` is 0)."""
        if n <= 0:
            return self.test_images, self.test_labels
        return self.test_images[:n], self.test_labels[:n]


def _find(directory: Path, stem: str) -> Path:
    for name in (f"{stem}-idx{{}}-ubyte", f"{stem}.idx{{}}-ubyte"):
        for nd in ("3", "1"):
            for suffix in ("", ".gz"):
                p = directory / (name.format(nd) + suffix)
                if p.exists():
                    return p
    raise FileNotFoundError(f"no IDX file for {stem!r} in {directory}")


def _pair(directory: Path, prefix: str):
    images_path, labels_path = _find(directory, f"{prefix}-images"), _find(directory, f"{prefix}-labels")
    images, labels = load_images(images_path), load_labels(labels_path)
    if len(images) != len(labels):
        raise IDXError(labels_path, 4, f"{len(labels)} labels for {len(images)} images")
    if labels.size and labels.max() > 9:
        raise IDXError(labels_path, 8, "label outside 0..9")
    return images, labels


def default_mnist_dir() -> Path:
    return Path(os.environ.get(MNIST_ENV, "data/mnist"))


def load_mnist(directory=None) -> DatasetSplit:
    """Train (60k) and test (10k) splits; the test split serves as validation set."""
    directory = Path(directory) if directory is not None else default_mnist_dir()
    if not directory.is_dir():
        raise FileNotFoundError(f"MNIST directory {directory} not found (set {MNIST_ENV})")
    train = _pair(directory, "train")
    test = _pair(directory, "t10k")
    return DatasetSplit(*train, *test)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array as IDX (used to build test fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    header = magic.to_bytes(4, "big") + b"".join(int(n).to_bytes(4, "big") for n in array.shape)
    Path(path).write_bytes(header + array.tobytes())
