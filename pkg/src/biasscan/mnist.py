"""IDX reader/writer and the in-memory labeled dataset."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"


class IdxError(ValueError):
    pass


class BadMagic(IdxError):
    pass


class TruncatedFile(IdxError):
    pass


class CountMismatch(IdxError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """Images in [0,1] of shape N x 1 x 28 x 28 with integer labels.

    ``poisoned`` marks triggered samples and ``origin`` keeps each sample's
    label before any relabeling. ``trigger`` names the trigger that produced
    the poisoned samples, if any.
    """

    images: np.ndarray
    labels: np.ndarray
    poisoned: np.ndarray
    origin: np.ndarray
    trigger: str | None = None

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.labels) == len(self.poisoned) == len(self.origin) == n):
            raise ValueError("images, labels and provenance must have equal length")

    @classmethod
    def pristine(cls, images: np.ndarray, labels: np.ndarray) -> "LabeledDataset":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(np.asarray(images, dtype=np.float32), labels,
                   np.zeros(len(labels), dtype=bool), labels.copy())

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], self.poisoned[index],
                              self.origin[index], self.trigger)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=10)


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFile(f"{path}: damaged gzip stream ({exc})") from None
    return raw


def _parse(path: Path, magic: int, ndim_tail: int) -> np.ndarray:
    raw = _read_bytes(path)
    header_len = 8 + 4 * ndim_tail
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagic(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < header_len:
        raise TruncatedFile(f"{path}: file too short for an IDX header")
    dims = struct.unpack(">" + "I" * (1 + ndim_tail), raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < expected:
        raise TruncatedFile(f"{path}: payload has {len(payload)} bytes, header needs {expected}")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _parse(Path(path), IMAGES_MAGIC, 2)


def read_idx_labels(path) -> np.ndarray:
    return _parse(Path(path), LABELS_MAGIC, 0)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label pair (raw or gzipped), scaling pixels by 1/255."""
    raw_images = read_idx_images(images_path)
    raw_labels = read_idx_labels(labels_path)
    if len(raw_images) != len(raw_labels):
        raise CountMismatch(
            f"{images_path}: {len(raw_images)} images but {labels_path} has {len(raw_labels)} labels")
    if raw_labels.size and raw_labels.max() > 9:
        raise IdxError(f"{labels_path}: label {raw_labels.max()} outside 0..9")
    n, rows, cols = raw_images.shape
    images = (raw_images.astype(np.float32) / np.float32(255.0)).reshape(n, 1, rows, cols)
    return LabeledDataset.pristine(images, raw_labels.astype(np.int64))


def write_idx_images(path, pixels: np.ndarray) -> None:
    """Write uint8 pixels of shape N x rows x cols (or N x 1 x rows x cols)."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 4:
        pixels = pixels[:, 0]
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = pixels.shape
    Path(path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def sample_batch(ds: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Draw ``n`` samples without replacement, deterministically from ``seed``."""
    if n > len(ds) or n < 0:
        raise ValueError(f"cannot draw {n} samples from a dataset of {len(ds)}")
    index = np.random.default_rng(seed).permutation(len(ds))[:n]
    return ds.subset(index)
