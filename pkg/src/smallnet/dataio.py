"""MNIST IDX reading/writing and input preprocessing."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIDE = 28
NUM_CLASSES = 10


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class IdxFormatError(IdxError):
    pass


class IdxLengthError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


class LabelRangeError(IdxError):
    pass


def parse_idx_images(data: bytes) -> np.ndarray:
    """Decode an IDX3 image file into a ``(count, 28, 28)`` uint8 array."""
    if len(data) < 16:
        raise IdxLengthError(f"image header needs 16 bytes, got {len(data)}")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"bad image magic {magic:#010x}")
    if rows != IMAGE_SIDE or cols != IMAGE_SIDE:
        raise IdxDimensionError(f"expected 28x28 images, header says {rows}x{cols}")
    expected = count * rows * cols
    payload = memoryview(data)[16:]
    if len(payload) != expected:
        raise IdxLengthError(f"pixel payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols).copy()


def parse_idx_labels(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise IdxLengthError(f"label header needs 8 bytes, got {len(data)}")
    magic, count = struct.unpack(">II", data[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"bad label magic {magic:#010x}")
    payload = memoryview(data)[8:]
    if len(payload) != count:
        raise IdxLengthError(f"label payload is {len(payload)} bytes, header implies {count}")
    labels = np.frombuffer(payload, dtype=np.uint8).copy()
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise LabelRangeError(f"label byte {labels[bad[0]]:#04x} at index {bad[0]} is not a digit")
    return labels


def serialize_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    return struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols) + images.tobytes()


def serialize_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABEL_MAGIC, labels.size) + labels.tobytes()


def normalize(pixels):
    """Map 8-bit pixels to [0, 1] by dividing by 255."""
    return np.asarray(pixels, dtype=np.float64) / 255.0


def one_hot(label: int) -> np.ndarray:
    if not 0 <= label < NUM_CLASSES:
        raise LabelRangeError(f"label {label} outside 0..9")
    vec = np.zeros(NUM_CLASSES)
    vec[label] = 1.0
    return vec


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray  # (count, 28, 28) uint8
    labels: np.ndarray  # (count,) uint8

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
            raise IdxDimensionError(f"images must be (n, 28, 28), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise IdxLengthError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and int(self.labels.max()) >= NUM_CLASSES:
            raise LabelRangeError("labels must lie in 0..9")

    @property
    def count(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return self.count

    def normalized(self) -> np.ndarray:
        return normalize(self.images)

    def subset(self, start: int = 0, stop: int | None = None) -> "LabeledImageSet":
        return LabeledImageSet(self.images[start:stop], self.labels[start:stop])

    @classmethod
    def load(cls, images_path, labels_path) -> "LabeledImageSet":
        images = parse_idx_images(Path(images_path).read_bytes())
        labels = parse_idx_labels(Path(labels_path).read_bytes())
        return cls(images, labels)
