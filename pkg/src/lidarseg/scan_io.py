"""Binary scan / label / prediction file I/O.

Scan files hold four little-endian float32 values per point
(x, y, z, remission). Label files hold one little-endian uint32 word per
point; the low 16 bits are the semantic class, the high 16 bits (instance id)
are discarded on read and zeroed on write.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

_POINT_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u4")


@dataclass
class PointCloud:
    """Ordered point set; ``points`` is (M, 4) float32 as [x, y, z, remission]."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise ValueError(f"points must be (M, 4), got {self.points.shape}")
        if len(self.points) == 0:
            raise FormatError("no points")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def remission(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass
class LabelSet:
    """Per-point class ids aligned to a PointCloud's ordering."""

    labels: np.ndarray
    num_classes: int = 0
    ignore_id: int = 0

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.labels.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.labels)


def read_scan(path) -> PointCloud:
    """Read a binary scan file; rejects truncated files and non-finite values."""
    raw = np.fromfile(path, dtype=_POINT_DTYPE)
    if raw.size == 0:
        raise FormatError(f"{path}: no points")
    if raw.size % 4 != 0:
        raise FormatError(f"{path}: truncated scan, {raw.size * 4} bytes is not a multiple of 16")
    points = raw.reshape(-1, 4)
    finite = np.isfinite(points).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise FormatError(f"{path}: non-finite value at point index {bad}")
    return PointCloud(points)


def write_scan(cloud: PointCloud, path):
    """Inverse of read_scan, bit-exact."""
    try:
        np.ascontiguousarray(cloud.points, dtype=_POINT_DTYPE).tofile(path)
    except OSError as e:
        raise OSError(f"writing scan to {path}: {e}") from e


def read_labels(path, count: int, num_classes: int = 0, ignore_id: int = 0) -> LabelSet:
    """Read a label file for a scan of ``count`` points (low 16 bits per word)."""
    size = os.path.getsize(path)
    if size != 4 * count:
        raise FormatError(f"{path}: expected {count} labels ({4 * count} bytes), file has {size} bytes")
    words = np.fromfile(path, dtype=_LABEL_DTYPE)
    return LabelSet(words & np.uint32(0xFFFF), num_classes=num_classes, ignore_id=ignore_id)


def write_predictions(labels: LabelSet, path):
    """Write per-point class ids; instance bits zero, read_labels inverts exactly."""
    if len(labels) == 0:
        raise ValueError("refusing to write an empty label set")
    try:
        np.ascontiguousarray(labels.labels & np.uint32(0xFFFF), dtype=_LABEL_DTYPE).tofile(path)
    except OSError as e:
        raise OSError(f"writing predictions to {path}: {e}") from e
