"""Sliding-window grouping of range-image pixels into point groups.

This is the fast neighbor-search proxy: a k x k window slides over the range
image and every placement yields one group of N = k*k point slots. With the
default k == stride == 4 and no padding, groups partition the image exactly.

Feature augmentation extends the 5 per-slot features to 11 by adding
group-mean-relative values and the euclidean distance to the group mean:
[x, x_r, y, y_r, z, z_r, depth, depth_r, remission, remission_r, d_euc].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .projection import RangeImage

RAW_CHANNELS = 5
AUGMENTED_CHANNELS = 11


@dataclass(frozen=True)
class GroupingConfig:
    k: int = 4
    stride: int = 4
    dilation: int = 1
    padding: str = "none"  # "none" | "zero"

    def __post_init__(self):
        if self.k < 1 or self.stride < 1 or self.dilation < 1:
            raise ConfigError("k, stride and dilation must all be >= 1")
        if self.padding not in ("none", "zero"):
            raise ConfigError(f"padding must be 'none' or 'zero', got {self.padding!r}")

    @property
    def effective_window(self) -> int:
        return self.dilation * (self.k - 1) + 1


@dataclass
class PointGroups:
    """data: (P, N, C); origin: (P, N, 2) source (u, v); present: (P, N) bool."""

    data: np.ndarray
    origin: np.ndarray
    present: np.ndarray
    grid_shape: tuple[int, int]  # window-origin rows, cols

    @property
    def group_count(self) -> int:
        return self.data.shape[0]

    @property
    def group_size(self) -> int:
        return self.data.shape[1]


def group_grid_shape(width: int, height: int, cfg: GroupingConfig) -> tuple[int, int]:
    eff = cfg.effective_window
    if cfg.padding == "none":
        if (width - eff) % cfg.stride or (height - eff) % cfg.stride:
            raise ConfigError(
                f"padding='none' needs full windows: image {width}x{height}, "
                f"window {eff} (dilated), stride {cfg.stride}"
            )
        return ((height - eff) // cfg.stride + 1, (width - eff) // cfg.stride + 1)
    # zero padding: enough placements for the last window to reach the far edge
    rows = max(1, -(-(height - eff) // cfg.stride) + 1)
    cols = max(1, -(-(width - eff) // cfg.stride) + 1)
    return rows, cols


def make_groups(img: RangeImage, cfg: GroupingConfig) -> PointGroups:
    """Enumerate window placements row-major; slots row-major within the window.

    Out-of-image and invalid pixels become absent slots with all-zero features.
    """
    H, W, C = img.features.shape
    rows, cols = group_grid_shape(W, H, cfg)
    k, s, d = cfg.k, cfg.stride, cfg.dilation

    oy = np.arange(rows) * s
    ox = np.arange(cols) * s
    dy = np.arange(k) * d
    dx = np.arange(k) * d
    # (rows, cols, k, k) source coordinates
    vv = oy[:, None, None, None] + dy[None, None, :, None]
    uu = ox[None, :, None, None] + dx[None, None, None, :]
    vv, uu = np.broadcast_arrays(vv, uu)
    inside = (vv < H) & (uu < W)
    vc = np.where(inside, vv, 0)
    uc = np.where(inside, uu, 0)

    present = img.valid[vc, uc] & inside
    data = np.where(present[..., None], img.features[vc, uc], 0.0).astype(np.float32)

    P, N = rows * cols, k * k
    origin = np.stack([uu, vv], axis=-1).reshape(P, N, 2).astype(np.int32)
    return PointGroups(
        data=data.reshape(P, N, C),
        origin=origin,
        present=present.reshape(P, N),
        grid_shape=(rows, cols),
    )


def augment_features(groups: PointGroups) -> PointGroups:
    """5 -> 11 channels: group-mean-relative features and distance to the mean.

    Means are taken over present slots only; all-absent groups stay all-zero.
    """
    if groups.data.shape[2] != RAW_CHANNELS:
        raise ValueError(f"expected {RAW_CHANNELS}-channel groups, got {groups.data.shape[2]}")
    data = groups.data.astype(np.float64)
    present = groups.present
    counts = present.sum(axis=1)
    safe = np.maximum(counts, 1).astype(np.float64)
    mean = data.sum(axis=1) / safe[:, None]  # absent slots are zero already
    rel = np.where(present[..., None], data - mean[:, None, :], 0.0)
    d_euc = np.sqrt(np.sum(rel[:, :, 0:3] ** 2, axis=2))

    out = np.zeros(groups.data.shape[:2] + (AUGMENTED_CHANNELS,), dtype=np.float32)
    for c in range(RAW_CHANNELS):
        out[:, :, 2 * c] = groups.data[:, :, c]
        out[:, :, 2 * c + 1] = rel[:, :, c]
    out[:, :, 10] = np.where(present, d_euc, 0.0)
    return PointGroups(data=out, origin=groups.origin, present=present, grid_shape=groups.grid_shape)


def groups_to_network_input(groups: PointGroups) -> np.ndarray:
    """(P, N, C) -> (1, C, N, P) array for the encoder."""
    return np.ascontiguousarray(groups.data.transpose(2, 1, 0)[None], dtype=np.float32)
