"""Spherical projection of a point cloud onto a W x H range image.

A point (x, y, z) at depth r maps to

    u = floor(0.5 * (1 - atan2(y, x) / pi) * W)
    v = floor((1 - (arcsin(z / r) + fov_up) / fov) * H)

with both coordinates clamped onto the image. When several points land on the
same pixel the nearest one (smallest depth, ties to the lowest point index)
becomes the pixel's representative and supplies the five per-pixel features
[x, y, z, depth, remission].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scan_io import LabelSet, PointCloud


@dataclass(frozen=True)
class ProjectionConfig:
    width: int
    height: int
    fov_up: float  # radians
    fov_down: float  # radians

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image dimensions must be positive, got {self.width}x{self.height}")
        if self.fov_up + self.fov_down <= 0:
            raise ConfigError("total vertical field of view must be positive")

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @classmethod
    def from_degrees(cls, width: int, height: int, fov_up_deg: float, fov_down_deg: float):
        return cls(width, height, np.radians(fov_up_deg), np.radians(fov_down_deg))


@dataclass
class RangeImage:
    """Spherical projection of one scan.

    features: (H, W, 5) float32, [x, y, z, depth, remission], zero at invalid pixels
    valid: (H, W) bool
    representative: (H, W) int32 point index, -1 where invalid
    point_to_pixel: (M, 2) int32 (u, v) per point
    """

    features: np.ndarray
    valid: np.ndarray
    representative: np.ndarray
    point_to_pixel: np.ndarray
    config: ProjectionConfig

    @property
    def depth(self) -> np.ndarray:
        return self.features[:, :, 3]


def project_point(point, cfg: ProjectionConfig) -> tuple[int, int]:
    """Project a single (x, y, z[, remission]) point; returns (u, v)."""
    x, y, z = float(point[0]), float(point[1]), float(point[2])
    r = np.sqrt(x * x + y * y + z * z)
    if r == 0.0:
        raise ValueError("cannot project a point at the sensor origin (zero depth)")
    u = int(np.floor(0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.width))
    v = int(np.floor((1.0 - (np.arcsin(z / r) + cfg.fov_up) / cfg.fov) * cfg.height))
    return min(max(u, 0), cfg.width - 1), min(max(v, 0), cfg.height - 1)


def project_points(xyz: np.ndarray, cfg: ProjectionConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection; returns (u, v, depth) arrays."""
    x, y, z = xyz[:, 0].astype(np.float64), xyz[:, 1].astype(np.float64), xyz[:, 2].astype(np.float64)
    r = np.sqrt(x * x + y * y + z * z)
    if np.any(r == 0.0):
        bad = int(np.flatnonzero(r == 0.0)[0])
        raise ValueError(f"point {bad} has zero depth and cannot be projected")
    u = np.floor(0.5 * (1.0 - np.arctan2(y, x) / np.pi) * cfg.width).astype(np.int64)
    v = np.floor((1.0 - (np.arcsin(z / r) + cfg.fov_up) / cfg.fov) * cfg.height).astype(np.int64)
    np.clip(u, 0, cfg.width - 1, out=u)
    np.clip(v, 0, cfg.height - 1, out=v)
    return u.astype(np.int32), v.astype(np.int32), r


def build_range_image(cloud: PointCloud, cfg: ProjectionConfig) -> RangeImage:
    """Project every point; nearest point per pixel wins (ties: lowest index)."""
    u, v, r = project_points(cloud.xyz, cfg)
    M = len(cloud)
    flat = v.astype(np.int64) * cfg.width + u
    # sort by (pixel, depth, index); first entry per pixel is the representative
    order = np.lexsort((np.arange(M), r, flat))
    first = np.ones(M, dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    rep_points = order[first]
    rep_pixels = flat[order][first]

    features = np.zeros((cfg.height, cfg.width, 5), dtype=np.float32)
    valid = np.zeros(cfg.height * cfg.width, dtype=bool)
    representative = np.full(cfg.height * cfg.width, -1, dtype=np.int32)
    valid[rep_pixels] = True
    representative[rep_pixels] = rep_points
    feats = features.reshape(-1, 5)
    feats[rep_pixels, 0:3] = cloud.xyz[rep_points]
    feats[rep_pixels, 3] = r[rep_points]
    feats[rep_pixels, 4] = cloud.remission[rep_points]
    return RangeImage(
        features=features,
        valid=valid.reshape(cfg.height, cfg.width),
        representative=representative.reshape(cfg.height, cfg.width),
        point_to_pixel=np.stack([u, v], axis=1),
        config=cfg,
    )


def reproject_labels(img: RangeImage, pixel_labels: np.ndarray, num_classes: int = 0, ignore_id: int = 0) -> LabelSet:
    """Assign each point the class of its pixel (occluded points included)."""
    pixel_labels = np.asarray(pixel_labels)
    if pixel_labels.shape != img.valid.shape:
        raise ValueError(f"pixel_labels shape {pixel_labels.shape} does not match image {img.valid.shape}")
    u = img.point_to_pixel[:, 0]
    v = img.point_to_pixel[:, 1]
    return LabelSet(pixel_labels[v, u].astype(np.uint32), num_classes=num_classes, ignore_id=ignore_id)


def label_image(img: RangeImage, labels: LabelSet, ignore_id: int) -> np.ndarray:
    """Per-pixel class ids from each pixel's representative point; ignore elsewhere."""
    out = np.full(img.valid.shape, ignore_id, dtype=np.int32)
    rep = img.representative
    out[img.valid] = labels.labels[rep[img.valid]]
    return out


def export_range_image(img: RangeImage, path):
    """Debug dump: flat little-endian float32 H*W*5 payload plus a text sidecar."""
    np.ascontiguousarray(img.features, dtype="<f4").tofile(path)
    with open(str(path) + ".hdr", "w") as f:
        f.write(f"width {img.config.width}\n")
        f.write(f"height {img.config.height}\n")
        f.write("channels x y z depth remission\n")
        f.write("layout row-major v,u,channel float32 little-endian\n")
