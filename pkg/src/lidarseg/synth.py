"""Deterministic ray-cast LIDAR scene generator.

Scenes contain an infinite ground plane plus boxes (vehicle stand-ins),
cylindrical poles, and thin walls. One ray is cast per range-image cell using
the same angular model as the spherical projection, so generated points land
back on their generating cell when projected with a matching configuration.

Class ids: 0 = ignore (never emitted), 1 = ground, 2 = box, 3 = pole, 4 = wall.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .projection import ProjectionConfig
from .scan_io import LabelSet, PointCloud, write_predictions, write_scan

IGNORE_ID = 0
CLASS_GROUND = 1
CLASS_BOX = 2
CLASS_POLE = 3
CLASS_WALL = 4
NUM_CLASSES = 5  # including the ignore id

_REMISSION = {CLASS_GROUND: 0.15, CLASS_BOX: 0.55, CLASS_POLE: 0.75, CLASS_WALL: 0.35}

_MIN_T = 0.5  # nearest allowed hit, keeps points off the sensor origin


@dataclass(frozen=True)
class SceneSpec:
    width: int = 512
    height: int = 64
    fov_up_deg: float = 15.0
    fov_down_deg: float = 15.0
    sensor_height: float = 1.7
    boxes: tuple[int, int] = (1, 4)  # inclusive count range per scene
    poles: tuple[int, int] = (1, 4)
    walls: tuple[int, int] = (1, 3)
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigError(f"beam grid too small: {self.width}x{self.height}")
        if self.sensor_height <= 0:
            raise ConfigError("sensor height must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise std must be >= 0")
        for name, rng_ in (("boxes", self.boxes), ("poles", self.poles), ("walls", self.walls)):
            if rng_[0] < 0 or rng_[1] < rng_[0]:
                raise ConfigError(f"invalid count range for {name}: {rng_}")

    @property
    def projection(self) -> ProjectionConfig:
        return ProjectionConfig.from_degrees(self.width, self.height, self.fov_up_deg, self.fov_down_deg)


def _beam_directions(spec: SceneSpec) -> np.ndarray:
    """(H*W, 3) unit ray directions through every cell center."""
    cfg = spec.projection
    u = np.arange(spec.width) + 0.5
    v = np.arange(spec.height) + 0.5
    theta = np.pi * (1.0 - 2.0 * u / spec.width)  # azimuth, matches Eq. u-mapping
    phi = cfg.fov * (1.0 - v / spec.height) - np.radians(spec.fov_down_deg)  # elevation
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    dx = cp[:, None] * ct[None, :]
    dy = cp[:, None] * st[None, :]
    dz = np.broadcast_to(sp[:, None], (spec.height, spec.width))
    return np.stack([dx, dy, dz], axis=-1).reshape(-1, 3)


def _intersect_aabb(d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Entry distance of origin rays into the box, inf when missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = lo[None, :] / d
        t1 = hi[None, :] / d
    near = np.nanmax(np.minimum(t0, t1), axis=1)
    far = np.nanmin(np.maximum(t0, t1), axis=1)
    hit = (far >= near) & (far > _MIN_T)
    return np.where(hit, np.maximum(near, _MIN_T), np.inf)


def _intersect_cylinder(d: np.ndarray, cx: float, cy: float, radius: float, z_lo: float, z_hi: float) -> np.ndarray:
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = d[:, 0] * cx + d[:, 1] * cy
    c = cx * cx + cy * cy - radius * radius
    disc = b * b - a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (b - np.sqrt(disc)) / a
    z = t * d[:, 2]
    ok = (disc > 0) & (a > 0) & (t > _MIN_T) & (z >= z_lo) & (z <= z_hi)
    return np.where(ok, t, np.inf)


def generate(spec: SceneSpec, seed: int | None = None) -> tuple[PointCloud, LabelSet]:
    """Ray-cast one scene; nearest hit per beam wins."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    d = _beam_directions(spec)
    h = spec.sensor_height

    # ground plane z = -h
    with np.errstate(divide="ignore"):
        t_ground = np.where(d[:, 2] < 0, -h / d[:, 2], np.inf)
    best_t = np.where(t_ground > _MIN_T, t_ground, np.inf)
    label = np.where(np.isfinite(best_t), CLASS_GROUND, IGNORE_ID).astype(np.uint32)

    def place(t_obj: np.ndarray, cls: int):
        nonlocal best_t, label
        closer = t_obj < best_t
        best_t = np.where(closer, t_obj, best_t)
        label = np.where(closer, np.uint32(cls), label)

    for _ in range(rng.integers(spec.boxes[0], spec.boxes[1] + 1)):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(4.0, 16.0)
        cx, cy = dist * np.cos(ang), dist * np.sin(ang)
        sx, sy = rng.uniform(1.5, 4.0), rng.uniform(1.5, 4.0)
        hz = rng.uniform(1.2, 2.2)
        lo = np.array([cx - sx / 2, cy - sy / 2, -h])
        hi = np.array([cx + sx / 2, cy + sy / 2, -h + hz])
        place(_intersect_aabb(d, lo, hi), CLASS_BOX)

    for _ in range(rng.integers(spec.poles[0], spec.poles[1] + 1)):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(3.0, 14.0)
        radius = rng.uniform(0.15, 0.4)
        top = rng.uniform(2.5, 6.0)
        place(
            _intersect_cylinder(d, dist * np.cos(ang), dist * np.sin(ang), radius, -h, -h + top),
            CLASS_POLE,
        )

    for _ in range(rng.integers(spec.walls[0], spec.walls[1] + 1)):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(8.0, 22.0)
        cx, cy = dist * np.cos(ang), dist * np.sin(ang)
        length = rng.uniform(8.0, 24.0)
        thick = 0.4
        hz = rng.uniform(2.0, 3.5)
        if rng.uniform() < 0.5:
            sx, sy = length, thick
        else:
            sx, sy = thick, length
        lo = np.array([cx - sx / 2, cy - sy / 2, -h])
        hi = np.array([cx + sx / 2, cy + sy / 2, -h + hz])
        place(_intersect_aabb(d, lo, hi), CLASS_WALL)

    hit = np.isfinite(best_t)
    if not np.any(hit):
        raise ValueError("scene produced no hits; widen the field of view or counts")
    pts = best_t[hit, None] * d[hit]
    if spec.noise_std > 0:
        pts = pts + rng.normal(0.0, spec.noise_std, size=pts.shape)
    lab = label[hit]
    lut = np.zeros(NUM_CLASSES)
    for cls, value in _REMISSION.items():
        lut[cls] = value
    rem = lut[lab.astype(int)] + rng.normal(0.0, 0.02, size=lab.shape)
    cloud = PointCloud(np.concatenate([pts, rem[:, None]], axis=1).astype(np.float32))
    return cloud, LabelSet(lab, num_classes=NUM_CLASSES, ignore_id=IGNORE_ID)


def generate_dataset(n: int, spec: SceneSpec, out_dir) -> list[tuple[str, str]]:
    """Write ``n`` scan/label file pairs; returns their paths."""
    if n < 1:
        raise ValueError("need at least one scan")
    os.makedirs(out_dir, exist_ok=True)
    pairs = []
    seeds = np.random.SeedSequence(spec.seed).generate_state(n)
    for i in range(n):
        cloud, labels = generate(spec, seed=int(seeds[i]))
        scan_path = os.path.join(out_dir, f"{i:06d}.bin")
        label_path = os.path.join(out_dir, f"{i:06d}.label")
        write_scan(cloud, scan_path)
        write_predictions(labels, label_path)
        pairs.append((scan_path, label_path))
    return pairs
