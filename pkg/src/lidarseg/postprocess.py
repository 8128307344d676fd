"""Depth-based KNN label refinement over the 2D projection.

Points that share a pixel with a closer point inherit that pixel's predicted
label during re-projection, which mislabels occluded points. Refinement
re-votes each point's label over the K depth-nearest valid pixels inside a
square window around its pixel.

Tie-breaking is fully deterministic: candidate selection orders by
(|depth difference|, column offset, row offset); the vote picks the majority
class, breaking ties by the smallest depth distance among the tied classes and
then by the smaller class id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .projection import RangeImage, reproject_labels
from .scan_io import LabelSet, PointCloud


@dataclass(frozen=True)
class KNNConfig:
    window: int = 7
    k: int = 7
    weighted: bool = False  # inverse-distance vote weighting instead of counts
    circular: bool = False  # wrap the window horizontally

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd and >= 1, got {self.window}")
        if not 1 <= self.k <= self.window * self.window:
            raise ConfigError(f"k must be in [1, window^2], got {self.k}")


def _window_offsets(window: int) -> list[tuple[int, int]]:
    """(du, dv) pairs ordered by (du, dv): the candidate tie-break order."""
    r = window // 2
    return [(du, dv) for du in range(-r, r + 1) for dv in range(-r, r + 1)]


def knn_refine(
    cloud: PointCloud,
    img: RangeImage,
    pixel_labels: np.ndarray,
    cfg: KNNConfig = KNNConfig(),
    num_classes: int | None = None,
    ignore_id: int = 0,
) -> LabelSet:
    """Vote each point's label over its K depth-nearest window neighbors.

    ``pixel_labels``: (H, W) predicted class ids. Points whose window contains
    no valid pixel keep their re-projected label.
    """
    H, W = img.valid.shape
    if pixel_labels.shape != (H, W):
        raise ValueError(f"pixel_labels shape {pixel_labels.shape} does not match image {(H, W)}")
    labels2d = np.asarray(pixel_labels)
    nc = int(num_classes) if num_classes is not None else int(labels2d.max()) + 1

    r = cfg.window // 2
    depth = np.where(img.valid, img.features[:, :, 3], np.inf).astype(np.float64)
    inf = np.float64(np.inf)
    if cfg.circular:
        dpad = np.pad(depth, ((r, r), (0, 0)), constant_values=inf)
        dpad = np.pad(dpad, ((0, 0), (r, r)), mode="wrap")
        lpad = np.pad(labels2d, ((r, r), (0, 0)), constant_values=ignore_id)
        lpad = np.pad(lpad, ((0, 0), (r, r)), mode="wrap")
    else:
        dpad = np.pad(depth, r, constant_values=inf)
        lpad = np.pad(labels2d, r, constant_values=ignore_id)

    pu = img.point_to_pixel[:, 0]
    pv = img.point_to_pixel[:, 1]
    d_m = np.linalg.norm(cloud.points[:, :3], axis=1)

    offsets = _window_offsets(cfg.window)
    n_off = len(offsets)
    M = cloud.points.shape[0]
    cand_dist = np.empty((n_off, M), dtype=np.float64)
    cand_lab = np.empty((n_off, M), dtype=labels2d.dtype)
    for idx, (du, dv) in enumerate(offsets):
        rows = pv + dv + r
        cols = pu + du + r
        cd = dpad[rows, cols]
        cand_dist[idx] = np.abs(d_m - cd)
        cand_lab[idx] = lpad[rows, cols]

    # stable sort over candidates: ties fall back to the (du, dv) emission order
    order = np.argsort(cand_dist, axis=0, kind="stable")[: cfg.k]
    sel_dist = np.take_along_axis(cand_dist, order, axis=0)
    sel_lab = np.take_along_axis(cand_lab, order, axis=0)
    sel_valid = np.isfinite(sel_dist)

    if cfg.weighted:
        votes = np.where(sel_valid, 1.0 / (sel_dist + 1e-6), 0.0)
    else:
        votes = sel_valid.astype(np.float64)

    best_score = np.full(M, -1.0)
    best_dist = np.full(M, inf)
    best_class = np.zeros(M, dtype=np.uint32)
    for c in range(nc):
        is_c = sel_lab == c
        score = np.where(is_c, votes, 0.0).sum(axis=0)
        dist_c = np.where(is_c & sel_valid, sel_dist, inf).min(axis=0)
        better = (score > best_score) | ((score == best_score) & (dist_c < best_dist))
        best_class = np.where(better, c, best_class)
        best_dist = np.where(better, dist_c, best_dist)
        best_score = np.where(better, score, best_score)

    fallback = reproject_labels(img, labels2d, ignore_id=ignore_id).labels
    any_valid = sel_valid.any(axis=0)
    refined = np.where(any_valid, best_class, fallback).astype(np.uint32)
    return LabelSet(refined, num_classes=nc, ignore_id=ignore_id)
