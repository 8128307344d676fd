"""Scan-level plumbing shared by training, inference and the CLI.

A scan travels: point cloud -> spherical projection -> sliding-window groups
with feature augmentation -> network forward -> per-pixel argmax -> label
re-projection (optionally KNN-refined) back onto the points.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .grouping import GroupingConfig, augment_features, groups_to_network_input, make_groups
from .postprocess import KNNConfig, knn_refine
from .projection import ProjectionConfig, RangeImage, build_range_image, label_image, reproject_labels
from .scan_io import LabelSet, PointCloud


def prepare_scan(
    cloud: PointCloud,
    proj_cfg: ProjectionConfig,
    group_cfg: GroupingConfig,
    labels: LabelSet | None = None,
    ignore_id: int = 0,
    relative_features: bool = True,
):
    """Project and group one scan.

    Returns (range_image, groups_input (C, N, P), image (5, H, W), target) where
    ``target`` is the (H, W) label image or None when no labels are given.
    """
    img = build_range_image(cloud, proj_cfg)
    groups = make_groups(img, group_cfg)
    if relative_features:
        groups = augment_features(groups)
    x = groups_to_network_input(groups)[0]
    image = np.ascontiguousarray(img.features.transpose(2, 0, 1), dtype=np.float32)
    target = label_image(img, labels, ignore_id) if labels is not None else None
    return img, x, image, target


def predict_pixels(model, groups_batch: np.ndarray, image_batch: np.ndarray) -> np.ndarray:
    """Eval-mode forward; returns (B, H, W) argmax class ids."""
    model.eval()
    with ad.no_grad():
        logits = model.forward(groups_batch, image_batch)
    return np.argmax(logits.data, axis=1)


def predict_scan(
    model,
    cloud: PointCloud,
    proj_cfg: ProjectionConfig,
    group_cfg: GroupingConfig,
    knn_cfg: KNNConfig | None = None,
    num_classes: int | None = None,
    ignore_id: int = 0,
    relative_features: bool = True,
) -> tuple[LabelSet, RangeImage, np.ndarray]:
    """Full single-scan inference; returns (point labels, range image, pixel labels)."""
    img, x, image, _ = prepare_scan(
        cloud, proj_cfg, group_cfg, relative_features=relative_features, ignore_id=ignore_id
    )
    pixels = predict_pixels(model, x[None], image[None])[0]
    if knn_cfg is not None:
        labels = knn_refine(cloud, img, pixels, knn_cfg, num_classes=num_classes, ignore_id=ignore_id)
    else:
        labels = reproject_labels(img, pixels, num_classes=num_classes or 0, ignore_id=ignore_id)
    return labels, img, pixels
