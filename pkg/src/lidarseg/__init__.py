"""lidarseg: LIDAR point-cloud semantic segmentation via range images.

The pipeline projects a scan into a spherical range image, groups pixels into
sliding windows of points, encodes each group with a small learned projection
network, runs an encoder-decoder segmentation backbone over the resulting
feature grid, and re-projects the per-pixel labels back onto the points with
an optional depth-aware KNN cleanup.
"""

from .errors import ConfigError, FormatError
from .evaluation import ConfusionMatrix, bench, miou
from .estimator import RangeImageSegmenter
from .grouping import GroupingConfig, PointGroups, augment_features, make_groups
from .model import ModelConfig, SegmentationNetwork, preset_config
from .postprocess import KNNConfig, knn_refine
from .projection import ProjectionConfig, RangeImage, build_range_image, reproject_labels
from .scan_io import LabelSet, PointCloud, read_labels, read_scan, write_predictions, write_scan
from .synth import SceneSpec, generate, generate_dataset
from .training import AugmentationConfig, LossSpec, TrainConfig, compute_class_weights, train

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig",
    "ConfigError",
    "ConfusionMatrix",
    "FormatError",
    "GroupingConfig",
    "KNNConfig",
    "LabelSet",
    "LossSpec",
    "ModelConfig",
    "PointCloud",
    "PointGroups",
    "ProjectionConfig",
    "RangeImage",
    "RangeImageSegmenter",
    "SceneSpec",
    "SegmentationNetwork",
    "TrainConfig",
    "augment_features",
    "bench",
    "build_range_image",
    "compute_class_weights",
    "generate",
    "generate_dataset",
    "knn_refine",
    "make_groups",
    "miou",
    "preset_config",
    "read_labels",
    "read_scan",
    "reproject_labels",
    "train",
    "write_predictions",
    "write_scan",
]
