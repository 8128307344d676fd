"""scikit-learn style estimator wrapping the full train/predict pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .evaluation import ConfusionMatrix, miou
from .grouping import GroupingConfig
from .model import SegmentationNetwork, preset_config
from .pipeline import predict_scan
from .postprocess import KNNConfig
from .projection import ProjectionConfig
from .scan_io import LabelSet, PointCloud
from .training import AugmentationConfig, TrainConfig, compute_class_weights, train


class RangeImageSegmenter(BaseEstimator):
    """Point-cloud semantic segmenter with a fit/predict/score surface.

    ``X`` is a list of :class:`PointCloud` and ``y`` a list of matching
    :class:`LabelSet`. Class id ``ignore_id`` is excluded from the loss and
    from scoring.
    """

    def __init__(
        self,
        num_classes: int = 5,
        preset: str = "tiny",
        width: int = 512,
        height: int = 64,
        fov_up_deg: float = 15.0,
        fov_down_deg: float = 15.0,
        group_k: int = 4,
        group_stride: int = 4,
        epochs: int = 60,
        batch_size: int | None = None,
        lr0: float = 4e-3,
        lr_decay: float = 0.99,
        power_i: float = 0.25,
        ignore_id: int = 0,
        augment: bool = False,
        knn: bool = False,
        knn_window: int = 7,
        knn_k: int = 7,
        seed: int = 0,
    ):
        self.num_classes = num_classes
        self.preset = preset
        self.width = width
        self.height = height
        self.fov_up_deg = fov_up_deg
        self.fov_down_deg = fov_down_deg
        self.group_k = group_k
        self.group_stride = group_stride
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lr_decay = lr_decay
        self.power_i = power_i
        self.ignore_id = ignore_id
        self.augment = augment
        self.knn = knn
        self.knn_window = knn_window
        self.knn_k = knn_k
        self.seed = seed

    # configuration objects derived from the flat constructor params ---------
    def _projection_config(self) -> ProjectionConfig:
        return ProjectionConfig.from_degrees(self.width, self.height, self.fov_up_deg, self.fov_down_deg)

    def _grouping_config(self) -> GroupingConfig:
        return GroupingConfig(k=self.group_k, stride=self.group_stride)

    def _knn_config(self) -> KNNConfig | None:
        return KNNConfig(window=self.knn_window, k=self.knn_k) if self.knn else None

    def fit(self, X, y, out_dir=None):
        from .training import DEFAULT_BATCH_SIZES

        dataset = list(zip(X, y, strict=True))
        cfg = preset_config(self.preset, num_classes=self.num_classes)
        self.model_ = SegmentationNetwork(cfg, seed=self.seed)
        self.loss_spec_ = compute_class_weights(
            list(y), self.num_classes, exponent=self.power_i, ignore_id=self.ignore_id
        )
        batch = self.batch_size if self.batch_size is not None else DEFAULT_BATCH_SIZES[self.preset]
        tcfg = TrainConfig(
            epochs=self.epochs,
            batch_size=batch,
            lr0=self.lr0,
            lr_decay=self.lr_decay,
            seed=self.seed,
            augment=AugmentationConfig() if self.augment else None,
        )
        self.train_result_ = train(
            dataset, self.model_, self.loss_spec_, tcfg, self._projection_config(),
            self._grouping_config(), out_dir=out_dir,
        )
        return self

    def predict(self, X) -> list[LabelSet]:
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")
        proj, group, knn = self._projection_config(), self._grouping_config(), self._knn_config()
        out = []
        for cloud in X:
            labels, _, _ = predict_scan(
                self.model_, cloud, proj, group, knn_cfg=knn,
                num_classes=self.num_classes, ignore_id=self.ignore_id,
                relative_features=self.model_.cfg.use_relative_features,
            )
            out.append(labels)
        return out

    def score(self, X, y) -> float:
        """Mean IoU over the given scans, ignoring ``ignore_id`` points."""
        cm = ConfusionMatrix(self.num_classes, ignore_id=self.ignore_id)
        for pred, truth in zip(self.predict(X), y, strict=True):
            cm.accumulate(truth, pred)
        return miou(cm)[1]
