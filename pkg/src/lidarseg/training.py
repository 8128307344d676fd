"""Class-balanced loss weights, data augmentation, and the SGD training loop.

The per-class weights follow median-frequency balancing with a power
smoothing exponent: w_c = (f_t / f_c)^i, where f_c is the global fraction of
labeled points in class c and f_t the median of the nonzero fractions.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .grouping import GroupingConfig
from .nn import save_checkpoint
from .pipeline import prepare_scan
from .projection import ProjectionConfig
from .scan_io import LabelSet, PointCloud, read_labels, read_scan

DEFAULT_BATCH_SIZES = {"full": 3, "small": 6, "tiny": 8}


@dataclass(frozen=True)
class LossSpec:
    """Eq.-style weighted cross-entropy inputs: class frequencies and weights."""

    frequencies: np.ndarray  # fraction of labeled points per class, ignore at 0
    median_frequency: float
    exponent: float
    weights: np.ndarray
    ignore_id: int


def compute_class_weights(labels, num_classes: int, exponent: float = 0.25, ignore_id: int = 0) -> LossSpec:
    """Aggregate label counts and derive (f_t/f_c)^i weights.

    ``labels``: iterable of LabelSet, integer arrays, or .label file paths.
    Classes never observed get weight 0.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for item in labels:
        if isinstance(item, LabelSet):
            arr = item.labels
        elif isinstance(item, (str, os.PathLike)):
            arr = read_labels(item, os.path.getsize(item) // 4).labels
        else:
            arr = np.asarray(item).reshape(-1)
        counts += np.bincount(arr.astype(np.int64), minlength=num_classes)[:num_classes]
    counts[ignore_id] = 0
    total = counts.sum()
    if total == 0:
        raise ValueError("no labeled points outside the ignore class")
    freq = counts / total
    nonzero = freq[freq > 0]
    f_t = float(np.median(nonzero))
    with np.errstate(divide="ignore"):
        weights = np.where(freq > 0, (f_t / np.where(freq > 0, freq, 1.0)) ** exponent, 0.0)
    return LossSpec(
        frequencies=freq,
        median_frequency=f_t,
        exponent=exponent,
        weights=weights.astype(np.float64),
        ignore_id=ignore_id,
    )


@dataclass(frozen=True)
class AugmentationConfig:
    rotation_std_deg: float = 40.0
    shift_std: tuple[float, float, float] = (0.35, 0.35, 0.01)
    flip_x: bool = True
    flip_z: bool = True
    drop_max: float = 0.10

    def __post_init__(self):
        if self.rotation_std_deg < 0 or min(self.shift_std) < 0:
            raise ConfigError("augmentation standard deviations must be >= 0")
        if not 0.0 <= self.drop_max < 1.0:
            raise ConfigError("drop_max must lie in [0, 1)")


def augment_scan(
    cloud: PointCloud, labels: LabelSet, cfg: AugmentationConfig, rng: np.random.Generator
) -> tuple[PointCloud, LabelSet]:
    """Random z-rotation, global shift, X/Z sign flips, and point dropping."""
    pts = cloud.points.astype(np.float64).copy()
    angle = rng.normal(0.0, np.radians(cfg.rotation_std_deg))
    c, s = np.cos(angle), np.sin(angle)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    pts[:, 0:3] += rng.normal(0.0, cfg.shift_std, size=3)
    if cfg.flip_x and rng.uniform() < 0.5:
        pts[:, 0] = -pts[:, 0]
    if cfg.flip_z and rng.uniform() < 0.5:
        pts[:, 2] = -pts[:, 2]
    lab = labels.labels
    drop = rng.uniform(0.0, cfg.drop_max)
    n_drop = int(round(drop * len(pts)))
    if n_drop > 0:
        keep = np.ones(len(pts), dtype=bool)
        keep[rng.choice(len(pts), size=n_drop, replace=False)] = False
        pts, lab = pts[keep], lab[keep]
    return (
        PointCloud(pts.astype(np.float32)),
        LabelSet(lab, num_classes=labels.num_classes, ignore_id=labels.ignore_id),
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    lr0: float = 4e-3
    lr_decay: float = 0.99
    momentum: float = 0.9
    seed: int = 0
    augment: AugmentationConfig | None = None
    refresh_bn_stats: bool = True  # settle running stats with final weights
    checkpoint_name: str = "model.ckpt"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


@dataclass
class TrainResult:
    epoch_losses: list[float]
    lrs: list[float]
    checkpoint_path: str | None
    metrics_path: str | None
    val_mious: list[float | None] = field(default_factory=list)


def _load_pair(item) -> tuple[PointCloud, LabelSet]:
    if isinstance(item, tuple) and isinstance(item[0], PointCloud):
        return item
    scan_path, label_path = item
    cloud = read_scan(scan_path)
    labels = read_labels(label_path, len(cloud))
    return cloud, labels


def train(
    dataset,
    model,
    loss_spec: LossSpec,
    tcfg: TrainConfig,
    proj_cfg: ProjectionConfig,
    group_cfg: GroupingConfig = GroupingConfig(),
    out_dir=None,
    val_fn=None,
) -> TrainResult:
    """SGD over the dataset with lr = lr0 * decay^epoch.

    ``dataset``: sequence of (scan_path, label_path) pairs or in-memory
    (PointCloud, LabelSet) tuples. When augmentation is off, projection and
    grouping are computed once per scan and reused across epochs.
    ``val_fn``: optional callable(model, epoch) -> float, logged as val_mIoU.
    Raises RuntimeError with epoch/batch context if the loss diverges to NaN.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    ad.tune_allocator()
    rng = np.random.default_rng(tcfg.seed)
    relative = getattr(model.cfg, "use_relative_features", True)
    ignore = loss_spec.ignore_id
    weights = loss_spec.weights.astype(np.float32)

    scans = [_load_pair(item) for item in dataset]
    cache = None
    if tcfg.augment is None:
        cache = [
            prepare_scan(c, proj_cfg, group_cfg, labels=l, ignore_id=ignore, relative_features=relative)[1:]
            for c, l in scans
        ]

    metrics_path = checkpoint_path = None
    writer = metrics_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        checkpoint_path = os.path.join(out_dir, tcfg.checkpoint_name)
        _write_config_snapshot(os.path.join(out_dir, "config.txt"), tcfg, proj_cfg, group_cfg, loss_spec, model)
        metrics_file = open(metrics_path, "w", newline="")
        writer = csv.writer(metrics_file)
        writer.writerow(["epoch", "lr", "train_loss", "val_mIoU"])

    result = TrainResult(epoch_losses=[], lrs=[], checkpoint_path=checkpoint_path, metrics_path=metrics_path)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]

    def batch_inputs(idx):
        xs, images, targets = [], [], []
        for i in idx:
            if cache is not None:
                x, image, target = cache[i]
            else:
                cloud, labels = augment_scan(*scans[i], tcfg.augment, rng)
                _, x, image, target = prepare_scan(
                    cloud, proj_cfg, group_cfg, labels=labels, ignore_id=ignore, relative_features=relative
                )
            xs.append(x)
            images.append(image)
            targets.append(target)
        return np.stack(xs), np.stack(images), np.stack(targets)

    try:
        for epoch in range(tcfg.epochs):
            lr = tcfg.lr0 * tcfg.lr_decay**epoch
            model.train()
            order = rng.permutation(len(scans))
            total_loss = 0.0
            total_scans = 0
            for b0 in range(0, len(order), tcfg.batch_size):
                idx = order[b0 : b0 + tcfg.batch_size]
                xs, images, targets = batch_inputs(idx)
                logits = model.forward(xs, images)
                loss = ad.weighted_cross_entropy(logits, targets, weights, ignore_id=ignore)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise RuntimeError(f"loss diverged to {value} at epoch {epoch}, batch {b0 // tcfg.batch_size}")
                model.zero_grad()
                loss.backward()
                if tcfg.momentum > 0.0:
                    for p, v in zip(params, velocity):
                        if p.grad is not None:
                            v *= tcfg.momentum
                            v += p.grad
                            p.data -= (lr * v).astype(p.data.dtype)
                else:
                    ad.sgd_step(params, lr)
                total_loss += value * len(idx)
                total_scans += len(idx)
            epoch_loss = total_loss / total_scans
            result.epoch_losses.append(epoch_loss)
            result.lrs.append(lr)
            val = val_fn(model, epoch) if val_fn is not None else None
            result.val_mious.append(val)
            if writer is not None:
                writer.writerow([epoch, f"{lr:.8f}", f"{epoch_loss:.6f}", "" if val is None else f"{val:.6f}"])
                metrics_file.flush()
            if checkpoint_path is not None and epoch != tcfg.epochs - 1:
                save_checkpoint(checkpoint_path, model, epoch=epoch)
        if tcfg.refresh_bn_stats:
            # running statistics trail the weights they were accumulated under;
            # re-estimate them with the final weights as an equal-weight average
            # of the per-batch statistics (momentum 1/t gives a running mean)
            model.train()
            norms = [m for m in model.modules() if hasattr(m, "running_mean") and hasattr(m, "momentum")]
            saved = [m.momentum for m in norms]
            try:
                with ad.no_grad():
                    for t, b0 in enumerate(range(0, len(scans), tcfg.batch_size)):
                        for m in norms:
                            m.momentum = 1.0 / (t + 1)
                        xs, images, _ = batch_inputs(np.arange(b0, min(b0 + tcfg.batch_size, len(scans))))
                        model.forward(xs, images)
            finally:
                for m, mom in zip(norms, saved):
                    m.momentum = mom
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, epoch=tcfg.epochs - 1)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return result


def _write_config_snapshot(path, tcfg, proj_cfg, group_cfg, loss_spec, model):
    """Resolved run configuration as flat key-value text."""
    lines = {
        "epochs": tcfg.epochs,
        "batch_size": tcfg.batch_size,
        "lr0": tcfg.lr0,
        "lr_decay": tcfg.lr_decay,
        "seed": tcfg.seed,
        "augment": tcfg.augment is not None,
        "width": proj_cfg.width,
        "height": proj_cfg.height,
        "fov_up": proj_cfg.fov_up,
        "fov_down": proj_cfg.fov_down,
        "group_k": group_cfg.k,
        "group_stride": group_cfg.stride,
        "loss_exponent": loss_spec.exponent,
        "ignore_id": loss_spec.ignore_id,
        "preset": getattr(model.cfg, "preset", "custom"),
        "num_classes": getattr(model.cfg, "num_classes", ""),
    }
    with open(path, "w") as f:
        for key, value in lines.items():
            f.write(f"{key} {value}\n")
