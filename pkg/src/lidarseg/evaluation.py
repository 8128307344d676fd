"""Confusion-matrix accumulation, mIoU, and a per-stage timing bench."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .scan_io import LabelSet


@dataclass
class ConfusionMatrix:
    """Nc x Nc count matrix; rows are ground truth, columns predictions."""

    num_classes: int
    ignore_id: int | None = None
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def accumulate(self, truth: LabelSet | np.ndarray, pred: LabelSet | np.ndarray) -> "ConfusionMatrix":
        t = truth.labels if isinstance(truth, LabelSet) else np.asarray(truth)
        p = pred.labels if isinstance(pred, LabelSet) else np.asarray(pred)
        if t.shape != p.shape:
            raise ValueError(f"length mismatch: truth {t.shape} vs pred {p.shape}")
        t = t.reshape(-1).astype(np.int64)
        p = p.reshape(-1).astype(np.int64)
        if self.ignore_id is not None:
            keep = t != self.ignore_id
            t, p = t[keep], p[keep]
        if np.any((t < 0) | (t >= self.num_classes) | (p < 0) | (p >= self.num_classes)):
            raise ValueError("class id out of range")
        np.add.at(self.counts, (t, p), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self


def miou(cm: ConfusionMatrix) -> tuple[list[float | None], float]:
    """Per-class IoU (None where TP+FP+FN == 0, excluded from the mean) and mean."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class: list[float | None] = []
    included = []
    for i in range(cm.num_classes):
        if denom[i] == 0:
            per_class.append(None)
        else:
            iou = float(tp[i] / denom[i])
            per_class.append(iou)
            included.append(iou)
    if not included:
        raise ValueError("no class has any ground truth or prediction")
    return per_class, float(np.mean(included))


def write_iou_report(path, per_class, mean: float):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "iou"])
        for i, iou in enumerate(per_class):
            w.writerow([i, "" if iou is None else f"{iou:.6f}"])
        w.writerow(["mean", f"{mean:.6f}"])


# --------------------------------------------------------------------- bench


STAGE_ORDER = ("project", "group", "forward", "reproject", "knn")


def bench(stage_fns: dict, scans, warmup: int = 2) -> dict:
    """Time each pipeline stage per scan.

    ``stage_fns`` maps stage name -> callable(scan) (stages may carry state via
    closures); ``scans`` is the input sequence, the first ``warmup`` of which
    are excluded from statistics. Returns {stage: {"median_ms", "p95_ms"}} plus
    an "end_to_end" entry with scans/second.
    """
    if len(scans) <= warmup:
        raise ValueError(f"need more than {warmup} scans for warm-up plus measurement")
    times: dict[str, list[float]] = {name: [] for name in stage_fns}
    totals: list[float] = []
    for i, scan in enumerate(scans):
        t_start = time.perf_counter()
        for name, fn in stage_fns.items():
            t0 = time.perf_counter()
            fn(scan)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times[name].append(dt * 1000.0)
        if i >= warmup:
            totals.append(time.perf_counter() - t_start)
    report = {
        name: {
            "median_ms": float(np.median(ts)),
            "p95_ms": float(np.percentile(ts, 95)),
        }
        for name, ts in times.items()
    }
    report["end_to_end"] = {
        "median_ms": float(np.median(totals) * 1000.0),
        "p95_ms": float(np.percentile(totals, 95) * 1000.0),
        "scans_per_second": float(1.0 / np.median(totals)),
    }
    return report


def format_bench_report(report: dict) -> str:
    """CSV text: stage, median_ms, p95_ms (scans/second in a trailing row)."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["stage", "median_ms", "p95_ms"])
    for stage, row in report.items():
        if stage == "end_to_end":
            continue
        w.writerow([stage, f"{row['median_ms']:.3f}", f"{row['p95_ms']:.3f}"])
    e2e = report["end_to_end"]
    w.writerow(["end_to_end", f"{e2e['median_ms']:.3f}", f"{e2e['p95_ms']:.3f}"])
    w.writerow(["scans_per_second", f"{e2e['scans_per_second']:.3f}", ""])
    return buf.getvalue()


def parse_bench_report(text: str) -> dict:
    """Inverse of :func:`format_bench_report` (round-trip tested)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["stage", "median_ms", "p95_ms"]:
        raise ValueError("not a bench report")
    report: dict = {}
    for row in rows[1:]:
        if row[0] == "scans_per_second":
            report.setdefault("end_to_end", {})["scans_per_second"] = float(row[1])
        elif row[0] == "end_to_end":
            report.setdefault("end_to_end", {}).update(
                {"median_ms": float(row[1]), "p95_ms": float(row[2])}
            )
        else:
            report[row[0]] = {"median_ms": float(row[1]), "p95_ms": float(row[2])}
    return report
