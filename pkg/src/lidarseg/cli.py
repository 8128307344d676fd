"""Command-line entry point: synth / project / train / infer / eval / bench / params.

Configuration precedence is defaults < config file (``--config``, flat
"key value" text) < explicit command-line flags. Every subcommand that takes
``--out`` writes the resolved configuration there.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError
from .evaluation import ConfusionMatrix, STAGE_ORDER, bench, format_bench_report, miou, write_iou_report
from .grouping import GroupingConfig, augment_features, groups_to_network_input, make_groups
from .model import SegmentationNetwork, preset_config
from .nn import load_checkpoint
from .pipeline import predict_scan
from .postprocess import KNNConfig, knn_refine
from .projection import ProjectionConfig, build_range_image, export_range_image, reproject_labels
from .scan_io import read_labels, read_scan, write_predictions
from .synth import NUM_CLASSES, SceneSpec, generate_dataset
from .training import (
    DEFAULT_BATCH_SIZES,
    AugmentationConfig,
    TrainConfig,
    compute_class_weights,
    train,
)

EXIT_OK = 0
EXIT_ERROR = 1  # unexpected failure
EXIT_USAGE = 2  # unparseable arguments (argparse convention)
EXIT_CONFIG = 3  # arguments parsed but semantically invalid
EXIT_MISSING = 4  # referenced file or directory does not exist


def _add_projection_flags(p: argparse.ArgumentParser):
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov-up-deg", type=float, default=15.0)
    p.add_argument("--fov-down-deg", type=float, default=15.0)


def _add_group_flags(p: argparse.ArgumentParser):
    p.add_argument("--k", type=int, default=4, help="grouping window size")
    p.add_argument("--stride", type=int, default=4, help="grouping window stride")


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=["full", "small", "tiny"], default="tiny")
    p.add_argument("--num-classes", type=int, default=NUM_CLASSES)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="flat 'key value' config file; overrides defaults, overridden by flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic ray-cast dataset")
    p.add_argument("--count", type=int, default=10, help="number of scans")
    p.add_argument("--out", required=True)
    _add_projection_flags(p)
    _add_common(p)

    p = sub.add_parser("project", help="project a scan into a range image dump")
    p.add_argument("scan", help=".bin point-cloud file")
    p.add_argument("--out", required=True, help="output range-image path (.bin + .hdr sidecar)")
    _add_projection_flags(p)
    _add_common(p)

    p = sub.add_parser("train", help="train a model on a scan/label directory")
    p.add_argument("--data", required=True, help="directory of paired .bin/.label files")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=None, help="default: per-preset (full 3, small 6, tiny 8)")
    p.add_argument("--lr", type=float, default=0.004)
    p.add_argument("--lr-decay", type=float, default=0.99)
    p.add_argument("--power-i", type=float, default=0.25, help="class-weight smoothing exponent")
    p.add_argument("--ignore-id", type=int, default=0)
    p.add_argument("--augment", action="store_true")
    _add_projection_flags(p)
    _add_group_flags(p)
    _add_model_flags(p)
    _add_common(p)

    p = sub.add_parser("infer", help="predict .label files for scans")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory of .bin files (or a single .bin)")
    p.add_argument("--out", required=True)
    p.add_argument("--knn", action="store_true", help="apply KNN label refinement")
    p.add_argument("--knn-window", type=int, default=7)
    p.add_argument("--knn-k", type=int, default=7)
    p.add_argument("--ignore-id", type=int, default=0)
    _add_projection_flags(p)
    _add_group_flags(p)
    _add_model_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="score predictions against ground truth (mIoU)")
    p.add_argument("--pred", required=True, help="directory of predicted .label files")
    p.add_argument("--truth", required=True, help="directory of ground-truth .label files")
    p.add_argument("--out", help="optional per-class IoU CSV report path")
    p.add_argument("--num-classes", type=int, default=NUM_CLASSES)
    p.add_argument("--ignore-id", type=int, default=0)
    _add_common(p)

    p = sub.add_parser("bench", help="time the non-learning pipeline stages")
    p.add_argument("--scans", type=int, default=8, help="measured scans (plus 2 warm-up)")
    p.add_argument("--knn-window", type=int, default=7)
    p.add_argument("--knn-k", type=int, default=7)
    p.add_argument("--out", help="optional CSV report path")
    _add_projection_flags(p)
    _add_group_flags(p)
    _add_common(p)

    p = sub.add_parser("params", help="print learnable parameter count for a preset")
    p.add_argument("--preset", choices=["full", "small", "tiny"], default="tiny")
    p.add_argument("--num-classes", type=int, default=19, help="benchmark-scale class count")
    _add_common(p)

    return parser


def _apply_config_file(args: argparse.Namespace, parser_defaults: dict, argv: list[str]):
    """Overlay config-file values between defaults and explicit flags."""
    if not getattr(args, "config", None):
        return
    if not os.path.exists(args.config):
        raise FileNotFoundError(args.config)
    explicit = {a.lstrip("-").replace("-", "_").split("=")[0] for a in argv if a.startswith("--")}
    with open(args.config) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"{args.config}:{line_no}: expected 'key value'")
            key, raw = parts[0].replace("-", "_"), parts[1]
            if key not in parser_defaults:
                continue  # snapshots carry extra informational keys
            if key in explicit:
                continue  # flags win over the config file
            default = parser_defaults[key]
            if isinstance(default, bool):
                value = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            elif default is None:  # e.g. --batch, whose default is preset-dependent
                try:
                    value = int(raw)
                except ValueError:
                    value = raw
            else:
                value = raw
            setattr(args, key, value)


def _write_resolved_config(args: argparse.Namespace, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    skip = {"config", "command"}
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as f:
        for key in sorted(vars(args)):
            if key not in skip:
                f.write(f"{key} {getattr(args, key)}\n")


def _proj_cfg(args) -> ProjectionConfig:
    return ProjectionConfig.from_degrees(args.width, args.height, args.fov_up_deg, args.fov_down_deg)


def _scan_pairs(data_dir: str) -> list[tuple[str, str]]:
    names = sorted(n for n in os.listdir(data_dir) if n.endswith(".bin"))
    pairs = []
    for name in names:
        stem = name[:-4]
        label = os.path.join(data_dir, stem + ".label")
        if not os.path.exists(label):
            raise FileNotFoundError(label)
        pairs.append((os.path.join(data_dir, name), label))
    if not pairs:
        raise FileNotFoundError(f"no .bin files in {data_dir}")
    return pairs


# ------------------------------------------------------------------ commands


def _cmd_synth(args) -> int:
    spec = SceneSpec(
        width=args.width, height=args.height, fov_up_deg=args.fov_up_deg,
        fov_down_deg=args.fov_down_deg, seed=args.seed,
    )
    pairs = generate_dataset(args.count, spec, args.out)
    _write_resolved_config(args, args.out)
    print(f"wrote {len(pairs)} scan/label pairs to {args.out}")
    return EXIT_OK


def _cmd_project(args) -> int:
    cloud = read_scan(args.scan)
    img = build_range_image(cloud, _proj_cfg(args))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    export_range_image(img, args.out)
    print(f"projected {len(cloud)} points onto {args.width}x{args.height}; wrote {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    pairs = _scan_pairs(args.data)
    proj = _proj_cfg(args)
    group = GroupingConfig(k=args.k, stride=args.stride)
    cfg = preset_config(args.preset, num_classes=args.num_classes)
    model = SegmentationNetwork(cfg, seed=args.seed)
    loss_spec = compute_class_weights(
        [label for _, label in pairs], args.num_classes, exponent=args.power_i, ignore_id=args.ignore_id
    )
    batch = args.batch if args.batch is not None else DEFAULT_BATCH_SIZES[args.preset]
    tcfg = TrainConfig(
        epochs=args.epochs, batch_size=batch, lr0=args.lr, lr_decay=args.lr_decay,
        seed=args.seed, augment=AugmentationConfig() if args.augment else None,
    )
    _write_resolved_config(args, args.out)
    result = train(pairs, model, loss_spec, tcfg, proj, group, out_dir=args.out)
    print(f"trained {args.epochs} epochs; final loss {result.epoch_losses[-1]:.4f}; "
          f"checkpoint {result.checkpoint_path}")
    return EXIT_OK


def _cmd_infer(args) -> int:
    cfg = preset_config(args.preset, num_classes=args.num_classes)
    model = SegmentationNetwork(cfg, seed=args.seed)
    load_checkpoint(args.checkpoint, model)
    proj = _proj_cfg(args)
    group = GroupingConfig(k=args.k, stride=args.stride)
    knn = KNNConfig(window=args.knn_window, k=args.knn_k) if args.knn else None
    if os.path.isdir(args.data):
        scans = sorted(
            os.path.join(args.data, n) for n in os.listdir(args.data) if n.endswith(".bin")
        )
        if not scans:
            raise FileNotFoundError(f"no .bin files in {args.data}")
    else:
        scans = [args.data]
    os.makedirs(args.out, exist_ok=True)
    _write_resolved_config(args, args.out)
    for path in scans:
        cloud = read_scan(path)
        labels, _, _ = predict_scan(
            model, cloud, proj, group, knn_cfg=knn, num_classes=args.num_classes,
            ignore_id=args.ignore_id, relative_features=cfg.use_relative_features,
        )
        stem = os.path.splitext(os.path.basename(path))[0]
        write_predictions(labels, os.path.join(args.out, stem + ".label"))
    print(f"wrote {len(scans)} prediction files to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    names = sorted(n for n in os.listdir(args.truth) if n.endswith(".label"))
    if not names:
        raise FileNotFoundError(f"no .label files in {args.truth}")
    cm = ConfusionMatrix(args.num_classes, ignore_id=args.ignore_id)
    for name in names:
        pred_path = os.path.join(args.pred, name)
        if not os.path.exists(pred_path):
            raise FileNotFoundError(pred_path)
        truth_path = os.path.join(args.truth, name)
        count = os.path.getsize(truth_path) // 4
        truth = read_labels(truth_path, count)
        pred = read_labels(pred_path, count)
        cm.accumulate(truth, pred)
    per_class, mean = miou(cm)
    for i, iou in enumerate(per_class):
        print(f"class {i}: {'n/a' if iou is None else f'{iou:.4f}'}")
    print(f"mIoU: {mean:.4f}")
    if args.out:
        write_iou_report(args.out, per_class, mean)
    return EXIT_OK


def _cmd_bench(args) -> int:
    ad.tune_allocator()
    spec = SceneSpec(
        width=args.width, height=args.height, fov_up_deg=args.fov_up_deg,
        fov_down_deg=args.fov_down_deg, seed=args.seed,
    )
    proj = _proj_cfg(args)
    group = GroupingConfig(k=args.k, stride=args.stride)
    knn_cfg = KNNConfig(window=args.knn_window, k=args.knn_k)
    from .synth import generate

    clouds = [generate(spec, seed=i)[0] for i in range(args.scans + 2)]
    state: dict = {}

    def s_project(cloud):
        state["img"] = build_range_image(cloud, proj)

    def s_group(cloud):
        state["groups"] = augment_features(make_groups(state["img"], group))
        groups_to_network_input(state["groups"])

    def s_reproject(cloud):
        img = state["img"]
        state["pixels"] = np.zeros((img.config.height, img.config.width), dtype=np.int64)
        reproject_labels(img, state["pixels"], num_classes=NUM_CLASSES)

    def s_knn(cloud):
        knn_refine(cloud, state["img"], state["pixels"], knn_cfg, num_classes=NUM_CLASSES)

    fns = {"project": s_project, "group": s_group, "reproject": s_reproject, "knn": s_knn}
    report = bench(fns, clouds, warmup=2)
    text = format_bench_report(report)
    print(text, end="")
    total = sum(report[s]["median_ms"] for s in fns)
    if total >= 100.0 and args.width == 2048 and args.height == 64:
        print(f"warning: non-learning stages took {total:.1f} ms on a 2048x64 scan (soft target: < 100 ms)",
              file=sys.stderr)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return EXIT_OK


def _cmd_params(args) -> int:
    cfg = preset_config(args.preset, num_classes=args.num_classes)
    model = SegmentationNetwork(cfg, seed=args.seed)
    print(f"{args.preset}: {model.count_parameters()} learnable parameters")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "project": _cmd_project,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "params": _cmd_params,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        defaults = {k: v for k, v in vars(args).items() if k != "command"}
        _apply_config_file(args, defaults, argv)
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"lidarseg: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, FormatError, ValueError) as exc:
        print(f"lidarseg: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - safety net
        print(f"lidarseg: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
