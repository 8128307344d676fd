import numpy as np
import pytest

from lidarseg import synth
from lidarseg.errors import ConfigError
from lidarseg.grouping import GroupingConfig
from lidarseg.model import SegmentationNetwork, preset_config
from lidarseg.scan_io import LabelSet, PointCloud
from lidarseg.training import (
    AugmentationConfig,
    TrainConfig,
    augment_scan,
    compute_class_weights,
    train,
)

SPEC = synth.SceneSpec(width=64, height=16, seed=0)


def tiny_dataset(n=4):
    return [synth.generate(SPEC, seed=i) for i in range(n)]


# ------------------------------------------------------------ class weights


def test_equal_frequencies_give_unit_weights():
    labels = LabelSet(np.array([1, 2, 3, 4] * 10, dtype=np.uint32))
    spec = compute_class_weights([labels], 5)
    np.testing.assert_allclose(spec.weights[1:], 1.0)
    assert spec.weights[0] == 0.0  # ignore class


def test_sixteen_times_rarer_class_weight():
    # class 2 is 16x rarer than class 1; median of {16/17, 1/17} is their mean,
    # so use three classes to pin the median on the common frequency
    counts = {1: 160, 2: 10, 3: 160}
    arr = np.concatenate([np.full(n, c, dtype=np.uint32) for c, n in counts.items()])
    spec = compute_class_weights([LabelSet(arr)], 4, exponent=0.25)
    assert spec.weights[1] == pytest.approx(1.0)
    assert spec.weights[2] == pytest.approx(16.0**0.25)  # == 2
    assert spec.weights[2] == pytest.approx(2.0)


def test_median_of_even_class_count_is_midpoint_mean():
    arr = np.concatenate([
        np.full(10, 1, np.uint32), np.full(20, 2, np.uint32),
        np.full(30, 3, np.uint32), np.full(40, 4, np.uint32),
    ])
    spec = compute_class_weights([LabelSet(arr)], 5, exponent=1.0)
    f_t = (20 + 30) / 2 / 100
    assert spec.median_frequency == pytest.approx(f_t)
    assert spec.weights[1] == pytest.approx(f_t / 0.1)


def test_unseen_class_gets_zero_weight():
    spec = compute_class_weights([LabelSet(np.array([1, 1, 2], np.uint32))], 5)
    assert spec.weights[3] == 0.0 and spec.weights[4] == 0.0


def test_all_ignored_raises():
    with pytest.raises(ValueError):
        compute_class_weights([LabelSet(np.zeros(5, np.uint32))], 3)


def test_weights_from_label_files(tmp_path):
    pairs = synth.generate_dataset(2, SPEC, tmp_path)
    from_files = compute_class_weights([l for _, l in pairs], synth.NUM_CLASSES)
    in_memory = compute_class_weights(
        [synth.generate(SPEC, seed=int(s))[1] for s in np.random.SeedSequence(SPEC.seed).generate_state(2)],
        synth.NUM_CLASSES,
    )
    np.testing.assert_allclose(from_files.weights, in_memory.weights)


# ------------------------------------------------------------- augmentation


def test_augmentation_validation():
    with pytest.raises(ConfigError):
        AugmentationConfig(rotation_std_deg=-1)
    with pytest.raises(ConfigError):
        AugmentationConfig(drop_max=1.5)


def test_augment_preserves_depth_under_rotation_only():
    cfg = AugmentationConfig(rotation_std_deg=40, shift_std=(0, 0, 0), flip_x=False, flip_z=False, drop_max=0)
    cloud, labels = tiny_dataset(1)[0]
    rng = np.random.default_rng(0)
    aug, aug_labels = augment_scan(cloud, labels, cfg, rng)
    np.testing.assert_allclose(
        np.linalg.norm(aug.xyz, axis=1), np.linalg.norm(cloud.xyz, axis=1), rtol=1e-5
    )
    np.testing.assert_array_equal(aug_labels.labels, labels.labels)


def test_augment_drop_keeps_labels_aligned():
    cfg = AugmentationConfig(drop_max=0.5)
    cloud, labels = tiny_dataset(1)[0]
    marked = LabelSet(np.arange(len(cloud), dtype=np.uint32) % 5, num_classes=5)
    aug, aug_labels = augment_scan(cloud, marked, cfg, np.random.default_rng(3))
    assert len(aug) == len(aug_labels)
    assert len(aug) < len(cloud)  # seed 3 draws a nonzero drop fraction
    # surviving pairs keep their original label by construction of `marked`
    orig = {tuple(np.round(p, 4)): int(l) for p, l in zip(cloud.points, marked.labels)}
    # the transform is identity only if no rotation/shift/flip; instead check
    # remission (untouched channel) alignment
    rem_to_label = {}
    for p, l in zip(cloud.points, marked.labels):
        rem_to_label.setdefault(np.float32(p[3]), set()).add(int(l))
    for p, l in zip(aug.points, aug_labels.labels):
        assert int(l) in rem_to_label[np.float32(p[3])]


def test_augment_is_seeded():
    cfg = AugmentationConfig()
    cloud, labels = tiny_dataset(1)[0]
    a1, _ = augment_scan(cloud, labels, cfg, np.random.default_rng(7))
    a2, _ = augment_scan(cloud, labels, cfg, np.random.default_rng(7))
    np.testing.assert_array_equal(a1.points, a2.points)


# ------------------------------------------------------------ training loop


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr0=-1.0)


def test_training_reduces_loss_and_writes_artifacts(tmp_path):
    data = tiny_dataset(4)
    loss_spec = compute_class_weights([l for _, l in data], synth.NUM_CLASSES)
    model = SegmentationNetwork(preset_config("tiny", num_classes=synth.NUM_CLASSES), seed=0)
    tcfg = TrainConfig(epochs=5, batch_size=4, lr0=0.01, seed=0)
    result = train(data, model, loss_spec, tcfg, SPEC.projection, GroupingConfig(), out_dir=tmp_path)
    assert result.epoch_losses[-1] < result.epoch_losses[0]
    assert result.lrs[1] == pytest.approx(0.01 * 0.99)
    lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_mIoU"
    assert len(lines) == 6
    assert (tmp_path / "model.ckpt").exists()
    assert "epochs 5" in (tmp_path / "config.txt").read_text()


def test_training_is_deterministic():
    data = tiny_dataset(3)
    loss_spec = compute_class_weights([l for _, l in data], synth.NUM_CLASSES)

    def run():
        model = SegmentationNetwork(preset_config("tiny", num_classes=synth.NUM_CLASSES), seed=1)
        tcfg = TrainConfig(epochs=2, batch_size=2, seed=1)
        train(data, model, loss_spec, tcfg, SPEC.projection)
        return model.state_dict()

    s1, s2 = run(), run()
    for key in s1:
        np.testing.assert_array_equal(s1[key], s2[key])


def test_training_from_files_matches_memory(tmp_path):
    pairs = synth.generate_dataset(2, SPEC, tmp_path)
    data = [synth.generate(SPEC, seed=int(s))[1] for s in np.random.SeedSequence(SPEC.seed).generate_state(2)]
    loss_spec = compute_class_weights(data, synth.NUM_CLASSES)
    model = SegmentationNetwork(preset_config("tiny", num_classes=synth.NUM_CLASSES), seed=0)
    tcfg = TrainConfig(epochs=1, batch_size=2, seed=0)
    result = train(pairs, model, loss_spec, tcfg, SPEC.projection)
    assert np.isfinite(result.epoch_losses[0])


def test_empty_dataset_rejected():
    loss_spec = compute_class_weights([LabelSet(np.array([1, 2], np.uint32))], 3)
    model = SegmentationNetwork(preset_config("tiny", num_classes=3), seed=0)
    with pytest.raises(ValueError, match="empty"):
        train([], model, loss_spec, TrainConfig(epochs=1), SPEC.projection)


def test_divergence_aborts_with_context():
    data = tiny_dataset(2)
    loss_spec = compute_class_weights([l for _, l in data], synth.NUM_CLASSES)
    model = SegmentationNetwork(preset_config("tiny", num_classes=synth.NUM_CLASSES), seed=0)
    # poison a parameter so the forward pass goes non-finite immediately
    model.parameters()[0].data[:] = np.inf
    with pytest.raises(RuntimeError, match="epoch 0"):
        train(data, model, loss_spec, TrainConfig(epochs=1, batch_size=2), SPEC.projection)


def test_augmented_training_runs():
    data = tiny_dataset(2)
    loss_spec = compute_class_weights([l for _, l in data], synth.NUM_CLASSES)
    model = SegmentationNetwork(preset_config("tiny", num_classes=synth.NUM_CLASSES), seed=0)
    tcfg = TrainConfig(epochs=2, batch_size=2, seed=0, augment=AugmentationConfig())
    result = train(data, model, loss_spec, tcfg, SPEC.projection)
    assert len(result.epoch_losses) == 2
    assert all(np.isfinite(result.epoch_losses))


def test_val_fn_is_logged(tmp_path):
    data = tiny_dataset(2)
    loss_spec = compute_class_weights([l for _, l in data], synth.NUM_CLASSES)
    model = SegmentationNetwork(preset_config("tiny", num_classes=synth.NUM_CLASSES), seed=0)
    tcfg = TrainConfig(epochs=2, batch_size=2, seed=0)
    result = train(
        data, model, loss_spec, tcfg, SPEC.projection, out_dir=tmp_path,
        val_fn=lambda m, e: 0.5 + 0.1 * e,
    )
    assert result.val_mious == [0.5, 0.6]
    lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert lines[1].endswith("0.500000") and lines[2].endswith("0.600000")
