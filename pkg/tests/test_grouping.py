import numpy as np
import pytest

from lidarseg.errors import ConfigError
from lidarseg.grouping import (
    AUGMENTED_CHANNELS,
    GroupingConfig,
    augment_features,
    group_grid_shape,
    groups_to_network_input,
    make_groups,
)
from lidarseg.projection import ProjectionConfig, build_range_image
from lidarseg.scan_io import PointCloud


def dense_image(width=16, height=8, seed=0):
    """Range image with every pixel valid (one synthetic point per pixel)."""
    rng = np.random.default_rng(seed)
    cfg = ProjectionConfig.from_degrees(width, height, 20.0, 20.0)
    u = np.arange(width) + 0.5
    v = np.arange(height) + 0.5
    theta = np.pi * (1.0 - 2.0 * u / width)
    phi = cfg.fov * (1.0 - v / height) - cfg.fov_down
    r = rng.uniform(2.0, 10.0, size=(height, width))
    x = r * np.cos(phi)[:, None] * np.cos(theta)[None, :]
    y = r * np.cos(phi)[:, None] * np.sin(theta)[None, :]
    z = r * np.sin(phi)[:, None] * np.ones((1, width))
    rem = rng.uniform(size=(height, width))
    pts = np.stack([x, y, z, rem], axis=-1).reshape(-1, 4).astype(np.float32)
    img = build_range_image(PointCloud(pts), cfg)
    assert img.valid.all()
    return img


def test_config_validation():
    with pytest.raises(ConfigError):
        GroupingConfig(k=0)
    with pytest.raises(ConfigError):
        GroupingConfig(stride=0)
    with pytest.raises(ConfigError):
        GroupingConfig(padding="reflect")


def test_grid_shape_partition_case():
    assert group_grid_shape(16, 8, GroupingConfig(k=4, stride=4)) == (2, 4)
    assert group_grid_shape(2048, 64, GroupingConfig(k=4, stride=4)) == (16, 512)


def test_grid_shape_rejects_partial_windows_without_padding():
    with pytest.raises(ConfigError):
        group_grid_shape(15, 8, GroupingConfig(k=4, stride=4))


def test_partition_every_pixel_exactly_once():
    img = dense_image(16, 8)
    groups = make_groups(img, GroupingConfig(k=4, stride=4))
    assert groups.group_count == 8 and groups.group_size == 16
    flat = groups.origin[:, :, 1].astype(np.int64) * 16 + groups.origin[:, :, 0]
    counts = np.bincount(flat.reshape(-1), minlength=16 * 8)
    assert (counts == 1).all()


def test_group_features_match_source_pixels():
    img = dense_image(16, 8)
    groups = make_groups(img, GroupingConfig(k=4, stride=4))
    for p in range(groups.group_count):
        for n in range(groups.group_size):
            u, v = groups.origin[p, n]
            np.testing.assert_array_equal(groups.data[p, n], img.features[v, u])


def test_slot_order_is_row_major_within_window():
    img = dense_image(16, 8)
    groups = make_groups(img, GroupingConfig(k=4, stride=4))
    # first group: origins (u, v) enumerate the 4x4 window row by row
    expect = [(u, v) for v in range(4) for u in range(4)]
    assert [tuple(o) for o in groups.origin[0]] == expect


def test_invalid_pixels_become_absent_slots():
    cfg = ProjectionConfig.from_degrees(8, 4, 45.0, 45.0)
    pts = np.array([[1.0, 0, 0, 0.5]], dtype=np.float32)  # only pixel (4, 2) valid
    img = build_range_image(PointCloud(pts), cfg)
    groups = make_groups(img, GroupingConfig(k=4, stride=4))
    assert groups.present.sum() == 1
    absent = ~groups.present
    assert (groups.data[absent] == 0).all()


def test_zero_padding_covers_whole_image():
    img = dense_image(10, 6)
    groups = make_groups(img, GroupingConfig(k=4, stride=4, padding="zero"))
    rows, cols = groups.grid_shape
    assert rows >= 2 and cols >= 3
    flat = set()
    inside = groups.present
    for p in range(groups.group_count):
        for n in range(groups.group_size):
            if inside[p, n]:
                flat.add((int(groups.origin[p, n, 0]), int(groups.origin[p, n, 1])))
    assert len(flat) == 10 * 6


def test_dilation_spreads_window():
    img = dense_image(16, 8)
    cfg = GroupingConfig(k=4, stride=1, dilation=2)
    assert cfg.effective_window == 7
    groups = make_groups(img, cfg)
    assert tuple(groups.origin[0, 1]) == (2, 0)  # second slot two columns over


def augment_oracle(data, present):
    """Loop-based reference for the 5 -> 11 channel augmentation."""
    P, N, _ = data.shape
    out = np.zeros((P, N, AUGMENTED_CHANNELS))
    for p in range(P):
        idx = [n for n in range(N) if present[p, n]]
        if not idx:
            continue
        mean = data[p, idx].astype(np.float64).mean(axis=0)
        for n in idx:
            rel = data[p, n].astype(np.float64) - mean
            for c in range(5):
                out[p, n, 2 * c] = data[p, n, c]
                out[p, n, 2 * c + 1] = rel[c]
            out[p, n, 10] = np.sqrt(np.sum(rel[:3] ** 2))
    return out


def test_augment_features_matches_oracle():
    img = dense_image(16, 8, seed=5)
    groups = make_groups(img, GroupingConfig(k=4, stride=4))
    # knock out some slots to exercise the present mask
    groups.present[0, :3] = False
    groups.data[0, :3] = 0
    aug = augment_features(groups)
    np.testing.assert_allclose(aug.data, augment_oracle(groups.data, groups.present), atol=1e-6)


def test_augment_rejects_wrong_channel_count():
    img = dense_image()
    aug = augment_features(make_groups(img, GroupingConfig()))
    with pytest.raises(ValueError):
        augment_features(aug)


def test_network_input_layout():
    img = dense_image(16, 8)
    groups = augment_features(make_groups(img, GroupingConfig(k=4, stride=4)))
    x = groups_to_network_input(groups)
    assert x.shape == (1, 11, 16, 8)
    assert x.dtype == np.float32
    np.testing.assert_array_equal(x[0, :, 3, 5], groups.data[5, 3])
