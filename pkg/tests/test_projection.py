import math

import numpy as np
import pytest

from lidarseg.errors import ConfigError
from lidarseg.projection import (
    ProjectionConfig,
    build_range_image,
    export_range_image,
    label_image,
    project_point,
    project_points,
    reproject_labels,
)
from lidarseg.scan_io import LabelSet, PointCloud

CFG = ProjectionConfig.from_degrees(8, 4, 45.0, 45.0)

# analytic cases for the spherical mapping, worked out by hand
ANALYTIC = [
    ((1.0, 0.0, 0.0), (4, 2)),  # straight ahead: mid-azimuth, mid-elevation
    ((0.0, 1.0, 0.0), (2, 2)),  # +90 deg azimuth maps to the left quarter
    ((1.0, 0.0, 1.0), (4, 0)),  # elevation exactly +45 deg: top row
    ((1.0, 0.0, -1.0), (4, 3)),  # elevation exactly -45 deg clips to bottom row
]


@pytest.mark.parametrize("point,expected", ANALYTIC)
def test_analytic_fixtures(point, expected):
    assert project_point(point, CFG) == expected


def oracle_project(point, cfg):
    """Scalar float64 re-evaluation using math, independent of numpy code."""
    x, y, z = (float(c) for c in point[:3])
    r = math.sqrt(x * x + y * y + z * z)
    u = math.floor(0.5 * (1.0 - math.atan2(y, x) / math.pi) * cfg.width)
    v = math.floor((1.0 - (math.asin(z / r) + cfg.fov_up) / cfg.fov) * cfg.height)
    return min(max(u, 0), cfg.width - 1), min(max(v, 0), cfg.height - 1), r


def test_vectorized_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    cfg = ProjectionConfig.from_degrees(512, 64, 15.0, 15.0)
    xyz = rng.normal(scale=10.0, size=(1000, 3))
    u, v, r = project_points(xyz, cfg)
    for i in range(len(xyz)):
        ou, ov, orr = oracle_project(xyz[i], cfg)
        assert (u[i], v[i]) == (ou, ov)
        assert r[i] == pytest.approx(orr, rel=1e-12)


def test_zero_depth_rejected():
    with pytest.raises(ValueError, match="zero depth"):
        project_points(np.array([[1.0, 0, 0], [0, 0, 0]]), CFG)
    with pytest.raises(ValueError):
        project_point((0.0, 0.0, 0.0), CFG)


def test_config_validation():
    with pytest.raises(ConfigError):
        ProjectionConfig(0, 4, 0.1, 0.1)
    with pytest.raises(ConfigError):
        ProjectionConfig(8, 4, -0.1, 0.1)


def test_nearest_point_wins_pixel():
    # both points project to the same pixel; the closer one is representative
    pts = np.array([[2.0, 0, 0, 0.9], [1.0, 0, 0, 0.1]], dtype=np.float32)
    img = build_range_image(PointCloud(pts), CFG)
    assert img.representative[2, 4] == 1
    assert img.features[2, 4, 3] == pytest.approx(1.0)
    assert img.features[2, 4, 4] == pytest.approx(0.1)


def test_depth_tie_goes_to_lowest_index():
    pts = np.array([[1.0, 0, 0, 0.5], [1.0, 0, 0, 0.6]], dtype=np.float32)
    img = build_range_image(PointCloud(pts), CFG)
    assert img.representative[2, 4] == 0


def test_invalid_pixels_are_zero_and_marked():
    pts = np.array([[1.0, 0, 0, 0.5]], dtype=np.float32)
    img = build_range_image(PointCloud(pts), CFG)
    assert img.valid.sum() == 1
    assert (img.representative[~img.valid] == -1).all()
    assert (img.features[~img.valid] == 0).all()


def test_every_point_has_a_pixel():
    rng = np.random.default_rng(3)
    pts = rng.normal(scale=5.0, size=(500, 4)).astype(np.float32)
    cfg = ProjectionConfig.from_degrees(64, 16, 20.0, 20.0)
    img = build_range_image(PointCloud(pts), cfg)
    u, v = img.point_to_pixel[:, 0], img.point_to_pixel[:, 1]
    assert ((u >= 0) & (u < cfg.width) & (v >= 0) & (v < cfg.height)).all()
    # every representative index points back at a point in its own pixel
    reps = img.representative[img.valid]
    flat_rep = img.point_to_pixel[reps, 1] * cfg.width + img.point_to_pixel[reps, 0]
    vv, uu = np.nonzero(img.valid)
    np.testing.assert_array_equal(np.sort(flat_rep), np.sort(vv * cfg.width + uu))


def test_reproject_assigns_pixel_class_to_occluded_points():
    pts = np.array([[2.0, 0, 0, 0.9], [1.0, 0, 0, 0.1], [0, 1.0, 0, 0.2]], dtype=np.float32)
    img = build_range_image(PointCloud(pts), CFG)
    pix = np.zeros((4, 8), dtype=np.int64)
    pix[2, 4] = 3
    pix[2, 2] = 1
    out = reproject_labels(img, pix)
    np.testing.assert_array_equal(out.labels, [3, 3, 1])


def test_label_image_uses_representatives():
    pts = np.array([[2.0, 0, 0, 0.9], [1.0, 0, 0, 0.1]], dtype=np.float32)
    img = build_range_image(PointCloud(pts), CFG)
    labels = LabelSet(np.array([7, 4], dtype=np.uint32))
    li = label_image(img, labels, ignore_id=0)
    assert li[2, 4] == 4  # nearest point's class
    assert (li[~img.valid] == 0).all()


def test_export_range_image(tmp_path):
    pts = np.array([[1.0, 0, 0, 0.5]], dtype=np.float32)
    img = build_range_image(PointCloud(pts), CFG)
    path = tmp_path / "ri.bin"
    export_range_image(img, path)
    raw = np.fromfile(path, dtype="<f4").reshape(4, 8, 5)
    np.testing.assert_array_equal(raw, img.features)
    hdr = (tmp_path / "ri.bin.hdr").read_text()
    assert "width 8" in hdr and "height 4" in hdr
