import numpy as np

from lidarseg import synth
from lidarseg.grouping import GroupingConfig
from lidarseg.model import SegmentationNetwork, preset_config
from lidarseg.pipeline import predict_pixels, predict_scan, prepare_scan
from lidarseg.postprocess import KNNConfig

SPEC = synth.SceneSpec(width=64, height=16, seed=0)


def test_prepare_scan_shapes():
    cloud, labels = synth.generate(SPEC, seed=0)
    img, x, image, target = prepare_scan(cloud, SPEC.projection, GroupingConfig(), labels=labels)
    assert x.shape == (11, 16, 16 * 4)
    assert image.shape == (5, 16, 64)
    assert target.shape == (16, 64)
    assert image.dtype == np.float32
    np.testing.assert_array_equal(image[3], img.depth)


def test_prepare_scan_without_labels_or_relative():
    cloud, _ = synth.generate(SPEC, seed=1)
    _, x, _, target = prepare_scan(cloud, SPEC.projection, GroupingConfig(), relative_features=False)
    assert x.shape[0] == 5
    assert target is None


def test_predict_pixels_shape_and_range():
    cloud, _ = synth.generate(SPEC, seed=2)
    net = SegmentationNetwork(preset_config("tiny", num_classes=synth.NUM_CLASSES), seed=0)
    _, x, image, _ = prepare_scan(cloud, SPEC.projection, GroupingConfig())
    pred = predict_pixels(net, x[None], image[None])
    assert pred.shape == (1, 16, 64)
    assert pred.min() >= 0 and pred.max() < synth.NUM_CLASSES


def test_predict_scan_with_and_without_knn():
    cloud, _ = synth.generate(SPEC, seed=3)
    net = SegmentationNetwork(preset_config("tiny", num_classes=synth.NUM_CLASSES), seed=0)
    plain, img, pixels = predict_scan(net, cloud, SPEC.projection, GroupingConfig(),
                                      num_classes=synth.NUM_CLASSES)
    refined, _, pixels2 = predict_scan(net, cloud, SPEC.projection, GroupingConfig(),
                                       knn_cfg=KNNConfig(window=3, k=3), num_classes=synth.NUM_CLASSES)
    assert len(plain) == len(cloud) == len(refined)
    np.testing.assert_array_equal(pixels, pixels2)  # same network output
    # the synthetic scene has one point per pixel, so without occlusion the
    # plain labels come straight from the pixel predictions
    u, v = img.point_to_pixel[:, 0], img.point_to_pixel[:, 1]
    np.testing.assert_array_equal(plain.labels, pixels[v, u])
