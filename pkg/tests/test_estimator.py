import numpy as np
import pytest
from sklearn.base import clone

from lidarseg import synth
from lidarseg.estimator import RangeImageSegmenter
from lidarseg.scan_io import LabelSet

SPEC = synth.SceneSpec(width=64, height=16, seed=0)


@pytest.fixture(scope="module")
def data():
    scans = [synth.generate(SPEC, seed=i) for i in range(4)]
    return [c for c, _ in scans], [l for _, l in scans]


def make(**kw):
    base = dict(width=64, height=16, epochs=2, batch_size=4, preset="tiny", seed=0)
    base.update(kw)
    return RangeImageSegmenter(**base)


def test_get_set_params_round_trip():
    est = make(knn=True, knn_window=5)
    params = est.get_params()
    assert params["knn_window"] == 5
    other = RangeImageSegmenter().set_params(**params)
    assert other.get_params() == params


def test_clone_preserves_params():
    est = make(lr0=0.01)
    assert clone(est).get_params() == est.get_params()


def test_fit_predict_score(data):
    X, y = data
    est = make().fit(X, y)
    preds = est.predict(X)
    assert len(preds) == len(X)
    for cloud, pred in zip(X, preds):
        assert isinstance(pred, LabelSet)
        assert len(pred) == len(cloud)
        assert pred.labels.max() < est.num_classes
    score = est.score(X, y)
    assert 0.0 <= score <= 1.0


def test_predict_before_fit_raises(data):
    with pytest.raises(RuntimeError, match="not fitted"):
        make().predict(data[0])


def test_fit_is_deterministic(data):
    X, y = data
    p1 = make().fit(X, y).predict(X[:1])[0]
    p2 = make().fit(X, y).predict(X[:1])[0]
    np.testing.assert_array_equal(p1.labels, p2.labels)


def test_knn_toggle_runs(data):
    X, y = data
    est = make(knn=True, knn_window=3, knn_k=3).fit(X, y)
    preds = est.predict(X[:1])
    assert len(preds[0]) == len(X[0])


def test_fit_writes_artifacts(data, tmp_path):
    X, y = data
    make().fit(X, y, out_dir=tmp_path)
    assert (tmp_path / "model.ckpt").exists()
    assert (tmp_path / "metrics.csv").exists()
