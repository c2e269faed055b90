"""scikit-learn wrappers around the network."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from efficientsign.checkpoint import save_checkpoint
from efficientsign.classical import KNearestNeighborsClassifier
from efficientsign.errors import InputError
from efficientsign.estimators import DeepFeatureExtractor, EfficientSignClassifier, check_images


@pytest.fixture(scope="module")
def arrays(small_synth):
    X = np.stack([small_synth.image(i) for i in range(len(small_synth))])
    return X, np.array(small_synth.class_names)[small_synth.labels]


def test_check_images():
    assert check_images(np.zeros((2, 4, 4))).shape == (2, 4, 4, 3)
    assert check_images(np.full((1, 2, 2, 3), 3.4)).dtype == np.uint8
    with pytest.raises(InputError):
        check_images(np.zeros((2, 4, 4, 2)))
    with pytest.raises(InputError):
        check_images(np.full((1, 2, 2, 3), 300.0))


def test_classifier_fit_predict_transform(arrays):
    X, y = arrays
    clf = EfficientSignClassifier(preset="tiny", epochs=4, lr=2e-2, batch_size=16, image_size=32)
    assert clone(clf).get_params() == clf.get_params()
    clf.fit(X, y)
    assert set(clf.predict(X[:10])) <= set(clf.classes_)
    assert clf.score(X, y) > 1 / 8
    assert clf.transform(X[:3]).shape == (3, 64)
    assert len(clf.history_) == 4


def test_classifier_validation_split(arrays):
    X, y = arrays
    clf = EfficientSignClassifier(preset="tiny", epochs=2, lr=2e-2, batch_size=16, image_size=32,
                                  validation_fraction=0.25).fit(X, y)
    # 20 held-out images: accuracies are multiples of 1/20
    for h in clf.history_:
        assert 0 <= h.val_accuracy <= 1 and (h.val_accuracy * 20) == pytest.approx(round(h.val_accuracy * 20))
    assert clf.predict(X[:2]).shape == (2,)


def test_classifier_errors(arrays):
    X, y = arrays
    with pytest.raises(InputError):
        EfficientSignClassifier(preset="tiny").fit(X, y[:-1])
    with pytest.raises(InputError):
        EfficientSignClassifier(preset="tiny").fit(X[:4], ["a"] * 4)


def test_extractor_pipeline(arrays, tmp_path):
    X, y = arrays
    ext = DeepFeatureExtractor(preset="tiny", image_size=32)
    pipe = make_pipeline(ext, KNearestNeighborsClassifier(1)).fit(X, y)
    assert pipe.score(X, y) == 1.0
    feats = ext.transform(X[:4])
    path = save_checkpoint(ext.model_, tmp_path / "m.efsn")
    np.testing.assert_array_equal(DeepFeatureExtractor(checkpoint=str(path), image_size=32).fit().transform(X[:4]),
                                  feats)
