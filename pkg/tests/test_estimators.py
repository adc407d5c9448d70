import numpy as np
import pytest
from sklearn.base import clone

from nac.data import synthetic_blobs
from nac.estimators import EnvelopeNetClassifier, NACConstructor


@pytest.fixture(scope="module")
def blobs():
    tr = synthetic_blobs(classes=3, n_per_class=20, hw=8, noise_sigma=0.05, seed=0)
    return tr.images, np.array(["a", "b", "c"])[tr.labels]


def test_classifier_fit_predict(blobs):
    X, y = blobs
    clf = EnvelopeNetClassifier("4/1-1/2", epochs=8, batch_size=20, learning_rate=0.05, augment=None)
    clf.fit(X, y)
    assert set(clf.classes_) == {"a", "b", "c"}
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    assert clf.score(X, y) > 0.5
    assert len(clf.history_) == 8


def test_params_clone_round_trip():
    clf = EnvelopeNetClassifier(epochs=3, random_state=9)
    assert clone(clf).get_params() == clf.get_params()
    assert NACConstructor(max_iterations=2).get_params()["max_iterations"] == 2


def test_rejects_flat_input():
    with pytest.raises(ValueError):
        EnvelopeNetClassifier().fit(np.zeros((4, 10)), np.arange(4) % 2)


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        EnvelopeNetClassifier().predict(np.zeros((1, 3, 8, 8)))


def test_constructor_fit(blobs):
    X, y = blobs
    est = NACConstructor("4/2-1/3", max_iterations=2, truncated_epochs=1, stage_construction_mask=(True, False),
                         batch_size=30).fit(X, y)
    assert [s.depth for s in est.architecture_.stages] == [4, 1]
    assert len(est.trace_) == 2 and len(est.stats_) == 2
    assert est.transform() is est.architecture_
