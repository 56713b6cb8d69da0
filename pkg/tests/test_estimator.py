import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.utils.estimator_checks import parametrize_with_checks

from mlnt.data import BenchmarkSpec, make_synthetic_benchmark
from mlnt.estimator import MLNTClassifier, PreSoftmaxFeatures
from mlnt.nn import logits


@parametrize_with_checks([
    MLNTClassifier(epochs=2, n_synthetic=2, random_state=0),
    PreSoftmaxFeatures(epochs=2, random_state=0),
])
def test_sklearn_compatible(estimator, check):
    check(estimator)


@pytest.fixture(scope="module")
def blobs():
    train, val, test = make_synthetic_benchmark(BenchmarkSpec(n_train=1200, n_test=600, n_features=6, seed=2))
    names = np.array(["ant", "bee", "cat", "dog"])
    return train.features, names[train.labels], val.features, names[val.labels], test.features, names[test.labels]


def test_fit_predict_with_string_labels(blobs):
    X, y, Xv, yv, Xt, yt = blobs
    clf = MLNTClassifier(epochs=6, n_iterations=2, n_synthetic=3, random_state=1).fit(X, y, Xv, yv)
    assert list(clf.classes_) == ["ant", "bee", "cat", "dog"]
    assert set(clf.predict(Xt)) <= set(clf.classes_)
    assert clf.score(Xt, yt) > 0.85
    proba = clf.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert clf.decision_function(Xt).shape == (len(Xt), 4)
    assert {h["iteration"] for h in clf.history_} == {1, 2} and len(clf.history_) == 12
    assert clf.best_checkpoint_.val_accuracy == max(max(h["val_acc_student"], h["val_acc_teacher"])
                                                    for h in clf.history_ if h["iteration"] == 2)


def test_random_state_determinism(blobs):
    X, y, *_ = blobs
    a = MLNTClassifier(epochs=3, n_iterations=1, n_synthetic=2, random_state=5).fit(X, y)
    b = clone(a).fit(X, y)
    assert a.params_.equals(b.params_)
    c = MLNTClassifier(epochs=3, n_iterations=1, n_synthetic=2, random_state=6).fit(X, y)
    assert not a.params_.equals(c.params_)


def test_unseen_validation_label(blobs):
    X, y, Xv, yv, *_ = blobs
    with pytest.raises(ValueError, match="not seen"):
        MLNTClassifier(epochs=1, n_iterations=1).fit(X, y, Xv, np.where(yv == "ant", "emu", yv))


def test_invalid_hyper_parameter(blobs):
    X, y, *_ = blobs
    with pytest.raises(ValueError, match="relabel_fraction"):
        MLNTClassifier(relabel_fraction=2.0).fit(X, y)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MLNTClassifier().predict(np.zeros((1, 2)))
    with pytest.raises(NotFittedError):
        PreSoftmaxFeatures().transform(np.zeros((1, 2)))


def test_feature_transformer(blobs):
    X, y, _, _, Xt, yt = blobs
    feats = PreSoftmaxFeatures(epochs=4, random_state=0).fit(X, y)
    Z = feats.transform(Xt)
    np.testing.assert_array_equal(Z, logits(feats.spec_, feats.params_, Xt))
    pipe = make_pipeline(PreSoftmaxFeatures(epochs=4, random_state=0), LogisticRegression(max_iter=1000)).fit(X, y)
    assert pipe.score(Xt, yt) > 0.85


def test_classifier_features_match_transformer(blobs):
    X, y, Xv, yv, *_ = blobs
    clf = MLNTClassifier(epochs=3, n_iterations=1, n_synthetic=0, validation_fraction=0.0, random_state=3)
    clf.fit(X, y)
    feats = PreSoftmaxFeatures(epochs=3, random_state=3).fit(X, y)
    assert clf.feature_params_.equals(feats.params_)
