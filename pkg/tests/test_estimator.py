import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from salshift import SALClassifier
from salshift.data import PlantedShiftSpec, gen_planted
from salshift.estimator import default_layers

LAYERS = [{"kind": "sal", "out": "classes", "padding": 0}, {"kind": "flatten"}]


@pytest.fixture(scope="module")
def planted3():
    spec = PlantedShiftSpec(C=6, classes=3, seed=4)
    return gen_planted(spec, 600), gen_planted(spec, 300, seed=99)


@pytest.fixture(scope="module")
def fitted(planted3):
    (x, y), _ = planted3
    return SALClassifier(layers=LAYERS, epochs=30, batch_size=32, drop_every=1000).fit(x, y)


def test_learns_planted_three_class_task(fitted, planted3):
    _, (xt, yt) = planted3
    assert fitted.score(xt, yt) == 1.0
    converted = fitted.convert()
    assert converted.converted_ and not fitted.converted_
    assert converted.score(xt, yt) == 1.0


def test_predict_proba_rows_sum_to_one(fitted, planted3):
    _, (xt, _) = planted3
    p = fitted.predict_proba(xt[:10])
    assert p.shape == (10, 3)
    assert np.allclose(p.sum(axis=1), 1)
    assert np.array_equal(p.argmax(axis=1), fitted.predict(xt[:10]))


def test_string_labels_are_mapped_back(planted3):
    (x, y), _ = planted3
    names = np.array(["cat", "dog", "emu"])[y]
    clf = SALClassifier(layers=LAYERS, epochs=1, batch_size=64).fit(x[:128], names[:128])
    assert set(clf.predict(x[:20])) <= {"cat", "dog", "emu"}
    assert list(clf.classes_) == ["cat", "dog", "emu"]


def test_params_and_clone():
    clf = SALClassifier(epochs=3, k=2)
    params = clf.get_params()
    assert params["epochs"] == 3 and params["k"] == 2
    other = clone(clf).set_params(epochs=5)
    assert other.epochs == 5 and clf.epochs == 3


def test_default_layers_use_k():
    assert default_layers(k=2)[0]["k"] == 2
    assert default_layers()[-1]["out"] == "classes"


def test_cost_report(fitted):
    report = fitted.cost_report()
    assert report.params == 3 * 6 * 9
    assert fitted.convert().cost_report().params == 3 * 6


def test_input_validation(fitted, planted3):
    (x, y), _ = planted3
    with pytest.raises(NotFittedError):
        SALClassifier().predict(x)
    with pytest.raises(ValueError, match="n_samples, C, H, W"):
        SALClassifier().fit(x.reshape(len(x), -1), y)
    with pytest.raises(ValueError, match="1-d"):
        SALClassifier().fit(x, y[:-1])
    with pytest.raises(ValueError, match="at least 2 classes"):
        SALClassifier().fit(x[:5], np.zeros(5, int))
    with pytest.raises(ValueError, match="sample shape"):
        fitted.predict(np.zeros((2, 6, 4, 4), np.float32))
    with pytest.raises(ValueError):
        SALClassifier().fit(np.full_like(x, np.nan), y)
    with pytest.raises(ValueError):
        SALClassifier().fit(x, np.linspace(0, 1, len(x)))


def test_fit_is_deterministic(planted3):
    (x, y), _ = planted3
    a = SALClassifier(layers=LAYERS, epochs=1, random_state=3).fit(x, y).decision_function(x[:5])
    b = SALClassifier(layers=LAYERS, epochs=1, random_state=3).fit(x, y).decision_function(x[:5])
    assert np.array_equal(a, b)
