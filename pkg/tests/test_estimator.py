"""scikit-learn wrapper behaviour."""
import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from absolutenet import AbsoluteNetClassifier
from absolutenet.estimator import check_epochs


def small(**kw):
    return AbsoluteNetClassifier(epochs=2, batch_size=8, pool_size=5, pool_stride=4, **kw)


def test_params_round_trip():
    est = small(learning_rate=1e-3)
    params = est.get_params()
    assert params["learning_rate"] == 1e-3 and params["pool_size"] == 5
    cloned = clone(est)
    assert cloned.get_params() == params and cloned is not est
    assert est.set_params(epochs=3).epochs == 3


def test_fit_predict(tiny_data):
    X, y = tiny_data
    est = small().fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (len(X), 2)
    np.testing.assert_allclose(proba.sum(1), 1, atol=1e-6)
    assert set(est.predict(X)) <= {0, 1}
    assert est.n_features_in_ == 4 * 30
    assert 0 <= est.score(X, y) <= 1
    assert len(est.report_.history) == 2


def test_string_labels_map_back(tiny_data):
    X, y = tiny_data
    names = np.array(["standard", "deviant"])[y]
    est = small(validation_fraction=0).fit(X, names)
    assert list(est.classes_) == ["deviant", "standard"]
    assert set(est.predict(X)) <= {"deviant", "standard"}


def test_same_seed_same_model(tiny_data):
    X, y = tiny_data
    a, b = small(random_state=3).fit(X, y), small(random_state=3).fit(X, y)
    assert a.predict_proba(X).tobytes() == b.predict_proba(X).tobytes()


def test_not_fitted(tiny_data):
    with pytest.raises(NotFittedError):
        small().predict(tiny_data[0])


def test_rejects_non_binary(tiny_data):
    X, _ = tiny_data
    with pytest.raises(ValueError, match="binary"):
        small().fit(X, np.arange(len(X)) % 3)


def test_rejects_wrong_shape_at_predict(tiny_data):
    X, y = tiny_data
    est = small(validation_fraction=0).fit(X, y)
    with pytest.raises(ValueError, match="channels"):
        est.predict(X[:, :3])


def test_rejects_bad_validation_fraction(tiny_data):
    with pytest.raises(ValueError):
        small(validation_fraction=1.5).fit(*tiny_data)


def test_check_epochs():
    assert check_epochs(np.zeros((2, 3, 4, 1))).shape == (2, 3, 4)
    with pytest.raises(ValueError):
        check_epochs(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        check_epochs(np.full((2, 3, 4), np.nan))
