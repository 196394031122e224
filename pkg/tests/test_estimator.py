import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mt2st.estimator import MT2STClassifier, MT2STRegressor
from mt2st.tasks import generate_suite


@pytest.fixture(scope="module")
def data():
    s = generate_suite(0, 12, 2, rho=0.9, samples=400, class_counts=3)
    X = s.truth["inputs"]
    order = np.argsort(np.concatenate([s.truth["train_index"], s.truth["validation_index"]]))
    ys = [np.concatenate([t.y_train, t.y_val])[order] for t in s.tasks]
    return X, ys


def test_params_roundtrip_and_clone():
    est = MT2STClassifier(hidden_layer_sizes=(4,), strategy="diminish", eta=0.01, max_steps=10)
    params = est.get_params()
    assert params["strategy"] == "diminish" and params["eta"] == 0.01
    twin = clone(est).set_params(max_steps=20)
    assert twin.max_steps == 20 and est.max_steps == 10


def test_classifier_fit_predict(data):
    X, ys = data
    labels = np.array(["a", "b", "c"])[ys[0]]
    est = MT2STClassifier(hidden_layer_sizes=(8,), max_steps=300, t_switch=150, random_state=1)
    est.fit(X, labels, aux_targets=ys[1:])
    assert list(est.classes_) == ["a", "b", "c"] and est.n_features_in_ == 12
    proba = est.predict_proba(X[:7])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert set(est.predict(X)) <= set(est.classes_)
    assert est.score(X, labels) > 1 / 3 + 0.1
    assert est.transform(X[:5]).shape == (5, 8)
    assert est.history_.switch_step_effective == 150
    assert len(est.cost_model_.c_marginal) == 2


def test_fit_is_deterministic(data):
    X, ys = data
    a = MT2STClassifier(hidden_layer_sizes=(4,), max_steps=40, random_state=3).fit(X, ys[0], ys[1:])
    b = MT2STClassifier(hidden_layer_sizes=(4,), max_steps=40, random_state=3).fit(X, ys[0], ys[1:])
    assert a.params_.flat().tobytes() == b.params_.flat().tobytes()


def test_stl_ignores_aux_targets(data):
    X, ys = data
    kw = dict(hidden_layer_sizes=(4,), max_steps=40, strategy="stl", random_state=0)
    # the aux heads exist but the primary trajectory never sees their gradients
    a = MT2STClassifier(**kw).fit(X, ys[0], ys[1:])
    b = MT2STClassifier(**kw).fit(X, ys[0], [np.zeros(len(X), dtype=int), np.ones(len(X), dtype=int)])
    np.testing.assert_array_equal(a.decision_function(X), b.decision_function(X))


def test_regressor_1d_targets():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 5))
    y = X @ np.array([1.0, -0.5, 0.0, 0.2, 0.0])
    aux = np.column_stack([X[:, 0], X[:, 1] ** 2])
    est = MT2STRegressor(hidden_layer_sizes=(8,), activation="linear", strategy="gradnorm", max_steps=400,
                         learning_rate=0.05).fit(X, y, [aux])
    pred = est.predict(X)
    assert pred.shape == (300,)
    assert est.score(X, y) > 0.9


@pytest.mark.parametrize("strategy", ["stl", "mtl", "diminish", "switch", "gradnorm", "fisher"])
def test_every_strategy_fits(data, strategy):
    X, ys = data
    est = MT2STClassifier(hidden_layer_sizes=(4,), strategy=strategy, max_steps=20).fit(X, ys[0], ys[1:])
    assert len(est.history_.records) == 20


def test_validation_errors(data):
    X, ys = data
    with pytest.raises(NotFittedError):
        MT2STClassifier().predict(X)
    with pytest.raises(ValueError, match="strategy"):
        MT2STClassifier(strategy="pcgrad", max_steps=5).fit(X, ys[0])
    with pytest.raises(ValueError, match="rows"):
        MT2STClassifier(max_steps=5).fit(X, ys[0], [ys[1][:10]])
    est = MT2STClassifier(hidden_layer_sizes=(3,), max_steps=5).fit(X, ys[0])
    with pytest.raises(ValueError, match="features"):
        est.predict(X[:, :4])
