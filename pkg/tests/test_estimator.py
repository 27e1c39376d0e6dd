import numpy as np
import pytest
from sklearn.base import clone

from aminetplus.bagdata import SynthSpec, synth_generate
from aminetplus.errors import DataError
from aminetplus.estimator import AMINetClassifier
from aminetplus.milnet import load_checkpoint


@pytest.fixture(scope="module")
def data():
    bags = synth_generate(SynthSpec(num_bags=60, positive_rate=0.3, vocab_size=16, num_witness_tokens=2, seed=2))
    return [list(b.tokens) for b in bags], np.array(["neg", "pos"])[[b.label for b in bags]]


def small(**kw):
    base = dict(d_model=8, num_heads=2, fc_dims=(6, 4), batch_size=8, max_epochs=4, validation_fraction=0.25)
    base.update(kw)
    return AMINetClassifier(**base)


def test_params_and_clone():
    est = small(learning_rate=0.01)
    params = est.get_params()
    assert params["learning_rate"] == 0.01 and params["fc_dims"] == (6, 4)
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(num_heads=4)
    assert est.num_heads == 4


def test_fit_predict(data):
    X, y = data
    est = small().fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == (len(X), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(est.predict(X)) <= {"neg", "pos"}
    assert list(est.classes_) == ["neg", "pos"]
    assert 0.0 <= est.score(X, y) <= 1.0


def test_deterministic(data):
    X, y = data
    a = small(random_state=3).fit(X, y).predict_proba(X)
    b = small(random_state=3).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_eval_set(data):
    X, y = data
    est = small().fit(X[:40], y[:40], eval_set=(X[40:], y[40:]))
    assert est.history_.records


def test_attention_weights(data):
    X, y = data
    est = small().fit(X, y)
    weights = est.attention_weights(X[:3])
    for w, bag in zip(weights, X[:3]):
        assert w.shape == (len(bag),)
        assert abs(w.sum() - 1.0) < 1e-12


def test_save(tmp_path, data):
    X, y = data
    est = small().fit(X, y)
    est.save(tmp_path / "m.ckpt")
    assert load_checkpoint(tmp_path / "m.ckpt").vocabulary == est.vocabulary_.tokens


def test_not_fitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        small().predict([["a"]])


@pytest.mark.parametrize(
    "X,y",
    [
        ("abc", [1]),
        ([[]], [1]),
        ([["a"], "b"], [0, 1]),
        ([["a"], [3]], [0, 1]),
        ([["a"], ["b"]], [1, 1]),
        ([["a"], ["b"]], [0, 1, 1]),
        ([], []),
    ],
)
def test_validation(X, y):
    with pytest.raises(DataError):
        small().fit(X, y)


def test_unknown_token_at_predict(data):
    X, y = data
    est = small().fit(X, y)
    with pytest.raises(DataError, match="never-seen"):
        est.predict_proba([["never-seen"]])
