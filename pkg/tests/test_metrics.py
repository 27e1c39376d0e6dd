import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aminetplus.errors import DataError
from aminetplus.metrics import confusion_metrics, evaluate, midranks, roc_auc


def pairwise_auc(scores, labels):
    """O(n^2) oracle: P(pos > neg) + 0.5 P(pos == neg)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_worked_example():
    assert roc_auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75


def test_separated_and_tied():
    assert roc_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 0]) == 0.5


def test_single_class():
    with pytest.raises(DataError, match="single class"):
        roc_auc([0.1, 0.2], [1, 1])


def test_midranks():
    assert midranks([3.0, 1.0, 3.0, 2.0]).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_pairwise_oracle_on_random_sets():
    rng = np.random.default_rng(0)
    for trial in range(300):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        if trial % 2:
            scores = rng.integers(0, 5, size=n) / 4.0  # heavy ties
        else:
            scores = rng.random(n)
        assert abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-5, 5), st.integers(0, 1)), min_size=2, max_size=60),
    st.integers(0, 2**32 - 1),
)
def test_monotone_transform_invariance(pairs, seed):
    scores = np.array([p[0] for p in pairs])
    labels = np.array([p[1] for p in pairs])
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    # random strictly increasing map on the distinct values
    distinct, inverse = np.unique(scores, return_inverse=True)
    steps = np.random.default_rng(seed).random(len(distinct)) + 0.01
    mapped = np.cumsum(steps)[inverse] - 50.0
    assert roc_auc(mapped, labels) == roc_auc(scores, labels)


class TestConfusion:
    def test_no_predicted_positives(self):
        r = confusion_metrics([0.1, 0.2, 0.3], [1, 0, 0])
        assert r.precision == 0.0 and r.recall == 0.0 and r.tp == 0

    def test_all_correct(self):
        r = confusion_metrics([0.9, 0.1], [1, 0])
        assert (r.accuracy, r.precision, r.recall) == (1.0, 1.0, 1.0)

    def test_boundary_is_positive(self):
        assert confusion_metrics([0.5], [1]).tp == 1

    def test_no_positives_recall_zero(self):
        assert confusion_metrics([0.9, 0.1], [0, 0]).recall == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=50), st.floats(0, 1))
    def test_identities(self, pairs, threshold):
        s = [p[0] for p in pairs]
        y = [p[1] for p in pairs]
        r = confusion_metrics(s, y, threshold)
        assert r.tp + r.fp + r.tn + r.fn == len(s)
        assert r.accuracy == (r.tp + r.tn) / len(s)
        assert r.precision == (r.tp / (r.tp + r.fp) if r.tp + r.fp else 0.0)
        assert r.recall == (r.tp / (r.tp + r.fn) if r.tp + r.fn else 0.0)


def test_evaluate_fills_auc_when_defined():
    assert evaluate([0.9, 0.1], [1, 0]).auc == 1.0
    assert evaluate([0.9, 0.1], [1, 1]).auc is None
