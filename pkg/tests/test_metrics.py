import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fnfm.errors import ShapeError, UndefinedMetricError
from fnfm.metrics import auc, evaluate_predictions, logloss


def brute_auc(p, y):
    pos = [a for a, t in zip(p, y) if t == 1]
    neg = [a for a, t in zip(p, y) if t == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


class TestLogloss:
    def test_half(self):
        assert logloss([0.5, 0.5], [1, 0]) == pytest.approx(np.log(2), abs=1e-15)

    def test_example(self):
        assert logloss([0.9, 0.1], [1, 0]) == pytest.approx(-np.log(0.9), rel=1e-12)
        assert logloss([0.9, 0.1], [1, 0]) == pytest.approx(0.10536, abs=1e-5)

    def test_clamp(self):
        assert logloss([0.0], [1]) == pytest.approx(-np.log(1e-15), rel=1e-9)
        assert logloss([1.0], [0]) == pytest.approx(34.5388, abs=1e-3)

    def test_errors(self):
        with pytest.raises(ShapeError):
            logloss([0.5], [1, 0])
        with pytest.raises(ShapeError):
            logloss([], [])


class TestAUC:
    def test_separated(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_equal(self):
        assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_ties_counted_half(self):
        p, y = [0.2, 0.5, 0.5, 0.7], [0, 1, 0, 1]
        assert auc(p, y) == pytest.approx(brute_auc(p, y)) == pytest.approx(0.875)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [0, 0])

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.6, 0.9]), st.integers(0, 1)),
                    min_size=2, max_size=40))
    def test_matches_brute_force(self, rows):
        p, y = zip(*rows)
        if len(set(y)) < 2:
            return
        assert auc(p, y) == pytest.approx(brute_auc(p, y), abs=1e-12)

    def test_monotone_transform_invariance(self, rng):
        p, y = rng.random(300), rng.integers(0, 2, 300)
        assert auc(np.log(p / (1 - p)), y) == pytest.approx(auc(p, y), abs=1e-15)
        assert auc(p ** 3, y) == pytest.approx(auc(p, y), abs=1e-15)

    def test_symmetries(self, rng):
        p, y = rng.random(200), rng.integers(0, 2, 200)
        assert auc(1 - p, y) == pytest.approx(1 - auc(p, y), abs=1e-12)
        assert auc(p, 1 - y) == pytest.approx(1 - auc(p, y), abs=1e-12)


class TestReport:
    def test_json_keys(self):
        rep = evaluate_predictions([0.2, 0.7, 0.6], [0, 1, 0], model="FM", split="test")
        d = json.loads(rep.to_json())
        assert list(d) == ["model", "split", "logloss", "auc", "n", "n_pos"]
        assert d["n"] == 3 and d["n_pos"] == 1 and rep.n_neg == 2
        assert d["auc"] == 1.0

    def test_single_class_auc_is_null(self):
        rep = evaluate_predictions([0.2, 0.7], [1, 1])
        assert rep.auc is None
        assert json.loads(rep.to_json())["auc"] is None
