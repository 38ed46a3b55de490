"""Estimator facade: sklearn conventions over the bag classifier."""

import numpy as np
import pytest
from sklearn.base import clone

from simil import train
from simil.estimators import SIMILClassifier
from simil.featio import Bag
from simil.normalizer import FitError

FAST = dict(k=3, sigma=0.05, n_samples=8, hidden_dim=8, attn_dim=4,
            mixer_layers=1, si_attn_dim=4, lr=1e-3, epochs=2,
            validation_fraction=0.25, seed=7)


def make_bags(n_per_class, seed, shift=1.5):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(2 * n_per_class):
        label = i % 2
        n = int(rng.integers(8, 12))
        deep = rng.normal(size=(n, 6))
        path = rng.normal(size=(n, 5))
        if label:
            deep[:, :2] += shift
            path[:, :2] += shift
        bags.append(Bag(slide_id=f"s{i:03d}", label=label, deep=deep,
                        path=path))
    return bags


class TestSIMILClassifier:
    def test_fit_predict_shapes(self):
        bags = make_bags(4, seed=0)
        est = SIMILClassifier(**FAST)
        assert est.fit(bags) is est
        proba = est.predict_proba(bags)
        assert proba.shape == (8, 2)
        assert np.allclose(proba.sum(axis=1), 1.0)
        assert np.all((proba >= 0.0) & (proba <= 1.0))
        pred = est.predict(bags)
        assert set(pred) <= {0, 1}
        assert np.array_equal(pred, (proba[:, 1] >= 0.5).astype(int))
        assert list(est.classes_) == [0, 1]

    def test_determinism_and_clone(self):
        bags = make_bags(4, seed=1)
        a = SIMILClassifier(**FAST).fit(bags)
        b = clone(SIMILClassifier(**FAST)).fit(bags)
        assert np.array_equal(a.predict_proba(bags), b.predict_proba(bags))
        assert a.checkpoint_.to_json() == b.checkpoint_.to_json()

    def test_get_params_roundtrip(self):
        est = SIMILClassifier(**FAST)
        params = est.get_params()
        assert params["k"] == 3 and params["epochs"] == 2
        again = SIMILClassifier(**params)
        assert again.get_params() == params

    def test_y_override_is_used(self):
        bags = make_bags(4, seed=2)
        est = SIMILClassifier(**FAST)
        with pytest.raises(train.DataError):
            est.fit(bags, y=[1] * len(bags))  # single class after override
        with pytest.raises(train.DataError):
            est.fit(bags, y=[0, 1])

    def test_unfitted_rejects(self):
        est = SIMILClassifier(**FAST)
        with pytest.raises(FitError):
            est.predict(make_bags(1, seed=3))
        with pytest.raises(FitError):
            est.report(make_bags(1, seed=3)[0])

    def test_score_defaults_to_bag_labels(self):
        bags = make_bags(4, seed=4)
        est = SIMILClassifier(**FAST).fit(bags)
        labels = [b.label for b in bags]
        assert est.score(bags) == est.score(bags, labels)
        assert 0.0 <= est.score(bags) <= 1.0
        flipped = est.score(bags, [1 - v for v in labels])
        assert abs(est.score(bags) + flipped - 1.0) < 1e-12

    def test_report_and_evaluate(self):
        bags = make_bags(4, seed=5)
        est = SIMILClassifier(**FAST).fit(bags)
        rep = est.report(bags[0])
        assert rep.slide_id == bags[0].slide_id
        assert abs(sum(rep.aggregate) + rep.offset - rep.logit) <= 1e-9
        res = est.evaluate(bags)
        assert res.auc is not None and len(res.predictions) == len(bags)

    def test_ablations_forwarded(self):
        bags = make_bags(4, seed=6)
        est = SIMILClassifier(**dict(FAST, ablations=("pathfeat_only",)))
        est.fit(bags)
        assert est.checkpoint_.config["train"]["ablations"] == ["pathfeat_only"]
        assert "mil.proj.w" in est.checkpoint_.params
        assert est.checkpoint_.params["mil.proj.w"].shape[0] == 5  # path width

    def test_bad_validation_fraction(self):
        est = SIMILClassifier(**dict(FAST, validation_fraction=1.5))
        with pytest.raises(ValueError):
            est.fit(make_bags(4, seed=8))

    def test_learns_separable_signal(self):
        bags = make_bags(10, seed=9, shift=3.0)
        test = make_bags(5, seed=10, shift=3.0)
        est = SIMILClassifier(**dict(FAST, epochs=12)).fit(bags)
        assert est.evaluate(test).auc >= 0.9
