"""Estimator facade: one object owning model geometry, training, inference.

fit/predict over lists of Bags rather than plain arrays; everything else
follows sklearn conventions (constructor params stored verbatim, fitted
state in trailing-underscore attributes, clone-compatible).
"""

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import interpret, model, train
from .normalizer import FitError
from .topk import TopKConfig


class SIMILClassifier(BaseEstimator, ClassifierMixin):
    """Co-learned dual-branch bag classifier reporting the SI branch."""

    def __init__(self, k=20, sigma=0.05, n_samples=64, hidden_dim=128,
                 attn_dim=64, mixer_layers=4, si_attn_dim=64, lr=2e-4,
                 weight_decay=1e-2, lambda_kd=20.0, epochs=50, ablations=(),
                 validation_fraction=0.2, seed=0):
        self.k = k
        self.sigma = sigma
        self.n_samples = n_samples
        self.hidden_dim = hidden_dim
        self.attn_dim = attn_dim
        self.mixer_layers = mixer_layers
        self.si_attn_dim = si_attn_dim
        self.lr = lr
        self.weight_decay = weight_decay
        self.lambda_kd = lambda_kd
        self.epochs = epochs
        self.ablations = ablations
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise FitError("classifier is not fitted")

    def _configs(self, bags):
        mcfg = model.ModelConfig(
            deep_dim=bags[0].deep.shape[1], path_dim=bags[0].path.shape[1],
            hidden_dim=self.hidden_dim, attn_dim=self.attn_dim,
            mixer_layers=self.mixer_layers, si_attn_dim=self.si_attn_dim,
            topk=TopKConfig(k=self.k, sigma=self.sigma,
                            n_samples=self.n_samples))
        tcfg = train.TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay,
            lambda_kd=self.lambda_kd, epochs=self.epochs, seed=self.seed,
            ablations=tuple(self.ablations))
        return mcfg, tcfg

    def fit(self, bags, y=None):
        """Train on labeled bags; y (0/1 per bag) overrides bag labels."""
        bags = list(bags)
        if y is not None:
            if len(y) != len(bags):
                raise train.DataError(f"{len(y)} labels for {len(bags)} bags")
            bags = [dataclasses.replace(b, label=int(v))
                    for b, v in zip(bags, y)]
        mcfg, tcfg = self._configs(bags)

        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        holdout = max(2, round(1.0 / self.validation_fraction))
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 31)))
        folds = train.stratified_folds([b.label for b in bags], holdout, rng)
        tr_idx, val_idx = folds[0]
        tr = [bags[i] for i in tr_idx]
        val = [bags[i] for i in val_idx]

        self.checkpoint_, self.curve_ = train.train_fold(tr, val, mcfg, tcfg)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, bags):
        self._check_fitted()
        params, cfg = model.unpack_checkpoint(self.checkpoint_)
        p1 = np.array([float(model.forward(params, cfg, b.deep, b.path,
                                           mode="eval").y_f.data)
                       for b in bags])
        return np.column_stack([1.0 - p1, p1])

    def predict(self, bags):
        return (self.predict_proba(bags)[:, 1] >= 0.5).astype(int)

    def score(self, bags, y=None):
        """Accuracy; labels default to the ones carried by the bags."""
        if y is None:
            y = [b.label for b in bags]
        return float(np.mean(self.predict(bags) == np.asarray(y)))

    def evaluate(self, bags):
        self._check_fitted()
        params, cfg = model.unpack_checkpoint(self.checkpoint_)
        return train.evaluate(params, cfg, bags)

    def report(self, bag, feature_names=None):
        """Per-patch, per-feature contribution breakdown for one bag."""
        self._check_fitted()
        return interpret.patch_feature_report(self.checkpoint_, bag,
                                              feature_names)
