"""Decile binning followed by z-scoring, the robust feature normalizer.

Fitting stores, per column, the 9 interior decile edges (10th..90th
percentile, linear interpolation) of the training rows plus the mean and
population standard deviation of the *binned* training values.  Applying maps
a value to the count of edges strictly below it (an integer in 0..9) and then
z-scores with the stored moments; columns whose binned training values are
constant map to 0.  The transform is monotone per column and bounded, so
out-of-range inputs saturate instead of exploding.

Deep embedding blocks skip the binning and are z-scored directly
(:func:`zscore_fit` / :func:`zscore_apply`).
"""

from __future__ import annotations

import hashlib

import numpy as np

from sklearn.base import BaseEstimator, TransformerMixin

from .featio import FeatureMatrix, FormatError, dumps_json

MIN_FIT_ROWS = 10
N_EDGES = 9


class FitError(ValueError):
    """Not enough data (or no fit at all) to apply the normalizer."""


def _decile_edges(col):
    return np.percentile(col, np.arange(10, 100, 10), method="linear")


def _bin_one(col, edges):
    # count of edges strictly below each value
    return np.searchsorted(edges, col, side="left").astype(np.float64)


class DecileNormalizer(BaseEstimator, TransformerMixin):
    """sklearn-style transformer; also (de)serializes to a JSON manifest."""

    def __init__(self, columns=None):
        self.columns = columns

    def fit(self, X, y=None):
        X = self._coerce(X, fitting=True)
        n, d = X.shape
        if n < MIN_FIT_ROWS:
            raise FitError(f"need at least {MIN_FIT_ROWS} rows to fit, got {n}")
        if not np.all(np.isfinite(X)):
            raise FitError("training matrix contains non-finite values")
        self.edges_ = np.empty((d, N_EDGES))
        binned = np.empty_like(X)
        for j in range(d):
            self.edges_[j] = _decile_edges(X[:, j])
            binned[:, j] = _bin_one(X[:, j], self.edges_[j])
        self.mean_ = binned.mean(axis=0)
        self.std_ = binned.std(axis=0)
        self.n_features_in_ = d
        self.fingerprint_ = hashlib.sha256(
            X.tobytes() + repr(list(self.columns_ or [])).encode()).hexdigest()
        return self

    def transform(self, X):
        self._check_fitted()
        X = self._coerce(X, fitting=False)
        if X.shape[1] != self.n_features_in_:
            raise FormatError(f"expected {self.n_features_in_} columns, "
                              f"got {X.shape[1]}")
        out = np.empty_like(X)
        for j in range(X.shape[1]):
            b = _bin_one(X[:, j], self.edges_[j])
            if self.std_[j] == 0.0:
                out[:, j] = 0.0
            else:
                out[:, j] = (b - self.mean_[j]) / self.std_[j]
        return out

    def bin_indices(self, X):
        """Integer decile bins (0..9) without the z-scoring step."""
        self._check_fitted()
        X = self._coerce(X, fitting=False)
        return np.stack([_bin_one(X[:, j], self.edges_[j]).astype(int)
                         for j in range(X.shape[1])], axis=1)

    def transform_matrix(self, fm):
        """FeatureMatrix in, normalized FeatureMatrix out, columns checked."""
        self._check_fitted()
        if self.columns_ is not None and fm.columns != tuple(self.columns_):
            raise FormatError("feature matrix columns do not match the "
                              "normalizer manifest")
        return FeatureMatrix(columns=fm.columns, keys=list(fm.keys),
                             values=self.transform(fm.values))

    # -- manifest -----------------------------------------------------------

    def to_manifest(self):
        self._check_fitted()
        return {
            "kind": "decile_normalizer",
            "columns": list(self.columns_) if self.columns_ else None,
            "edges": [[float(v) for v in row] for row in self.edges_],
            "mean": [float(v) for v in self.mean_],
            "std": [float(v) for v in self.std_],
            "fingerprint": self.fingerprint_,
        }

    @classmethod
    def from_manifest(cls, obj):
        if obj.get("kind") != "decile_normalizer":
            raise FormatError("not a decile-normalizer manifest")
        inst = cls(columns=tuple(obj["columns"]) if obj.get("columns") else None)
        inst.edges_ = np.array(obj["edges"], dtype=np.float64)
        inst.mean_ = np.array(obj["mean"], dtype=np.float64)
        inst.std_ = np.array(obj["std"], dtype=np.float64)
        inst.n_features_in_ = inst.edges_.shape[0]
        inst.fingerprint_ = obj.get("fingerprint", "")
        return inst

    # -- helpers ------------------------------------------------------------

    @property
    def columns_(self):
        return tuple(self.columns) if self.columns is not None else None

    def _check_fitted(self):
        if not hasattr(self, "edges_"):
            raise FitError("normalizer is not fitted")

    def _coerce(self, X, fitting):
        if isinstance(X, FeatureMatrix):
            if fitting and self.columns is None:
                self.columns = X.columns
            elif self.columns_ is not None and X.columns != self.columns_:
                raise FormatError("feature matrix columns do not match the "
                                  "normalizer's column list")
            X = X.values
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise FormatError("normalizer expects a 2-D matrix")
        return X


def manifest_fingerprint(manifest):
    return hashlib.sha256(dumps_json(manifest).encode()).hexdigest()


def zscore_fit(X):
    """(mean, std) over rows; std of a constant column is left at 0."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise FitError("need at least 2 rows for z-scoring moments")
    return X.mean(axis=0), X.std(axis=0)


def zscore_apply(X, mean, std):
    X = np.asarray(X, dtype=np.float64)
    out = X - mean[None, :]
    nz = std > 0
    out[:, nz] /= std[None, nz]
    out[:, ~nz] = 0.0
    return out
