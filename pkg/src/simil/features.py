"""Assembly of the full handcrafted feature vector for a patch bundle."""

from __future__ import annotations

import numpy as np

from .featio import FeatureMatrix, feature_columns
from .morphometrics import aggregate_morphometrics
from .spatial import (build_cell_graph, global_heterogeneity,
                      local_heterogeneity, sna_features)


def patch_feature_row(bundle, k=6):
    """Full 43c+31 feature vector in canonical column order."""
    ts = bundle.type_set
    graph = build_cell_graph(bundle, k=k)
    area = float(bundle.intensity.shape[0] * bundle.intensity.shape[1])
    return np.concatenate([
        aggregate_morphometrics(bundle),
        sna_features(graph),
        global_heterogeneity(graph, area, ts),
        local_heterogeneity(graph, ts),
    ])


def extract_feature_matrix(bundles, k=6):
    """Feature matrix over bundles; all bundles must share one type set."""
    bundles = list(bundles)
    if not bundles:
        raise ValueError("no bundles to extract")
    ts = bundles[0].type_set
    for b in bundles:
        if b.type_set != ts:
            raise ValueError("bundles disagree on the nucleus type set")
    columns = feature_columns(ts)
    keys = [(b.slide_id, b.patch_id) for b in bundles]
    values = np.vstack([patch_feature_row(b, k=k) for b in bundles])
    return FeatureMatrix(columns=tuple(columns), keys=keys, values=values)
