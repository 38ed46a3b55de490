"""Self-interpretable MIL over bags of patch features.

A deep attention branch picks which patches matter; an interpretable branch
predicts from handcrafted nuclei features of just those patches, with exact
per-patch, per-feature credit. Includes the feature pipeline, a small
reverse-mode autodiff engine, training/evaluation, reporting, and seeded
synthetic generators.
"""

__version__ = "0.1.0"

from .estimators import SIMILClassifier
from .featio import (Bag, Checkpoint, FeatureMatrix, FormatError, IoError,
                     NucleusTypeSet, PatchBundle, feature_columns)
from .features import extract_feature_matrix, patch_feature_row
from .interpret import (cohort_stats, multivariate_separability,
                        patch_feature_report, univariate_separability)
from .model import ModelConfig, forward, init_params
from .normalizer import DecileNormalizer, FitError
from .synthgen import BagGenConfig, NucleiGenConfig, gen_bags, gen_nuclei_patch
from .train import (CrossValResult, DataError, EvalResult, TrainConfig,
                    cross_validate, evaluate, train_fold)
