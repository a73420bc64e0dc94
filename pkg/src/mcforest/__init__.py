"""Modified causal forests for multiple treatments with weights-based inference."""

__version__ = "0.1.0"

from .criterion import CriterionConfig
from .data import DataError, FeatureMeta, Sample, Schema, UnseenCategoryError, load_csv, split_halves
from .estimator import EstimatorSpec, ate, fit, gates, iates, potential_outcomes
from .forest import Forest, ForestConfig, build_forest
from .inference import EffectEstimate

__all__ = [
    "__version__", "CriterionConfig", "DataError", "EffectEstimate", "EstimatorSpec", "FeatureMeta", "Forest",
    "ForestConfig", "Sample", "Schema", "UnseenCategoryError", "ate", "build_forest", "fit", "gates", "iates",
    "load_csv", "potential_outcomes", "split_halves",
]
