"""Confounded domain adaptation.

Learn an affine or location-scale map that makes the source domain's
feature distribution, conditional on a set of confounders, match the target
domain's.
"""

from .core import (
    CATEGORICAL,
    CONTINUOUS,
    FULL_AFFINE,
    LOCATION_SCALE,
    METHODS,
    AffineMap,
    CondoError,
    DataError,
    Dataset,
    DegenerateProblem,
    DegenerateWeights,
    DimensionMismatch,
    FitConfig,
    FitReport,
    InvalidArgument,
    NonConvergence,
    NonPositiveDeterminant,
    NumericalError,
    NumericalFailure,
    ParseError,
    SchemaMismatch,
    SingularCovariance,
    SingularMatrix,
    UnknownCategory,
    ValidationError,
    apply_map,
    deserialize_model,
    serialize_model,
)
from .metrics import fixed_classifier_accuracy, rmse, silhouette
from .simgen import SCENARIOS, Scenario, ScenarioSpec, generate
from .solver import fit, fit_condo_kl, fit_condo_mmd, fit_gaussian_ot, fit_plain_mmd, gaussian_ot_map

__version__ = "0.1.0"

__all__ = [
    "CATEGORICAL",
    "CONTINUOUS",
    "FULL_AFFINE",
    "LOCATION_SCALE",
    "METHODS",
    "AffineMap",
    "CondoError",
    "DataError",
    "Dataset",
    "DegenerateProblem",
    "DegenerateWeights",
    "DimensionMismatch",
    "FitConfig",
    "FitReport",
    "InvalidArgument",
    "NonConvergence",
    "NonPositiveDeterminant",
    "NumericalError",
    "NumericalFailure",
    "ParseError",
    "SchemaMismatch",
    "SingularCovariance",
    "SingularMatrix",
    "UnknownCategory",
    "ValidationError",
    "apply_map",
    "deserialize_model",
    "serialize_model",
    "fixed_classifier_accuracy",
    "rmse",
    "silhouette",
    "SCENARIOS",
    "Scenario",
    "ScenarioSpec",
    "generate",
    "fit",
    "fit_condo_kl",
    "fit_condo_mmd",
    "fit_gaussian_ot",
    "fit_plain_mmd",
    "gaussian_ot_map",
]
