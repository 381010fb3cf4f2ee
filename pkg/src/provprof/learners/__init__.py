"""Regression and multiclass-probability learners with convex stacking."""
from .base import (IDENTITY, KINDS, LOGIT, FittedClassifier, FittedRegressor, LearnerError,
                   LearnerSpec, fit_classifier, fit_regressor)
from .stacking import (LOG, SQUARED, EnsembleSpec, fit_ensemble_classifier,
                       fit_ensemble_regressor, simplex_weights, stack_classifier,
                       stack_regressor)

__all__ = [
    "IDENTITY", "KINDS", "LOGIT", "LOG", "SQUARED",
    "FittedClassifier", "FittedRegressor", "LearnerError", "LearnerSpec", "EnsembleSpec",
    "fit_classifier", "fit_regressor", "stack_classifier", "stack_regressor",
    "fit_ensemble_classifier", "fit_ensemble_regressor", "simplex_weights",
]
