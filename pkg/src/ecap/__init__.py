"""Empirical-Bayes correction of selection bias in probability estimates.

Large collections of estimated probabilities tend to be over-confident at the
extremes: the estimates that look most certain are, on average, the ones that
were pushed furthest by noise. This package estimates the noise structure from
the estimates themselves and returns adjusted probabilities that minimise the
expected squared excess certainty.
"""
from importlib import metadata

from .core import (ConditionalMoments, excess_certainty, expected_ec_loss, h_theta, h_theta_inverse,
                   oracle_adjust, oracle_loss_gap_bound)
from .errors import ConfigurationError, DomainError, EcapError, InsufficientDataError, NumericError
from .estimator import (AdjustedProbability, EcapConfig, EcapModel, MixtureSpec, VarianceFloor, adjust,
                        adjust_array, fit, fit_opt, load_model, save_model)
from .spline import CvConfig, ScoreSplineFit, SplineBasis, build_basis, cross_validate_lambda, fit_g

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "AdjustedProbability", "ConditionalMoments", "ConfigurationError", "CvConfig", "DomainError",
    "EcapConfig", "EcapError", "EcapModel", "InsufficientDataError", "MixtureSpec", "NumericError",
    "ScoreSplineFit", "SplineBasis", "VarianceFloor", "adjust", "adjust_array", "build_basis",
    "cross_validate_lambda", "excess_certainty", "expected_ec_loss", "fit", "fit_g", "fit_opt",
    "h_theta", "h_theta_inverse", "load_model", "oracle_adjust", "oracle_loss_gap_bound", "save_model",
]
