"""Kalman-filter view of training: filters, covariances, stability and Koopman tools."""

from ._core import (
    ConfigError,
    ConvergenceError,
    DefinitenessError,
    DimensionError,
    KflError,
    NonFiniteError,
    SingularError,
    canonical_json,
    config_hash,
    contraction_check,
    dare_solve,
    edmd_fit,
    kalman_filter,
    koopman_spectrum,
    train,
    verify,
)

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "DefinitenessError",
    "DimensionError",
    "KflError",
    "NonFiniteError",
    "SingularError",
    "canonical_json",
    "config_hash",
    "contraction_check",
    "dare_solve",
    "edmd_fit",
    "kalman_filter",
    "koopman_spectrum",
    "train",
    "verify",
]
