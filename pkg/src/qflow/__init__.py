"""Husimi Q-function dynamics of open bosonic systems with normalizing flows."""

import jax

# Second derivatives of log-densities are unusable in single precision.
jax.config.update("jax_enable_x64", True)

from qflow.exceptions import (  # noqa: E402
    CutoffError,
    DomainError,
    InvalidConfigurationError,
    NonHermitianGeneratorError,
    QFlowError,
    SingularMetricError,
    StepTooLargeError,
    UnsupportedError,
)

__all__ = [
    "CutoffError",
    "DomainError",
    "InvalidConfigurationError",
    "NonHermitianGeneratorError",
    "QFlowError",
    "SingularMetricError",
    "StepTooLargeError",
    "UnsupportedError",
]
__version__ = "0.1.0"
