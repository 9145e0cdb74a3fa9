"""Quantum gate optimization through models of classical control hardware."""

from .quantum import (
    ControlProblem,
    DimensionError,
    DistortedPulse,
    Pulse,
    ValidationError,
    fidelity,
    fidelity_gradient,
    matrix_exp_skew_hermitian,
    propagators,
)

__version__ = "0.1.0"

__all__ = [
    "ControlProblem",
    "DimensionError",
    "DistortedPulse",
    "Pulse",
    "ValidationError",
    "fidelity",
    "fidelity_gradient",
    "matrix_exp_skew_hermitian",
    "propagators",
]
