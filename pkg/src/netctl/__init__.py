"""Koopman identification and MPC of stochastic processes on networks."""

from netctl.errors import (
    ConditioningError,
    DivergenceError,
    FitError,
    InfeasibleError,
    IntegrationError,
    NetctlError,
    ParameterError,
    ParseError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConditioningError",
    "DivergenceError",
    "FitError",
    "InfeasibleError",
    "IntegrationError",
    "NetctlError",
    "ParameterError",
    "ParseError",
    "ShapeError",
]
