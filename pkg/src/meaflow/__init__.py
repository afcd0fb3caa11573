"""Particle gradient flows for convex optimization over nonnegative measures."""
from .errors import (
    ConfigurationError,
    DimensionError,
    DivergedError,
    InfeasibleSeparationError,
    IntegrationError,
    MeaflowError,
    NonDifferentiableError,
    UnsupportedConfigurationError,
)
from .measures import ParticleMeasure, SignedAtomicMeasure

__version__ = "0.1.0"

__all__ = [
    "ParticleMeasure",
    "SignedAtomicMeasure",
    "ConfigurationError",
    "DimensionError",
    "DivergedError",
    "InfeasibleSeparationError",
    "IntegrationError",
    "MeaflowError",
    "NonDifferentiableError",
    "UnsupportedConfigurationError",
]
