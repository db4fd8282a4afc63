"""Spectral Galerkin solver and verification harness for the 3D globally
modified stochastic Navier-Stokes equations with transport noise."""

__version__ = "0.1.0"

from .spectral import (  # noqa: F401
    ModeSet,
    SpectralVelocity,
    advect,
    duality_pairing,
    fractional_laplacian,
    leray_project,
    mode_set,
    nonlinear_term,
    random_field,
    single_mode_field,
    sobolev_norm,
)
