"""Pseudo-spectral Dean-Kawasaki simulation and small-noise large-deviation toolkit."""

__version__ = "0.1.0"

from .interaction import KernelParams
from .noise import MollifierParams, ModeSet, mode_set
from .skeleton import ControlledPath
from .solver import SdeParams, Trajectory, scaling_schedule, simulate, simulate_ensemble
from .spectral import ConfigurationError, Grid

__all__ = [
    "ConfigurationError", "ControlledPath", "Grid", "KernelParams", "ModeSet", "MollifierParams",
    "SdeParams", "Trajectory", "mode_set", "scaling_schedule", "simulate", "simulate_ensemble",
]
