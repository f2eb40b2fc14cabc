"""Numerical laboratory for the Boltzmann to Navier-Stokes to Euler hydrodynamic limit."""
from .velocity_space import VelocityGrid, build_grid, hydro_projection, maxwellian, MaxwellianParams, mu0
from .collision_operator import (CollisionConfig, MaxwellianMixture, apply_Gamma, build_linearized,
                                 burnett_tensor, collide_Q, spectral_gap)
from .spectral_halfspace import NormParams, SpatialGrid, SpectralField, biot_savart
from .ns_vorticity_solver import NSConfig, FlowState, PlanarSeed, build_compatible_data, run_direct
from .hilbert_expansion import ExpansionScales, HilbertBundle, build_f2, kinetic_background
from .kinetic_weights import WeightParams, nu_B
from .euler_reference import kato_functional, maxwellian_distance, run_euler
from .cli_experiments import ExperimentConfig, load_config, main

__version__ = "0.1.0"

__all__ = [
    "VelocityGrid", "build_grid", "hydro_projection", "maxwellian", "MaxwellianParams", "mu0",
    "CollisionConfig", "MaxwellianMixture", "apply_Gamma", "build_linearized", "burnett_tensor", "collide_Q",
    "spectral_gap", "NormParams", "SpatialGrid", "SpectralField", "biot_savart", "NSConfig", "FlowState",
    "PlanarSeed", "build_compatible_data", "run_direct", "ExpansionScales", "HilbertBundle", "build_f2",
    "kinetic_background", "WeightParams", "nu_B", "kato_functional", "maxwellian_distance", "run_euler",
    "ExperimentConfig", "load_config", "main",
]
