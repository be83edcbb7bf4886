"""Convective Cahn-Hilliard equation with dynamic boundary conditions:
simulation, structural diagnostics and optimal velocity control."""

from .grid import FieldPair, Grid, Velocity, build_channel_grid, velocity_from_stream
from .potentials import Potential, PotentialSpec, make_spec
from .state_solver import SolverParams, State, Trajectory, simulate, step

__all__ = [
    "FieldPair", "Grid", "Velocity", "build_channel_grid", "velocity_from_stream",
    "Potential", "PotentialSpec", "make_spec",
    "SolverParams", "State", "Trajectory", "simulate", "step",
]
__version__ = "0.1.0"
