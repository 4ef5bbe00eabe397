"""Linearly implicit energy-preserving integrators for multi-symplectic PDEs
with cubic Hamiltonians, with KdV and Zakharov-Kuznetsov problem packs."""

from .cubic import CubicForm, avf_step, kahan_step
from .experiments import RunConfig, RunReport, bench, converge, run
from .grid import (DiffMatrix, Field, Grid1D, Grid2D, central_diff_matrix, diff_matrix,
                   pseudospectral_diff_matrix)
from .linalg import ConvergenceError, SolverError, SolveStats
from .multisymplectic import (LocalEnergyReport, MSSystem, gep_step, lep_step, ligep_step,
                              lilep_step, local_energy)

__version__ = "0.1.0"

__all__ = [
    "CubicForm", "kahan_step", "avf_step",
    "Grid1D", "Grid2D", "Field", "DiffMatrix", "central_diff_matrix",
    "pseudospectral_diff_matrix", "diff_matrix",
    "SolverError", "ConvergenceError", "SolveStats",
    "MSSystem", "LocalEnergyReport", "lilep_step", "lep_step", "ligep_step", "gep_step",
    "local_energy",
    "RunConfig", "RunReport", "run", "converge", "bench",
]
