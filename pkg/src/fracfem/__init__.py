"""P1 finite elements for the integral fractional Laplacian.

Semilinear state and adjoint solves, box-constrained optimal control
(piecewise constant and variational discretization) and convergence
studies.  Set ``FRACFEM_NO_JIT=1`` to run the numpy kernels instead of
the numba ones.
"""
from .assembly import (FeSystem, NonlinearityPreset, QuadratureOrders, assemble_load, assemble_mass,
                       assemble_semilinear, assemble_stiffness, build_system, default_orders)
from .bench import ErrorTable, eoc, error_energy, error_l2, getoor, manufactured_control, manufactured_semilinear
from .control import (ControlFieldP0, ImplicitControl, check_optimality, objective, project_box,
                      solve_fully_discrete, solve_variational)
from .fracquad import kernel_constant, singular_pair_rule
from .mesh import (GradingSpec, Interval, Polygon, SimplicialMesh, build_graded, build_quasi_uniform,
                   prolongation, unit_square)
from .pde_solve import StateFieldP1, solve_adjoint, solve_state
from .problem import ProblemSpec, TrackingObjective
from .study import load_config, run_study

__version__ = "0.1.0"

__all__ = [
    "ControlFieldP0", "ErrorTable", "FeSystem", "GradingSpec", "ImplicitControl", "Interval",
    "NonlinearityPreset", "Polygon", "ProblemSpec", "QuadratureOrders", "SimplicialMesh",
    "StateFieldP1", "TrackingObjective", "assemble_load", "assemble_mass", "assemble_semilinear",
    "assemble_stiffness", "build_graded", "build_quasi_uniform", "build_system", "check_optimality",
    "default_orders", "eoc", "error_energy", "error_l2", "getoor", "kernel_constant", "load_config",
    "manufactured_control", "manufactured_semilinear", "objective", "project_box", "prolongation",
    "run_study", "singular_pair_rule", "solve_adjoint", "solve_fully_discrete", "solve_state",
    "solve_variational", "unit_square",
]
