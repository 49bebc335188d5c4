"""Dispatch MILP: model assembly, bundled solver, checker, and exporters."""

from .check import check_solution
from .export import export_model, write_lp, write_mps
from .model import (BuildError, ClusterRef, Constraint, DispatchSolution,
                    MilpModel, Mode, VarDef, backup_requirement_rows,
                    build_model, envelope_edges, envelope_value,
                    extract_solution, lower_convex_hull, model_size_formula)
from .solver import (BnBResult, BranchAndBound, InfeasibleError,
                     ScipyLpBackend, SolveLimits, SolverError,
                     exact_backup_fixpoint, solve)

__all__ = [
    "BuildError", "ClusterRef", "Constraint", "DispatchSolution", "MilpModel",
    "Mode", "VarDef", "backup_requirement_rows", "build_model",
    "envelope_edges", "envelope_value", "extract_solution",
    "lower_convex_hull", "model_size_formula", "check_solution",
    "export_model", "write_lp", "write_mps", "BnBResult", "BranchAndBound",
    "InfeasibleError", "ScipyLpBackend", "SolveLimits", "SolverError",
    "exact_backup_fixpoint", "solve",
]
