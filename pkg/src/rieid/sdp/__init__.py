"""Convex fitting programs and their solution."""

from .affine import Affine
from .assemble import (
    Decisions,
    FitOptions,
    assemble_equation_error,
    assemble_local,
    bound_block,
    compress_linear,
    extract_model,
)
from .program import SOLVER_ENV, SOLVERS, ConicProgram, Solution, SolverError, solve
from .sos import (
    PolyExpr,
    add_global_monotonicity,
    add_sos,
    add_stability_certificate,
    assemble_global,
    assemble_stability_certificate,
)

__all__ = [
    "Affine", "ConicProgram", "Decisions", "FitOptions", "PolyExpr", "SOLVERS", "SOLVER_ENV", "Solution",
    "SolverError", "add_global_monotonicity", "add_sos", "add_stability_certificate", "assemble_equation_error",
    "assemble_global", "assemble_local", "assemble_stability_certificate", "bound_block", "compress_linear",
    "extract_model", "solve",
]
