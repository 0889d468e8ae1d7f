"""Fast direct solver updates for locally perturbed 2D Laplace BIEs.

The package solves interior Dirichlet Laplace problems posed as
second-kind boundary integral equations with the double-layer kernel,
compresses the Nystrom system into a hierarchically block separable
(HBS) form, and -- the point of the library -- re-solves on *locally
perturbed* geometries by a low-rank Woodbury update that reuses the
original compressed inverse instead of rebuilding it.

Modules
-------
geometry
    Curves, quadrature discretizations, and perturbed-geometry builders
    (cut a window, glue a new piece): bump circles, nosed squares,
    panel-refined stars.
kernel
    Double-layer kernel assembly, manufactured exterior-charge solutions,
    and boundary data / potential evaluation.
lowrank
    Interpolatory decomposition and proxy-surface block compression.
hbs
    HBS compression of the boundary operator and its direct inversion.
update
    The extended system, low-rank factorization of the update matrix Q,
    and the Woodbury perturbed solver.
oracle
    Dense reference solvers and error metrics, independent of the fast
    path by construction.
bench
    The experiment harness behind the ``perturbfds-bench`` CLI.
"""

from .geometry import (Circle, PerturbedGeometry, StarCurve,
                       circle_with_bump, discretize_panels,
                       discretize_trapezoid, make_perturbation,
                       nose_base_width, rounded_square,
                       rounded_square_with_nose, star_cut_geometry,
                       star_with_refined_panels)
from .hbs import HbsRep, HbsSolver, apply_hbs, compress_hbs, invert_hbs
from .kernel import (assemble_cross, assemble_dense, boundary_data,
                     eval_potential, exact_solution, make_charges,
                     make_targets)
from .lowrank import (compress_block_proxy, interpolatory_decomposition,
                      make_proxy)
from .oracle import (ErrorReport, dense_extended_solve,
                     dense_perturbed_solve, merge_density, optimal_rank,
                     potential_error, relative_error_E, svd_rank)
from .update import (PerturbedSolver, UpdateFactors, assemble_extended_rhs,
                     build_perturbed_solver, factor_update, solve_perturbed)

__version__ = "0.1.0"

__all__ = [
    "Circle", "PerturbedGeometry", "StarCurve", "circle_with_bump",
    "discretize_panels", "discretize_trapezoid", "make_perturbation",
    "nose_base_width", "rounded_square", "rounded_square_with_nose",
    "star_cut_geometry", "star_with_refined_panels",
    "HbsRep", "HbsSolver", "apply_hbs", "compress_hbs", "invert_hbs",
    "assemble_cross", "assemble_dense", "boundary_data", "eval_potential",
    "exact_solution", "make_charges", "make_targets",
    "compress_block_proxy", "interpolatory_decomposition", "make_proxy",
    "ErrorReport", "dense_extended_solve", "dense_perturbed_solve",
    "merge_density", "optimal_rank", "potential_error", "relative_error_E",
    "svd_rank",
    "PerturbedSolver", "UpdateFactors", "assemble_extended_rhs",
    "build_perturbed_solver", "factor_update", "solve_perturbed",
    "__version__",
]
