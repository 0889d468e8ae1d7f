"""Dense reference solves and error metrics that arbitrate accuracy claims.

Everything here is deliberately slow and simple: the extended system is
assembled entry by entry from the kernel primitives and handed to LAPACK.
Nothing in this module touches the hierarchical compression or the update
factorization, so agreement between the two paths is evidence, not
circularity.

Three oracles live here:

* ``dense_extended_solve`` assembles the full extended system (original
  block, auxiliary cut rows, new-piece block, and the coupling blocks) and
  solves it directly.
* ``dense_perturbed_solve`` assembles the boundary integral equation on the
  perturbed boundary ``Gamma_k + Gamma_p`` from scratch, ignoring the
  extended formulation entirely.
* ``svd_rank`` counts singular values above a threshold, which is how the
  optimal rank of a coupling block is defined.

``relative_error_E`` and ``potential_error`` measure solution quality the
same way throughout the package: relative l2 error of the evaluated
potential against the exact field of a known exterior charge distribution,
sampled at interior target points.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np
from scipy import linalg

from .geometry import PerturbedGeometry
from .kernel import (assemble_cross, assemble_dense, boundary_data,
                     eval_potential, exact_solution, make_targets)

DENSE_CAP = 4000


def _check_cap(n, cap, what):
    if cap is not None and n > cap:
        raise ValueError(f"{what} has size {n}, above the dense cap {cap}; "
                         "raise cap= explicitly if you really want this")


# ---------------------------------------------------------------------------
# extended system, assembled densely
# ---------------------------------------------------------------------------

def assemble_extended_dense(pg: PerturbedGeometry, *, cap=DENSE_CAP):
    """Dense matrix of the extended system in original + piece node order.

    Rows and columns 0..n_o-1 are the original nodes in their original
    order; rows n_o.. are the new piece. Keep rows carry the original
    operator restricted to keep columns plus the coupling to the piece; cut
    rows are the auxiliary equations (original keep columns, the original
    diagonal entry on the cut node itself, coupling to the piece); piece
    rows couple back to the keep nodes only. Cut columns are zero except
    for the retained diagonal.
    """
    _check_cap(pg.n_ext, cap, "extended system")
    disc, piece = pg.original, pg.new_part
    k, c = pg.keep_indices, pg.cut_indices
    n_o, n_p = pg.n_o, pg.n_p
    A_oo = assemble_dense(disc)
    A = np.zeros((pg.n_ext, pg.n_ext))
    A[np.ix_(k, k)] = A_oo[np.ix_(k, k)]
    A[np.ix_(c, k)] = A_oo[np.ix_(c, k)]
    A[c, c] = np.diag(A_oo)[c]
    if n_p:
        p = np.arange(n_o, n_o + n_p)
        A[np.ix_(k, p)] = assemble_cross(disc.nodes[k], piece)
        A[np.ix_(c, p)] = assemble_cross(disc.nodes[c], piece)
        A[np.ix_(p, k)] = assemble_cross(piece.nodes, disc.subset(k))
        A[n_o:, n_o:] = assemble_dense(piece)
    return A


def extended_rhs_dense(pg: PerturbedGeometry, charges):
    """Extended right-hand side: boundary data on keep and piece, zero on cut."""
    f = np.zeros(pg.n_ext)
    f[pg.keep_indices] = boundary_data(pg.keep_part(), charges)
    if pg.n_p:
        f[pg.n_o:] = boundary_data(pg.new_part, charges)
    return f


def dense_extended_solve(pg: PerturbedGeometry, charges, *, cap=DENSE_CAP,
                         return_residual=False):
    """Solve the extended system by dense LU.

    Returns ``(sigma_k, sigma_c, sigma_p)`` in keep / cut / piece order.
    With ``return_residual=True`` a fourth value gives the relative
    residual of the LU solve, which should sit at rounding level.
    """
    A = assemble_extended_dense(pg, cap=cap)
    f = extended_rhs_dense(pg, charges)
    x = linalg.solve(A, f)
    sigma_k = x[pg.keep_indices]
    sigma_c = x[pg.cut_indices]
    sigma_p = x[pg.n_o:]
    if return_residual:
        res = np.linalg.norm(A @ x - f) / max(np.linalg.norm(f), 1e-300)
        return sigma_k, sigma_c, sigma_p, res
    return sigma_k, sigma_c, sigma_p


# ---------------------------------------------------------------------------
# perturbed boundary, assembled from scratch
# ---------------------------------------------------------------------------

def merge_density(pg: PerturbedGeometry, sigma_k, sigma_p=None):
    """Order keep and piece density values to match ``pg.new_discretization()``."""
    if pg.n_p == 0:
        return np.asarray(sigma_k, dtype=float)
    merged = np.concatenate([sigma_k, sigma_p])
    return merged[pg.merge_order()]


def dense_perturbed_solve(pg: PerturbedGeometry, charges, *, cap=DENSE_CAP):
    """Solve the integral equation assembled directly on the perturbed boundary.

    Returns the density in ``pg.new_discretization()`` node order. This path
    never sees the extended formulation, so it checks the formulation
    itself, not just the algebra.
    """
    new_disc = pg.new_discretization()
    _check_cap(new_disc.n, cap, "perturbed boundary system")
    A = assemble_dense(new_disc)
    f = boundary_data(new_disc, charges)
    return linalg.solve(A, f)


def perturbed_residual(pg: PerturbedGeometry, sigma_k, sigma_p, charges, *,
                       cap=DENSE_CAP):
    """Relative residual of (sigma_k, sigma_p) in the directly assembled system."""
    new_disc = pg.new_discretization()
    _check_cap(new_disc.n, cap, "perturbed boundary system")
    A = assemble_dense(new_disc)
    f = boundary_data(new_disc, charges)
    sigma = merge_density(pg, sigma_k, sigma_p)
    return np.linalg.norm(A @ sigma - f) / max(np.linalg.norm(f), 1e-300)


# ---------------------------------------------------------------------------
# rank counting
# ---------------------------------------------------------------------------

def svd_rank(M, eps, *, relative=False):
    """Number of singular values of M above eps.

    The threshold is absolute by default, matching how the optimal rank of
    a coupling block is counted; ``relative=True`` scales it by the largest
    singular value instead. Both readings coincide for blocks with O(1)
    entries.
    """
    M = np.asarray(M)
    if M.size == 0:
        return 0
    s = linalg.svdvals(M)
    thresh = eps * s[0] if relative else eps
    return int(np.count_nonzero(s > thresh))


def dense_block_kc(pg: PerturbedGeometry):
    """The keep-rows-by-cut-columns block of the original operator, densely."""
    if pg.n_c == 0:
        return np.zeros((pg.n_k, 0))
    return assemble_cross(pg.original.nodes[pg.keep_indices], pg.cut_part())


def optimal_rank(pg: PerturbedGeometry, eps):
    """SVD rank of the keep/cut coupling block at an absolute threshold."""
    return svd_rank(dense_block_kc(pg), eps)


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

def relative_error_E(u_exact, u_new):
    """Relative l2 error of u_new against u_exact."""
    u_exact = np.asarray(u_exact, dtype=float)
    u_new = np.asarray(u_new, dtype=float)
    if u_exact.shape != u_new.shape:
        raise ValueError(f"length mismatch: {u_exact.shape} vs {u_new.shape}")
    denom = np.linalg.norm(u_exact)
    if denom == 0:
        raise ValueError("u_exact is identically zero")
    return float(np.linalg.norm(u_new - u_exact) / denom)


def potential_error(pg: PerturbedGeometry, sigma_k, sigma_p, charges, *,
                    n_targets=10, seed=1):
    """Relative error E of the evaluated potential at interior targets.

    The density (sigma_k, sigma_p) is merged into perturbed-boundary order,
    the potential is evaluated at ``n_targets`` interior points, and the
    result is compared against the exact field of the charge set. Assumes
    the perturbed boundary is a closed curve (a cut with no replacement
    piece leaves an open arc, where an interior potential is not defined).
    """
    new_disc = pg.new_discretization()
    sigma = merge_density(pg, sigma_k, sigma_p)
    targets = make_targets(new_disc, n=n_targets, seed=seed)
    u = eval_potential(targets, new_disc, sigma)
    u_exact = exact_solution(targets, charges)
    return relative_error_E(u_exact, u)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass
class ErrorReport:
    """Accuracy and rank summary for one solved instance.

    ``E`` is the relative potential error; ``solve_gap`` compares the fast
    extended solve against the dense one; the residual fields check each
    solve in its own system. Rank fields follow the factorization: ``k0``
    before recompression, ``k`` after, ``k_opt`` from the SVD oracle (with
    ``k_opt_rel`` its relative-threshold variant). Expected ordering is
    k_opt <= k <= k0; ``violations`` reports any breach rather than hiding
    it.
    """

    label: str
    n_o: int
    n_p: int
    n_c: int
    E: float
    solve_gap: float | None = None
    extended_residual: float | None = None
    perturbed_residual: float | None = None
    k0: int | None = None
    k: int | None = None
    k_opt: int | None = None
    k_opt_rel: int | None = None

    def __post_init__(self):
        if self.E < 0:
            raise ValueError("relative error cannot be negative")

    def violations(self):
        """Human-readable list of broken expected orderings (may be empty)."""
        out = []
        if self.k_opt is not None and self.k is not None and self.k < self.k_opt:
            out.append(f"k={self.k} below k_opt={self.k_opt}")
        if self.k is not None and self.k0 is not None and self.k0 < self.k:
            out.append(f"k0={self.k0} below k={self.k}")
        return out

    def to_row(self):
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.6e}"
            return str(v)
        return [fmt(getattr(self, f.name)) for f in fields(self)]


ERROR_REPORT_FIELDS = tuple(f.name for f in fields(ErrorReport))


def write_error_reports(path, reports):
    """Write ErrorReport rows as CSV with a fixed header."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ERROR_REPORT_FIELDS)
        for r in reports:
            w.writerow(r.to_row())
    return path
