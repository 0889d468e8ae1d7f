"""Laplace layer-potential kernels and dense Nystrom assembly.

The interior Dirichlet problem is solved with the double-layer ansatz
u(x) = integral over Gamma of D(x, y) sigma(y) ds(y), whose jump relation
gives the second-kind equation

    -sigma/2 + (D sigma)|_Gamma = g.

Kernels (outward normal nu_y at the source point):

    G(x, y) = -(1/2 pi) log|x - y|
    D(x, y) = (1/2 pi) <x - y, nu_y> / |x - y|^2.

D is smooth along a smooth curve; its coincident limit is -kappa(x)/(4 pi).
The Nystrom matrix therefore has entries A_ij = w_j D(x_i, x_j) off the
diagonal and A_ii = -1/2 + w_i * (-kappa_i/(4 pi)).

Matrices can be written to a simple binary container (two int64 dimensions
followed by the float64 entries in row-major order) or to CSV for small
cases.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import Discretization, winding_number

INV_2PI = 1.0 / (2.0 * np.pi)

# eval_potential flags targets closer to the boundary than this multiple of
# the local node spacing; the plain smooth rule loses accuracy there.
NEAR_FIELD_FACTOR = 5.0


def _pairs(targets, sources):
    trg = np.atleast_2d(np.asarray(targets, dtype=float))
    src = np.atleast_2d(np.asarray(sources, dtype=float))
    diff = trg[:, None, :] - src[None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    return trg, src, diff, r2


def fundamental_solution(targets, sources):
    """G(x, y) = -(1/2 pi) log|x - y| as a (targets, sources) matrix."""
    _, _, _, r2 = _pairs(targets, sources)
    if np.any(r2 == 0.0):
        raise ValueError("coincident target and source point")
    return -0.5 * INV_2PI * np.log(r2)


def double_layer_kernel(targets, sources, normals):
    """D(x, y) = (1/2 pi) <x - y, nu_y> / |x - y|^2 as a matrix."""
    _, _, diff, r2 = _pairs(targets, sources)
    if np.any(r2 == 0.0):
        raise ValueError("coincident target and source point")
    nrm = np.atleast_2d(np.asarray(normals, dtype=float))
    num = diff[..., 0] * nrm[None, :, 0] + diff[..., 1] * nrm[None, :, 1]
    return INV_2PI * num / r2


def diagonal_limit(curvature, weight):
    """Weighted coincident limit of D: w * (-kappa / (4 pi))."""
    return np.asarray(weight) * (-np.asarray(curvature)) * (0.5 * INV_2PI)


def assemble_dense(disc: Discretization, sources: Discretization | None = None,
                   *, same_curve: bool | None = None):
    """Dense Nystrom matrix of the double-layer operator.

    With ``sources`` None (or same_curve True and sources identical) this is
    the self-interaction block: A = -I/2 + weighted kernel with the smooth
    diagonal limit. Otherwise it is the cross block w_j D(x_i, y_j) between
    two disjoint pieces; coincident points are rejected.
    """
    if sources is None:
        same_curve = True
        sources = disc
    elif same_curve is None:
        same_curve = False
    if not same_curve:
        K = double_layer_kernel(disc.nodes, sources.nodes, sources.normals)
        return K * sources.weights[None, :]

    x = disc.nodes
    dx = x[:, None, 0] - x[None, :, 0]
    dy = x[:, None, 1] - x[None, :, 1]
    r2 = dx * dx + dy * dy
    np.fill_diagonal(r2, 1.0)
    A = dx * disc.normals[None, :, 0]
    A += dy * disc.normals[None, :, 1]
    A *= (INV_2PI * disc.weights)[None, :]
    A /= r2
    np.fill_diagonal(A, -0.5 + diagonal_limit(disc.curvatures, disc.weights))
    return A


def assemble_cross(target_points, sources: Discretization):
    """Weighted double-layer block from a source piece to arbitrary targets."""
    K = double_layer_kernel(target_points, sources.nodes, sources.normals)
    return K * sources.weights[None, :]


def eval_potential(targets, disc: Discretization, sigma, *,
                   return_near_mask=False):
    """Evaluate the double-layer potential of density sigma at target points.

    Targets closer to a source node than NEAR_FIELD_FACTOR times that node's
    local spacing are inaccurate under the plain smooth rule; a warning is
    issued and, with ``return_near_mask``, a boolean mask marking the
    affected targets is returned alongside the values.
    """
    trg = np.atleast_2d(np.asarray(targets, dtype=float))
    diff = trg[:, None, :] - disc.nodes[None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    near = np.any(r2 < (NEAR_FIELD_FACTOR * disc.weights[None, :]) ** 2, axis=1)
    if np.any(near):
        warnings.warn(f"{int(near.sum())} target(s) within "
                      f"{NEAR_FIELD_FACTOR:g}x node spacing of the boundary; "
                      "potential values there are unreliable", stacklevel=2)
    if np.any(r2 == 0.0):
        raise ValueError("target coincides with a source node")
    num = diff[..., 0] * disc.normals[None, :, 0] + diff[..., 1] * disc.normals[None, :, 1]
    u = (INV_2PI * num / r2 * disc.weights[None, :]) @ np.asarray(sigma, dtype=float)
    if return_near_mask:
        return u, near
    return u


# ---------------------------------------------------------------------------
# manufactured exact solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChargeSet:
    """Point charges generating an exactly harmonic field in the domain."""

    points: np.ndarray
    strengths: np.ndarray

    def potential(self, x):
        """Sum of charge potentials at the given points."""
        return fundamental_solution(x, self.points) @ self.strengths


def _centroid_circle(disc):
    """Bounding circle centered at the arclength centroid of the boundary."""
    center = (disc.weights[:, None] * disc.nodes).sum(axis=0) / disc.weights.sum()
    radius = float(np.max(np.linalg.norm(disc.nodes - center, axis=1)))
    return center, radius


def make_charges(disc: Discretization, n=10, seed=0):
    """Point charges on twice the bounding circle of the discretization.

    All charge locations are exterior (winding number 0), so their combined
    potential is harmonic inside and furnishes exact Dirichlet data.
    """
    center, radius = _centroid_circle(disc)
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = center + 2.0 * radius * np.column_stack([np.cos(ang), np.sin(ang)])
    strengths = rng.uniform(0.5, 1.5, size=n) * rng.choice([-1.0, 1.0], size=n)
    w = winding_number(disc.nodes, pts)
    if np.any(w != 0):
        raise ValueError("charge placement failed: some charges not exterior")
    return ChargeSet(points=pts, strengths=strengths)


def make_targets(disc: Discretization, n=10, seed=1):
    """Interior evaluation points on half the bounding circle."""
    center, radius = _centroid_circle(disc)
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = center + 0.5 * radius * np.column_stack([np.cos(ang), np.sin(ang)])
    w = winding_number(disc.nodes, pts)
    if np.any(w != 1):
        raise ValueError("target placement failed: some targets not interior")
    return pts


def exact_solution(points, charges: ChargeSet):
    """Exact harmonic potential of the charge set at the given points."""
    return charges.potential(points)


def boundary_data(disc: Discretization, charges: ChargeSet):
    """Dirichlet data on the discretization nodes."""
    return charges.potential(disc.nodes)


# ---------------------------------------------------------------------------
# dense matrix files
# ---------------------------------------------------------------------------

def save_dense(path, A):
    """Binary matrix container: int64 (rows, cols), then float64 row-major."""
    A = np.ascontiguousarray(np.asarray(A, dtype=np.float64))
    if A.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {A.shape}")
    with open(path, "wb") as f:
        np.array(A.shape, dtype=np.int64).tofile(f)
        A.tofile(f)


def load_dense(path):
    with open(path, "rb") as f:
        shape = np.fromfile(f, dtype=np.int64, count=2)
        if shape.size != 2 or np.any(shape < 0):
            raise ValueError(f"{path}: not a dense matrix container")
        A = np.fromfile(f, dtype=np.float64, count=int(shape[0] * shape[1]))
    if A.size != shape[0] * shape[1]:
        raise ValueError(f"{path}: truncated payload")
    return A.reshape(shape[0], shape[1])


def save_dense_csv(path, A, max_entries=250_000):
    A = np.asarray(A, dtype=float)
    if A.size > max_entries:
        raise ValueError(f"matrix too large for CSV export ({A.size} entries); "
                         "use save_dense")
    np.savetxt(path, A, delimiter=",")
