"""Interpolatory decomposition and proxy-surface block compression.

A (row) interpolatory decomposition of an m x n matrix W is

    W ~ P @ W[J[:l], :]

where the l skeleton rows J[:l] are actual rows of W and the interpolation
matrix P contains the l x l identity on those rows. It is computed here by
column-pivoted QR on the transpose, with the interpolation coefficients
from a triangular solve; the pivot threshold is relative to the largest
diagonal entry of R.

Off-diagonal interaction blocks A(tau, complement) of the discretized
double-layer operator admit skeletons that can be found without touching
the whole complement: complement points near the cluster tau enter
explicitly, while the far field is replaced by single poles on a proxy
circle around tau. Potentials generated outside the proxy circle are
harmonic inside it, hence representable by a pole basis on the circle, so
the skeleton of the reduced block also compresses the full block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, solve_triangular, svdvals

from .geometry import Discretization
from .kernel import double_layer_kernel, fundamental_solution

PROXY_RADIUS_FACTOR = 1.5
PROXY_COUNT = 75


@dataclass
class IdFactor:
    """Row skeleton W ~ P @ W[J[:rank], :].

    J holds the full pivot order (length m); its first ``rank`` entries are
    the skeleton rows. P is m x rank with P[J[:rank], :] an exact identity.
    """

    P: np.ndarray
    J: np.ndarray
    rank: int

    @property
    def skeleton(self):
        return self.J[:self.rank]


def interpolatory_decomposition(W, eps):
    """Row ID of W with relative pivot tolerance eps.

    Returns an IdFactor with ||W - P @ W[J[:l], :]||_F <= C eps ||W||_F for
    a modest constant C. A zero matrix yields rank 0.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.size == 0:
        raise ValueError(f"need a nonempty matrix, got shape {W.shape}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must be in (0, 1), got {eps}")
    m = W.shape[0]
    # column-pivoted QR of W^T ranks the rows of W by independence
    R, piv = qr(W.T, mode="r", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return IdFactor(P=np.zeros((m, 0)), J=np.asarray(piv), rank=0)
    # QR is an orthogonal transform, so sing. values of R equal those of W;
    # truncating by them matches the SVD eps-rank instead of the looser
    # pivot-magnitude estimate. Clip to the invertible part of R11.
    s = svdvals(R)
    l = int(np.sum(s > eps * s[0]))
    l = min(l, int(np.sum(diag > 1e-15 * diag[0])))
    P = np.zeros((m, l))
    P[piv[:l], :] = np.eye(l)
    if l < m:
        T = solve_triangular(R[:l, :l], R[:l, l:m])
        P[piv[l:m], :] = T.T
    return IdFactor(P=P, J=np.asarray(piv), rank=l)


@dataclass(frozen=True)
class ProxySurface:
    center: np.ndarray
    radius: float
    points: np.ndarray

    @property
    def n_proxy(self):
        return self.points.shape[0]

    def strictly_inside(self, pts):
        d = np.linalg.norm(np.asarray(pts) - self.center, axis=-1)
        # points on the circle count as near (conservative)
        return d <= self.radius


def make_proxy(points, *, factor=PROXY_RADIUS_FACTOR, n_proxy=PROXY_COUNT,
               spacing=None):
    """Proxy circle around a point cluster.

    Center is the center of the cluster's bounding box, radius is
    ``factor`` times the bounding-circle radius, floored at three times the
    local node ``spacing`` so the circle never collapses for degenerate
    (near-coincident) clusters. The floor can only enlarge the circle: a
    proxy smaller than the cluster it encloses would put representation
    poles inside the sources they must represent.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("empty cluster")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    r_tau = float(np.max(np.linalg.norm(pts - center, axis=1)))
    radius = factor * r_tau
    if spacing is not None:
        radius = max(radius, 3.0 * spacing)
    if radius <= 0.0:
        raise ValueError("proxy radius collapsed to zero; pass spacing")
    ang = np.arange(n_proxy) * (2.0 * np.pi / n_proxy)
    circle = center + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    return ProxySurface(center=center, radius=radius, points=circle)


def compress_block_proxy(tau_indices, geometry: Discretization,
                         complement_indices, eps, *, side="row",
                         proxy: ProxySurface | None = None,
                         complement_disc: Discretization | None = None,
                         near_candidates=None):
    """Skeletonize the interaction block between tau and its complement.

    side="row" compresses the rows of A(tau, complement) (incoming field on
    tau): the reduced block pairs the explicit near columns with poles on
    the proxy circle. side="col" compresses the columns of A(complement,
    tau) (outgoing field from tau): the proxy part evaluates tau's weighted
    dipole sources on the circle. side="both" stacks the two reduced blocks
    and returns one skeleton valid for rows and columns simultaneously
    (equal ranks, as the inversion stage requires). The returned IdFactor
    satisfies the block contract against the corresponding full dense
    block(s).

    When the complement lives on a different boundary piece, pass it as
    ``complement_disc``; ``complement_indices`` then index into that
    discretization instead of ``geometry``.

    When the caller has already screened the complement down to the points
    that could lie on or inside the proxy circle (for example against
    precomputed bounding circles), it can pass them as ``near_candidates``
    and set ``complement_indices`` to None: the per-point near test then
    scans only the candidates instead of the whole complement. Candidates
    must be drawn from the complement and must cover every complement
    point on or inside the proxy circle, else far points would be treated
    through an invalid pole representation.
    """
    tau = np.asarray(tau_indices, dtype=int)
    if tau.size == 0:
        raise ValueError("empty cluster")
    other = geometry if complement_disc is None else complement_disc
    if near_candidates is None:
        comp = np.asarray(complement_indices, dtype=int)
        if complement_disc is None and np.intersect1d(tau, comp).size:
            raise ValueError("tau and complement overlap")
        if comp.size == 0:
            m = tau.size
            return IdFactor(P=np.zeros((m, 0)), J=np.arange(m), rank=0)
    else:
        comp = np.asarray(near_candidates, dtype=int)
        if complement_disc is None and np.intersect1d(tau, comp).size:
            raise ValueError("tau and near candidates overlap")

    pts_tau = geometry.nodes[tau]
    if proxy is None:
        spacing = float(np.mean(geometry.weights[tau]))
        proxy = make_proxy(pts_tau, spacing=spacing)
    near = comp[proxy.strictly_inside(other.nodes[comp])]

    def incoming():
        blocks = [fundamental_solution(pts_tau, proxy.points)]
        if near.size:
            src = other.subset(near)
            blocks.insert(0, double_layer_kernel(pts_tau, src.nodes, src.normals)
                          * src.weights[None, :])
        return blocks

    def outgoing():
        # rows are tau's columns in A(complement, tau)
        wts = geometry.weights[tau]
        pole = (double_layer_kernel(proxy.points, pts_tau, geometry.normals[tau])
                * wts[None, :]).T
        blocks = [pole]
        if near.size:
            blocks.insert(0, (double_layer_kernel(other.nodes[near], pts_tau,
                                                  geometry.normals[tau])
                              * wts[None, :]).T)
        return blocks

    if side == "row":
        W = np.hstack(incoming())
    elif side == "col":
        W = np.hstack(outgoing())
    elif side == "both":
        W = np.hstack(incoming() + outgoing())
    else:
        raise ValueError(f"side must be 'row', 'col' or 'both', got {side!r}")
    return interpolatory_decomposition(W, eps)


def dump_skeleton_csv(path, factor: IdFactor):
    """Debug dump of the pivot order and skeleton size."""
    with open(path, "w") as f:
        f.write("position,index,is_skeleton\n")
        for i, j in enumerate(factor.J):
            f.write(f"{i},{int(j)},{int(i < factor.rank)}\n")
