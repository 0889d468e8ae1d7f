"""Low-rank update factorization and the fast solver for perturbed geometries.

The boundary after a local perturbation is the original curve minus a cut
arc, plus a replacement piece. Rather than discarding the compressed
original operator, the solver writes the perturbed system as an extension
of it. With the original index set split into keep (k) and cut (c) rows and
the replacement piece appended as p rows, the extended matrix in original
index order is

    A_ext = A_tilde + Q,

where A_tilde = blkdiag(A_oo, A_pp) reuses the already-compressed original
operator, and Q removes the couplings into the cut while wiring in the new
piece. Q has low numerical rank away from the perturbation and factors as
Q = L R with k = k_kc + N_c + k_pk + k_op columns, grouped in that order:

    rows I_k:  [-L_kc |   0   |  0   | L_op rows]
    rows I_c:  [  0   | -B_cc |  0   | L_op rows]     (L columns)
    rows  p:   [  0   |   0   | L_pk |    0     ]

    rows kc:   R_kc   at I_c columns
    rows cc:   I      at I_c columns                  (R rows)
    rows pk:   R_pk   at I_k columns
    rows op:   R_op   at the p columns

B_cc is the cut-cut block with its diagonal zeroed, so the c rows of the
extended system reduce to A_ck sigma_k + diag(A_cc) sigma_c + A_cp sigma_p
= 0, making sigma_c a well-determined auxiliary variable with zero data.

The factorizations of A_kc, A_op and A_pk reuse the interpolation factors
of the compressed original operator wherever a tree box sits entirely away
from the perturbation, compress the few remaining boxes freshly against
the new piece, and shrink the stacked skeletons by sequential pairwise
recompression. The solve applies the Woodbury identity

    x = A_tilde^-1 b - A_tilde^-1 L (I + R A_tilde^-1 L)^-1 R A_tilde^-1 b

with the minus sign of the standard identity (validated against the dense
extended solve).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve

from .geometry import Discretization, PerturbedGeometry
from .hbs import LEAF_CAP, HbsRep, HbsSolver, apply_inverse, build_tree
from .kernel import assemble_cross, assemble_dense
from .lowrank import IdFactor, compress_block_proxy, interpolatory_decomposition, make_proxy

logger = logging.getLogger(__name__)

__all__ = [
    "UpdateFactors",
    "PerturbedSolver",
    "assemble_extended_rhs",
    "factor_A_kc",
    "recompress",
    "factor_near_block",
    "factor_A_op",
    "factor_A_pk",
    "assemble_Q",
    "factor_update",
    "build_perturbed_solver",
    "solve_perturbed",
    "save_perturbed_solver",
    "load_perturbed_solver",
]


# ----------------------------------------------------------------------
# reuse of the compressed original operator


def _expanded_interp(rep: HbsRep, tau: int, cache: dict) -> np.ndarray:
    """Interpolation matrix from a box's skeleton to all points it owns.

    Telescopes U_tau = blkdiag(U_s1, U_s2) @ P_tau down to the leaves. The
    result has one row per point of the box (in index order) and one column
    per skeleton node, and reproduces any block A(I_tau, far columns) from
    its skeleton rows.
    """
    hit = cache.get(tau)
    if hit is not None:
        return hit
    tree = rep.tree
    U = rep.nodes[tau].U
    if tree.is_leaf(tau):
        out = U
    else:
        c1, c2 = tree.children(tau)
        E1 = _expanded_interp(rep, c1, cache)
        E2 = _expanded_interp(rep, c2, cache)
        k1 = E1.shape[1]
        out = np.vstack([E1 @ U[:k1], E2 @ U[k1:]])
    cache[tau] = out
    return out


def _box_proxy(rep: HbsRep, tau: int):
    """The proxy circle a box was compressed against, reconstructed.

    A box's stored interpolation factor is only valid for source points
    outside this circle (plus the explicit near columns it saw, which all
    lay on the original curve). Reuse against a new piece therefore
    requires the piece to stay outside.
    """
    tree = rep.tree
    disc = rep.disc
    if tree.is_leaf(tau):
        owned = tree.indices(tau)
    else:
        c1, c2 = tree.children(tau)
        owned = np.concatenate([rep.nodes[c1].row_skel, rep.nodes[c2].row_skel])
    return make_proxy(disc.nodes[owned],
                      spacing=float(np.mean(disc.weights[owned])))


def _cover_outside_range(tree, c0: int, c1: int):
    """Maximal boxes fully outside [c0, c1) plus the straddling leaves.

    Returned in ascending index order as (tau, fully_outside) pairs; boxes
    fully inside the range are dropped.
    """
    out = []
    stack = [1]
    while stack:
        tau = stack.pop()
        a, b = tree.start[tau], tree.stop[tau]
        if a >= c0 and b <= c1:
            continue
        if b <= c0 or a >= c1:
            out.append((tau, True))
        elif tree.is_leaf(tau):
            out.append((tau, False))
        else:
            c_lo, c_hi = tree.children(tau)
            stack.append(c_hi)
            stack.append(c_lo)
    return out


# ----------------------------------------------------------------------
# recompression


def recompress(skeletons, row_accessor, eps):
    """Shrink stacked box skeletons by sequential pairwise merging.

    ``row_accessor(indices)`` must return the corresponding rows of the
    block being factored; the column count is small by construction (the
    cut or the new piece), so each merge skeletonizes actual rows. Every
    step stacks the accumulated skeleton with the next box's skeleton,
    re-skeletonizes, and folds the interpolation into an accumulated
    chain. Returns ``(chain, J)`` where ``chain`` maps the final skeleton
    to the concatenated input skeleton (sum k_i rows by k_final columns)
    and ``J`` holds the surviving global indices, so that
    M(concat skeletons, :) ~= chain @ M(J, :).
    """
    sk = [np.asarray(s, dtype=int) for s in skeletons]
    sk = [s for s in sk if s.size]
    if not sk:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)

    J = sk[0]
    chain = np.eye(J.size)
    for s in sk[1:]:
        stacked = np.concatenate([J, s])
        f = interpolatory_decomposition(row_accessor(stacked), eps)
        chain = np.vstack([chain @ f.P[: J.size], f.P[J.size:]])
        J = stacked[f.skeleton]
    if len(sk) == 1:
        f = interpolatory_decomposition(row_accessor(J), eps)
        chain = f.P
        J = J[f.skeleton]
    return chain, J


# ----------------------------------------------------------------------
# the three off-diagonal factorizations


def factor_A_kc(rep: HbsRep, pg: PerturbedGeometry, eps, *, interp_cache=None):
    """Factor the keep-to-cut block as L_kc @ R_kc reusing stored factors.

    Boxes fully inside the keep set reuse their stored interpolation
    factors (the cut columns were part of the complement those factors
    were built against); leaves straddling the cut get fresh proxy
    compressions of their keep rows against the cut columns. The stacked
    skeleton of length k0 is then recompressed. Returns
    ``(L_kc, R_kc, J, k0)`` with L_kc of shape (N_k, k) ordered like the
    keep rows, R_kc = A_kc(J, :), and J the surviving global row indices.
    """
    disc = rep.disc
    I_c = pg.cut_indices
    if I_c.size == 0:
        return np.zeros((pg.n_k, 0)), np.zeros((0, 0)), np.zeros(0, dtype=int), 0
    cache = {} if interp_cache is None else interp_cache
    c0, c1 = int(I_c[0]), int(I_c[-1]) + 1

    blocks = []  # (global rows, interpolation matrix, global skeleton)
    for tau, fully_keep in _cover_outside_range(rep.tree, c0, c1):
        if fully_keep:
            rows = rep.tree.indices(tau)
            blocks.append((rows, _expanded_interp(rep, tau, cache),
                           rep.nodes[tau].row_skel))
        else:
            idx = rep.tree.indices(tau)
            rows = idx[(idx < c0) | (idx >= c1)]
            f = compress_block_proxy(rows, disc, I_c, eps, side="row")
            blocks.append((rows, f.P, rows[f.skeleton]))

    k0 = int(sum(skel.size for _, _, skel in blocks))
    cut = pg.cut_part()
    rows_of = lambda idx: assemble_cross(disc.nodes[idx], cut)
    chain, J = recompress([skel for _, _, skel in blocks], rows_of, eps)

    L = np.zeros((pg.n_k, J.size))
    off = 0
    for rows, P, skel in blocks:
        pos = np.searchsorted(pg.keep_indices, rows)
        L[pos] = P @ chain[off:off + skel.size]
        off += skel.size
    R = rows_of(J)
    return L, R, J, k0


def factor_near_block(tau_indices, geometry: Discretization,
                      piece: Discretization, eps, *, side="row") -> IdFactor:
    """Skeletonize one box of original-curve points against the new piece.

    Piece points inside the box's proxy circle enter as explicit columns,
    the rest through poles on the circle; ``side`` picks the row (incoming)
    or column (outgoing) variant.
    """
    return compress_block_proxy(tau_indices, geometry, np.arange(piece.n), eps,
                                side=side, complement_disc=piece)


def _near_leaf_mask(rep: HbsRep, piece: Discretization) -> np.ndarray:
    """Mark the original-curve points owned by leaves near the new piece.

    A point is near if it falls inside the piece's proxy circle; the mark
    is then widened to whole leaves so the far region tiles exactly into
    tree boxes.
    """
    disc = rep.disc
    circle = make_proxy(piece.nodes,
                        spacing=float(np.mean(piece.weights)))
    mask = circle.strictly_inside(disc.nodes)
    tree = rep.tree
    for tau in tree.level_nodes(tree.levels):
        a, b = tree.start[tau], tree.stop[tau]
        if mask[a:b].any():
            mask[a:b] = True
    return mask


def _far_blocks(rep: HbsRep, piece: Discretization, near_mask, eps, cache,
                *, side, exclude=None):
    """Blocks covering the far region, reusing stored factors where valid.

    Walks down from the root keeping the largest boxes whose points are all
    far (and outside ``exclude``) and whose own proxy circle misses the
    piece; a leaf that is far but fails the proxy test is compressed
    freshly. Returns blocks in ascending index order.
    """
    disc = rep.disc
    tree = rep.tree
    bad = near_mask.copy()
    if exclude is not None:
        bad = bad.copy()
        bad[exclude] = True
    pre = np.concatenate([[0], np.cumsum(bad)])

    blocks = []
    stack = [1]
    while stack:
        tau = stack.pop()
        a, b = tree.start[tau], tree.stop[tau]
        if pre[b] - pre[a] == b - a:
            continue
        if pre[b] - pre[a] > 0:
            c_lo, c_hi = tree.children(tau)
            stack.append(c_hi)
            stack.append(c_lo)
            continue
        guard = _box_proxy(rep, tau)
        if not guard.strictly_inside(piece.nodes).any():
            rows = tree.indices(tau)
            blocks.append((rows, _expanded_interp(rep, tau, cache),
                           rep.nodes[tau].row_skel))
        elif tree.is_leaf(tau):
            rows = tree.indices(tau)
            f = factor_near_block(rows, disc, piece, eps, side=side)
            blocks.append((rows, f.P, rows[f.skeleton]))
        else:
            c_lo, c_hi = tree.children(tau)
            stack.append(c_hi)
            stack.append(c_lo)
    return blocks


def _near_tree_factor(near_idx, disc, piece, eps, *, side, leaf_cap=LEAF_CAP):
    """Bottom-up nested factorization of the near region's own tree.

    Leaves are compressed freshly against the piece; a parent re-compresses
    the union of its children's skeletons and the interpolation matrices
    telescope exactly like the stored factors do. Returns (L, J) with L of
    shape (n_near, k) mapping skeleton values to all near points.
    """
    n = near_idx.size
    if n == 0:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    tree = build_tree(n, leaf_cap=leaf_cap)
    interp: dict[int, np.ndarray] = {}
    skel: dict[int, np.ndarray] = {}
    for level in range(tree.levels, -1, -1):
        for tau in tree.level_nodes(level):
            if tree.is_leaf(tau):
                rows = near_idx[tree.indices(tau)]
                f = factor_near_block(rows, disc, piece, eps, side=side)
                interp[tau] = f.P
            else:
                c1, c2 = tree.children(tau)
                rows = np.concatenate([skel[c1], skel[c2]])
                f = factor_near_block(rows, disc, piece, eps, side=side)
                k1 = skel[c1].size
                interp[tau] = np.vstack([interp[c1] @ f.P[:k1],
                                         interp[c2] @ f.P[k1:]])
            skel[tau] = rows[f.skeleton]
    return interp[1], skel[1]


def _assemble_block_interp(n_rows, positions_of, far_blocks, chain_far, k_far,
                           L_near, near_pos):
    """Stack far and near interpolation factors into one (n_rows, k) matrix."""
    k_near = L_near.shape[1]
    L = np.zeros((n_rows, k_far + k_near))
    off = 0
    for rows, P, skel in far_blocks:
        L[positions_of(rows), :k_far] = P @ chain_far[off:off + skel.size]
        off += skel.size
    if k_near:
        L[near_pos, k_far:] = L_near
    return L


_CONTACT_FACTOR = 30.0
"""Row-sup ratio over the block's bulk scale above which a row is carried
exactly instead of entering the interpolative factorization."""


def factor_A_op(rep: HbsRep, pg: PerturbedGeometry, eps, *, interp_cache=None,
                leaf_cap=LEAF_CAP):
    """Factor the original-to-piece block as L_op @ R_op.

    The original curve splits into a near region (leaves inside the
    piece's proxy circle), factored bottom-up with its own tree, and a far
    region reusing the stored factors, recompressed. One final joint
    skeletonization of the stacked skeleton rows removes the remaining
    redundancy. Returns ``(L_op, R_op, J, k0)`` with L_op of shape
    (N_o, k_op) and R_op = A_op(J, :).

    Rows whose entries dwarf the block's bulk scale are exempted from the
    factorization and carried exactly. Such rows arise when a target node
    sits almost on top of a piece node with near-normal separation (a
    replaced node directly above its cut counterpart), where the kernel
    grows like one over the gap; a truncation relative to the whole block
    norm would leave absolute errors on those rows, and on the bulk rows,
    that a high-accuracy solve cannot absorb. The row-skeleton form
    represents an exact row natively: it joins ``J`` with an identity
    column in ``L_op``.
    """
    piece = pg.new_part
    disc = rep.disc
    if piece is None or piece.n == 0:
        return np.zeros((pg.n_o, 0)), np.zeros((0, 0)), np.zeros(0, dtype=int), 0
    cache = {} if interp_cache is None else interp_cache

    near_mask = _near_leaf_mask(rep, piece)
    near_idx = np.nonzero(near_mask)[0]
    rows_of = lambda idx: assemble_cross(disc.nodes[idx], piece)

    # Only near rows can tower over the bulk: far rows are separated from
    # the piece by at least the proxy margin, so their entries are bounded
    # by the bulk scale.
    contact = np.empty(0, dtype=np.int64)
    if near_idx.size:
        sup = np.abs(rows_of(near_idx)).max(axis=1)
        bulk = np.median(sup)
        if bulk > 0:
            contact = near_idx[sup > _CONTACT_FACTOR * bulk]
    rest_near = np.setdiff1d(near_idx, contact, assume_unique=True)

    far_blocks = _far_blocks(rep, piece, near_mask, eps, cache, side="row")
    chain_far, J_far = recompress([skel for _, _, skel in far_blocks],
                                  rows_of, eps)
    L_near, J_near = _near_tree_factor(rest_near, disc, piece, eps,
                                       side="row", leaf_cap=leaf_cap)

    J_tot = np.concatenate([J_far, J_near])
    k0 = int(contact.size + J_tot.size)
    if k0 == 0:
        return (np.zeros((pg.n_o, 0)), np.zeros((0, piece.n)),
                np.zeros(0, dtype=int), 0)
    if J_tot.size:
        L_tot = _assemble_block_interp(pg.n_o, lambda rows: rows, far_blocks,
                                       chain_far, J_far.size, L_near, rest_near)
        R_tot = rows_of(J_tot)
        f = interpolatory_decomposition(R_tot, eps)
        L_mid = L_tot @ f.P
        R_mid = R_tot[f.skeleton]
        J_mid = J_tot[f.skeleton]
    else:
        L_mid = np.zeros((pg.n_o, 0))
        R_mid = np.zeros((0, piece.n))
        J_mid = J_tot
    if contact.size:
        L_op = np.zeros((pg.n_o, contact.size + L_mid.shape[1]))
        L_op[contact, np.arange(contact.size)] = 1.0
        L_op[:, contact.size:] = L_mid
        R_op = np.vstack([rows_of(contact), R_mid])
        return L_op, R_op, np.concatenate([contact, J_mid]), k0
    return L_mid, R_mid, J_mid, k0


def factor_A_pk(rep: HbsRep, pg: PerturbedGeometry, eps, *, interp_cache=None,
                leaf_cap=LEAF_CAP):
    """Factor the piece-to-keep block as L_pk @ R_pk.

    Column-space analogue of the A_op factorization: the keep columns
    split into near and far of the piece, far boxes reuse the stored
    column factors (equal to the row factors by the joint skeletonization),
    and the final joint skeletonization acts on the transposed block.
    Returns ``(L_pk, R_pk, J, k0)`` with L_pk = A_pk(:, J) of shape
    (N_p, k_pk) and R_pk of shape (k_pk, N_k).
    """
    piece = pg.new_part
    disc = rep.disc
    if piece is None or piece.n == 0:
        return np.zeros((pg.n_p, 0)), np.zeros((0, pg.n_k)), np.zeros(0, dtype=int), 0
    cache = {} if interp_cache is None else interp_cache

    near_mask = _near_leaf_mask(rep, piece)
    near_k_idx = np.nonzero(near_mask & ~np.isin(np.arange(pg.n_o), pg.cut_indices,
                                                 assume_unique=False))[0]

    far_blocks = _far_blocks(rep, piece, near_mask, eps, cache, side="col",
                             exclude=pg.cut_indices)
    cols_of = lambda idx: assemble_cross(piece.nodes, disc.subset(idx)).T
    chain_far, J_far = recompress([skel for _, _, skel in far_blocks],
                                  cols_of, eps)
    T_near, J_near = _near_tree_factor(near_k_idx, disc, piece, eps,
                                       side="col", leaf_cap=leaf_cap)

    J_tot = np.concatenate([J_far, J_near])
    k0 = int(J_tot.size)
    if k0 == 0:
        return np.zeros((pg.n_p, 0)), np.zeros((0, pg.n_k)), np.zeros(0, dtype=int), 0
    keep_pos = lambda rows: np.searchsorted(pg.keep_indices, rows)
    T_tot = _assemble_block_interp(pg.n_k, keep_pos, far_blocks, chain_far,
                                   J_far.size, T_near, keep_pos(near_k_idx))
    C_tot = assemble_cross(piece.nodes, disc.subset(J_tot))
    f = interpolatory_decomposition(C_tot.T, eps)
    L_pk = C_tot[:, f.skeleton]
    R_pk = (T_tot @ f.P).T
    return L_pk, R_pk, J_tot[f.skeleton], k0


# ----------------------------------------------------------------------
# assembled factors


@dataclass
class UpdateFactors:
    """The blockwise L R factorization of the update matrix Q.

    Columns of L (and rows of R) are grouped (kc, cc, pk, op); the total
    rank is k = k_kc + N_c + k_pk + k_op. Zero blocks are structural: the
    dense L and R are only materialized on demand.
    """

    pg: PerturbedGeometry
    L_kc: np.ndarray
    R_kc: np.ndarray
    B_cc: np.ndarray
    L_op: np.ndarray
    R_op: np.ndarray
    L_pk: np.ndarray
    R_pk: np.ndarray
    k0_kc: int = 0
    k0_op: int = 0
    k0_pk: int = 0
    J_kc: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def k_kc(self) -> int:
        return self.L_kc.shape[1]

    @property
    def k_op(self) -> int:
        return self.L_op.shape[1]

    @property
    def k_pk(self) -> int:
        return self.L_pk.shape[1]

    @property
    def k(self) -> int:
        return self.k_kc + self.pg.n_c + self.k_pk + self.k_op

    def component_slices(self):
        """Column ranges of L (= row ranges of R) for (kc, cc, pk, op)."""
        n_c = self.pg.n_c
        ofs = np.cumsum([0, self.k_kc, n_c, self.k_pk, self.k_op])
        return {name: slice(int(ofs[i]), int(ofs[i + 1]))
                for i, name in enumerate(("kc", "cc", "pk", "op"))}

    def apply_R(self, x: np.ndarray) -> np.ndarray:
        """R @ x for x of shape (N_ext,) or (N_ext, m)."""
        pg = self.pg
        x = np.asarray(x)
        x_c = x[pg.cut_indices]
        x_k = x[pg.keep_indices]
        x_p = x[pg.n_o:]
        return np.concatenate([self.R_kc @ x_c, x_c, self.R_pk @ x_k,
                               self.R_op @ x_p], axis=0)

    def apply_L(self, y: np.ndarray) -> np.ndarray:
        """L @ y for y of shape (k,) or (k, m)."""
        pg = self.pg
        y = np.asarray(y)
        s = self.component_slices()
        shape = (pg.n_ext,) + y.shape[1:]
        z = np.zeros(shape)
        z[pg.keep_indices] = -(self.L_kc @ y[s["kc"]])
        z[pg.cut_indices] = -(self.B_cc @ y[s["cc"]])
        z[:pg.n_o] += self.L_op @ y[s["op"]]
        z[pg.n_o:] = self.L_pk @ y[s["pk"]]
        return z

    def materialize_L(self) -> np.ndarray:
        """Dense L (N_ext x k); intended for validation at small sizes."""
        return self.apply_L(np.eye(self.k))

    def materialize_R(self) -> np.ndarray:
        """Dense R (k x N_ext); intended for validation at small sizes."""
        pg = self.pg
        s = self.component_slices()
        R = np.zeros((self.k, pg.n_ext))
        R[s["kc"], pg.cut_indices] = self.R_kc
        R[s["cc"], pg.cut_indices] = np.eye(pg.n_c)
        R[s["pk"], pg.keep_indices] = self.R_pk
        R[s["op"], pg.n_o:] = self.R_op
        return R


def assemble_Q(pg: PerturbedGeometry, L_kc, R_kc, B_cc, L_op, R_op, L_pk, R_pk,
               **extra) -> UpdateFactors:
    """Bundle the component factors, validating the block layout."""
    checks = [
        (L_kc.shape[0], pg.n_k, "L_kc rows"),
        (R_kc.shape, (L_kc.shape[1], pg.n_c), "R_kc shape"),
        (B_cc.shape, (pg.n_c, pg.n_c), "B_cc shape"),
        (L_op.shape[0], pg.n_o, "L_op rows"),
        (R_op.shape, (L_op.shape[1], pg.n_p), "R_op shape"),
        (L_pk.shape[0], pg.n_p, "L_pk rows"),
        (R_pk.shape, (L_pk.shape[1], pg.n_k), "R_pk shape"),
    ]
    for got, want, what in checks:
        if got != want:
            raise ValueError(f"{what}: expected {want}, got {got}")
    return UpdateFactors(pg=pg, L_kc=L_kc, R_kc=R_kc, B_cc=B_cc, L_op=L_op,
                         R_op=R_op, L_pk=L_pk, R_pk=R_pk, **extra)


def factor_update(rep: HbsRep, pg: PerturbedGeometry, eps, *,
                  factor_eps=None, combined=False,
                  leaf_cap=LEAF_CAP) -> UpdateFactors:
    """Run all component factorizations and assemble the update factors.

    ``factor_eps`` is the truncation tolerance of the component
    factorizations themselves and defaults to ``eps / 10``: truncation
    errors in the factors are amplified by the magnitude of the
    cut-to-piece coupling (kernel entries grow like the reciprocal of the
    smallest replaced-to-cut node distance), so the factors run one decade
    tighter than the requested solve tolerance. The rank cost is a handful
    of columns; the end-to-end solve stays at ``eps``.

    With ``combined`` the three factorizations share one cache of expanded
    interpolation matrices, so the tree is traversed once instead of once
    per block; results are identical.
    """
    if rep.disc.n != pg.n_o:
        raise ValueError("compressed operator and perturbation disagree on N_o")
    if factor_eps is None:
        factor_eps = 0.1 * eps
    eps = factor_eps
    shared = {} if combined else None
    caches = [shared, shared, shared] if combined else [None, None, None]
    L_kc, R_kc, J_kc, k0_kc = factor_A_kc(rep, pg, eps, interp_cache=caches[0])
    L_op, R_op, _, k0_op = factor_A_op(rep, pg, eps, interp_cache=caches[1],
                                       leaf_cap=leaf_cap)
    L_pk, R_pk, _, k0_pk = factor_A_pk(rep, pg, eps, interp_cache=caches[2],
                                       leaf_cap=leaf_cap)
    if pg.n_c:
        B_cc = assemble_dense(pg.cut_part())
        np.fill_diagonal(B_cc, 0.0)
    else:
        B_cc = np.zeros((0, 0))
    return assemble_Q(pg, L_kc, R_kc, B_cc, L_op, R_op, L_pk, R_pk,
                      k0_kc=k0_kc, k0_op=k0_op, k0_pk=k0_pk, J_kc=J_kc)


# ----------------------------------------------------------------------
# the perturbed solver


def assemble_extended_rhs(pg: PerturbedGeometry, f_k, f_p=None) -> np.ndarray:
    """Extended right-hand side: data on keep and piece rows, zeros on cut."""
    f_k = np.asarray(f_k, dtype=float)
    if f_k.shape[0] != pg.n_k:
        raise ValueError(f"f_k has {f_k.shape[0]} entries, expected {pg.n_k}")
    if f_p is None:
        f_p = np.zeros((0,) + f_k.shape[1:])
    f_p = np.asarray(f_p, dtype=float)
    if f_p.shape[0] != pg.n_p:
        raise ValueError(f"f_p has {f_p.shape[0]} entries, expected {pg.n_p}")
    f_ext = np.zeros((pg.n_ext,) + f_k.shape[1:])
    f_ext[pg.keep_indices] = f_k
    f_ext[pg.n_o:] = f_p
    return f_ext


@dataclass
class PerturbedSolver:
    """Precomputed pieces of the Woodbury solve for one perturbation.

    Holds the inverse of the original operator by reference, the dense LU
    of the piece's self-interaction block, the precomputed A_tilde^-1 L
    (stored blockwise: its pk columns live only on the piece rows and the
    rest only on the original rows), and the LU of the k x k capacitance
    matrix I + R A_tilde^-1 L. Immutable after construction; solves do not
    mutate state and may run concurrently.
    """

    factors: UpdateFactors
    hbs_solver: HbsSolver
    app_lu: tuple | None
    AinvL_o: np.ndarray
    AinvL_p: np.ndarray
    cap_lu: tuple
    cap_cond: float

    @property
    def pg(self) -> PerturbedGeometry:
        return self.factors.pg

    @property
    def k(self) -> int:
        return self.factors.k


def _split_correction(uf: UpdateFactors, z: np.ndarray):
    """Reorder capacitance output rows into the (o-block, pk-block) columns."""
    s = uf.component_slices()
    z_o = np.concatenate([z[s["kc"]], z[s["cc"]], z[s["op"]]], axis=0)
    return z_o, z[s["pk"]]


def _embed_o_columns(uf: UpdateFactors, M: np.ndarray) -> np.ndarray:
    """Pad a matrix over the (kc, cc, op) columns with zero pk columns."""
    r = M.shape[0]
    out = np.zeros((r, uf.k))
    split = uf.k_kc + uf.pg.n_c
    out[:, :split] = M[:, :split]
    out[:, split + uf.k_pk:] = M[:, split:]
    return out


def build_perturbed_solver(hbs_solver: HbsSolver, A_pp: np.ndarray | None,
                           uf: UpdateFactors) -> PerturbedSolver:
    """Precompute A_pp's LU, A_tilde^-1 L and the capacitance inverse.

    The piece block is inverted densely (its size stays modest by
    construction), A_tilde^-1 L comes from one multi-column solve with the
    stored inverse plus one dense solve with A_pp's LU, and the
    capacitance matrix is formed and LU-factored at O(k^3) cost. Its
    condition number is computed and logged; a solver whose capacitance is
    singular signals inconsistent factors or a resonant perturbation.
    """
    pg = uf.pg
    if pg.n_p:
        A_pp = np.asarray(A_pp)
        if A_pp.shape != (pg.n_p, pg.n_p):
            raise ValueError(f"A_pp must be ({pg.n_p}, {pg.n_p}), got {A_pp.shape}")
        app_lu = lu_factor(A_pp)
        if not np.all(np.abs(np.diag(app_lu[0])) > 0.0):
            raise LinAlgError("piece self-interaction block is singular")
    else:
        app_lu = None

    n_c, k_kc, k_op, k_pk = pg.n_c, uf.k_kc, uf.k_op, uf.k_pk
    m_o = k_kc + n_c + k_op
    Lo = np.zeros((pg.n_o, m_o))
    if k_kc:
        Lo[pg.keep_indices, :k_kc] = -uf.L_kc
    if n_c:
        Lo[pg.cut_indices, k_kc:k_kc + n_c] = -uf.B_cc
    if k_op:
        Lo[:, k_kc + n_c:] = uf.L_op
    AinvL_o = apply_inverse(hbs_solver, Lo) if m_o else np.zeros((pg.n_o, 0))
    if pg.n_p and k_pk:
        AinvL_p = lu_solve(app_lu, uf.L_pk)
    else:
        AinvL_p = np.zeros((pg.n_p, k_pk))

    k = uf.k
    C = np.eye(k)
    if k:
        s = uf.component_slices()
        X_c = _embed_o_columns(uf, AinvL_o[pg.cut_indices])
        X_k = _embed_o_columns(uf, AinvL_o[pg.keep_indices])
        if k_kc:
            C[s["kc"]] += uf.R_kc @ X_c
        if n_c:
            C[s["cc"]] += X_c
        if k_pk:
            C[s["pk"]] += uf.R_pk @ X_k
        if k_op:
            C[s["op"], s["pk"]] += uf.R_op @ AinvL_p
    cap_cond = float(np.linalg.cond(C)) if k else 1.0
    logger.info("capacitance matrix: k=%d, cond=%.3e", k, cap_cond)
    cap_lu = lu_factor(C) if k else (np.zeros((0, 0)), np.zeros(0, dtype=np.int32))
    if k and not np.all(np.abs(np.diag(cap_lu[0])) > 0.0):
        raise LinAlgError("capacitance matrix is singular")
    return PerturbedSolver(factors=uf, hbs_solver=hbs_solver, app_lu=app_lu,
                           AinvL_o=AinvL_o, AinvL_p=AinvL_p, cap_lu=cap_lu,
                           cap_cond=cap_cond)


def solve_perturbed(ps: PerturbedSolver, f_ext: np.ndarray):
    """Solve the extended system; returns (sigma_k, sigma_c, sigma_p).

    Applies x = A~^-1 b - A~^-1 L (I + R A~^-1 L)^-1 R A~^-1 b. sigma_k and
    sigma_p form the density on the perturbed boundary; sigma_c is the
    auxiliary cut variable and plays no role in potential evaluation.
    Accepts a single right-hand side or a stack of columns.
    """
    uf = ps.factors
    pg = uf.pg
    b = np.asarray(f_ext, dtype=float)
    if b.shape[0] != pg.n_ext:
        raise ValueError(f"f_ext has {b.shape[0]} entries, expected {pg.n_ext}")
    x_o = apply_inverse(ps.hbs_solver, b[:pg.n_o])
    if pg.n_p:
        x_p = lu_solve(ps.app_lu, b[pg.n_o:])
    else:
        x_p = b[pg.n_o:]
    if ps.k:
        y = uf.apply_R(np.concatenate([x_o, x_p], axis=0))
        z = lu_solve(ps.cap_lu, y)
        z_o, z_pk = _split_correction(uf, z)
        x_o = x_o - ps.AinvL_o @ z_o
        if pg.n_p:
            x_p = x_p - ps.AinvL_p @ z_pk
    return x_o[pg.keep_indices], x_o[pg.cut_indices], x_p


# ----------------------------------------------------------------------
# serialization

_PLACEMENT_DEPENDENT = ["L_op", "R_op", "L_pk", "R_pk", "AinvL_o", "AinvL_p",
                        "app_lu", "cap_lu"]
_CUT_DEPENDENT = ["L_kc", "R_kc", "B_cc", "J_kc"]


def save_perturbed_solver(path, ps: PerturbedSolver):
    """Write a solver's arrays plus a manifest of what depends on what.

    The inverse of the original operator is not duplicated here (store it
    once with save_hbs); the manifest records which components must be
    rebuilt when the piece moves and which survive as long as the cut does.
    """
    uf = ps.factors
    pg = uf.pg
    manifest = {
        "placement_dependent": _PLACEMENT_DEPENDENT,
        "cut_dependent": _CUT_DEPENDENT,
        "reusable": ["original-operator inverse (serialized separately)"],
        "k": {"kc": uf.k_kc, "cc": pg.n_c, "pk": uf.k_pk, "op": uf.k_op},
    }
    data = {
        "manifest": np.array(json.dumps(manifest)),
        "keep_indices": pg.keep_indices,
        "cut_indices": pg.cut_indices,
        "sizes": np.array([pg.n_o, pg.n_p], dtype=np.int64),
        "k0": np.array([uf.k0_kc, uf.k0_op, uf.k0_pk], dtype=np.int64),
        "cap_cond": np.array(ps.cap_cond),
        "L_kc": uf.L_kc, "R_kc": uf.R_kc, "B_cc": uf.B_cc, "J_kc": uf.J_kc,
        "L_op": uf.L_op, "R_op": uf.R_op, "L_pk": uf.L_pk, "R_pk": uf.R_pk,
        "AinvL_o": ps.AinvL_o, "AinvL_p": ps.AinvL_p,
        "cap_lu_m": ps.cap_lu[0], "cap_lu_piv": ps.cap_lu[1],
    }
    if ps.app_lu is not None:
        data["app_lu_m"] = ps.app_lu[0]
        data["app_lu_piv"] = ps.app_lu[1]
    np.savez(path, **data)


def load_perturbed_solver(path, pg: PerturbedGeometry,
                          hbs_solver: HbsSolver) -> PerturbedSolver:
    """Rebuild a solver saved with save_perturbed_solver.

    The caller supplies the perturbed geometry (index partition must match
    the saved one) and the original operator's inverse.
    """
    with np.load(path, allow_pickle=False) as z:
        if not np.array_equal(z["keep_indices"], pg.keep_indices) or \
           not np.array_equal(z["cut_indices"], pg.cut_indices):
            raise ValueError("saved solver belongs to a different partition")
        n_o, n_p = (int(v) for v in z["sizes"])
        if (n_o, n_p) != (pg.n_o, pg.n_p):
            raise ValueError("saved solver belongs to different sizes")
        k0 = z["k0"]
        uf = assemble_Q(pg, z["L_kc"], z["R_kc"], z["B_cc"], z["L_op"],
                        z["R_op"], z["L_pk"], z["R_pk"],
                        k0_kc=int(k0[0]), k0_op=int(k0[1]), k0_pk=int(k0[2]),
                        J_kc=z["J_kc"])
        app_lu = (z["app_lu_m"], z["app_lu_piv"]) if "app_lu_m" in z else None
        return PerturbedSolver(factors=uf, hbs_solver=hbs_solver,
                               app_lu=app_lu, AinvL_o=z["AinvL_o"],
                               AinvL_p=z["AinvL_p"],
                               cap_lu=(z["cap_lu_m"], z["cap_lu_piv"]),
                               cap_cond=float(z["cap_cond"]))
