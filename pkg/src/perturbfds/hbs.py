"""Hierarchically block separable compression and direct inversion.

The Nystrom matrix of the double-layer operator on a smooth curve is
compressed on a binary tree of contiguous index blocks: off-diagonal
interaction is low rank, so each node stores interpolation factors (U, V)
mapping between its indices and a short skeleton, sibling coupling blocks B
between skeletons, and dense self-interaction blocks D at the leaves.
Upper-level factors are expressed over the children's skeletons, which
keeps every stored block small and the total storage linear in N.

The inverse is precomputed in one bottom-up sweep. Each node eliminates
its interior unknowns against its skeleton, yielding small factors
(E, F, G) per node plus one dense inverse at the root; applying the
inverse is then two tree traversals of small dense products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Discretization
from .kernel import assemble_cross, assemble_dense
from .lowrank import compress_block_proxy, make_proxy

LEAF_CAP = 64


# ---------------------------------------------------------------------------
# index tree
# ---------------------------------------------------------------------------

@dataclass
class IndexTree:
    """Fully populated binary tree over contiguous index blocks.

    Nodes are numbered 1..2**(L+1)-1 breadth first (root 1, children of tau
    are 2 tau and 2 tau + 1). Node tau owns indices start[tau]..stop[tau]-1.
    """

    N: int
    levels: int
    start: np.ndarray
    stop: np.ndarray

    @property
    def n_nodes(self):
        return 2 ** (self.levels + 1) - 1

    def indices(self, tau):
        return np.arange(self.start[tau], self.stop[tau])

    def size(self, tau):
        return int(self.stop[tau] - self.start[tau])

    def level(self, tau):
        return int(math.floor(math.log2(tau)))

    def is_leaf(self, tau):
        return self.level(tau) == self.levels

    def children(self, tau):
        return 2 * tau, 2 * tau + 1

    def parent(self, tau):
        return tau // 2

    def level_nodes(self, level):
        return range(2 ** level, 2 ** (level + 1))

    def complement(self, tau):
        a, b = self.start[tau], self.stop[tau]
        return np.concatenate([np.arange(0, a), np.arange(b, self.N)])


def build_tree(N, leaf_cap=LEAF_CAP):
    """Binary tree over [0, N) with halving splits (left child rounds up).

    The depth is the smallest L with N / 2**L <= leaf_cap, so every leaf
    holds at most leaf_cap indices (and at least leaf_cap / 2).
    """
    if N < 1:
        raise ValueError(f"need N >= 1, got {N}")
    if leaf_cap < 2:
        raise ValueError(f"need leaf_cap >= 2, got {leaf_cap}")
    L = max(0, math.ceil(math.log2(N / leaf_cap)))
    n_nodes = 2 ** (L + 1) - 1
    start = np.zeros(n_nodes + 1, dtype=np.int64)
    stop = np.zeros(n_nodes + 1, dtype=np.int64)
    start[1], stop[1] = 0, N
    for tau in range(1, 2 ** L):
        a, b = start[tau], stop[tau]
        mid = a + (b - a + 1) // 2
        start[2 * tau], stop[2 * tau] = a, mid
        start[2 * tau + 1], stop[2 * tau + 1] = mid, b
    return IndexTree(N=N, levels=L, start=start, stop=stop)


# ---------------------------------------------------------------------------
# compressed representation
# ---------------------------------------------------------------------------

@dataclass
class HbsNode:
    # leaves: U, V are (n x k) interpolation matrices and D the dense self
    # block; non-leaves: U, V hold the P factors over the concatenated
    # children skeletons, and B12/B21 couple the children's skeletons.
    U: np.ndarray | None = None
    V: np.ndarray | None = None
    D: np.ndarray | None = None
    B12: np.ndarray | None = None
    B21: np.ndarray | None = None
    row_skel: np.ndarray | None = None
    col_skel: np.ndarray | None = None


@dataclass
class HbsRep:
    tree: IndexTree
    eps: float
    nodes: dict
    disc: Discretization | None = None
    full_rank_nodes: list = field(default_factory=list)

    def rank(self, tau):
        rs = self.nodes[tau].row_skel
        return 0 if rs is None else rs.size

    def max_offdiag_rank(self):
        """Largest skeleton size over all non-root nodes (the HBS rank)."""
        return max((self.rank(t) for t in range(2, self.tree.n_nodes + 1)),
                   default=0)

    def stored_entries(self):
        total = 0
        for nd in self.nodes.values():
            for a in (nd.U, nd.V, nd.D, nd.B12, nd.B21):
                if a is not None:
                    total += a.size
        return total


def get_node_factors(rep: HbsRep, tau):
    """Stored factors of one node, as a dict (for inspection and tests)."""
    if not 1 <= tau <= rep.tree.n_nodes:
        raise ValueError(f"node id {tau} outside 1..{rep.tree.n_nodes}")
    nd = rep.nodes[tau]
    return {"U": nd.U, "V": nd.V, "D": nd.D, "B12": nd.B12, "B21": nd.B21,
            "row_skel": nd.row_skel, "col_skel": nd.col_skel,
            "is_leaf": rep.tree.is_leaf(tau), "level": rep.tree.level(tau)}


def compress_hbs(disc: Discretization, eps, leaf_cap=LEAF_CAP, tree=None):
    """Compress the Nystrom double-layer matrix of ``disc`` to HBS form.

    Bottom-up sweep: leaves skeletonize their rows and columns against the
    full complement through proxy surfaces and store their dense diagonal
    block; upper nodes skeletonize the union of their children's skeletons.
    Row and column skeletons are computed jointly (one ID over the stacked
    incoming and outgoing reduced blocks) so each node's row and column
    ranks agree, which the inversion stage requires. Sibling coupling
    blocks are actual matrix entries between skeletons, so no large dense
    intermediate is ever formed.
    """
    if tree is None:
        tree = build_tree(disc.n, leaf_cap)
    if tree.N != disc.n:
        raise ValueError(f"tree is over {tree.N} indices, discretization has {disc.n}")
    nodes = {}
    full_rank = []
    if tree.levels == 0:
        # degenerate single-node tree: the matrix is just dense
        nodes[1] = HbsNode(D=assemble_dense(disc))
        return HbsRep(tree=tree, eps=eps, nodes=nodes, disc=disc)

    # Leaf bounding circles let each node collect its near-field complement
    # points without scanning all N of them: a point can lie inside the
    # node's proxy circle only if its leaf's bounding circle reaches that
    # proxy circle. The screen is inflated by 1e-12 relative, so the exact
    # per-point test downstream still sees every qualifying point.
    leaf_lo = tree.start[2 ** tree.levels:tree.n_nodes + 1]
    leaf_hi = tree.stop[2 ** tree.levels:tree.n_nodes + 1]
    leaf_centers = np.empty((leaf_lo.size, 2))
    leaf_radii = np.empty(leaf_lo.size)
    for i in range(leaf_lo.size):
        pts = disc.nodes[leaf_lo[i]:leaf_hi[i]]
        c = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        leaf_centers[i] = c
        leaf_radii[i] = np.sqrt(((pts - c) ** 2).sum(axis=1).max())

    def near_candidates(tau, proxy):
        d2 = ((leaf_centers - proxy.center) ** 2).sum(axis=1)
        reach = (proxy.radius + leaf_radii) * (1.0 + 1e-12)
        hit = d2 <= reach * reach
        hit &= (leaf_lo < tree.start[tau]) | (leaf_lo >= tree.stop[tau])
        if not hit.any():
            return np.empty(0, dtype=np.int64)
        return np.concatenate([np.arange(leaf_lo[i], leaf_hi[i])
                               for i in np.flatnonzero(hit)])

    for level in range(tree.levels, 0, -1):
        for tau in tree.level_nodes(level):
            nd = HbsNode()
            if tree.is_leaf(tau):
                owned = tree.indices(tau)
                nd.D = assemble_dense(disc.subset(owned))
            else:
                c1, c2 = tree.children(tau)
                owned = np.concatenate([nodes[c1].row_skel, nodes[c2].row_skel])
            proxy = make_proxy(disc.nodes[owned],
                               spacing=float(np.mean(disc.weights[owned])))
            f = compress_block_proxy(owned, disc, None, eps, side="both",
                                     proxy=proxy,
                                     near_candidates=near_candidates(tau, proxy))
            nd.U, nd.row_skel = f.P, owned[f.skeleton]
            nd.V, nd.col_skel = f.P, owned[f.skeleton]
            if f.rank >= owned.size and owned.size > 0:
                full_rank.append(tau)
            nodes[tau] = nd
    for tau in range(1, 2 ** tree.levels):  # non-leaf: sibling coupling
        c1, c2 = tree.children(tau)
        nodes.setdefault(tau, HbsNode())
        nd = nodes[tau]
        nd.B12 = assemble_cross(disc.nodes[nodes[c1].row_skel],
                                disc.subset(nodes[c2].col_skel))
        nd.B21 = assemble_cross(disc.nodes[nodes[c2].row_skel],
                                disc.subset(nodes[c1].col_skel))
    return HbsRep(tree=tree, eps=eps, nodes=nodes, disc=disc,
                  full_rank_nodes=full_rank)


# ---------------------------------------------------------------------------
# fast apply
# ---------------------------------------------------------------------------

def apply_hbs(rep: HbsRep, x):
    """Multiply the compressed matrix by x ((N,) or (N, m))."""
    tree = rep.tree
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    X = x[:, None] if squeeze else x
    if X.shape[0] != tree.N:
        raise ValueError(f"operand has {X.shape[0]} rows, expected {tree.N}")
    if tree.levels == 0:
        Y = rep.nodes[1].D @ X
        return Y[:, 0] if squeeze else Y

    xh = {}
    for level in range(tree.levels, 0, -1):
        for tau in tree.level_nodes(level):
            nd = rep.nodes[tau]
            if tree.is_leaf(tau):
                xh[tau] = nd.V.T @ X[tree.indices(tau)]
            else:
                c1, c2 = tree.children(tau)
                xh[tau] = nd.V.T @ np.vstack([xh[c1], xh[c2]])

    yh = {}
    for level in range(0, tree.levels):
        for tau in tree.level_nodes(level):
            nd = rep.nodes[tau]
            c1, c2 = tree.children(tau)
            inc1 = nd.B12 @ xh[c2]
            inc2 = nd.B21 @ xh[c1]
            if tau != 1:
                down = rep.nodes[tau].U @ yh[tau]
                k1 = rep.nodes[c1].row_skel.size
                inc1 += down[:k1]
                inc2 += down[k1:]
            yh[c1], yh[c2] = inc1, inc2

    Y = np.empty_like(X)
    for tau in tree.level_nodes(tree.levels):
        nd = rep.nodes[tau]
        idx = tree.indices(tau)
        Y[idx] = nd.U @ yh[tau] + nd.D @ X[idx]
    return Y[:, 0] if squeeze else Y


def reconstruct_dense(rep: HbsRep):
    """Dense matrix realized by the compressed representation (tests only)."""
    return apply_hbs(rep, np.eye(rep.tree.N))


# ---------------------------------------------------------------------------
# direct inversion
# ---------------------------------------------------------------------------

@dataclass
class HbsSolver:
    """Precomputed inverse factors; apply with apply_inverse."""

    tree: IndexTree
    E: dict
    F: dict
    G: dict
    ranks: dict

    def stored_entries(self):
        total = 0
        for d in (self.E, self.F, self.G):
            total += sum(a.size for a in d.values())
        return total


def _inv_or_raise(M, tau, what):
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(
            f"HBS inversion failed at node {tau}: singular {what} block "
            f"({M.shape[0]}x{M.shape[1]})") from e


def invert_hbs(rep: HbsRep):
    """Precompute the direct inverse of an HBS representation.

    One bottom-up sweep; each node eliminates its interior degrees of
    freedom, leaving a small skeleton system for its parent. Singular
    blocks raise with the offending node id.
    """
    tree = rep.tree
    E, F, G, ranks = {}, {}, {}, {}
    if tree.levels == 0:
        G[1] = _inv_or_raise(rep.nodes[1].D, 1, "dense root")
        return HbsSolver(tree=tree, E=E, F=F, G=G, ranks=ranks)

    dhat = {}
    for level in range(tree.levels, -1, -1):
        for tau in tree.level_nodes(level):
            nd = rep.nodes[tau]
            if tree.is_leaf(tau):
                Dt = nd.D
            else:
                c1, c2 = tree.children(tau)
                Dt = np.block([[dhat[c1], nd.B12], [nd.B21, dhat[c2]]])
            if tau == 1:
                G[1] = _inv_or_raise(Dt, 1, "root")
                break
            Dinv = _inv_or_raise(Dt, tau, "diagonal")
            X = Dinv @ nd.U              # Dt^-1 U
            W = nd.V.T @ Dinv            # V* Dt^-1
            small = nd.V.T @ X
            Dh = _inv_or_raise(small, tau, "skeleton (V* D~^-1 U)")
            E[tau] = X @ Dh
            F[tau] = Dh @ W
            G[tau] = Dinv - X @ Dh @ W
            dhat[tau] = Dh
            ranks[tau] = Dh.shape[0]
    return HbsSolver(tree=tree, E=E, F=F, G=G, ranks=ranks)


def apply_inverse(solver: HbsSolver, b):
    """Solve A x = b with the precomputed inverse ((N,) or (N, m) rhs)."""
    tree = solver.tree
    b = np.asarray(b, dtype=float)
    squeeze = b.ndim == 1
    B = b[:, None] if squeeze else b
    if B.shape[0] != tree.N:
        raise ValueError(f"rhs has {B.shape[0]} rows, expected {tree.N}")
    if tree.levels == 0:
        X = solver.G[1] @ B
        return X[:, 0] if squeeze else X

    bt = {}   # b-tilde per node (leaf: slice of B; non-leaf: stacked b-hats)
    bh = {}   # b-hat per non-root node
    for level in range(tree.levels, 0, -1):
        for tau in tree.level_nodes(level):
            if tree.is_leaf(tau):
                bt[tau] = B[tree.indices(tau)]
            else:
                c1, c2 = tree.children(tau)
                bt[tau] = np.vstack([bh[c1], bh[c2]])
            bh[tau] = solver.F[tau] @ bt[tau]

    qh = {}
    c1, c2 = tree.children(1)
    top = solver.G[1] @ np.vstack([bh[c1], bh[c2]])
    k1 = bh[c1].shape[0]
    qh[c1], qh[c2] = top[:k1], top[k1:]

    X = np.empty_like(B)
    for level in range(1, tree.levels + 1):
        for tau in tree.level_nodes(level):
            local = solver.E[tau] @ qh[tau] + solver.G[tau] @ bt[tau]
            if tree.is_leaf(tau):
                X[tree.indices(tau)] = local
            else:
                c1, c2 = tree.children(tau)
                k1 = bh[c1].shape[0]
                qh[c1], qh[c2] = local[:k1], local[k1:]
    return X[:, 0] if squeeze else X


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_hbs(path, rep: HbsRep):
    """Write an HbsRep to an npz container (bitwise round trip)."""
    payload = {
        "N": np.int64(rep.tree.N),
        "levels": np.int64(rep.tree.levels),
        "start": rep.tree.start,
        "stop": rep.tree.stop,
        "eps": np.float64(rep.eps),
        "full_rank_nodes": np.asarray(rep.full_rank_nodes, dtype=np.int64),
    }
    for tau, nd in rep.nodes.items():
        for name in ("U", "V", "D", "B12", "B21", "row_skel", "col_skel"):
            a = getattr(nd, name)
            if a is not None:
                payload[f"n{tau}_{name}"] = a
    np.savez(path, **payload)


def load_hbs(path):
    with np.load(path) as z:
        tree = IndexTree(N=int(z["N"]), levels=int(z["levels"]),
                         start=z["start"], stop=z["stop"])
        nodes = {}
        for key in z.files:
            if not key.startswith("n"):
                continue
            head, _, name = key.partition("_")
            if not head[1:].isdigit():
                continue
            tau = int(head[1:])
            nodes.setdefault(tau, HbsNode())
            setattr(nodes[tau], name, z[key])
        return HbsRep(tree=tree, eps=float(z["eps"]), nodes=nodes, disc=None,
                      full_rank_nodes=[int(t) for t in z["full_rank_nodes"]])
