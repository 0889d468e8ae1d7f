"""Low-rank update factorization and the perturbed Woodbury solver."""

import numpy as np
import pytest

from perturbfds.hbs import compress_hbs, invert_hbs
from perturbfds.kernel import assemble_cross, assemble_dense, boundary_data
from perturbfds.oracle import (assemble_extended_dense, dense_block_kc,
                               dense_extended_solve, extended_rhs_dense,
                               perturbed_residual, svd_rank)
from perturbfds.update import (assemble_Q, assemble_extended_rhs,
                               build_perturbed_solver, factor_A_kc,
                               factor_A_op, factor_A_pk, factor_near_block,
                               factor_update, load_perturbed_solver,
                               recompress, save_perturbed_solver,
                               solve_perturbed)

EPS = 1e-10


@pytest.fixture(scope="module")
def bump_uf(bump_rep, bump_pg):
    return factor_update(bump_rep, bump_pg, EPS)


@pytest.fixture(scope="module")
def bump_app(bump_pg):
    return assemble_dense(bump_pg.new_part)


@pytest.fixture(scope="module")
def bump_ps(bump_solver, bump_app, bump_uf):
    return build_perturbed_solver(bump_solver, bump_app, bump_uf)


@pytest.fixture(scope="module")
def star_rep(star_cut_pg):
    return compress_hbs(star_cut_pg.original, EPS)


@pytest.fixture(scope="module")
def identity_ps(identity_pg):
    rep = compress_hbs(identity_pg.original, EPS)
    uf = factor_update(rep, identity_pg, EPS)
    return build_perturbed_solver(invert_hbs(rep), None, uf)


# ---------------------------------------------------------------------------
# extended right-hand side
# ---------------------------------------------------------------------------

def test_extended_rhs_layout(bump_pg):
    rng = np.random.default_rng(7)
    f_k = rng.standard_normal(bump_pg.n_k)
    f_p = rng.standard_normal(bump_pg.n_p)
    f = assemble_extended_rhs(bump_pg, f_k, f_p)
    assert f.shape == (bump_pg.n_ext,)
    assert np.array_equal(f[bump_pg.keep_indices], f_k)
    assert np.array_equal(f[bump_pg.n_o:], f_p)
    assert np.all(f[bump_pg.cut_indices] == 0.0)


def test_extended_rhs_size_mismatch(bump_pg):
    with pytest.raises(ValueError, match="f_k"):
        assemble_extended_rhs(bump_pg, np.zeros(bump_pg.n_k + 1),
                              np.zeros(bump_pg.n_p))
    with pytest.raises(ValueError, match="f_p"):
        assemble_extended_rhs(bump_pg, np.zeros(bump_pg.n_k),
                              np.zeros(bump_pg.n_p + 2))
    # omitting the piece data is only valid when there is no piece
    with pytest.raises(ValueError, match="f_p"):
        assemble_extended_rhs(bump_pg, np.zeros(bump_pg.n_k))


def test_extended_rhs_matches_dense_oracle(bump_pg, bump_charges):
    f_k = boundary_data(bump_pg.keep_part(), bump_charges)
    f_p = boundary_data(bump_pg.new_part, bump_charges)
    fast = assemble_extended_rhs(bump_pg, f_k, f_p)
    assert np.array_equal(fast, extended_rhs_dense(bump_pg, bump_charges))


def test_extended_rhs_multicolumn(bump_pg):
    rng = np.random.default_rng(8)
    f_k = rng.standard_normal((bump_pg.n_k, 3))
    f_p = rng.standard_normal((bump_pg.n_p, 3))
    f = assemble_extended_rhs(bump_pg, f_k, f_p)
    assert f.shape == (bump_pg.n_ext, 3)
    assert np.array_equal(f[bump_pg.keep_indices], f_k)


def test_extended_rhs_identity_geometry(identity_pg):
    f_k = np.ones(identity_pg.n_k)
    f = assemble_extended_rhs(identity_pg, f_k)
    assert np.array_equal(f, f_k)


# ---------------------------------------------------------------------------
# keep-to-cut factorization
# ---------------------------------------------------------------------------

def test_factor_kc_reconstructs_dense(bump_rep, bump_pg):
    L, R, J, k0 = factor_A_kc(bump_rep, bump_pg, EPS)
    dense = dense_block_kc(bump_pg)
    err = np.linalg.norm(L @ R - dense) / np.linalg.norm(dense)
    assert err <= 10 * EPS
    assert L.shape == (bump_pg.n_k, R.shape[0])
    assert R.shape[1] == bump_pg.n_c
    assert J.size == R.shape[0] <= k0


def test_factor_kc_skeleton_rows_are_actual_rows(bump_rep, bump_pg):
    L, R, J, _ = factor_A_kc(bump_rep, bump_pg, EPS)
    assert np.all(np.isin(J, bump_pg.keep_indices))
    assert np.unique(J).size == J.size
    rows = assemble_cross(bump_pg.original.nodes[J], bump_pg.cut_part())
    assert np.array_equal(R, rows)


def test_factor_kc_rank_one_on_circle(bump_rep, bump_pg):
    # the double-layer kernel is constant on a circle, so the keep/cut
    # block has exact rank one and the factorization must find it
    L, R, J, k0 = factor_A_kc(bump_rep, bump_pg, EPS)
    assert L.shape[1] == 1
    assert k0 >= 1
    assert svd_rank(dense_block_kc(bump_pg), EPS) == 1


def test_factor_kc_star(star_rep, star_cut_pg):
    L, R, J, k0 = factor_A_kc(star_rep, star_cut_pg, EPS)
    dense = dense_block_kc(star_cut_pg)
    err = np.linalg.norm(L @ R - dense) / np.linalg.norm(dense)
    assert err <= 10 * EPS
    k = L.shape[1]
    assert 12 <= k <= 22
    assert k0 >= 5 * k


def test_factor_kc_empty_cut(identity_pg):
    rep = compress_hbs(identity_pg.original, EPS)
    L, R, J, k0 = factor_A_kc(rep, identity_pg, EPS)
    assert L.shape == (identity_pg.n_k, 0)
    assert R.shape == (0, 0)
    assert J.size == 0 and k0 == 0


# ---------------------------------------------------------------------------
# recompression
# ---------------------------------------------------------------------------

def test_recompress_empty():
    chain, J = recompress([], lambda idx: None, EPS)
    assert chain.shape == (0, 0)
    assert J.size == 0


def test_recompress_identical_rows_collapse():
    rows_of = lambda idx: np.ones((len(idx), 6))
    chain, J = recompress([np.array([0, 1]), np.array([2, 3])], rows_of, EPS)
    assert J.size == 1
    assert chain.shape == (4, 1)
    np.testing.assert_allclose(chain @ rows_of(J), np.ones((4, 6)),
                               atol=1e-12)


def test_recompress_single_skeleton_still_compresses():
    # one box whose skeleton rows are linearly dependent must shrink too
    M = np.outer(np.arange(1.0, 4.0), np.ones(5))
    chain, J = recompress([np.array([0, 1, 2])], lambda idx: M[idx], EPS)
    assert J.size == 1
    np.testing.assert_allclose(chain @ M[J], M, atol=1e-12)


def test_recompress_contract_random_low_rank():
    rng = np.random.default_rng(5)
    M = rng.standard_normal((20, 3)) @ rng.standard_normal((3, 8))
    skeletons = [np.arange(0, 7), np.arange(7, 14), np.arange(14, 20)]
    chain, J = recompress(skeletons, lambda idx: M[idx], EPS)
    assert 3 <= J.size <= 5
    assert np.all(np.isin(J, np.arange(20)))
    err = np.linalg.norm(chain @ M[J] - M) / np.linalg.norm(M)
    assert err <= 1e-8


# ---------------------------------------------------------------------------
# near-block compression against a piece
# ---------------------------------------------------------------------------

def test_factor_near_block_contract(bump_pg):
    # a box on the far side of the circle: the piece sits outside its
    # proxy circle and enters through poles only
    disc, piece = bump_pg.original, bump_pg.new_part
    rows = np.arange(0, 50)
    f = factor_near_block(rows, disc, piece, EPS)
    dense = assemble_cross(disc.nodes[rows], piece)
    err = np.linalg.norm(f.P @ dense[f.skeleton] - dense) / np.linalg.norm(dense)
    assert err <= 10 * EPS
    # the rank is that of the pole basis on the proxy circle, well below
    # the box size even though the true far-field rank is smaller still
    assert f.rank <= 25


# ---------------------------------------------------------------------------
# original-to-piece and piece-to-keep factorizations
# ---------------------------------------------------------------------------

def test_factor_op_reconstructs_dense(bump_rep, bump_pg):
    L, R, J, k0 = factor_A_op(bump_rep, bump_pg, EPS)
    dense = assemble_cross(bump_pg.original.nodes, bump_pg.new_part)
    err = np.linalg.norm(L @ R - dense) / np.linalg.norm(dense)
    assert err <= 10 * EPS
    k = L.shape[1]
    assert k <= k0
    assert abs(k - svd_rank(dense, EPS, relative=True)) <= 5


def test_factor_pk_reconstructs_dense(bump_rep, bump_pg):
    L, R, J, k0 = factor_A_pk(bump_rep, bump_pg, EPS)
    dense = assemble_cross(bump_pg.new_part.nodes,
                           bump_pg.original.subset(bump_pg.keep_indices))
    err = np.linalg.norm(L @ R - dense) / np.linalg.norm(dense)
    assert err <= 10 * EPS
    assert L.shape[1] <= k0
    assert abs(L.shape[1] - svd_rank(dense, EPS, relative=True)) <= 5
    # the stored left factor holds actual matrix columns
    cols = assemble_cross(bump_pg.new_part.nodes, bump_pg.original.subset(J))
    assert np.array_equal(L, cols)


def test_factor_op_pk_empty_piece(star_rep, star_cut_pg):
    pg = star_cut_pg
    assert pg.n_p == 0
    L, R, J, k0 = factor_A_op(star_rep, pg, EPS)
    assert L.shape == (pg.n_o, 0) and R.shape == (0, 0) and k0 == 0
    L, R, J, k0 = factor_A_pk(star_rep, pg, EPS)
    assert L.shape == (0, 0) and R.shape == (0, pg.n_k) and k0 == 0


# ---------------------------------------------------------------------------
# assembled update factors
# ---------------------------------------------------------------------------

def test_assemble_q_shape_validation(bump_pg, bump_uf):
    uf = bump_uf
    good = dict(L_kc=uf.L_kc, R_kc=uf.R_kc, B_cc=uf.B_cc, L_op=uf.L_op,
                R_op=uf.R_op, L_pk=uf.L_pk, R_pk=uf.R_pk)
    for name, message in [("L_kc", "L_kc rows"), ("R_kc", "R_kc shape"),
                          ("B_cc", "B_cc shape"), ("L_op", "L_op rows"),
                          ("R_op", "R_op shape"), ("L_pk", "L_pk rows"),
                          ("R_pk", "R_pk shape")]:
        broken = dict(good)
        broken[name] = np.zeros((good[name].shape[0] + 1,
                                 good[name].shape[1] + 1))
        with pytest.raises(ValueError, match=message):
            assemble_Q(bump_pg, **broken)


def test_update_factors_rank_bookkeeping(bump_pg, bump_uf):
    uf = bump_uf
    assert uf.k == uf.k_kc + bump_pg.n_c + uf.k_pk + uf.k_op
    s = uf.component_slices()
    assert s["kc"] == slice(0, uf.k_kc)
    assert s["cc"] == slice(uf.k_kc, uf.k_kc + bump_pg.n_c)
    assert s["op"].stop == uf.k
    assert uf.k_kc <= uf.k0_kc
    assert uf.k_op <= uf.k0_op
    assert uf.k_pk <= uf.k0_pk


def test_q_matches_dense_extended(bump199_rep, bump199_pg):
    pg = bump199_pg
    uf = factor_update(bump199_rep, pg, EPS)
    A_ext = assemble_extended_dense(pg)
    A_tilde = np.zeros_like(A_ext)
    A_tilde[:pg.n_o, :pg.n_o] = assemble_dense(pg.original)
    A_tilde[pg.n_o:, pg.n_o:] = assemble_dense(pg.new_part)
    Q_dense = A_ext - A_tilde
    Q_fast = uf.materialize_L() @ uf.materialize_R()
    err = np.linalg.norm(Q_fast - Q_dense) / np.linalg.norm(Q_dense)
    assert err <= 10 * EPS
    # the keep-to-cut coupling enters with a minus sign
    kc_block = Q_dense[np.ix_(pg.keep_indices, pg.cut_indices)]
    np.testing.assert_allclose(kc_block, -dense_block_kc(pg), atol=1e-14)


def test_materialized_factors_structural_zeros(bump_pg, bump_uf):
    uf = bump_uf
    s = uf.component_slices()
    Ld = uf.materialize_L()
    piece_rows = np.arange(bump_pg.n_o, bump_pg.n_ext)
    assert np.all(Ld[np.ix_(piece_rows, np.r_[s["kc"], s["cc"], s["op"]])] == 0)
    assert np.all(Ld[np.ix_(bump_pg.keep_indices, np.r_[s["cc"], s["pk"]])] == 0)
    assert np.all(Ld[np.ix_(bump_pg.cut_indices, np.r_[s["kc"], s["pk"]])] == 0)
    Rd = uf.materialize_R()
    assert np.all(Rd[s["kc"]][:, bump_pg.keep_indices] == 0)
    assert np.array_equal(Rd[s["cc"]][:, bump_pg.cut_indices],
                          np.eye(bump_pg.n_c))
    assert np.all(Rd[s["pk"]][:, bump_pg.cut_indices] == 0)
    assert np.all(Rd[s["pk"]][:, bump_pg.n_o:] == 0)
    assert np.all(Rd[s["op"]][:, :bump_pg.n_o] == 0)


def test_apply_matches_materialized(bump_pg, bump_uf):
    uf = bump_uf
    rng = np.random.default_rng(11)
    x = rng.standard_normal(bump_pg.n_ext)
    y = rng.standard_normal(uf.k)
    np.testing.assert_allclose(uf.apply_R(x), uf.materialize_R() @ x,
                               atol=1e-12)
    np.testing.assert_allclose(uf.apply_L(y), uf.materialize_L() @ y,
                               atol=1e-12)
    X = rng.standard_normal((bump_pg.n_ext, 2))
    np.testing.assert_allclose(uf.apply_R(X), uf.materialize_R() @ X,
                               atol=1e-12)


# ---------------------------------------------------------------------------
# factor_update
# ---------------------------------------------------------------------------

def test_factor_update_combined_identical(bump_rep, bump_pg, bump_uf):
    combined = factor_update(bump_rep, bump_pg, EPS, combined=True)
    for name in ("L_kc", "R_kc", "B_cc", "L_op", "R_op", "L_pk", "R_pk",
                 "J_kc"):
        assert np.array_equal(getattr(combined, name), getattr(bump_uf, name))
    assert (combined.k0_kc, combined.k0_op, combined.k0_pk) == \
           (bump_uf.k0_kc, bump_uf.k0_op, bump_uf.k0_pk)


def test_factor_update_factor_eps_default(bump_rep, bump_pg):
    a = factor_update(bump_rep, bump_pg, 1e-9)
    b = factor_update(bump_rep, bump_pg, 1e-9, factor_eps=1e-10)
    for name in ("L_kc", "R_kc", "L_op", "R_op", "L_pk", "R_pk"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_factor_update_mismatched_sizes(circle_rep, bump_pg):
    with pytest.raises(ValueError, match="disagree"):
        factor_update(circle_rep, bump_pg, EPS)


def test_factor_update_identity_rank_zero(identity_ps):
    assert identity_ps.k == 0
    assert identity_ps.factors.k_kc == 0
    assert identity_ps.cap_cond == 1.0


def test_factor_update_cut_block_diagonal_zeroed(bump_pg, bump_uf):
    assert bump_uf.B_cc.shape == (bump_pg.n_c, bump_pg.n_c)
    assert np.all(np.diag(bump_uf.B_cc) == 0.0)
    full = assemble_dense(bump_pg.cut_part())
    np.fill_diagonal(full, 0.0)
    assert np.array_equal(bump_uf.B_cc, full)


# ---------------------------------------------------------------------------
# perturbed solver
# ---------------------------------------------------------------------------

def test_build_solver_app_shape_raises(bump_solver, bump_uf):
    with pytest.raises(ValueError, match="A_pp"):
        build_perturbed_solver(bump_solver, np.zeros((3, 3)), bump_uf)


def test_precomputed_inverse_columns(bump_pg, bump_uf, bump_ps, bump_app):
    # A_oo @ (A_oo^-1 L_o) must reproduce the o-rows of L column block
    uf, ps = bump_uf, bump_ps
    A_oo = assemble_dense(bump_pg.original)
    m_o = uf.k_kc + bump_pg.n_c + uf.k_op
    Lo = np.zeros((bump_pg.n_o, m_o))
    Lo[bump_pg.keep_indices, :uf.k_kc] = -uf.L_kc
    Lo[bump_pg.cut_indices, uf.k_kc:uf.k_kc + bump_pg.n_c] = -uf.B_cc
    Lo[:, uf.k_kc + bump_pg.n_c:] = uf.L_op
    err = np.linalg.norm(A_oo @ ps.AinvL_o - Lo) / np.linalg.norm(Lo)
    assert err <= 1e-8
    err_p = np.linalg.norm(bump_app @ ps.AinvL_p - uf.L_pk)
    assert err_p <= 1e-10 * max(np.linalg.norm(uf.L_pk), 1.0)


def test_capacitance_condition_reported(bump_ps):
    assert np.isfinite(bump_ps.cap_cond)
    assert bump_ps.cap_cond >= 1.0


def test_solve_matches_dense_extended(bump_pg, bump_ps, bump_charges):
    f_ext = extended_rhs_dense(bump_pg, bump_charges)
    sk, sc, sp = solve_perturbed(bump_ps, f_ext)
    dk, dc, dp = dense_extended_solve(bump_pg, bump_charges)
    got = np.concatenate([sk, sc, sp])
    want = np.concatenate([dk, dc, dp])
    assert np.linalg.norm(got - want) / np.linalg.norm(want) <= 1e-8


def test_solve_satisfies_perturbed_system(bump_pg, bump_ps, bump_charges):
    f_ext = extended_rhs_dense(bump_pg, bump_charges)
    sk, _, sp = solve_perturbed(bump_ps, f_ext)
    res = perturbed_residual(bump_pg, sk, sp, bump_charges)
    assert res <= 1e-8


def test_solve_identity_equals_plain_inverse(identity_pg, identity_ps):
    rng = np.random.default_rng(13)
    b = rng.standard_normal(identity_pg.n_ext)
    sk, sc, sp = solve_perturbed(identity_ps, b)
    from perturbfds.hbs import apply_inverse
    assert np.array_equal(sk, apply_inverse(identity_ps.hbs_solver, b))
    assert sc.size == 0 and sp.size == 0


def test_solve_wrong_length_raises(bump_ps):
    with pytest.raises(ValueError, match="f_ext"):
        solve_perturbed(bump_ps, np.zeros(bump_ps.pg.n_ext - 1))


def test_solve_multicolumn(bump_pg, bump_ps, bump_charges):
    f = extended_rhs_dense(bump_pg, bump_charges)
    F = np.column_stack([f, 2.0 * f])
    SK, SC, SP = solve_perturbed(bump_ps, F)
    sk, sc, sp = solve_perturbed(bump_ps, f)
    np.testing.assert_allclose(SK[:, 0], sk, atol=1e-10)
    np.testing.assert_allclose(SK[:, 1], 2.0 * sk, atol=1e-10)
    np.testing.assert_allclose(SP[:, 1], 2.0 * sp, atol=1e-10)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_save_load_roundtrip(tmp_path, bump_pg, bump_solver, bump_ps,
                             bump_charges):
    path = tmp_path / "solver.npz"
    save_perturbed_solver(path, bump_ps)
    loaded = load_perturbed_solver(path, bump_pg, bump_solver)
    for name in ("L_kc", "R_kc", "B_cc", "L_op", "R_op", "L_pk", "R_pk"):
        assert np.array_equal(getattr(loaded.factors, name),
                              getattr(bump_ps.factors, name))
    assert loaded.cap_cond == bump_ps.cap_cond
    f_ext = extended_rhs_dense(bump_pg, bump_charges)
    got = solve_perturbed(loaded, f_ext)
    want = solve_perturbed(bump_ps, f_ext)
    for g, w in zip(got, want):
        assert np.array_equal(g, w)


def test_load_wrong_partition_raises(tmp_path, bump_ps, bump199_pg,
                                     bump_solver):
    path = tmp_path / "solver.npz"
    save_perturbed_solver(path, bump_ps)
    with pytest.raises(ValueError, match="different partition"):
        load_perturbed_solver(path, bump199_pg, bump_solver)
