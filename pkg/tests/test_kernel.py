"""Laplace kernels, Nystrom assembly, and manufactured exact solutions."""

import numpy as np
import pytest

from perturbfds.geometry import (Discretization, StarCurve, circle,
                                 discretize_trapezoid, winding_number)
from perturbfds.kernel import (ChargeSet, assemble_cross, assemble_dense,
                               boundary_data, diagonal_limit,
                               double_layer_kernel, eval_potential,
                               exact_solution, fundamental_solution,
                               load_dense, make_charges, make_targets,
                               save_dense, save_dense_csv)

INV_2PI = 1.0 / (2.0 * np.pi)


# ---------------------------------------------------------------------------
# kernel values
# ---------------------------------------------------------------------------

def test_fundamental_solution_values():
    # G = -(1/2 pi) log r: r = 1 gives 0, r = e gives -1/(2 pi)
    targets = np.array([[0.0, 0.0]])
    sources = np.array([[1.0, 0.0], [np.e, 0.0]])
    G = fundamental_solution(targets, sources)
    np.testing.assert_allclose(G, [[0.0, -INV_2PI]], atol=1e-15)


def test_fundamental_solution_coincident_rejected():
    pts = np.array([[1.0, 2.0]])
    with pytest.raises(ValueError, match="coincident"):
        fundamental_solution(pts, pts)


def test_double_layer_constant_on_circle(circle_disc):
    # On the unit circle the double-layer kernel is identically -1/(4 pi)
    # for any two distinct points.
    x = circle_disc.nodes[:5]
    y = circle_disc.nodes[100:110]
    D = double_layer_kernel(x, y, circle_disc.normals[100:110])
    np.testing.assert_allclose(D, -0.5 * INV_2PI, rtol=1e-12)


def test_double_layer_matches_normal_derivative_of_g():
    # D(x, y) = d/d(nu_y) G(x, y); central finite difference in y.
    x = np.array([[0.3, 1.7]])
    y = np.array([[1.2, -0.4]])
    nu = np.array([[0.6, 0.8]])
    h = 1e-6
    gp = fundamental_solution(x, y + h * nu)[0, 0]
    gm = fundamental_solution(x, y - h * nu)[0, 0]
    fd = (gp - gm) / (2 * h)
    D = double_layer_kernel(x, y, nu)[0, 0]
    assert abs(D - fd) < 1e-9


def test_diagonal_limit_values():
    # w * (-kappa / (4 pi)); unit curvature at trapezoid weight 2 pi / N
    N = 100
    assert abs(diagonal_limit(1.0, 2 * np.pi / N) - (-1.0 / (2 * N))) < 1e-16
    np.testing.assert_allclose(diagonal_limit(np.array([2.0]), np.array([0.5])),
                               [-0.5 * INV_2PI], rtol=1e-15)


# ---------------------------------------------------------------------------
# dense assembly
# ---------------------------------------------------------------------------

def test_assemble_dense_circle_entries():
    N = 128
    d = discretize_trapezoid(circle(), N)
    A = assemble_dense(d)
    w = 2 * np.pi / N
    off = A[0, 1]
    assert abs(off - (-w * 0.5 * INV_2PI)) < 1e-14  # w * (-1/(4 pi))
    assert abs(A[0, 0] - (-0.5 - w * 0.5 * INV_2PI)) < 1e-14
    # the whole off-diagonal is one constant on a circle
    mask = ~np.eye(N, dtype=bool)
    np.testing.assert_allclose(A[mask], off, rtol=1e-12)


def test_assemble_dense_single_node():
    d = Discretization(t=np.zeros(1), nodes=np.array([[2.0, 0.0]]),
                       normals=np.array([[1.0, 0.0]]),
                       weights=np.array([0.25]), curvatures=np.array([0.5]))
    A = assemble_dense(d)
    assert A.shape == (1, 1)
    assert abs(A[0, 0] - (-0.5 + diagonal_limit(0.5, 0.25))) < 1e-16


def test_gauss_identity_on_smooth_curves():
    for curve, N in ((circle(), 200), (StarCurve(amplitude=0.3, arms=5), 400)):
        d = discretize_trapezoid(curve, N)
        A = assemble_dense(d)
        assert np.max(np.abs(A @ np.ones(d.n) + 1.0)) < 1e-10


def test_assemble_cross_matches_weighted_kernel(bump_pg):
    piece = bump_pg.new_part
    targets = bump_pg.original.nodes[:7]
    C = assemble_cross(targets, piece)
    K = double_layer_kernel(targets, piece.nodes, piece.normals)
    np.testing.assert_array_equal(C, K * piece.weights[None, :])


def test_assemble_dense_cross_coincident_rejected(circle_disc):
    sub = circle_disc.subset(np.arange(8))
    with pytest.raises(ValueError, match="coincident"):
        assemble_dense(sub, sub)


# ---------------------------------------------------------------------------
# potential evaluation
# ---------------------------------------------------------------------------

def test_eval_potential_of_unit_density_is_minus_one(circle_disc):
    targets = np.array([[0.0, 0.0], [0.3, -0.2]])
    u = eval_potential(targets, circle_disc, np.ones(circle_disc.n))
    np.testing.assert_allclose(u, -1.0, atol=1e-12)
    u0 = eval_potential(targets, circle_disc, np.zeros(circle_disc.n))
    np.testing.assert_array_equal(u0, 0.0)


def test_eval_potential_near_boundary_warns(circle_disc):
    h = circle_disc.weights[0]
    with pytest.warns(UserWarning, match="unreliable"):
        u, near = eval_potential(np.array([[1.0 - 0.5 * h, 0.0]]),
                                 circle_disc, np.ones(circle_disc.n),
                                 return_near_mask=True)
    assert near[0]


# ---------------------------------------------------------------------------
# manufactured solutions
# ---------------------------------------------------------------------------

def test_charge_set_potential_is_harmonic():
    charges = ChargeSet(points=np.array([[2.0, 1.0], [-3.0, 0.5]]),
                        strengths=np.array([1.0, -0.7]))
    x0 = np.array([0.1, -0.2])
    h = 1e-4
    stencil = np.array([[0, 0], [h, 0], [-h, 0], [0, h], [0, -h]]) + x0
    u = exact_solution(stencil, charges)
    laplacian = (u[1] + u[2] + u[3] + u[4] - 4 * u[0]) / h ** 2
    assert abs(laplacian) < 1e-6


def test_exact_solution_single_charge():
    charges = ChargeSet(points=np.array([[np.e, 0.0]]),
                        strengths=np.array([1.0]))
    u = exact_solution(np.array([[0.0, 0.0]]), charges)
    np.testing.assert_allclose(u, [-INV_2PI], rtol=1e-15)


def test_make_charges_exterior_and_deterministic(circle_disc):
    c1 = make_charges(circle_disc, seed=7)
    c2 = make_charges(circle_disc, seed=7)
    np.testing.assert_array_equal(c1.points, c2.points)
    np.testing.assert_array_equal(c1.strengths, c2.strengths)
    w = winding_number(circle_disc.nodes, c1.points)
    np.testing.assert_array_equal(w, 0)
    assert c1.points.shape == (10, 2)


def test_make_targets_interior(circle_disc):
    t = make_targets(circle_disc, n=6, seed=5)
    w = winding_number(circle_disc.nodes, t)
    np.testing.assert_array_equal(w, 1)


def test_boundary_data_is_charge_trace(circle_disc):
    charges = make_charges(circle_disc, seed=1)
    g = boundary_data(circle_disc, charges)
    np.testing.assert_array_equal(g, charges.potential(circle_disc.nodes))


def test_boundary_data_linearity(circle_disc):
    a = ChargeSet(points=np.array([[3.0, 0.0]]), strengths=np.array([2.0]))
    b = ChargeSet(points=np.array([[3.0, 0.0]]), strengths=np.array([-1.0]))
    ga = boundary_data(circle_disc, a)
    gb = boundary_data(circle_disc, b)
    np.testing.assert_allclose(gb, -0.5 * ga, rtol=1e-14)


# ---------------------------------------------------------------------------
# matrix files
# ---------------------------------------------------------------------------

def test_save_load_dense_roundtrip(tmp_path, rng):
    A = rng.standard_normal((13, 7))
    path = tmp_path / "block.bin"
    save_dense(path, A)
    np.testing.assert_array_equal(load_dense(path), A)


def test_load_dense_rejects_truncation(tmp_path, rng):
    A = rng.standard_normal((10, 10))
    path = tmp_path / "block.bin"
    save_dense(path, A)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_dense(path)


def test_save_dense_csv_cap(tmp_path):
    with pytest.raises(ValueError, match="too large"):
        save_dense_csv(tmp_path / "big.csv", np.zeros((600, 600)))
    save_dense_csv(tmp_path / "ok.csv", np.eye(3))
    assert (tmp_path / "ok.csv").exists()
