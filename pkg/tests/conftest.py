"""Shared fixtures: geometries and compressed operators reused across files.

Everything here is session-scoped because compression and inversion are the
expensive steps; tests must treat fixture objects as immutable.
"""

import numpy as np
import pytest

from perturbfds.geometry import (circle, circle_with_bump, discretize_trapezoid,
                                 make_perturbation, rounded_square_with_nose,
                                 star_cut_geometry, star_with_refined_panels)
from perturbfds.hbs import compress_hbs, invert_hbs
from perturbfds.kernel import make_charges

EPS = 1e-10


@pytest.fixture(scope="session")
def circle_disc():
    return discretize_trapezoid(circle(), 1600)


@pytest.fixture(scope="session")
def circle_rep(circle_disc):
    return compress_hbs(circle_disc, EPS)


@pytest.fixture(scope="session")
def circle_solver(circle_rep):
    return invert_hbs(circle_rep)


@pytest.fixture(scope="session")
def bump_pg():
    """Bumped circle, small cut: N_o=2000, N_c=N_p=40, N_ext=2040."""
    return circle_with_bump(2000, n_cut=40)


@pytest.fixture(scope="session")
def bump_rep(bump_pg):
    return compress_hbs(bump_pg.original, EPS)


@pytest.fixture(scope="session")
def bump_solver(bump_rep):
    return invert_hbs(bump_rep)


@pytest.fixture(scope="session")
def bump_charges(bump_pg):
    return make_charges(bump_pg.original, seed=3)


@pytest.fixture(scope="session")
def bump199_pg():
    """Bumped circle at the sweep-family cut size: N_c=N_p=199."""
    return circle_with_bump(2000, n_cut=199)


@pytest.fixture(scope="session")
def bump199_rep(bump199_pg):
    return compress_hbs(bump199_pg.original, EPS)


@pytest.fixture(scope="session")
def bump199_solver(bump199_rep):
    return invert_hbs(bump199_rep)


@pytest.fixture(scope="session")
def nose_pg():
    """Rounded square with nose: N_o=2048, N_c=80, N_p in the 700-900 band."""
    return rounded_square_with_nose(128)


@pytest.fixture(scope="session")
def star_cut_pg():
    """Star with an 80-node cut and no replacement: N_k=1200, N_c=80."""
    return star_cut_geometry(80, 5)


@pytest.fixture(scope="session")
def star_ref_pg():
    """Star with refined cut panels, small enough for dense oracles."""
    return star_with_refined_panels(1, n_panels=120, cut_panels=3)


@pytest.fixture(scope="session")
def identity_pg():
    disc = discretize_trapezoid(circle(), 800)
    return make_perturbation(disc, None)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
