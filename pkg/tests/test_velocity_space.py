import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hydrolimit.velocity_space import (
    DistributionField,
    MaxwellianParams,
    boundary_projection_Pgamma,
    build_grid,
    hydro_basis,
    hydro_projection,
    maxwellian,
    moments,
    mu0,
    project_P,
    wall_projection,
)

TOL_Q = 1e-6


def test_rejects_small_grids():
    with pytest.raises(ValueError):
        build_grid(6, 6.0)
    with pytest.raises(ValueError):
        build_grid(24, 4.0)


def test_grid_invariants(grid24):
    g = grid24
    assert np.all(g.weights > 0)
    assert abs(g.integrate(mu0(g.nodes)) - 1) < TOL_Q
    # closed under negation with equal weights
    np.testing.assert_array_equal(g.nodes[g.mirror], -g.nodes)
    np.testing.assert_array_equal(g.weights[g.mirror], g.weights)


def test_default_grid_second_moment(grid24):
    g = grid24
    m = mu0(g.nodes)
    assert np.max(np.abs(g.integrate(g.nodes.T * m))) < 1e-16
    assert abs(g.integrate(g.speed2 * m) - 3) < TOL_Q


def test_gaussian_moments_to_order_four():
    # cutoff 6 truncates the fourth moment at 2e-6; cutoff 7 clears tol_q
    g = build_grid(24, 7.0)
    m = mu0(g.nodes)
    v1, v2 = g.nodes[:, 0], g.nodes[:, 1]
    for f, exact in [(1.0, 1.0), (v1**2, 1.0), (v1**4, 3.0), (v1**2 * v2**2, 1.0), (v1**3, 0.0), (v1 * v2, 0.0)]:
        assert abs(g.integrate(f * m) - exact) < TOL_Q


def test_quadrature_refinement_order():
    # error of int v1^4 mu0 at a fixed cutoff large enough that truncation is negligible
    errs = []
    hs = []
    for n in (10, 14, 20):
        g = build_grid(n, 7.0)
        errs.append(abs(g.integrate(g.nodes[:, 0] ** 4 * mu0(g.nodes)) - 3) + 1e-300)
        hs.append(g.h)
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order >= 2


def test_maxwellian_examples(grid12):
    assert maxwellian(MaxwellianParams(), np.zeros(3)) == pytest.approx((2 * np.pi) ** -1.5)
    u = (0.01, -0.02, 0.03)
    assert maxwellian(MaxwellianParams(U=u), np.array(u)) == pytest.approx((2 * np.pi) ** -1.5)
    v = grid12.nodes
    np.testing.assert_allclose(maxwellian(MaxwellianParams(R=2.0), v), 2 * mu0(v))


def test_maxwellian_params_validation():
    with pytest.raises(ValueError):
        MaxwellianParams(R=0.0)
    with pytest.raises(ValueError):
        MaxwellianParams(T=-1.0)


@given(
    st.floats(0.1, 3.0), st.floats(0.3, 3.0),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.lists(st.floats(-4, 4), min_size=3, max_size=3),
)
def test_maxwellian_positive(R, T, U, v):
    val = maxwellian(MaxwellianParams(R, tuple(U), T), np.array(v))
    assert val > 0


def test_projection_basis_element(grid24):
    B = hydro_basis(grid24)
    Pf, c = project_P(B[2], (0, 0, 0), grid24)
    np.testing.assert_allclose(c, [0, 0, 1, 0, 0], atol=TOL_Q)
    np.testing.assert_allclose(Pf, B[2], atol=TOL_Q)


def test_projection_kills_orthogonal(grid12, rng):
    proj = hydro_projection(grid12)
    f = rng.standard_normal(grid12.size)
    f = f - proj.apply(f)
    Pf, c = project_P(f, (0, 0, 0), grid12)
    assert np.max(np.abs(c)) < 1e-12
    assert np.max(np.abs(Pf)) < 1e-12


def test_projection_defect_oracle(grid12, rng):
    # oracle: plain weighted sums, independent of the Cholesky route
    f = rng.standard_normal(grid12.size)
    Pf, _ = project_P(f, (0.1, 0, -0.2), grid12)
    B = hydro_basis(grid12, (0.1, 0, -0.2))
    defect = [np.sum((f - Pf) * b * grid12.weights) for b in B]
    assert np.max(np.abs(defect)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
def test_projection_idempotent_selfadjoint(seed, bulk):
    g = build_grid(12, 6.0)
    r = np.random.default_rng(seed)
    f, h = r.standard_normal((2, g.size))
    proj = hydro_projection(g, bulk)
    Pf = proj.apply(f)
    np.testing.assert_allclose(proj.apply(Pf), Pf, atol=1e-10)
    assert abs(g.inner(Pf, h) - g.inner(f, proj.apply(h))) < 1e-10


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-0.57, 0.57), min_size=3, max_size=3))
def test_shifted_gram_identity(bulk):
    # eps |u| <= 1: the shifted Maxwellian stays well inside the cutoff
    g = build_grid(24, 7.0)
    assert hydro_projection(g, bulk).gram_defect() < TOL_Q


def test_moments_examples(grid24):
    g = grid24
    np.testing.assert_allclose(moments(mu0(g.nodes), g, 0.1), 0, atol=1e-14)
    eps = 1e-3
    r = moments((1 + eps) * mu0(g.nodes), g, eps)
    assert abs(r[0] - 1) < TOL_Q
    assert DistributionField(mu0(g.nodes), g, "F").values.shape == (g.size,)


def test_moments_velocity_richardson(grid24):
    g = grid24
    u = np.array([0.3, -0.5, 0.2])
    errs = []
    for eps in (0.02, 0.01):
        F = maxwellian(MaxwellianParams(U=tuple(eps * u)), g.nodes)
        errs.append(np.max(np.abs(moments(F, g, eps)[1:4] - u)))
    # the velocity moment is exact in eps up to quadrature error
    assert max(errs) < 1e-5


def test_wall_projection_normalisation(grid24):
    wp = wall_projection(grid24)
    m = mu0(grid24.nodes)
    flux = np.sum(wp.c_mu * m * wp.flux * wp.outgoing * grid24.weights)
    assert abs(flux - 1) < 1e-12
    # unit-norm projector: P root = root on outgoing velocities
    np.testing.assert_allclose(wp(wp.root), wp.root, atol=1e-12)


def test_wall_projection_odd_tangential(grid24):
    g = grid24.nodes[:, 0] * np.sqrt(mu0(grid24.nodes))
    assert np.max(np.abs(boundary_projection_Pgamma(g, grid24))) < 1e-14
