import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hydrolimit import kinetic_weights as kw
from hydrolimit.collision_operator import C1, C2, collision_frequency_nu0, kernel_k0
from hydrolimit.velocity_space import build_grid, hydro_basis

P = kw.WeightParams(0.1, 5e-4)


def test_params_validation():
    with pytest.raises(ValueError):
        kw.WeightParams(0.3, 1e-4)
    with pytest.raises(ValueError):
        kw.WeightParams(0.1, 0.1 / (2 * np.pi) * 0.1)
    with pytest.raises(ValueError):
        kw.WeightParams(0.1, 1e-4, 0.2)
    with pytest.raises(ValueError):
        P.primed()
    assert kw.WeightParams(0.1, 5e-4, 0.05).primed() == kw.WeightParams(0.05, 5e-4)


def test_z_beta_branch_match():
    b = P.beta
    k = P.knee
    assert float(kw.z_beta(P, k)) == pytest.approx(b, rel=1e-14)
    assert 1 / (1 + k) == pytest.approx(b, rel=1e-14)
    assert float(kw.z_beta(P, k + 1e-9)) == pytest.approx(b, rel=1e-9)


@given(st.floats(0.0, 1e5), st.floats(0.0, 1e3))
def test_z_beta_nonincreasing(a, d):
    assert kw.z_beta(P, a + d) <= kw.z_beta(P, a)


def test_weight_examples(rng):
    x = rng.uniform(0, 5, (6, 3))
    v = rng.normal(size=(6, 3))
    assert np.allclose(kw.weight_w(P, x, np.zeros(3)), 1.0)
    assert np.allclose(kw.weight_w(P, np.zeros(3), v), np.exp(P.rho * np.sum(v * v, 1)))
    assert np.all(kw.weight_w(P, x, 10 * v) > 0)


@pytest.mark.parametrize("x3", [0.7, 2500.0])
def test_log_weight_transport_vs_difference(x3, rng):
    x = np.array([1.3, 0.4, x3])
    for v in rng.normal(size=(4, 3)):
        h = 1e-6
        fd = (np.log(kw.weight_w(P, x + h * v, v)) - np.log(kw.weight_w(P, x - h * v, v))) / (2 * h)
        assert float(kw.log_weight_transport(P, x, v)) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_transport_flat_tangential(rng):
    x = np.column_stack([rng.uniform(0, 6, 20), rng.uniform(0, 6, 20), rng.uniform(0, P.knee, 20)])
    v = rng.normal(size=(20, 3))
    v[:, 2] = 0
    lhs, rhs = kw.weight_transport_inequality(P, x, v)
    w = kw.weight_w(P, x, v)
    assert np.allclose(lhs, P.beta * np.sum(v * v, 1) * w, rtol=1e-14)
    assert np.all(lhs >= rhs)


@pytest.mark.parametrize("params", [P, kw.WeightParams(0.1, 0.1 / (2 * np.pi) * 0.09)], ids=["default", "edge"])
def test_transport_monte_carlo(params):
    x, v = kw.sample_phase_points(np.random.default_rng(1), 100_000, params)
    lhs, rhs = kw.weight_transport_inequality(params, x, v)
    assert np.all(lhs - rhs >= -1e-14 * np.abs(rhs))


def _worst_defect(params, x3, xh=2 * np.pi):
    """Smallest (lhs - rhs)/w over unit v at x = (xh, xh, x3), from the quadratic form's eigenvector."""
    s, b = 1 / (1 + x3), params.beta
    r = np.hypot(xh, xh)
    Q = np.array([[s - b * s / 2, -s * s * r / 2], [-s * s * r / 2, s * s - b * s / 2]])
    a, v3 = np.linalg.eigh(Q)[1][:, 0]
    v = np.array([a / np.sqrt(2), a / np.sqrt(2), v3])
    x = np.array([xh, xh, x3])
    lhs, rhs = kw.weight_transport_inequality(params, x, v)
    return float((lhs - rhs) / kw.weight_w(params, x, v))


def test_transport_valid_height_is_sharp():
    H = kw.transport_valid_height(P)
    assert H > P.knee
    assert _worst_defect(P, 0.99 * H) > 0
    assert _worst_defect(P, 1.01 * H) < 0


def test_nu_B_zero_flow(rng):
    x, v = kw.sample_phase_points(rng, 2000, P, vmax=6.0)
    flow = kw.FlowPoint()
    val, bound = kw.nu_B(P, 0.05, 0.1, flow, x, v)
    want = collision_frequency_nu0(v) - 0.05 * 0.1 * kw.log_weight_transport(P, x, v)
    assert np.allclose(val, want)
    assert np.all(val >= bound)


def test_nu_B_shear_sampled(rng):
    flow = kw.FlowPoint(u=(0.3, 0, 0), grad_u=((0, 0, 0), (0, 0, 0), (0.5, 0, 0)))
    x, v = kw.sample_phase_points(rng, 2000, P, x3_max=3.0, vmax=6.0)
    val, bound = kw.nu_B(P, 0.01, 0.05, flow, x, v)
    assert np.all(val >= bound)


def test_nu_B_guard():
    flow = kw.FlowPoint(grad_u=((0, 0, 0), (0, 0, 0), (50.0, 0, 0)))
    with pytest.raises(ValueError, match="too strong"):
        kw.nu_B(P, 0.1, 0.1, flow, np.array([[1.0, 1.0, 1.0]]), np.array([[1.0, 0, 0]]))


def test_sqrt_mu_log_derivative_shear():
    flow = kw.FlowPoint(u=(0.2, 0, 0), grad_u=((0, 0, 0), (0, 0, 0), (0.5, 0, 0)))
    v = np.array([0.3, -0.4, 1.1])
    w = v - 0.1 * np.array([0.2, 0, 0])
    assert float(kw.sqrt_mu_log_derivative(0.1, flow, v)) == pytest.approx(0.5 * w[2] * 0.5 * w[0])


# ---------------------------------------------------------------- kernel

def test_kernel_majorant(rng):
    x = np.array([1.0, 2.0, 0.5])
    v = rng.normal(size=(4000, 3)) * 2
    vs = rng.normal(size=(4000, 3)) * 2
    ratio = kw.weight_w(P, x, v) / kw.weight_w(P, x, vs)
    k = np.abs(kernel_k0(v, vs)) * ratio
    kmaj = kw.kernel_kw(P, x, v, vs)
    V2 = np.sum((v - vs) ** 2, 1)
    near = V2 <= C2 / C1
    assert np.all(k[near] <= kmaj[near] * (1 + 1e-12))
    # away from the diagonal the first kernel piece costs a factor |V|^2
    assert np.all(k <= kmaj * (C2 + C1 * V2) / (2 * C2) * (1 + 1e-12))


def test_kernel_not_symmetric():
    x = np.array([1.0, 2.0, 0.5])
    v, vs = np.array([1.0, 0.0, 0.5]), np.array([-0.5, 0.3, 0.0])
    a, b = kw.kernel_kw(P, x, v, vs), kw.kernel_kw(P, x, vs, v)
    assert a != pytest.approx(b)
    wr = kw.weight_w(P, x, v) / kw.weight_w(P, x, vs)
    assert a / wr == pytest.approx(b * wr, rel=1e-12)


def test_kernel_integral_decay():
    fit = kw.kernel_decay_fit(P)
    assert np.isfinite(fit.constant)
    assert fit.tail_slope <= -0.9


def test_kernel_integral_zero_weight_closed_form():
    # rho = 0 limit at x = 0, v = 0: int 2 C2 e^{-r^2/4} / r dv = 8 pi C2 int r e^{-r^2/4} dr = 16 pi C2
    tiny = kw.WeightParams(1e-12, 1e-15)
    got = kw.kernel_kw_integral(tiny, np.zeros(3))[0]
    assert got == pytest.approx(16 * np.pi * C2, rel=1e-8)


# ---------------------------------------------------------------- exit geometry

def test_exit_examples():
    e = kw.exit_geometry([0, 0, 1], [0, 0, 1], 1.0)
    assert e.t_b == 1.0 and np.allclose(e.x_b, 0)
    e = kw.exit_geometry([1.0, 2.0, 3.0], [0.5, -1.0, 2.0], 0.1)
    assert e.t_b == pytest.approx(0.15)
    assert e.x_b[2] == 0.0
    with pytest.raises(ValueError, match="grazing"):
        kw.exit_geometry([0, 0, 1], [1, 0, 0], 1.0)
    assert kw.exit_geometry([0, 0, 1], [0, 0, -1], 1.0).t_b == np.inf


@given(st.floats(0.05, 3.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_bottom_jacobian(v3, v1, v2):
    x = np.array([np.pi, np.pi, 0.01 * v3])
    v = np.array([v1, v2, v3])
    jac = kw.boundary_jacobians(x, v)
    assert jac.face == "bottom"
    assert jac.jac_2 == pytest.approx(abs(v2 / v3))
    assert jac.jac_fd == pytest.approx(jac.jac_2, rel=1e-6, abs=1e-8)


def test_side_face_normal():
    jac = kw.boundary_jacobians([0.1, 3.0, 5.0], [1.0, 0.2, 0.1])
    assert jac.face == "x1=0"
    assert np.array_equal(jac.normal, [-1.0, 0.0, 0.0])
    assert jac.jac_2 == pytest.approx(0.2)


@pytest.mark.parametrize("v", [(0.3, 0.7, 1.1), (-0.5, -1.2, 0.4)])
def test_change_of_variables(v):
    bump = lambda y1, y2: np.exp(-((y1 - 0.3) ** 2 + (y2 + 0.5 * np.sign(v[1])) ** 2))
    lhs, rhs = kw.change_of_variables_check(v, bump, x2=float(np.sign(v[1])))
    assert lhs == pytest.approx(rhs, rel=1e-6)


# ---------------------------------------------------------------- functionals

@pytest.fixture(scope="module")
def vg():
    return build_grid(12)


def _field(vals, vg):
    return kw.PhaseField(vals, np.full(len(vals), 0.5), vg)


def test_functionals_zero(vg):
    f = _field(np.zeros((3, vg.size)), vg)
    E, D, F = kw.functionals_E_D_F([f, f], [f, f], [0.0, 0.1], 0.1, 0.1)
    assert E == D == F == 0.0


def test_functionals_hydrodynamic_bump(vg):
    b = hydro_basis(vg)[0]
    vals = np.array([1.0, 0.5, -0.2])[:, None] * b[None]
    f = _field(vals, vg)
    assert kw.dissipation_rate(f, 0.1, 0.1) < 1e-20
    E, D, F = kw.functionals_E_D_F([f, f], [f, f], [0.0, 0.1], 0.1, 0.1)
    assert E > 0 and D < 1e-18 and F > 0


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 10.0))
def test_functionals_homogeneous(c):
    vg = build_grid(12)
    rng = np.random.default_rng(5)
    fs = [_field(rng.normal(size=(3, vg.size)) * np.exp(-vg.speed2 / 4), vg) for _ in range(3)]
    dfs = [_field(rng.normal(size=(3, vg.size)) * np.exp(-vg.speed2 / 4), vg) for _ in range(3)]
    t = [0.0, 0.05, 0.1]
    E, D, F = kw.functionals_E_D_F(fs, dfs, t, 0.1, 0.2)
    E2, D2, F2 = kw.functionals_E_D_F([f.scaled(c) for f in fs], [f.scaled(c) for f in dfs], t, 0.1, 0.2)
    assert np.sqrt(E2) == pytest.approx(c * np.sqrt(E), rel=1e-12)
    assert D2 == pytest.approx(c * c * D, rel=1e-12)
    assert F2 == pytest.approx(c * c * F, rel=1e-12)
    assert min(E, D, F) >= 0


def test_gamma_norm_boundary(vg):
    vals = np.zeros((2, vg.size))
    bnd = np.exp(-vg.speed2 / 2)[None]
    f = kw.PhaseField(vals, np.ones(2), vg, boundary=bnd, boundary_weights=np.array([2.0]))
    want = 2 * vg.integrate(bnd[0] ** 2 * np.abs(vg.nodes[:, 2]))
    assert kw.gamma_norm_sq(f) == pytest.approx(want)


# ---------------------------------------------------------------- embedding and moments

def test_embedding_constant():
    t = np.linspace(0, 1, 101)
    c = kw.embedding_1d_check(np.ones_like(t), np.zeros_like(t), t)
    assert c.lhs == 1.0 and c.C_T == 4.0 and c.rhs == pytest.approx(4.0)
    assert c.holds


@pytest.mark.parametrize("T", [0.5, 1.0, 3.0])
def test_embedding_linear(T):
    t = np.linspace(0, T, 2001)
    c = kw.embedding_1d_check(t, np.ones_like(t), t)
    assert c.lhs == pytest.approx(T * T)
    assert c.rhs == pytest.approx(max(4 / T, T) * (T**3 / 3 + T), rel=1e-6)
    assert c.holds


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(0.2, 5.0))
def test_embedding_random_smooth(coef, T):
    t = np.linspace(0, T, 801)
    k = np.arange(1, 5)
    g = np.sin(np.outer(t, k) + 0.3) @ coef
    dg = (np.cos(np.outer(t, k) + 0.3) * k) @ coef
    assert kw.embedding_1d_check(g, dg, t).holds


def test_gaussian_moments():
    assert kw.gaussian_moment([2, 0, 0]) == 1.0
    assert kw.gaussian_moment([4, 2, 0]) == 3.0
    assert kw.gaussian_moment([6]) == 15.0
    assert kw.gaussian_moment([3, 2]) == 0.0


def test_moment_identities():
    closed = kw.moment_identities_closed()
    assert np.allclose(closed, 0.0, atol=1e-14)
    assert np.max(np.abs(kw.moment_identities() - closed)) < 1e-9
