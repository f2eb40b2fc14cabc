import contextlib

import numpy as np
import pytest

from hydrolimit import ns_vorticity_solver as ns
from hydrolimit.euler_reference import (
    EulerState,
    euler_pressure,
    kato_functional,
    l2_distance,
    maxwellian_distance,
    run_euler,
    step_euler,
)
from hydrolimit.spectral_halfspace import SpatialGrid, SpectralField, biot_savart, curl, inverse_transform_h
from hydrolimit.velocity_space import build_grid


@pytest.fixture(scope="module")
def grid():
    return SpatialGrid(M=6, M2=0, K=64, zmax=16.0, stretch=5.0)


def _shear(grid, U, dU):
    w = SpectralField.zeros(grid)
    w.data[1, 0, 0] = dU(grid.z)
    return w


def test_shear_is_steady(grid):
    w = _shear(grid, None, lambda z: np.exp(-z))
    states = run_euler(w, 1e-2, 0.1)
    assert np.max(np.abs(states[-1].omega.data - w.data)) < 1e-13
    np.testing.assert_allclose(inverse_transform_h(states[-1].u)[0, 0, 0], 1 - np.exp(-grid.z), atol=1e-10)


def test_zero_stays_zero(grid):
    states = run_euler(SpectralField.zeros(grid), 1e-2, 0.05)
    assert np.max(np.abs(states[-1].omega.data)) == 0
    assert kato_functional(states, 1.0) == 0.0


@pytest.fixture(scope="module")
def seed_run(grid):
    w0 = curl(ns.seed_velocity(ns.PlanarSeed(), grid))
    return run_euler(w0, 5e-3, 0.2)


def test_energy_conserved_and_no_penetration(seed_run):
    E = [s.u.norm_l2() for s in seed_run]
    assert max(E) - min(E) < 1e-6 * E[0]
    for s in seed_run[::10]:
        assert np.max(np.abs(inverse_transform_h(s.u)[2, ..., 0])) < 1e-12


def test_rk4_order(grid):
    w0 = curl(ns.seed_velocity(ns.PlanarSeed(), grid))
    ref = run_euler(w0, 1.25e-3, 0.1)[-1].omega
    e = [l2_distance(run_euler(w0, dt, 0.1)[-1].omega, ref) for dt in (1e-2, 5e-3)]
    assert e[0] / e[1] > 8


def test_cfl_guard(grid):
    w0 = curl(ns.seed_velocity(ns.PlanarSeed(), grid)) * 50.0
    with pytest.raises(ValueError):
        step_euler(EulerState(biot_savart(w0, check=False), w0, 0.0), 0.5)


def test_kato_shear_closed_form(grid):
    # K = kappa T (2 pi)^2 int_0^{c kappa} U'(z)^2 dz for a steady shear
    g = SpatialGrid(M=1, M2=0, K=128, zmax=16.0, stretch=8.0)
    w = _shear(g, None, lambda z: np.exp(-z))
    T = 0.1
    states = run_euler(w, 0.05, T)
    for kap in (1e-1, 5e-2):
        for c in (0.5, 1.0, 2.0):
            width = c * kap
            exact = kap * T * (2 * np.pi) ** 2 * (1 - np.exp(-2 * width)) / 2
            with pytest.warns(RuntimeWarning) if g.nodes_below(width) < 4 else contextlib.nullcontext():
                val = kato_functional(states, kap, c)
            assert abs(val - exact) < 1e-8 * exact


def test_maxwellian_distance(grid, seed_run):
    v = build_grid(12, 6.0)
    uE = seed_run[0].u
    assert maxwellian_distance(uE, uE, 0.05, v) == 0.0
    du = seed_run[-1].u - uE
    eps = 1e-3
    d1 = maxwellian_distance(uE + du * 0.1, uE, eps, v)
    d2 = maxwellian_distance(uE + du * 0.2, uE, eps, v)
    assert abs(d2 / d1 - 2) < 0.02
    with pytest.raises(ValueError):
        maxwellian_distance(uE * 100.0, uE, 0.5, v)


def test_euler_pressure_decays(seed_run):
    p = euler_pressure(seed_run[-1])
    assert np.max(np.abs(p.data[..., -1])) < 1e-6 * np.max(np.abs(p.data))
