"""Inviscid reference flow, the Kato layer functional and the Maxwellian distance."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .spectral_halfspace import SpectralField, biot_savart, inverse_transform_h
from .ns_vorticity_solver import nonlinear_N, pressure_reconstruct, interp_matrix
from .velocity_space import VelocityGrid, build_grid, mu0


@dataclass
class EulerState:
    u: SpectralField
    omega: SpectralField
    t: float
    p: SpectralField | None = None


def euler_rhs(omega: SpectralField, psi3_bc: str = "dirichlet") -> tuple[SpectralField, SpectralField]:
    u = biot_savart(omega, psi3_bc, check=False)
    return nonlinear_N(omega, u), u


def step_euler(st: EulerState, dt: float, psi3_bc: str = "dirichlet", cfl_max: float = 1.0) -> EulerState:
    """Classical RK4 on the vorticity transport equation."""
    g = st.omega.grid
    umax = float(np.max(np.abs(inverse_transform_h(st.u)[:2]), initial=0.0))
    kmax = max(g.M, g.m2)
    if umax * kmax * dt > cfl_max:
        raise ValueError(f"CFL violated: |u| k dt = {umax * kmax * dt:.3g}")
    w0 = st.omega
    k1, _ = euler_rhs(w0, psi3_bc)
    k2, _ = euler_rhs(w0 + k1 * (dt / 2), psi3_bc)
    k3, _ = euler_rhs(w0 + k2 * (dt / 2), psi3_bc)
    k4, _ = euler_rhs(w0 + k3 * dt, psi3_bc)
    w = w0 + (k1 + 2 * k2 + 2 * k3 + k4) * (dt / 6)
    u = biot_savart(w, psi3_bc, check=False)
    return EulerState(u, w, st.t + dt)


def euler_pressure(st: EulerState) -> SpectralField:
    """Same Neumann solve as the viscous pressure with zero wall data (u.n = 0 kills d_3 p)."""
    return pressure_reconstruct(st.u, st.omega, 0.0)


def run_euler(omega0: SpectralField, dt: float, T: float, callback=None) -> list[EulerState]:
    st = EulerState(biot_savart(omega0, check=False), omega0, 0.0)
    out = [st]
    for _ in range(int(round(T / dt))):
        st = step_euler(st, dt)
        out.append(st)
        if callback:
            callback(st)
    return out


def grad_u_sq_profile(u: SpectralField) -> np.ndarray:
    """int_{T^2} |grad u|^2 dx_h as a z-profile, by Parseval."""
    g = u.grid
    d = u.data
    dzu = d @ g.D1.T
    s = np.sum((g.absxi**2)[None, ..., None] * np.abs(d) ** 2 + np.abs(dzu) ** 2, axis=(0, 1, 2))
    return (2 * np.pi) ** 2 * s


def kato_functional(states: list, kappa: float, c: float = 1.0, dt: float | None = None) -> float:
    """kappa int_0^T int_{z < c kappa} |grad u|^2 dx dt, trapezoid in time over the states."""
    if not states:
        return 0.0
    g = states[0].u.grid
    width = c * kappa
    if g.nodes_below(width) < 4:
        warnings.warn(f"Kato layer z < {width:.2e} holds only {g.nodes_below(width)} nodes", RuntimeWarning)
    ts = np.array([s.t for s in states])
    vals = []
    for s in states:
        # |grad u|^2 is quadratic; interpolate u and grad u, not the square
        vals.append(_layer_grad_sq(s.u, width))
    vals = np.array(vals)
    if len(ts) == 1:
        return 0.0
    return float(kappa * np.trapezoid(vals, ts))


def _layer_grad_sq(u: SpectralField, width: float, q: int = 24) -> float:
    g = u.grid
    x, w = np.polynomial.legendre.leggauss(q)
    pts = width / 2 * (x + 1)
    W = interp_matrix(g, pts)
    d = u.data
    dzu = d @ g.D1.T
    dv = d @ W.T
    dzv = dzu @ W.T
    s = np.sum((g.absxi**2)[None, ..., None] * np.abs(dv) ** 2 + np.abs(dzv) ** 2, axis=(0, 1, 2))
    return float((2 * np.pi) ** 2 * (width / 2 * w) @ s)


def l2_distance(u: SpectralField, v: SpectralField) -> float:
    return (u - v).norm_l2()


def maxwellian_distance(u: SpectralField, uE: SpectralField, eps: float, vgrid: VelocityGrid | None = None,
                        chunk: int = 512) -> float:
    """|| (M_{1, eps u, 1} - M_{1, eps u_E, 1}) / (eps (1+|v|)^2 sqrt(mu0)) ||_{L^2(Omega x R^3)}."""
    vgrid = vgrid or build_grid(16, 6.0)
    g = u.grid
    up = inverse_transform_h(u)
    ue = inverse_transform_h(uE)
    if eps * max(np.max(np.abs(up)), np.max(np.abs(ue))) > 0.5:
        raise ValueError("eps |u| must stay below 1/2")
    V = vgrid.nodes
    wv = vgrid.weights / ((1 + np.sqrt(vgrid.speed2)) ** 4 * mu0(V))
    c = (2 * np.pi) ** -1.5
    a = up.reshape(3, -1).T * eps
    b = ue.reshape(3, -1).T * eps
    wx = np.broadcast_to((2 * np.pi) ** 2 / (g.n1 * g.n2) * g.wz, (g.n1, g.n2, g.nz)).ravel()
    tot = 0.0
    for i in range(0, a.shape[0], chunk):
        A, Bm = a[i:i + chunk], b[i:i + chunk]
        ma = np.exp(-0.5 * np.sum((V[None] - A[:, None]) ** 2, axis=-1))
        mb = np.exp(-0.5 * np.sum((V[None] - Bm[:, None]) ** 2, axis=-1))
        tot += float(wx[i:i + chunk] @ (((ma - mb) * c) ** 2 @ wv))
    return float(np.sqrt(tot) / eps)
