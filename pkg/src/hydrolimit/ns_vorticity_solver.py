"""Half-space Navier-Stokes in vorticity form, mode by mode.

Direct path: Crank-Nicolson diffusion with the Robin (horizontal) and Dirichlet
(vertical) wall conditions folded into the implicit solve, explicit second-order
nonlinearity with corrector sweeps. Verification path: the Green function
representation evaluated by product quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .spectral_halfspace import (
    SpatialGrid, SpectralField, NormParams, biot_savart, curl, div, dh, dz, laplacian,
    inverse_transform_h, transform_h, antiderivative, elliptic_green, elliptic_solver,
    cheb_lobatto, weight_phi, fitted_constant,
)

TOL_BC = 1e-6


# ---------------------------------------------------------------- Green functions

@dataclass(frozen=True)
class StokesGreens:
    """Closed-form kernels for d_t - D(d_zz - a^2), D = kappa eta0, a = |xi|.

    G_h = H(x - y) + H(x + y) + R(x + y) with the homogeneous condition
    (d_x + a) G_h = 0 at x = 0; G_3 = H(x - y) - H(x + y).
    H carries the exact 1/sqrt(4 pi D t) normalisation.
    """

    kappa: float
    eta0: float
    times: tuple = ()
    normalization: str = "exact: (4 pi D t)^-1/2"

    @property
    def D(self) -> float:
        return self.kappa * self.eta0

    def heat(self, t, x, a=0.0):
        t = np.asarray(t, dtype=float)
        return np.exp(-(np.asarray(x) ** 2) / (4 * self.D * t) - self.D * a * a * t) / np.sqrt(4 * np.pi * self.D * t)

    def R(self, t, s, a):
        """Boundary corrector: a e^{-a s} erfc((s - 2 a D t) / (2 sqrt(D t)))."""
        if a == 0:
            return np.zeros(np.broadcast(np.asarray(t), np.asarray(s)).shape)
        t = np.asarray(t, dtype=float)
        q = (np.asarray(s) - 2 * a * self.D * t) / (2 * np.sqrt(self.D * t))
        return a * np.exp(-a * np.asarray(s)) * erfc(q)

    def dR(self, t, s, a):
        if a == 0:
            return np.zeros(np.broadcast(np.asarray(t), np.asarray(s)).shape)
        t = np.asarray(t, dtype=float)
        s = np.asarray(s)
        q = (s - 2 * a * self.D * t) / (2 * np.sqrt(self.D * t))
        return -a * self.R(t, s, a) - a * np.exp(-a * s - q * q) / np.sqrt(np.pi * self.D * t)

    def G_h(self, t, x, y, a):
        return self.heat(t, x - y, a) + self.heat(t, x + y, a) + self.R(t, x + y, a)

    def G_3(self, t, x, y, a):
        return self.heat(t, x - y, a) - self.heat(t, x + y, a)

    def dGh_dx(self, t, x, y, a):
        t = np.asarray(t, dtype=float)
        c = -1.0 / (2 * self.D * t)
        return c * (x - y) * self.heat(t, x - y, a) + c * (x + y) * self.heat(t, x + y, a) + self.dR(t, x + y, a)

    def robin_residual(self, t, y, a):
        """kappa eta0 (d_x + a) G_h at x = 0."""
        return self.D * (self.dGh_dx(t, 0.0, y, a) + a * self.G_h(t, 0.0, y, a))

    def kernel(self, kind: str):
        return self.G_h if kind == "h" else self.G_3


def build_greens(grid: SpatialGrid, kappa: float, eta0: float, times) -> StokesGreens:
    if not kappa * eta0 > 0:
        raise ValueError("kappa * eta0 must be positive")
    times = np.asarray(times, dtype=float)
    if times.size > 1:
        dtmax = np.max(np.diff(times))
        if dtmax > 0.25 * np.sqrt(kappa):
            raise ValueError(f"time lattice step {dtmax:.3g} too coarse for kappa={kappa}")
    return StokesGreens(float(kappa), float(eta0), tuple(times.tolist()))


def boundary_corrector(greens: StokesGreens, a: float, y: float, t_end: float, K: int = 96,
                       zmax: float | None = None, rtol: float = 1e-9):
    """Numerical R: solve r_t = D(r'' - a^2 r), r(0) = 0, with the wall forcing
    D(r' + a r) = -D a Htilde(t, 0, y) that cancels the Robin defect of Htilde.

    Returns (t_end, z nodes, r(t_end, z)). Chebyshev collocation in z plus an implicit
    Runge-Kutta integrator.
    """
    from scipy.integrate import solve_ivp

    D = greens.D
    L = zmax or max(2 * y + 40 * np.sqrt(D * t_end) + 4 * a * D * t_end, 1.0)
    x, Dm = cheb_lobatto(K)
    z = (1 - x) / 2 * L
    D1 = -2 * Dm / L
    D2 = D1 @ D1
    A = D * (D2 - a * a * np.eye(K + 1))
    inner = slice(1, K)
    # eliminate the boundary values: Robin at z = 0, r = 0 at z = L
    row = D1[0] + a * np.eye(K + 1)[0]

    def bvals(r_in, t):
        g = -a * 2 * greens.heat(t, y, a) if t > 0 else 0.0
        r0 = (g - row[inner] @ r_in) / row[0]
        return r0

    def rhs(t, r_in):
        r = np.zeros(K + 1)
        r[inner] = r_in
        r[0] = bvals(r_in, t)
        return (A @ r)[inner]

    jac = A[inner, inner] - np.outer(A[inner, 0], row[inner]) / row[0]
    sol = solve_ivp(rhs, (0.0, t_end), np.zeros(K - 1), method="Radau", jac=lambda t, r: jac,
                    rtol=rtol, atol=1e-12)
    r = np.zeros(K + 1)
    r[inner] = sol.y[:, -1]
    r[0] = bvals(sol.y[:, -1], t_end)
    return z, r


def envelope_fit(greens: StokesGreens, a: float, theta0: float = 0.1, k: int = 0,
                 ts=None, ss=None) -> float:
    """Fitted constant for |d^k R| <= C [b^{k+1} e^{-theta0 b s}
    + (D t)^{-(k+1)/2} e^{-theta0 s^2 / (D t)} e^{-D a^2 t / 8}]."""
    D = greens.D
    b = a + 1 / np.sqrt(D)
    ts = np.geomspace(1e-4, 0.5, 40) if ts is None else ts
    ss = np.linspace(0.0, 5.0, 400) if ss is None else ss
    T, S = np.meshgrid(ts, ss, indexing="ij")
    lhs = np.abs(greens.R(T, S, a) if k == 0 else greens.dR(T, S, a))
    rhs = b ** (k + 1) * np.exp(-theta0 * b * S) + (D * T) ** (-(k + 1) / 2) * np.exp(
        -theta0 * S**2 / (D * T)) * np.exp(-D * a * a * T / 8)
    return fitted_constant(lhs, rhs)


def trace_kernel_fit(greens: StokesGreens, a: float, params: NormParams, grid: SpatialGrid, taus=None) -> float:
    """sqrt(tau) sup_z e^{alpha_bar z} |G_h(tau, z, 0)| / (1 + phi_kappa(z)):
    the 1/sqrt(t-s) factor of the trace estimate, fitted over tau."""
    taus = np.geomspace(1e-4, 0.5, 30) if taus is None else taus
    z = grid.z
    w = np.exp(params.alpha_bar * z) / (1 + weight_phi(params, z))
    vals = [np.sqrt(tau) * np.max(w * np.abs(greens.G_h(tau, z, 0.0, a))) for tau in taus]
    return float(np.max(vals))


# ---------------------------------------------------------------- config and state

@dataclass
class NSConfig:
    kappa: float = 1e-2
    eta0: float = 1.0
    dt: float = 2e-3
    T: float = 0.25
    nonlinear: bool = True
    psi3_bc: str = "dirichlet"
    tol: float = 1e-6
    abort_factor: float = 100.0
    corrector_tol: float = 1e-12
    max_corrector: int = 12

    def __post_init__(self):
        if not (self.kappa > 0 and self.eta0 > 0 and self.dt > 0 and self.T > 0):
            raise ValueError("kappa, eta0, dt, T must be positive")

    @property
    def D(self) -> float:
        return self.kappa * self.eta0


@dataclass
class FlowState:
    omega: SpectralField
    u: SpectralField
    N: SpectralField
    B: np.ndarray
    t: float
    kappa: float
    eta0: float
    p: SpectralField | None = None
    dt_omega: SpectralField | None = None
    dt_u: SpectralField | None = None
    dt_p: SpectralField | None = None
    dt2_p: SpectralField | None = None
    dt2_omega: SpectralField | None = None
    dt2_u: SpectralField | None = None
    dt_N: SpectralField | None = None
    dt_B: np.ndarray | None = None
    eps: float | None = None

    @property
    def grid(self) -> SpatialGrid:
        return self.omega.grid


@dataclass
class InitialData:
    omega0: SpectralField
    u0: SpectralField
    dt_omega0: SpectralField
    dt2_omega0: SpectralField
    dt_u0: SpectralField
    residuals: dict
    kappa: float
    eta0: float


# ---------------------------------------------------------------- nonlinear terms

def _phys(f: SpectralField) -> np.ndarray:
    return inverse_transform_h(f)


def _grad_phys(f: SpectralField) -> np.ndarray:
    """(3 components, 3 derivatives, n1, n2, nz) in physical space."""
    out = []
    for c in range(f.ncomp):
        fc = f[c]
        out.append(np.stack([_phys(dh(fc, 0))[0], _phys(dh(fc, 1))[0], _phys(dz(fc))[0]]))
    return np.stack(out)


def transport_stretch(v: SpectralField, w: SpectralField) -> SpectralField:
    """-v.grad w + w.grad v, dealiased (products on the 3M+1 grid, then truncated)."""
    vp, wp = _phys(v), _phys(w)
    gv, gw = _grad_phys(v), _grad_phys(w)
    res = -np.einsum("j...,ij...->i...", vp, gw) + np.einsum("j...,ij...->i...", wp, gv)
    return transform_h(res, v.grid).truncate()


def nonlinear_N(omega: SpectralField, u: SpectralField) -> SpectralField:
    return transport_stretch(u, omega)


def dt_nonlinear_N(omega, u, dt_omega, dt_u) -> SpectralField:
    return transport_stretch(u, dt_omega) + transport_stretch(dt_u, omega)


def boundary_B(N: SpectralField) -> np.ndarray:
    """B_xi = int_0^inf e^{-|xi| y} N_{xi,h}(y) dy per mode, shape (2, n1, n2).
    The xi = 0 entry is int_0^inf N_{0,h}, the Neumann limit of the same trace."""
    g = N.grid
    e = np.exp(-g.absxi[..., None] * g.z)
    return (N.data[:2] * e[None]) @ g.wz * g.mask


def robin_residual(omega: SpectralField, B: np.ndarray, D: float) -> np.ndarray:
    g = omega.grid
    w = omega.data[:2]
    lhs = D * (w @ g.D1[0] + g.absxi[None] * w[..., 0])
    return (lhs - B) * g.mask


def dt_robin_residual(st: FlowState, cfg: NSConfig) -> float:
    """Max wall residual of the time-differentiated Robin condition for d_t omega_h.

    Not among the required compatibility conditions; a nonzero value marks a d_t^2 initial layer."""
    if st.dt_omega is None:
        time_derivatives(st, cfg)
    return float(np.max(np.abs(robin_residual(st.dt_omega, st.dt_B, cfg.D))))


# ---------------------------------------------------------------- pressure

def _gsym(a: SpectralField, b: SpectralField) -> SpectralField:
    """sum_{l,m} d_l a_m d_m b_l."""
    ga, gb = _grad_phys(a), _grad_phys(b)
    return transform_h(np.einsum("ml...,lm...->...", ga, gb)[None], a.grid).truncate()


def pressure_reconstruct(u: SpectralField, omega: SpectralField, D: float,
                         du: SpectralField | None = None, domega: SpectralField | None = None,
                         method: str = "formula", d2u: SpectralField | None = None,
                         d2omega: SpectralField | None = None) -> SpectralField:
    """Pressure with p -> 0 as z -> infinity; its first time derivative when du, domega are given,
    its second when d2u, d2omega are given as well.

    xi != 0: -Delta p = sum d_l u_m d_m u_l with d_z p(0) = -D(i xi1 omega_2 - i xi2 omega_1)(0),
    solved by the Neumann Green function (three integrals plus the wall term) or by collocation.
    xi = 0: p_0(z) = 2 int_z^inf (u_3 d_3 u_3)_0.
    """
    g = u.grid
    if du is None:
        src = _gsym(u, u)
        w = omega
        u3u3 = _phys(u[2]) * _phys(dz(u[2]))
    elif d2u is None:
        src = _gsym(du, u) + _gsym(u, du)
        w = domega
        u3u3 = _phys(du[2]) * _phys(dz(u[2])) + _phys(u[2]) * _phys(dz(du[2]))
    else:
        src = _gsym(d2u, u) + _gsym(du, du) * 2.0 + _gsym(u, d2u)
        w = d2omega
        u3u3 = (_phys(d2u[2]) * _phys(dz(u[2])) + 2 * _phys(du[2]) * _phys(dz(du[2]))
                + _phys(u[2]) * _phys(dz(d2u[2])))
    h = -D * (1j * g.xi1 * w.data[1, ..., 0] - 1j * g.xi2 * w.data[0, ..., 0])
    out = np.zeros((1, g.n1, g.n2, g.nz), complex)
    solver = elliptic_solver(g)
    for i in range(g.n1):
        for j in range(g.n2):
            if not g.mask[i, j]:
                continue
            a = g.absxi[i, j]
            if a == 0:
                continue
            rhs = src.data[0, i, j]
            if method == "formula":
                prof = elliptic_green(rhs, a, g, sign=+1)
            else:
                prof = solver.solve(rhs, a, "neumann")
            out[0, i, j] = prof - np.exp(-a * g.z) * h[i, j] / a
    m = transform_h(u3u3.reshape((1,) + u3u3.shape[-3:]), g).data[0, 0, 0]
    cum = antiderivative(m, g)
    out[0, 0, 0] = 2 * (cum[-1] - cum)
    return SpectralField(out, g)


# ---------------------------------------------------------------- state completion

def complete_state(omega: SpectralField, cfg: NSConfig, t: float = 0.0, derivatives: bool = True,
                   pressure: bool = False) -> FlowState:
    u = biot_savart(omega, cfg.psi3_bc, check=False)
    if cfg.nonlinear:
        N = nonlinear_N(omega, u)
    else:
        N = SpectralField.zeros(omega.grid)
    B = boundary_B(N)
    st = FlowState(omega, u, N, B, t, cfg.kappa, cfg.eta0)
    if derivatives:
        time_derivatives(st, cfg)
    if pressure:
        complete_pressure(st, cfg)
    return st


def complete_pressure(st: FlowState, cfg: NSConfig) -> FlowState:
    """p, and d_t p, d_t^2 p when the time derivatives are present."""
    st.p = pressure_reconstruct(st.u, st.omega, cfg.D)
    if st.dt_u is not None:
        st.dt_p = pressure_reconstruct(st.u, st.omega, cfg.D, st.dt_u, st.dt_omega)
        st.dt2_p = pressure_reconstruct(st.u, st.omega, cfg.D, st.dt_u, st.dt_omega,
                                        d2u=st.dt2_u, d2omega=st.dt2_omega)
    return st


def time_derivatives(st: FlowState, cfg: NSConfig) -> FlowState:
    """d_t omega from the PDE right-hand side, then the differentiated chain."""
    D = cfg.D
    st.dt_omega = laplacian(st.omega) * D + st.N
    st.dt_u = biot_savart(st.dt_omega, cfg.psi3_bc, check=False)
    if cfg.nonlinear:
        st.dt_N = dt_nonlinear_N(st.omega, st.u, st.dt_omega, st.dt_u)
    else:
        st.dt_N = SpectralField.zeros(st.grid)
    st.dt_B = boundary_B(st.dt_N)
    st.dt2_omega = laplacian(st.dt_omega) * D + st.dt_N
    st.dt2_u = biot_savart(st.dt2_omega, cfg.psi3_bc, check=False)
    return st


def diagnostics(st: FlowState, cfg: NSConfig) -> dict:
    up = _phys(st.u)
    wp = _phys(st.omega)
    scale = max(np.max(np.abs(wp)), 1e-300)
    cu = _phys(curl(st.u))
    E = 0.5 * st.u.norm_l2() ** 2
    return {
        "t": st.t,
        "div_u": float(np.max(np.abs(_phys(div(st.u))))),
        "no_slip": float(np.max(np.abs(up[..., 0]))),
        "omega3_wall": float(np.max(np.abs(wp[2, ..., 0]))),
        "robin": float(np.max(np.abs(robin_residual(st.omega, st.B, cfg.D)))),
        "curl_defect": float(np.max(np.abs(cu - wp)) / scale),
        "energy": E,
        "enstrophy": float(st.omega.norm_l2() ** 2),
    }


# ---------------------------------------------------------------- direct stepper

class CNOperator:
    """Inverse Crank-Nicolson matrices per distinct |xi| and wall condition."""

    def __init__(self, grid: SpatialGrid, D: float, dt: float):
        self.grid, self.D, self.dt = grid, D, dt
        self.vals, self.inv = grid.unique_abs()
        self._m: dict = {}

    def matrix(self, k: int, kind: str) -> np.ndarray:
        key = (k, kind)
        if key not in self._m:
            g, a = self.grid, self.vals[k]
            A = np.eye(g.nz) - 0.5 * self.dt * self.D * (g.D2 - a * a * np.eye(g.nz))
            A[0] = 0.0
            if kind == "h":
                A[0] = self.D * g.D1[0]
                A[0, 0] += self.D * a
            else:
                A[0, 0] = 1.0
            A[-1] = 0.0
            A[-1, -1] = 1.0
            self._m[key] = np.linalg.inv(A)
        return self._m[key]

    def explicit_half(self, omega: SpectralField) -> np.ndarray:
        g = self.grid
        L = omega.data @ g.D2.T - (g.absxi**2)[None, :, :, None] * omega.data
        return omega.data + 0.5 * self.dt * self.D * L

    def solve(self, rhs: np.ndarray, B: np.ndarray) -> np.ndarray:
        g = self.grid
        r = rhs.copy()
        r[:2, ..., 0] = B
        r[2, ..., 0] = 0.0
        r[..., -1] = 0.0
        out = np.zeros_like(r)
        for k in range(len(self.vals)):
            sel = (self.inv == k) & g.mask
            if not sel.any():
                continue
            out[:2, sel] = r[:2, sel] @ self.matrix(k, "h").T
            out[2, sel] = r[2, sel] @ self.matrix(k, "3").T
        return out


class DirectSolver:
    def __init__(self, grid: SpatialGrid, cfg: NSConfig):
        self.grid, self.cfg = grid, cfg
        self.cn = CNOperator(grid, cfg.D, cfg.dt)
        self.prev_N: SpectralField | None = None
        self.iterations: list[int] = []

    def _aux(self, omega):
        u = biot_savart(omega, self.cfg.psi3_bc, check=False)
        N = nonlinear_N(omega, u) if self.cfg.nonlinear else SpectralField.zeros(self.grid)
        return u, N, boundary_B(N)

    def step(self, st: FlowState) -> FlowState:
        cfg, dt = self.cfg, self.cfg.dt
        base = self.cn.explicit_half(st.omega)
        Npred = st.N if self.prev_N is None else st.N * 1.5 - self.prev_N * 0.5
        Bpred = boundary_B(Npred)
        w = st.omega.like(self.cn.solve(base + dt * Npred.data, Bpred))
        its = 0
        if cfg.nonlinear:
            for its in range(1, cfg.max_corrector + 1):
                u, N, B = self._aux(w)
                w_new = w.like(self.cn.solve(base + dt * 0.5 * (st.N.data + N.data), B))
                change = np.max(np.abs(w_new.data - w.data))
                w = w_new
                if change <= cfg.corrector_tol * max(1.0, np.max(np.abs(w.data))):
                    break
        self.iterations.append(its)
        self.prev_N = st.N
        u, N, B = self._aux(w)
        return FlowState(w, u, N, B, st.t + dt, cfg.kappa, cfg.eta0)

    def guard(self, st: FlowState) -> dict:
        d = diagnostics(st, self.cfg)
        lim = self.cfg.abort_factor * self.cfg.tol
        if d["div_u"] > lim or d["no_slip"] > lim:
            raise RuntimeError(f"structural residual blew up at t={st.t:.4g}: {d}")
        return d


def step_direct(st: FlowState, cfg: NSConfig, solver: DirectSolver | None = None) -> FlowState:
    solver = solver or DirectSolver(st.grid, cfg)
    return solver.step(st)


def run_direct(omega0: SpectralField, cfg: NSConfig, every: int = 0, derivatives_at_snap: bool = True,
               pressure_at_snap: bool = False, guard: bool = True, callback=None):
    """Integrate to cfg.T. Returns (snapshots, diagnostic rows); every=0 keeps only the end."""
    solver = DirectSolver(omega0.grid, cfg)
    st = complete_state(omega0, cfg, 0.0, derivatives=derivatives_at_snap, pressure=pressure_at_snap)
    n = int(round(cfg.T / cfg.dt))
    snaps = [st]
    rows = [diagnostics(st, cfg)]
    for k in range(1, n + 1):
        st = solver.step(st)
        rows.append(solver.guard(st) if guard else diagnostics(st, cfg))
        if callback is not None:
            callback(st)
        if (every and k % every == 0) or k == n:
            if derivatives_at_snap:
                time_derivatives(st, cfg)
            if pressure_at_snap:
                complete_pressure(st, cfg)
            snaps.append(st)
    for i in range(1, len(rows)):
        rows[i]["energy_balance"] = energy_balance_step(rows[i - 1], rows[i], cfg)
    rows[0]["energy_balance"] = 0.0
    return snaps, rows


def energy_balance_step(prev: dict, cur: dict, cfg: NSConfig) -> float:
    """dE + dt D (|omega|^2 averaged): zero for smooth no-slip flows up to O(dt^3) per step."""
    return (cur["energy"] - prev["energy"]) + cfg.dt * cfg.D * 0.5 * (cur["enstrophy"] + prev["enstrophy"])


# ---------------------------------------------------------------- Duhamel backend

def interp_matrix(grid: SpatialGrid, pts: np.ndarray) -> np.ndarray:
    """Chebyshev-interpolant evaluation matrix at arbitrary z (zero above Z_max)."""
    pts = np.asarray(pts, dtype=float)
    a = grid.stretch
    sp = np.arcsinh(np.clip(pts, 0, grid.zmax) * np.sinh(a) / grid.zmax) / a
    xs = 1 - 2 * sp.ravel()
    xn, _ = cheb_lobatto(grid.K)
    bw = (-1.0) ** np.arange(grid.K + 1)
    bw[0] *= 0.5
    bw[-1] *= 0.5
    diff = xs[:, None] - xn[None, :]
    exact = np.abs(diff) < 1e-15
    diff[exact] = 1.0
    W = bw[None, :] / diff
    W /= W.sum(axis=1, keepdims=True)
    rows = np.where(exact.any(axis=1))[0]
    W[rows] = exact[rows].astype(float)
    W[pts.ravel() > grid.zmax] = 0.0
    return W.reshape(pts.shape + (grid.K + 1,))


class DuhamelEngine:
    """Product quadrature of the representation formula on a uniform time lattice."""

    def __init__(self, grid: SpatialGrid, greens: StokesGreens, dt: float, q: int = 8, width: float = 12.0):
        self.grid, self.greens, self.dt = grid, greens, dt
        self.q, self.width = q, width
        self.vals, self.inv = grid.unique_abs()
        self._prop: dict = {}
        self._bw: dict = {}
        self.gx, self.gw = np.polynomial.legendre.leggauss(q)

    def _panels(self, lo, hi, h):
        n = max(1, int(np.ceil((hi - lo) / h)))
        e = np.linspace(lo, hi, n + 1)
        pts = (e[:-1, None] + e[1:, None]) / 2 + (e[1:, None] - e[:-1, None]) / 2 * self.gx
        wts = (e[1:, None] - e[:-1, None]) / 2 * self.gw
        return pts.ravel(), wts.ravel()

    def propagator(self, n: int, k: int, kind: str) -> np.ndarray:
        """Matrix of f -> int G(n dt, z_i, y) f(y) dy on the z nodes."""
        key = (n, k, kind)
        if key in self._prop:
            return self._prop[key]
        g = self.grid
        if n == 0:
            P = np.eye(g.nz)
            self._prop[key] = P
            return P
        tau = n * self.dt
        a = self.vals[k]
        D = self.greens.D
        w = np.sqrt(D * tau)
        span = self.width * w
        kern = self.greens.kernel(kind)
        P = np.zeros((g.nz, g.nz))
        for i, x in enumerate(g.z):
            segs = [(max(0.0, x - span), min(g.zmax, x + span))]
            if kind == "h" and a > 0:
                segs.append((0.0, min(g.zmax, max(0.0, 2 * a * D * tau + span - x))))
            elif x < span:
                segs.append((0.0, min(g.zmax, span - x)))
            pts, wts = [], []
            for lo, hi in _merge(segs):
                if hi > lo:
                    p_, w_ = self._panels(lo, hi, w)
                    pts.append(p_)
                    wts.append(w_)
            if not pts:
                continue
            pts = np.concatenate(pts)
            wts = np.concatenate(wts)
            vals = kern(tau, x, pts, a) * wts
            P[i] = vals @ interp_matrix(g, pts)
        self._prop[key] = P
        return P

    def boundary_weights(self, n: int, k: int) -> np.ndarray:
        """W[j] = int_{s_j}^{s_{j+1}} G_h(t_n - s, z, 0) ds for j < n, shape (n, nz)."""
        key = (n, k)
        if key in self._bw:
            return self._bw[key]
        g, a = self.grid, self.vals[k]
        x, wq = np.polynomial.legendre.leggauss(16)
        W = np.zeros((n, g.nz))
        for j in range(n):
            ta, tb = (n - j - 1) * self.dt, (n - j) * self.dt
            if ta > 0:
                edges = [np.sqrt(ta), np.sqrt(tb)]
            else:
                edges = np.concatenate([[0.0], np.sqrt(tb) * 2.0 ** -np.arange(40, -1, -1)])
            tot = np.zeros(g.nz)
            for lo, hi in zip(edges[:-1], edges[1:]):
                sig = (lo + hi) / 2 + (hi - lo) / 2 * x
                ww = (hi - lo) / 2 * wq
                tau = sig**2
                G = self.greens.G_h(tau[:, None], g.z[None, :], 0.0, a)
                tot += (ww * 2 * sig) @ G
            W[j] = tot
        self._bw[key] = W
        return W

    def evaluate(self, n: int, omega0: np.ndarray, N_hist: list, B_hist: list) -> np.ndarray:
        """omega(t_n) from the initial profile, N(s_j) and B(s_j), j = 0..n.
        Arrays are (3, n1, n2, nz) for omega0/N and (2, n1, n2) for B."""
        g = self.grid
        out = np.zeros_like(omega0)
        for k in range(len(self.vals)):
            sel = (self.inv == k) & g.mask
            if not sel.any():
                continue
            for c, kind in ((0, "h"), (1, "h"), (2, "3")):
                acc = omega0[c, sel] @ self.propagator(n, k, kind).T
                for j in range(n + 1):
                    wj = self.dt * (0.5 if j in (0, n) else 1.0)
                    if n == 0:
                        break
                    acc = acc + wj * (N_hist[j][c, sel] @ self.propagator(n - j, k, kind).T)
                if kind == "h" and n > 0:
                    Wb = self.boundary_weights(n, k)
                    Bbar = np.stack([0.5 * (B_hist[j][c, sel] + B_hist[j + 1][c, sel]) for j in range(n)])
                    acc = acc - np.einsum("jm,jz->mz", Bbar, Wb)
                out[c, sel] = acc
        return out


def _merge(segs):
    segs = sorted((lo, hi) for lo, hi in segs if hi > lo)
    out = []
    for lo, hi in segs:
        if out and lo <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], hi))
        else:
            out.append((lo, hi))
    return out


@dataclass
class DuhamelResult:
    omegas: list
    iterations: int
    history: list


def step_duhamel(omega0: SpectralField, cfg: NSConfig, n_steps: int, engine: DuhamelEngine | None = None,
                 tol: float = 1e-8, max_iter: int = 60, start: list | None = None) -> DuhamelResult:
    """Fixed-point iteration of the representation formula over the slab [0, n_steps dt]."""
    g = omega0.grid
    greens = build_greens(g, cfg.kappa, cfg.eta0, np.arange(n_steps + 1) * cfg.dt)
    engine = engine or DuhamelEngine(g, greens, cfg.dt)
    it = [omega0.data.copy() for _ in range(n_steps + 1)] if start is None else [s.copy() for s in start]
    hist = []
    for m in range(1, max_iter + 1):
        Ns, Bs = [], []
        for w in it:
            st = complete_state(omega0.like(w), cfg, derivatives=False)
            Ns.append(st.N.data)
            Bs.append(st.B)
        new = [omega0.data.copy()] + [engine.evaluate(n, omega0.data, Ns, Bs) for n in range(1, n_steps + 1)]
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(new, it))
        hist.append(diff)
        it = new
        if diff < tol:
            break
        if m >= 20 and hist[-1] > hist[-20]:
            raise RuntimeError(f"Duhamel fixed point is not contracting: {hist}")
        if not cfg.nonlinear:
            break
    return DuhamelResult([omega0.like(w) for w in it], m, hist)


def mild_dt_omega(engine: DuhamelEngine, n: int, dt_omega0: np.ndarray, dtN_hist: list, dtB_hist: list) -> np.ndarray:
    """The representation of d_t omega: the same formula with d_t omega_0, d_s N and d_s B."""
    return engine.evaluate(n, dt_omega0, dtN_hist, dtB_hist)


@dataclass
class DualPathCheck:
    times: np.ndarray
    mismatch: np.ndarray  # max |mild - chain| / max |chain| per step
    wall_mismatch: np.ndarray  # same, restricted to the first `wall_nodes` vertical nodes


def dual_path_dt_omega(omega0: SpectralField, cfg: NSConfig, n_steps: int, refine: int = 4,
                       wall_nodes: int = 8) -> DualPathCheck:
    """d_t omega two ways: the representation formula fed with d_t omega_0, d_s N, d_s B, and the
    PDE right-hand side on a direct run (refined step). Incompatible data leaves a wall layer."""
    g = omega0.grid
    fine = NSConfig(**{**cfg.__dict__, "dt": cfg.dt / refine, "T": n_steps * cfg.dt})
    snaps, _ = run_direct(omega0, fine, every=refine, derivatives_at_snap=False, guard=False)
    sts = [complete_state(s.omega, cfg, t=s.t) for s in snaps[:n_steps + 1]]
    greens = build_greens(g, cfg.kappa, cfg.eta0, np.arange(n_steps + 1) * cfg.dt)
    eng = DuhamelEngine(g, greens, cfg.dt)
    dN = [s.dt_N.data for s in sts]
    dB = [s.dt_B for s in sts]
    mis, wall = [], []
    for m in range(1, n_steps + 1):
        mild = mild_dt_omega(eng, m, sts[0].dt_omega.data, dN[:m + 1], dB[:m + 1])
        chain = sts[m].dt_omega.data
        sc = max(float(np.max(np.abs(chain))), 1e-300)
        d = np.abs(mild - chain)
        mis.append(float(np.max(d)) / sc)
        wall.append(float(np.max(d[..., :wall_nodes])) / sc)
    return DualPathCheck(np.arange(1, n_steps + 1) * cfg.dt, np.array(mis), np.array(wall))


def boundary_residual_term(st: FlowState, cfg: NSConfig) -> np.ndarray:
    """kappa eta0 (|xi| + d_z) omega_{xi,h}(0) - B_xi(0), per mode."""
    return robin_residual(st.omega, st.B, cfg.D)


# ---------------------------------------------------------------- compatible data

@dataclass(frozen=True)
class PlanarSeed:
    """Stream function Psi(x1, z) = sum_k A_k z^2 e^{-beta_k z} cos(k x1 + phase_k), plus
    a mean part S z^2 e^{-beta_0 z}; u = (-d_z Psi, 0, d_1 Psi) is divergence free
    and vanishes at the wall."""

    modes: tuple = ((1, 0.6, 1.5, 0.0), (2, 0.25, 2.0, 0.7))
    shear: float = 0.4
    shear_beta: float = 1.5


def seed_velocity(seed: PlanarSeed, grid: SpatialGrid) -> SpectralField:
    z = grid.z
    u = np.zeros((3, grid.n1, grid.n2, grid.nz), complex)
    for k, A, beta, ph in seed.modes:
        if abs(k) > grid.M:
            raise ValueError(f"seed mode {k} exceeds M={grid.M}")
        prof = A * z**2 * np.exp(-beta * z)
        dprof = A * (2 * z - beta * z**2) * np.exp(-beta * z)
        c = 0.5 * np.exp(1j * ph)
        for kk, cc in ((k, c), (-k, np.conj(c))):
            u[0, kk % grid.n1, 0] += -cc * dprof
            u[2, kk % grid.n1, 0] += 1j * kk * cc * prof
    b0 = seed.shear_beta
    u[0, 0, 0] += -seed.shear * (2 * z - b0 * z**2) * np.exp(-b0 * z)
    return SpectralField(u, grid)


def _layer_profile(grid: SpatialGrid, ell: float, a: float):
    """Stream correction q = ell^3 s^3 e^{-s}, s = z/ell: returns (d_z q, q, omega_2 change per unit)."""
    z = grid.z
    s = z / ell
    e = np.exp(-s)
    q = ell**3 * s**3 * e
    q1 = ell**2 * (3 * s**2 - s**3) * e
    q2 = ell * (6 * s - 6 * s**2 + s**3) * e
    return q, q1, -q2 + a * a * q


def compatibility_check(omega0: SpectralField, cfg: NSConfig) -> dict:
    st = complete_state(omega0, cfg, derivatives=True)
    r1 = robin_residual(st.omega, st.B, cfg.D)
    return {
        "robin": float(np.max(np.abs(r1))),
        "omega3_wall": float(np.max(np.abs(st.omega.data[2, ..., 0]))),
        "dt_omega3_wall": float(np.max(np.abs(st.dt_omega.data[2, ..., 0]))),
    }


def initial_data(omega0: SpectralField, cfg: NSConfig) -> InitialData:
    st = complete_state(omega0, cfg, derivatives=True)
    return InitialData(omega0, st.u, st.dt_omega, st.dt2_omega, st.dt_u, compatibility_check(omega0, cfg),
                       cfg.kappa, cfg.eta0)


def build_compatible_data(seed: PlanarSeed, grid: SpatialGrid, cfg: NSConfig, ell: float | None = None,
                          tol: float = 1e-9, max_iter: int = 50) -> InitialData:
    """Path A: add wall-localised stream corrections c_xi q(z) until the Robin compatibility
    residual drops below tol. The corrections keep div u = 0 and no-slip exactly."""
    from scipy.optimize import root

    # width sqrt(D) keeps the velocity correction O(|B|) rather than O(|B| / eta0)
    ell = np.sqrt(cfg.D) if ell is None else ell
    u0 = seed_velocity(seed, grid)
    # unknowns on k >= 0 only; k < 0 follows by conjugate symmetry, k = 0 is real
    ks = [int(round(grid.xi1[i, 0])) for i in range(grid.n1) if grid.mask[i, 0] and grid.xi1[i, 0] >= 0]
    ks.sort()
    row = {int(round(grid.xi1[i, 0])): i for i in range(grid.n1)}
    prof = {k: _layer_profile(grid, ell, abs(k))[:2] for k in ks}
    nk = len(ks)
    scale = 6 * cfg.D

    def coeffs(x):
        return (x[:nk] + 1j * np.concatenate([[0.0], x[nk:]])) / scale

    def corrected(x):
        d = u0.data.copy()
        for k, c in zip(ks, coeffs(x)):
            q, q1 = prof[k]
            for kk, cc in ((k, c), (-k, np.conj(c))) if k else ((0, c),):
                d[0, row[kk], 0] += -cc * q1
                d[2, row[kk], 0] += 1j * kk * cc * q
        return curl(u0.like(d))

    def F(x):
        omega = corrected(x)
        st = complete_state(omega, cfg, derivatives=False)
        r = robin_residual(omega, st.B, cfg.D)[1][[row[k] for k in ks], 0]
        return np.concatenate([r.real, r.imag[1:]])

    # omega_2 = c(-q'' + a^2 q) moves D(w' + a w)(0) by -6 D c, so dF/dx is close to -I:
    # plain fixed-point iteration, with a Newton-Krylov fallback
    x = np.zeros(2 * nk - 1)
    hist = []
    for _ in range(max_iter):
        r = F(x)
        hist.append(float(np.max(np.abs(r))))
        if hist[-1] < tol:
            return initial_data(corrected(x), cfg)
        if len(hist) > 2 and hist[-1] > 0.5 * hist[-2]:
            break
        x = x + r
    sol = root(F, x, method="hybr", options={"xtol": 1e-14})
    err = float(np.max(np.abs(F(sol.x))))
    if err > tol:
        raise RuntimeError(f"compatibility correction stalled at {err:.3g}; history {hist}")
    return initial_data(corrected(sol.x), cfg)


def build_compatible_by_restart(omega: SpectralField, cfg: NSConfig, t0: float) -> InitialData:
    """Path B: run the solver to t0 and restart from the state there."""
    c = NSConfig(**{**cfg.__dict__, "T": t0})
    snaps, _ = run_direct(omega, c, guard=False)
    return initial_data(snaps[-1].omega, cfg)


# ---------------------------------------------------------------- profile bounds

def _sup_profile(f: SpectralField, comps) -> np.ndarray:
    """sup over x_h of |f| summed over the given components, as a z-profile."""
    p = _phys(f)
    return np.max(np.sqrt(np.sum(np.abs(p[list(comps)]) ** 2, axis=0)), axis=(0, 1))


def bound_quantities(st: FlowState) -> dict[str, np.ndarray]:
    """z-profiles of the left sides of the pointwise bounds."""
    q = {}
    w, dw, d2w = st.omega, st.dt_omega, st.dt2_omega
    gh = lambda f: [dh(f, 0), dh(f, 1)]
    q["omega_h"] = _sup_profile(w, (0, 1))
    q["grad_h_omega_h"] = np.maximum(*[_sup_profile(x, (0, 1)) for x in gh(w)])
    q["dt_omega_h"] = _sup_profile(dw, (0, 1))
    q["omega_3"] = _sup_profile(w, (2,))
    q["dt_omega_3"] = _sup_profile(dw, (2,))
    q["dt2_omega_h"] = _sup_profile(d2w, (0, 1))
    q["dt2_omega_3"] = _sup_profile(d2w, (2,))
    q["dz_omega_h"] = _sup_profile(dz(w), (0, 1))
    q["dz_dt_omega_h"] = _sup_profile(dz(dw), (0, 1))
    q["dz_omega_3"] = _sup_profile(dz(w), (2,))
    q["u"] = _sup_profile(st.u, (0, 1, 2))
    q["dt_u"] = _sup_profile(st.dt_u, (0, 1, 2))
    q["dt2_u"] = _sup_profile(st.dt2_u, (0, 1, 2))
    g1 = [dh(st.u, 0), dh(st.u, 1), dz(st.u)]
    q["grad_u"] = np.max([_sup_profile(x, (0, 1, 2)) for x in g1], axis=0)
    g2 = [dh(x, 0) for x in g1] + [dh(g1[1], 1), dz(g1[1]), dz(g1[2])]
    q["grad2_u"] = np.max([_sup_profile(x, (0, 1, 2)) for x in g2], axis=0)
    gt = [dh(st.dt_u, 0), dh(st.dt_u, 1), dz(st.dt_u)]
    q["grad_dt_u"] = np.max([_sup_profile(x, (0, 1, 2)) for x in gt], axis=0)
    gtt = [dh(st.dt2_u, 0), dh(st.dt2_u, 1), dz(st.dt2_u)]
    q["grad_dt2_u"] = np.max([_sup_profile(x, (0, 1, 2)) for x in gtt], axis=0)
    if st.p is not None:
        q["p"] = _sup_profile(st.p, (0,))
        q["grad_p"] = np.max([_sup_profile(x, (0,)) for x in (st.p, dh(st.p, 0), dh(st.p, 1), dz(st.p))], axis=0)
    if st.dt_p is not None:
        q["dt_p"] = _sup_profile(st.dt_p, (0,))
        q["grad_dt_p"] = np.max([_sup_profile(x, (0,)) for x in (st.dt_p, dh(st.dt_p, 0), dh(st.dt_p, 1), dz(st.dt_p))], axis=0)
    if st.dt2_p is not None:
        q["dt2_p"] = _sup_profile(st.dt2_p, (0,))
    return q


# name -> (bound group, quantity, kappa power, weight kind, decay kind)
BOUNDS = {
    "vorticity:omega_h": ("vorticity", "omega_h", 0.0, "k", "abar"),
    "vorticity:grad_h_omega_h": ("vorticity", "grad_h_omega_h", 0.0, "k", "abar"),
    "vorticity:dt_omega_h": ("vorticity", "dt_omega_h", 0.0, "k", "abar"),
    "vorticity:omega_3": ("vorticity", "omega_3", 0.0, "1", "abar"),
    "vorticity:dt_omega_3": ("vorticity", "dt_omega_3", 0.0, "1", "abar"),
    "vorticity_tt:dt2_omega_h": ("vorticity_tt", "dt2_omega_h", 0.0, "kt", "abar"),
    "vorticity_tt:dt2_omega_3": ("vorticity_tt", "dt2_omega_3", 0.0, "1", "abar"),
    "wall_normal:dz_omega_h": ("wall_normal", "dz_omega_h", -1.0, "1", "abar"),
    "wall_normal:dz_dt_omega_h": ("wall_normal", "dz_dt_omega_h", -1.0, "1", "abar"),
    "wall_normal:dz_omega_3": ("wall_normal", "dz_omega_3", 0.0, "k", "abar"),
    "velocity:u": ("velocity", "u", 0.0, "1", "none"),
    "velocity:dt_u": ("velocity", "dt_u", 0.0, "1", "none"),
    "velocity:dt2_u": ("velocity", "dt2_u", 0.0, "1", "none"),
    "velocity_grad:grad_u": ("velocity_grad", "grad_u", 0.0, "k", "half"),
    "velocity_grad:grad2_u": ("velocity_grad", "grad2_u", 0.0, "k+1/k", "half"),
    "velocity_grad:grad_dt_u": ("velocity_grad", "grad_dt_u", 0.0, "k", "half"),
    "velocity_grad_tt:grad_dt2_u": ("velocity_grad_tt", "grad_dt2_u", 0.0, "kt", "half"),
    "velocity_rate:dt_u": ("velocity_rate", "dt_u", -0.5, "1", "half"),
    "velocity_rate:dt2_u": ("velocity_rate", "dt2_u", -0.5, "1", "half"),
    "pressure:p": ("pressure", "p", 0.0, "1", "none"),
    "pressure:dt_p": ("pressure", "dt_p", 0.0, "1", "none"),
    "pressure_grad:grad_p": ("pressure_grad", "grad_p", -0.5, "1", "half"),
    "pressure_grad:grad_dt_p": ("pressure_grad", "grad_dt_p", -0.5, "1", "half"),
    "pressure_tt:dt2_p": ("pressure_tt", "dt2_p", 0.0, "k^-1/2+kt", "half"),
}


def bound_envelope(kind: str, power: float, decay: str, z, params: NormParams, t: float) -> np.ndarray:
    k = params.kappa
    phik = weight_phi(params, z)
    if kind == "1":
        w = np.ones_like(z)
    elif kind == "k":
        w = 1 + phik
    elif kind == "kt":
        w = 1 + phik + (weight_phi(params, z, t=t) if t > 0 else 0.0)
    elif kind == "k^-1/2+kt":
        w = k**-0.5 + (weight_phi(params, z, t=t) if t > 0 else 0.0)
    elif kind == "k+1/k":
        w = 1 + phik + 1.0 / k
    else:
        raise ValueError(kind)
    if decay == "abar":
        e = np.exp(-params.alpha_bar * z)
    elif decay == "half":
        e = np.exp(-min(1.0, params.alpha_bar / 2) * z)
    else:
        e = np.ones_like(z)
    return k**power * w * e


@dataclass
class BoundFit:
    name: str
    anchor: str
    constants: dict
    growth: float
    spread: float


def profile_diagnostics(runs: dict, params: NormParams, zcut: float | None = None) -> dict:
    """runs: kappa -> list of FlowStates. Fits C = max over (t, z) of quantity / envelope for each
    bound and kappa; growth = max_kappa C / C(largest kappa), spread = max C / min C."""
    fits = {}
    kappas = sorted(runs, reverse=True)
    for name, (anchor, qty, power, kind, decay) in BOUNDS.items():
        consts = {}
        for kap in kappas:
            pk = NormParams(params.lam0, params.gamma0, params.alpha, params.alpha_bar, params.tau, kap)
            best = 0.0
            for st in runs[kap]:
                q = bound_quantities(st)
                if qty not in q:
                    continue
                z = st.grid.z
                sel = slice(None) if zcut is None else z <= zcut
                env = bound_envelope(kind, power, decay, z, pk, st.t)
                best = max(best, fitted_constant(q[qty][sel], env[sel]))
            consts[kap] = best
        vals = np.array([consts[k] for k in kappas])
        if np.all(vals == 0):
            growth = spread = 1.0
        else:
            growth = float(np.max(vals) / max(vals[0], 1e-300))
            spread = float(np.max(vals) / max(np.min(vals), 1e-300))
        fits[name] = BoundFit(name, anchor, consts, growth, spread)
    return fits


def wall_gradient_slope(runs: dict) -> tuple[float, dict]:
    """log-log slope of sup |d_z omega_h| against kappa."""
    ks = sorted(runs)
    vals = {k: max(float(np.max(bound_quantities(st)["dz_omega_h"])) for st in runs[k]) for k in ks}
    slope = np.polyfit(np.log(ks), np.log([vals[k] for k in ks]), 1)[0]
    return float(slope), vals


def dz_omega_via_identity(st: FlowState, cfg: NSConfig) -> SpectralField:
    """d_z omega_h from the wall value plus the integrated equation:
    -|xi| omega_h(0) + B / D + int_0^z (d_t omega_h + D|xi|^2 omega_h - N_h) / D."""
    g = st.grid
    D = cfg.D
    w = st.omega.data[:2]
    integrand = (st.dt_omega.data[:2] + D * (g.absxi**2)[None, ..., None] * w - st.N.data[:2]) / D
    val0 = -g.absxi[None] * w[..., 0] + st.B / D
    out = val0[..., None] + antiderivative(integrand, g)
    full = np.zeros_like(st.omega.data)
    full[:2] = out * g.mask[None, ..., None]
    return st.omega.like(full)


def convolution_constant(engine: DuhamelEngine, n: int, k: int, kind: str, profiles: list,
                         params: NormParams, norm: str = "l1", order: int = 1) -> float:
    """Fitted C_T for sum_j |(zeta d_z)^j int G f| <= C sum_j |(zeta d_z)^j f| over test profiles."""
    g = engine.grid
    P = engine.propagator(n, k, kind)
    zz = g.z / (1 + g.z)

    def nrm(f):
        tot = 0.0
        cur = f
        for _ in range(order + 1):
            if norm == "l1":
                tot += np.abs(cur) @ g.wz
            else:
                wgt = np.exp(params.alpha_bar * g.z) / (1 + weight_phi(params, g.z))
                tot += np.max(np.abs(cur) * wgt)
            cur = zz * (g.D1 @ cur)
        return tot

    return max(nrm(P @ f) / nrm(f) for f in profiles)
