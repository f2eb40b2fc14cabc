"""Local Maxwellian, the corrector f2 and the remainder sources of the Hilbert hierarchy.

Velocity functions at a spatial point x are stored on the comoving nodes
v = eps u(x) + w_j, with w_j the nodes of a fixed VelocityGrid. There
mu(x, v) = mu0(w_j) and A_lm(x, v) = A0_lm(w_j) exactly, so the Burnett
functions and the projection are built once. A time or space derivative at
fixed v picks up the frame shift -eps (d u) . grad_w.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .collision_operator import (
    BurnettTensor,
    CollisionConfig,
    LinearizedOperator,
    MaxwellianMixture,
    apply_Gamma,
    build_linearized,
    burnett_sources,
    burnett_tensor,
    collide_Q,
)
from .spectral_halfspace import SpectralField, dh, dz, inverse_transform_h
from .velocity_space import (
    HydroProjection,
    VelocityGrid,
    build_grid,
    hydro_projection,
    maxwellian,
    MaxwellianParams,
    mu0,
    wall_projection,
)

FLOOR = 1e-12
RHO = 0.1  # weight exponent in e^{rho |v - eps u|^2}


@dataclass(frozen=True)
class ExpansionScales:
    eps: float
    kappa: float
    delta: float

    def __post_init__(self):
        for name in ("eps", "kappa", "delta"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} = {v} must lie in (0, 1)")

    @classmethod
    def sqrt_eps(cls, eps: float, kappa: float) -> "ExpansionScales":
        """The coupling delta = sqrt(eps)."""
        return cls(eps, kappa, float(np.sqrt(eps)))


# ---------------------------------------------------------------- flow jets

JET_FIELDS = ("u", "G", "H", "p", "gp", "ut", "Gt", "Ht", "pt", "gpt", "utt", "Gtt", "ptt")
# a time derivative maps each state entry to its rate
_RATE = {"u": "ut", "G": "Gt", "H": "Ht", "p": "pt", "gp": "gpt", "ut": "utt", "Gt": "Gtt", "pt": "ptt"}


@dataclass
class FlowJet:
    """Pointwise flow data at n sample points.

    G[k, m] = d_k u_m, H[k, l, m] = d_k d_l u_m, gp = grad p; the t-suffixed
    entries are time derivatives. Entries not needed by a check may be None.
    """

    x: np.ndarray
    u: np.ndarray
    G: np.ndarray
    H: np.ndarray | None = None
    p: np.ndarray | None = None
    gp: np.ndarray | None = None
    ut: np.ndarray | None = None
    Gt: np.ndarray | None = None
    Ht: np.ndarray | None = None
    pt: np.ndarray | None = None
    gpt: np.ndarray | None = None
    utt: np.ndarray | None = None
    Gtt: np.ndarray | None = None
    ptt: np.ndarray | None = None
    t: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, float))
        n = len(self.x)
        shapes = {"u": (3,), "G": (3, 3), "H": (3, 3, 3), "p": (), "gp": (3,)}
        for name in JET_FIELDS:
            val = getattr(self, name)
            if val is None:
                continue
            base = name.rstrip("t") or name
            arr = np.asarray(val)
            arr = arr.astype(complex if np.iscomplexobj(arr) else float)
            want = (n,) + shapes.get(base, ())
            if arr.shape != want:
                raise ValueError(f"jet entry {name} has shape {arr.shape}, expected {want}")
            setattr(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.x)

    def require(self, *names):
        missing = [k for k in names if getattr(self, k) is None]
        if missing:
            raise ValueError(f"missing flow derivatives: {', '.join(missing)}")

    def perturbed(self, h: float) -> "FlowJet":
        """Complex-step jet q + i h dq/dt (exact first derivative of polynomial expressions)."""
        self.require(*_RATE.values())
        kw = {k: getattr(self, k) + 1j * h * getattr(self, r) for k, r in _RATE.items()}
        return replace(self, **kw)

    def subset(self, idx) -> "FlowJet":
        kw = {k: None if getattr(self, k) is None else getattr(self, k)[idx] for k in JET_FIELDS}
        return FlowJet(self.x[idx], t=self.t, **kw)

    def ns_residual(self, D: float) -> np.ndarray:
        """d_t u + u.grad u + grad p - D Laplace u."""
        self.require("ut", "H", "gp")
        return self.ut + conv(self.u, self.G) + self.gp - D * laplace(self.H)

    def ns_residual_rate(self, D: float) -> np.ndarray:
        self.require("utt", "Gt", "Ht", "gpt")
        return self.utt + conv(self.ut, self.G) + conv(self.u, self.Gt) + self.gpt - D * laplace(self.Ht)


def conv(u, G):
    """(u.grad) u_m = sum_k u_k G[k, m]."""
    return np.einsum("nk,nkm->nm", u, G)


def laplace(H):
    return np.einsum("nkkm->nm", H)


def _fro(a):
    a = np.abs(a)
    return np.sqrt(np.sum(a.reshape(len(a), -1) ** 2, axis=1))


def _d(f: SpectralField, k: int) -> SpectralField:
    return dz(f) if k == 2 else dh(f, k)


def _at(f: SpectralField, idx) -> np.ndarray:
    """Physical values at node indices (i1, i2, iz): shape (ncomp, n)."""
    P = inverse_transform_h(f)
    i1, i2, iz = (np.asarray(c) for c in zip(*idx))
    return P[:, i1, i2, iz]


def _vec_jet(f: SpectralField, idx, second: bool):
    """values (n, 3), gradient (n, 3, 3), optionally Hessian (n, 3, 3, 3)."""
    val = _at(f, idx).T
    d1 = [_d(f, k) for k in range(3)]
    G = np.stack([_at(d, idx).T for d in d1], axis=1)
    if not second:
        return val, G, None
    n = len(idx)
    H = np.empty((n, 3, 3, f.ncomp))
    for k in range(3):
        for l in range(k, 3):
            H[:, k, l] = H[:, l, k] = _at(_d(d1[k], l), idx).T
    return val, G, H


def sample_indices(grid, n_h: int = 3, heights=(0.05, 0.2, 0.6, 1.5)) -> list:
    """Node indices spread over x1 and a few heights (nearest vertical nodes)."""
    i1 = np.linspace(0, grid.n1, n_h, endpoint=False).astype(int)
    iz = sorted({int(np.argmin(np.abs(grid.z - h))) for h in heights})
    return [(a, 0, c) for a in i1 for c in iz]


def flow_jet(state, idx) -> FlowJet:
    """Jet of a solver FlowState at node indices; the state needs p and its two time derivatives."""
    need = {"p": state.p, "dt_p": state.dt_p, "dt2_p": state.dt2_p, "dt_u": state.dt_u, "dt2_u": state.dt2_u}
    missing = [k for k, v in need.items() if v is None]
    if missing:
        raise ValueError(f"missing flow derivatives: {', '.join(missing)}")
    g = state.grid
    u, G, H = _vec_jet(state.u, idx, True)
    ut, Gt, Ht = _vec_jet(state.dt_u, idx, True)
    utt, Gtt, _ = _vec_jet(state.dt2_u, idx, False)
    p, gp, _ = _vec_jet(state.p, idx, False)
    pt, gpt, _ = _vec_jet(state.dt_p, idx, False)
    ptt = _at(state.dt2_p, idx)[0]
    x = np.array([[g.x1[a], g.x2[b], g.z[c]] for a, b, c in idx])
    return FlowJet(x, u, G, H, p[:, 0], gp[:, :, 0], ut, Gt, Ht, pt[:, 0], gpt[:, :, 0], utt, Gtt, ptt, state.t)


# ---------------------------------------------------------------- manufactured flows

@dataclass(frozen=True)
class BeltramiFlow:
    """ABC flow with decay e^{-D t}: an exact Navier-Stokes solution with p = -|u|^2/2."""

    A: float = 1.0
    B: float = 0.7
    C: float = 0.4
    D: float = 1e-3

    def _fields(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        X, Y, Z = x[:, 0], x[:, 1], x[:, 2]
        A, B, C = self.A, self.B, self.C
        s, c = np.sin, np.cos
        u = np.stack([A * s(Z) + C * c(Y), B * s(X) + A * c(Z), C * s(Y) + B * c(X)], 1)
        n = len(x)
        G = np.zeros((n, 3, 3))
        G[:, 2, 0], G[:, 1, 0] = A * c(Z), -C * s(Y)
        G[:, 0, 1], G[:, 2, 1] = B * c(X), -A * s(Z)
        G[:, 1, 2], G[:, 0, 2] = C * c(Y), -B * s(X)
        H = np.zeros((n, 3, 3, 3))
        H[:, 2, 2, 0], H[:, 1, 1, 0] = -A * s(Z), -C * c(Y)
        H[:, 0, 0, 1], H[:, 2, 2, 1] = -B * s(X), -A * c(Z)
        H[:, 1, 1, 2], H[:, 0, 0, 2] = -C * s(Y), -B * c(X)
        return x, u, G, H

    def jet(self, x, t: float = 0.0) -> FlowJet:
        x, u, G, H = self._fields(x)
        f = np.exp(-self.D * t)
        u, G, H = u * f, G * f, H * f
        lam = -self.D
        ut, Gt, Ht = lam * u, lam * G, lam * H
        utt, Gtt = lam**2 * u, lam**2 * G
        p = -0.5 * np.sum(u * u, 1)
        gp = -np.einsum("nkm,nm->nk", G, u)
        return FlowJet(x, u, G, H, p, gp, ut, Gt, Ht, 2 * lam * p, 2 * lam * gp, utt, Gtt, 4 * lam**2 * p, t)


@dataclass(frozen=True)
class TaylorGreenFlow:
    """Planar Taylor-Green vortex in (x1, x3): exact Navier-Stokes solution."""

    D: float = 1e-3
    U: float = 1.0

    def jet(self, x, t: float = 0.0) -> FlowJet:
        x = np.atleast_2d(np.asarray(x, float))
        X, Z = x[:, 0], x[:, 2]
        s, c = np.sin, np.cos
        n = len(x)
        f = self.U * np.exp(-2 * self.D * t)
        u = f * np.stack([s(X) * c(Z), np.zeros(n), -c(X) * s(Z)], 1)
        G = np.zeros((n, 3, 3))
        G[:, 0, 0], G[:, 2, 0] = f * c(X) * c(Z), -f * s(X) * s(Z)
        G[:, 0, 2], G[:, 2, 2] = f * s(X) * s(Z), -f * c(X) * c(Z)
        H = np.zeros((n, 3, 3, 3))
        H[:, 0, 0, 0] = H[:, 2, 2, 0] = -f * s(X) * c(Z)
        H[:, 0, 2, 0] = H[:, 2, 0, 0] = -f * c(X) * s(Z)
        H[:, 0, 0, 2] = H[:, 2, 2, 2] = f * c(X) * s(Z)
        H[:, 0, 2, 2] = H[:, 2, 0, 2] = f * s(X) * c(Z)
        g2 = f * f
        p = g2 / 4 * (c(2 * X) + c(2 * Z))
        gp = g2 / 4 * np.stack([-2 * s(2 * X), np.zeros(n), -2 * s(2 * Z)], 1)
        lam = -2 * self.D
        return FlowJet(x, u, G, H, p, gp, lam * u, lam * G, lam * H, 2 * lam * p, 2 * lam * gp,
                       lam**2 * u, lam**2 * G, 4 * lam**2 * p, t)


@dataclass(frozen=True)
class ShearFlow:
    """u = (U(x3), 0, 0) with U = a sin(x3) e^{-x3^2/4}; time derivatives zero, p = 0."""

    a: float = 1.0

    def jet(self, x, t: float = 0.0) -> FlowJet:
        x = np.atleast_2d(np.asarray(x, float))
        z = x[:, 2]
        n = len(x)
        e = np.exp(-z * z / 4)
        U = self.a * np.sin(z) * e
        U1 = self.a * (np.cos(z) - z / 2 * np.sin(z)) * e
        U2 = self.a * (-np.sin(z) - z * np.cos(z) + (z * z / 4 - 0.5) * np.sin(z)) * e
        u = np.zeros((n, 3))
        u[:, 0] = U
        G = np.zeros((n, 3, 3))
        G[:, 2, 0] = U1
        H = np.zeros((n, 3, 3, 3))
        H[:, 2, 2, 0] = U2
        z3, z33, z333 = np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3, 3))
        return FlowJet(x, u, G, H, z3, z33, z33, z333, np.zeros((n, 3, 3, 3)), z3, z33, z33, z333, z3, t)


# ---------------------------------------------------------------- kinetic background

def grad_w(vals: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Velocity gradient on the grid, fourth-order central inside, second-order one-sided at the edges.

    vals (..., N) -> (3, ..., N)."""
    c = grid.to_cube(vals)
    h = grid.h
    out = []
    for ax in range(3):
        a = c.ndim - 3 + ax
        d = np.gradient(c, h, axis=a, edge_order=2)
        f = np.moveaxis(c, a, 0)
        dm = np.moveaxis(d, a, 0)
        dm[2:-2] = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12 * h)
        out.append(d.reshape(vals.shape))
    return np.stack(out)


@dataclass
class KineticBackground:
    """Everything velocity-side that the expansion needs, built once per grid (comoving frame)."""

    grid: VelocityGrid
    op: LinearizedOperator
    burnett: BurnettTensor
    proj: HydroProjection
    s: np.ndarray  # sqrt(mu0)
    A: np.ndarray  # (3, 3, N)
    dA: np.ndarray  # (3, 3, 3, N): dA[j] = d_{w_j} A
    g: np.ndarray  # (3, 3, N) traceless sources
    qg: np.ndarray  # (I - P) g
    capture: np.ndarray  # (5, 3, 3, 3)
    gamma_cfg: CollisionConfig

    @property
    def eta0(self) -> float:
        return self.burnett.eta0

    @property
    def w(self) -> np.ndarray:
        return self.grid.nodes

    def P(self, f):
        return self.proj.apply(f)

    def Q(self, f):
        return f - self.proj.apply(f)


def kinetic_background(grid: VelocityGrid | int = 16, cutoff: float = 6.0, n_theta: int = 6,
                       n_phi: int = 12, op: LinearizedOperator | None = None) -> KineticBackground:
    grid = build_grid(grid, cutoff) if isinstance(grid, int) else grid
    op = op or build_linearized(grid)
    bt = burnett_tensor(op)
    proj = hydro_projection(grid)
    g = burnett_sources(grid)
    qg = g - proj.apply(g)
    return KineticBackground(grid, op, bt, proj, np.sqrt(mu0(grid.nodes)), bt.A, grad_w(bt.A, grid), g, qg,
                             bt.capture_tensor(grid), CollisionConfig(grid, n_theta=n_theta, n_phi=n_phi))


@dataclass
class GammaTable:
    """Gamma(B_i, B_j) for B_i = sum A_lm E_i[l, m] over an orthonormal basis E of symmetric matrices."""

    E: np.ndarray  # (r, 3, 3)
    T: np.ndarray  # (r, r, N)
    shell: float  # largest |B_i| on the outer velocity shell

    def quad(self, G: np.ndarray) -> np.ndarray:
        """sum_ij c_i c_j Gamma(B_i, B_j) with c_i = <sym G, E_i>; G (n, 3, 3), real or complex."""
        if len(self.E) == 0:
            return np.zeros((len(G), self.T.shape[-1]), dtype=np.result_type(G, float))
        c = np.einsum("nlm,ilm->ni", 0.5 * (G + np.swapaxes(G, 1, 2)), self.E)
        return np.einsum("ni,nj,ijN->nN", c, c, self.T)


def gamma_span(mats, rank_tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (r, 3, 3) of the span of the symmetric traceless parts of `mats`."""
    M = np.asarray(mats, float).reshape(-1, 3, 3)
    S = 0.5 * (M + np.swapaxes(M, 1, 2))
    S = S - np.einsum("nkk->n", S)[:, None, None] * np.eye(3) / 3  # A is traceless
    X = S.reshape(len(S), 9)
    if not np.any(X):
        return np.zeros((0, 3, 3))
    _, sv, Vt = np.linalg.svd(X, full_matrices=False)
    r = int(np.sum(sv > rank_tol * sv[0]))
    return Vt[:r].reshape(r, 3, 3)


def gamma_table(bg: KineticBackground, mats, rank_tol: float = 1e-10) -> GammaTable:
    """Pair table over the span of the symmetric parts of `mats` (n, 3, 3)."""
    return gamma_table_on(bg, gamma_span(mats, rank_tol))


def gamma_table_on(bg: KineticBackground, E: np.ndarray) -> GammaTable:
    N = bg.grid.size
    r = len(E)
    if r == 0:
        return GammaTable(np.zeros((0, 3, 3)), np.zeros((0, 0, N)), 0.0)
    B = np.einsum("ilm,lmN->iN", E, bg.A)
    T = np.empty((r, r, N))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(r):
            for j in range(i, r):
                T[i, j] = T[j, i] = apply_Gamma(B[i], B[j], bg.gamma_cfg)
    shell = float(np.max(np.abs(B[:, bg.grid.outer_shell])))
    return GammaTable(E, T, shell)


# ---------------------------------------------------------------- mu

def build_mu(u: np.ndarray, eps: float, grid: VelocityGrid) -> np.ndarray:
    """mu(x, v) = M_{1, eps u(x), 1}(v) on the lab nodes; u (n, 3) -> (n, N)."""
    u = np.atleast_2d(np.asarray(u, float))
    if eps * np.max(np.abs(u), initial=0.0) > 0.5:
        raise ValueError("eps |u|_inf > 1/2: outside the expansion regime")
    V = grid.nodes
    return np.stack([maxwellian(MaxwellianParams(U=tuple(eps * ui)), V) for ui in u])


def sqrt_mu_log_derivative(jet: FlowJet, eps: float, v: np.ndarray) -> np.ndarray:
    """Closed form of (d_t + v.grad/eps) sqrt(mu)/sqrt(mu) at lab velocities v (m, 3) -> (n, m)."""
    jet.require("ut")
    w = np.asarray(v, float)[None] - eps * jet.u[:, None, :]
    a = jet.ut + conv(jet.u, jet.G)
    return 0.5 * (np.einsum("nak,nkm,nam->na", w, jet.G, w) + eps * np.einsum("nam,nm->na", w, a))


def log_derivative_fd_check(flow, eps: float, x, v, t: float = 0.0, h: float = 1e-4) -> float:
    """Relative defect between a centred difference of sqrt(mu) along (1, v/eps) and the closed form."""
    x = np.atleast_2d(np.asarray(x, float))
    v = np.atleast_2d(np.asarray(v, float))

    def root(tt, xx, vv):
        u = flow.jet(xx, tt).u
        return np.sqrt(maxwellian(MaxwellianParams(U=tuple(eps * u[0])), vv))

    num = np.empty((len(x), len(v)))
    for i, xi in enumerate(x):
        for j, vj in enumerate(v):
            fp = root(t + h, xi + h * vj / eps, vj)
            fm = root(t - h, xi - h * vj / eps, vj)
            num[i, j] = (fp - fm) / (2 * h) / root(t, xi, vj)
    exact = sqrt_mu_log_derivative(flow.jet(x, t), eps, v)
    return float(np.max(np.abs(num - exact)) / max(np.max(np.abs(exact)), FLOOR))


def gamma_p_sqrt_mu(p: float, eps_u=(0.0, 0.0, 0.0), grid: VelocityGrid | None = None,
                    n_theta: int = 8, n_phi: int = 16) -> float:
    """max |Gamma(p sqrt mu, p sqrt mu)| = max |Q(p mu, p mu)/sqrt mu| through the exact mixture path."""
    grid = grid or build_grid(16, 6.0)
    cfg = CollisionConfig(grid, n_theta=n_theta, n_phi=n_phi)
    sq = np.sqrt(maxwellian(MaxwellianParams(U=tuple(eps_u)), grid.nodes))
    F = MaxwellianMixture.single(abs(p), eps_u, 1.0)  # Q is quadratic, the sign of p drops out
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        Q = collide_Q(F, F, cfg).Q
    return float(np.max(np.abs(Q / sq)))


# ---------------------------------------------------------------- f2

@dataclass
class HilbertBundle:
    """f2 at the sample points of one time slice, on the comoving velocity nodes."""

    jet: FlowJet
    scales: ExpansionScales
    bg: KineticBackground
    Pf2: np.ndarray  # (n, N)
    qf2: np.ndarray  # (I - P) f2
    table: GammaTable | None = None

    @property
    def f2(self) -> np.ndarray:
        return self.Pf2 + self.qf2

    def orthogonality(self) -> float:
        """max |<Pf2, (I - P) f2>| relative to |Pf2| |(I - P) f2|."""
        g = self.bg.grid
        ip = np.abs(np.sum(self.Pf2 * self.qf2, 1) * g.h**3)
        nrm = np.sqrt(np.sum(self.Pf2**2, 1) * np.sum(self.qf2**2, 1)) * g.h**3
        return float(np.max(ip / np.maximum(nrm, FLOOR)))

    def null_overlap(self) -> float:
        """max |<(I - P) f2, phi_i sqrt mu>| relative to |(I - P) f2|."""
        c = np.abs(self.bg.grid.integrate(self.qf2[:, None, :] * self.bg.proj.basis))
        nrm = np.sqrt(self.bg.grid.integrate(self.qf2**2))
        return float(np.max(c.max(1) / np.maximum(nrm, FLOOR)))


def _f2_parts(jet: FlowJet, kappa: float, bg: KineticBackground):
    Pf2 = jet.p[:, None] * bg.s[None]
    qf2 = -kappa * np.einsum("lmN,nlm->nN", bg.A, jet.G)
    return Pf2, qf2


def build_f2(jet: FlowJet, scales: ExpansionScales, bg: KineticBackground, gamma: bool = True,
             table_builder=None) -> HilbertBundle:
    """Pf2 = p sqrt(mu), (I - P) f2 = -kappa sum A_lm d_l u_m; Gamma pair table over the strains present.

    table_builder(bg, mats) -> GammaTable replaces gamma_table, e.g. with a cached version."""
    jet.require("p")
    Pf2, qf2 = _f2_parts(jet, scales.kappa, bg)
    table = None
    if gamma:
        mats = [jet.G] + ([jet.Gt] if jet.Gt is not None else [])
        table = (table_builder or gamma_table)(bg, np.concatenate(mats))
    return HilbertBundle(jet, scales, bg, Pf2, qf2, table)


def weighted_sup(vals: np.ndarray, grid: VelocityGrid, rho: float = RHO) -> np.ndarray:
    """sup_w e^{rho |w|^2} |f(w)| per row."""
    return np.max(np.abs(vals) * np.exp(rho * grid.speed2)[None], axis=-1)


def bracket_sup(vals: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """sup_w <w>^{-2} |f(w)| per row."""
    return np.max(np.abs(vals) / (1 + grid.speed2)[None], axis=-1)


def fitted(lhs, rhs, floor: float = FLOOR) -> float:
    return float(np.max(np.asarray(lhs) / (np.asarray(rhs) + floor)))


# ---------------------------------------------------------------- solvability and capture

def solvability_defect(jet: FlowJet, bg: KineticBackground) -> np.ndarray:
    """<phi_i sqrt mu, eps^{-1}(v - eps u).grad_x mu / sqrt mu> per point, shape (n, 5)."""
    q = np.einsum("Nk,Nm,nkm->nN", bg.w, bg.w, jet.G) * bg.s[None]
    return bg.grid.integrate(q[:, None, :] * bg.proj.basis[None])


def solvability_expected(jet: FlowJet) -> np.ndarray:
    div = np.einsum("nkk->n", jet.G)
    out = np.zeros((jet.n, 5))
    out[:, 0] = div
    out[:, 4] = np.sqrt(2 / 3) * div
    return out


@dataclass
class CaptureResult:
    defect: float  # max |C.H - eta0 Laplace u| / max |eta0 Laplace u| over rows 1..3
    rows04: float  # max |row 0, 4|
    lhs: np.ndarray
    rhs: np.ndarray


def viscosity_capture_check(bundle: HilbertBundle) -> CaptureResult:
    """kappa sum <phi_i phi_k sqrt mu, A_lm> d_k d_l u_m against kappa eta0 Laplace u_i."""
    jet, bg, k = bundle.jet, bundle.bg, bundle.scales.kappa
    jet.require("H")
    lhs = k * np.einsum("iklm,nklm->ni", bg.capture, jet.H)
    rhs = k * bg.eta0 * laplace(jet.H)
    scale = max(np.max(np.abs(rhs)), FLOOR)
    return CaptureResult(float(np.max(np.abs(lhs[:, 1:4] - rhs)) / scale), float(np.max(np.abs(lhs[:, [0, 4]]))),
                         lhs, rhs)


# ---------------------------------------------------------------- sources

def _sources(jet: FlowJet, sc: ExpansionScales, bg: KineticBackground, table: GammaTable | None):
    """(total source, (I-P)R1 part, leading hydrodynamic term) on the comoving nodes."""
    eps, kap, dl = sc.eps, sc.kappa, sc.delta
    w, s = bg.w, bg.s
    u, G, H, p, gp = jet.u, jet.G, jet.H, jet.p, jet.gp
    a = jet.ut + conv(u, G)
    wGw = np.einsum("Nk,nkm,Nm->nN", w, G, w)
    AH = np.einsum("lmN,nklm->nkN", bg.A, H)  # A0 : d_k grad u
    wAH = np.einsum("Nk,nkN->nN", w, AH)
    lead_in = np.einsum("Nm,nm->nN", w, a + gp) * s - kap * wAH
    # frame shift of d_k at fixed v: -eps G[k, j] d_{w_j}
    dAG = np.einsum("jlmN,nlm->njN", bg.dA, G)
    wG = np.einsum("Nk,nkj->njN", w, G)
    micro_level = -(lead_in + 0.5 * eps * p[:, None] * s * wGw + eps * kap * np.sum(wG * dAG, 1)) / dl
    # (d_t + u.grad) at fixed v of F = p s - kap A0:G
    F = p[:, None] * s - kap * np.einsum("lmN,nlm->nN", bg.A, G)
    gradF = -0.5 * p[:, None, None] * w.T[None] * s - kap * dAG  # (n, 3, N)
    mat = jet.Gt + np.einsum("nk,nklm->nlm", u, H)
    DtF = (jet.pt + np.sum(u * gp, 1))[:, None] * s - kap * np.einsum("lmN,nlm->nN", bg.A, mat)
    DtF = DtF - eps * np.einsum("nj,njN->nN", a, gradF)
    logd = 0.5 * (wGw + eps * np.einsum("Nm,nm->nN", w, a))
    streaming_level = -eps / dl * (DtF + logd * F)
    # Gamma(f2, f2) = 2 p Gamma(s, f2m) + Gamma(f2m, f2m), and 2 Gamma(s, g) = -L g
    gam = eps / dl * p[:, None] * np.einsum("lmN,nlm->nN", bg.qg, G)
    if table is not None:
        gam = gam + eps * kap / dl * table.quad(G)
    total = micro_level + streaming_level + gam
    R1 = kap / dl * bg.Q(wAH)
    lead = bg.P(lead_in) / dl
    return total, R1, lead, {"micro_level": micro_level, "streaming_level": streaming_level, "gamma": gam}


@dataclass
class SourceTerms:
    R1: np.ndarray  # (I - P) R1
    R2: np.ndarray
    R3: np.ndarray  # (I - P) R3
    R4: np.ndarray
    leading: np.ndarray  # (1/delta) P[...]: the hydrodynamic part removed by the fluid equations
    leading_t: np.ndarray
    base_level: np.ndarray  # residual of the 1/(eps delta) level
    parts: dict
    fits: dict = field(default_factory=dict)
    rhs: dict = field(default_factory=dict)
    lhs: dict = field(default_factory=dict)


def assemble_sources(bundle: HilbertBundle, h: float = 1e-30) -> SourceTerms:
    """Source terms of the remainder equation and of its time derivative.

    R2 = total - (I-P)R1 + leading, so that with exact fluid data (leading = 0) the split is
    the one of the hierarchy. The time-differentiated sources use a complex step on the jet
    plus the frame shift -eps d_t u . grad_w.
    """
    jet, sc, bg = bundle.jet, bundle.scales, bundle.bg
    jet.require(*JET_FIELDS)
    total, R1, lead, parts = _sources(jet, sc, bg, bundle.table)
    R2 = total - R1 + lead
    totc, R1c, leadc, _ = _sources(jet.perturbed(h), sc, bg, bundle.table)
    shift = sc.eps * np.einsum("nj,jnN->nN", jet.ut, grad_w(total, bg.grid))
    total_t = totc.imag / h - shift
    R3 = R1c.imag / h
    lead_t = leadc.imag / h
    R4 = total_t - R3 + lead_t
    base_level = -(np.einsum("Nl,Nm,nlm->nN", bg.w, bg.w, jet.G) * bg.s - np.einsum("lmN,nlm->nN", bg.qg, jet.G))
    base_level = base_level / (sc.eps * sc.delta)
    out = SourceTerms(R1, R2, R3, R4, lead, lead_t, base_level, parts)
    _fit_bounds(bundle, out)
    return out


def bound_rhs(jet: FlowJet, sc: ExpansionScales) -> dict:
    """Right-hand sides of the weighted bounds, per sample point."""
    e, k, d = sc.eps, sc.kappa, sc.delta
    u, G, H = _fro(jet.u), _fro(jet.G), _fro(jet.H)
    p, pt, ptt = np.abs(jet.p), np.abs(jet.pt), np.abs(jet.ptt)
    gp, gpt = _fro(jet.gp), _fro(jet.gpt)
    ut, Gt, Ht = _fro(jet.ut), _fro(jet.Gt), _fro(jet.Ht)
    utt, Gtt = _fro(jet.utt), _fro(jet.Gtt)
    pk = p + k * G
    r = {
        "R1": k / d * H,
        "R2": e / d * pk * G + e / d * (pt + k * G) + e * k / d * (Gt + u * H),
        "R3": k / d * Ht,
        "R4": (e / d * ptt + e * k / d * Gtt + e / d * gpt * u + e * k / d * u * Ht
                  + e * k / d * (1 + e * k * u) * ut * H
                  + e / d * ((1 + u) * pk + k * e * ut) * Gt + e**2 / d * pk * utt
                  + e / d * ((u + e * p + e**2 * p * u) * ut + (1 + e * u) * pt) * G
                  + e**2 * k / d * (1 + e * u) * ut * G**2
                  + e / d * (ut + gp + e * pt + e / k * (p**2 + k * u * gp + e * k * ut * p)) * ut),
        "f2": pk,
        "dt_f2": pt + k * (Gt + e * ut * G) + e * ut * p,
        "log_mu": G + e * ut + e * u * G,
        "dt_log_mu": Gt + e * (utt + u * Gt + ut * G) + e**2 * ut * (ut + u * G),
    }
    return r


def _fit_bounds(bundle: HilbertBundle, st: SourceTerms) -> None:
    jet, sc, bg = bundle.jet, bundle.scales, bundle.bg
    g = bg.grid
    e = sc.eps
    w = bg.w
    a = jet.ut + conv(jet.u, jet.G)
    # d_t f2 at fixed v
    Pf2, qf2 = bundle.Pf2, bundle.qf2
    dtF = jet.pt[:, None] * bg.s - sc.kappa * np.einsum("lmN,nlm->nN", bg.A, jet.Gt)
    dtF = dtF - e * np.einsum("nj,jnN->nN", jet.ut, grad_w(Pf2 + qf2, g))
    logd = 0.5 * (np.einsum("Nk,nkm,Nm->nN", w, jet.G, w) + e * np.einsum("Nm,nm->nN", w, a))
    # d_t of the log-derivative at fixed v: jet rate plus d_t w = -eps u_t
    at = jet.utt + conv(jet.ut, jet.G) + conv(jet.u, jet.Gt)
    logd_t = 0.5 * (np.einsum("Nk,nkm,Nm->nN", w, jet.Gt, w) + e * np.einsum("Nm,nm->nN", w, at))
    gradL = 0.5 * (np.einsum("nkm,Nm->nkN", jet.G + np.swapaxes(jet.G, 1, 2), w) + e * a[:, :, None])
    logd_t = logd_t - e * np.einsum("nk,nkN->nN", jet.ut, gradL)
    lhs = {
        "R1": weighted_sup(st.R1, g),
        "R2": weighted_sup(st.R2, g),
        "R3": weighted_sup(st.R3, g),
        "R4": weighted_sup(st.R4, g),
        "f2": weighted_sup(Pf2 + qf2, g),
        "dt_f2": weighted_sup(dtF, g),
        "log_mu": bracket_sup(logd, g),
        "dt_log_mu": bracket_sup(logd_t, g),
    }
    rhs = bound_rhs(jet, sc)
    st.lhs, st.rhs = lhs, rhs
    st.fits = {k: fitted(lhs[k], rhs[k]) for k in lhs}


# ---------------------------------------------------------------- leading cancellation

@dataclass
class CancellationReport:
    ratio: float  # max sup |leading| / (budget + tol)
    ratio_t: float
    response: float  # max |leading - (1/delta) w sqrt(mu) . r| / max|(1/delta) w sqrt(mu) . r| (or abs)
    response_t: float
    residual: float  # max |r|, the fluid residual computed from the jet
    residual_t: float


def leading_cancellation_check(bundle: HilbertBundle, sources: SourceTerms | None = None,
                               D: float | None = None, tol: float = 1e-10) -> CancellationReport:
    """Compare the hydrodynamic leading term with (1/delta)(v - eps u) sqrt(mu) . r and with the
    lower-order budget (unit constants)."""
    jet, sc, bg = bundle.jet, bundle.scales, bundle.bg
    if sources is None:
        jet.require(*JET_FIELDS)
        _, _, lead, _ = _sources(jet, sc, bg, None)
        _, _, leadc, _ = _sources(jet.perturbed(1e-30), sc, bg, None)
        lead_t = leadc.imag / 1e-30
    else:
        lead, lead_t = sources.leading, sources.leading_t
    D = sc.kappa * bg.eta0 if D is None else D
    r = jet.ns_residual(D)
    rt = jet.ns_residual_rate(D)
    ref = np.einsum("Nm,nm->nN", bg.w, r) * bg.s / sc.delta
    ref_t = np.einsum("Nm,nm->nN", bg.w, rt) * bg.s / sc.delta
    e, k, d = sc.eps, sc.kappa, sc.delta
    u, G, H = _fro(jet.u), _fro(jet.G), _fro(jet.H)
    p, pt, gp = np.abs(jet.p), np.abs(jet.pt), _fro(jet.gp)
    ut, Gt, Ht = _fro(jet.ut), _fro(jet.Gt), _fro(jet.Ht)
    budget = e / d * G * p + k / d * H + e * k / d * G
    budget_t = (e / d * ut * (ut + u * G + gp + e * G * p + k * e * G**2 + k * H)
                + e / d * (Gt * (1 + k * G) + pt * G) + k / d * Ht)
    g = bg.grid

    def rel(x, y):
        num = np.max(np.abs(x - y))
        den = np.max(np.abs(y))
        return float(num / den) if den > 1e-8 else float(num)

    return CancellationReport(
        fitted(weighted_sup(lead, g, 0.0), budget + tol),
        fitted(weighted_sup(lead_t, g, 0.0), budget_t + tol),
        rel(lead, ref), rel(lead_t, ref_t), float(np.max(np.abs(r))), float(np.max(np.abs(rt))))


# ---------------------------------------------------------------- boundary mismatch

@dataclass
class BoundaryMismatch:
    values: np.ndarray  # (n_b, N): (1 - P_gamma+)(I - P) f2 on gamma_- (zero on gamma_+ nodes)
    l2_gamma: float  # |(eps/delta)(...)|_{L^2_gamma}
    l4_gamma: float
    grad_l2: float  # |grad u|_{L^2(wall)}
    pattern: float  # l2_gamma^2 / ((eps kappa/delta)^2 |grad u|^2_{L^2(wall)})


def wall_gradients(state) -> tuple[np.ndarray, np.ndarray]:
    """grad u at z = 0 on every horizontal node, (n_b, 3, 3), and the surface weights."""
    g = state.grid
    d = [_d(state.u, k) for k in range(3)]
    G = np.stack([inverse_transform_h(dk)[:, :, :, 0] for dk in d])  # (k, m, n1, n2)
    G = np.moveaxis(G.reshape(3, 3, -1), -1, 0)
    w = np.full(len(G), (2 * np.pi) ** 2 / (g.n1 * g.n2))
    return G, w


def boundary_mismatch(Gwall: np.ndarray, weights: np.ndarray, scales: ExpansionScales,
                      bg: KineticBackground) -> BoundaryMismatch:
    """(1 - P_gamma+)(I - P) f2 on the incoming wall half, with mu = mu0 at the no-slip wall."""
    Gwall = np.asarray(Gwall, float)
    grid = bg.grid
    wp = wall_projection(grid)
    qf2 = -scales.kappa * np.einsum("lmN,nlm->nN", bg.A, Gwall)
    incoming = grid.nodes[:, 2] > 0  # n = -e3, gamma_- has n.v < 0
    vals = (qf2 - wp(qf2)) * incoming[None]
    vn = np.abs(grid.nodes[:, 2])
    c = scales.eps / scales.delta
    l2 = np.sqrt(np.sum(weights * grid.integrate((c * vals) ** 2 * vn)))
    l4 = np.sum(weights * grid.integrate((c * vals) ** 4 * vn)) ** 0.25
    gl2 = float(np.sqrt(np.sum(weights * np.sum(Gwall**2, axis=(1, 2)))))
    ref = (scales.eps * scales.kappa / scales.delta * gl2) ** 2
    return BoundaryMismatch(vals, float(l2), float(l4), gl2, float(l2**2 / ref) if ref > 0 else 0.0)


# ---------------------------------------------------------------- refinement

@dataclass
class RefinementFit:
    resolutions: tuple
    fits: list  # one dict per resolution
    drift: dict  # max/min ratio per bound

    def stable(self, names, factor: float = 2.0) -> bool:
        return all(np.isfinite(self.drift[k]) and self.drift[k] <= factor for k in names)


def refinement_fit(jet: FlowJet, scales: ExpansionScales, resolutions=(16, 20), cutoff: float = 6.0,
                   gamma: bool = True, backgrounds=None, table_builder=None) -> RefinementFit:
    fits = []
    for i, r in enumerate(resolutions):
        bg = backgrounds[i] if backgrounds else kinetic_background(r, cutoff)
        b = build_f2(jet, scales, bg, gamma=gamma, table_builder=table_builder)
        fits.append(assemble_sources(b).fits)
    drift = {}
    for k in fits[0]:
        vals = np.array([f[k] for f in fits])
        if not np.any(vals):
            drift[k] = 1.0  # zero data: nothing to drift
        else:
            drift[k] = float(vals.max() / vals.min()) if vals.min() > 0 else float("inf")
    return RefinementFit(tuple(resolutions), fits, drift)
