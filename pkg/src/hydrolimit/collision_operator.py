"""Hard-sphere collision operator, its linearization and the Burnett machinery.

Q is evaluated direction by direction. For a fixed unit vector u write
v_* - v = t u + s with s orthogonal to u; then v' = v + t u, v'_* = v + s and

    Q_u(F, G)(v) = Lam_u F Pi_u G + Lam_u G Pi_u F - F Lam_u(Pi_u G) - G Lam_u(Pi_u F)

with Lam_u h(v) = int |t| h(v + t u) dt and Pi_u h(v) the integral of h over the
plane through v orthogonal to u. Q is the average of Q_u over the half sphere
(antipodal directions give identical terms). Every Q_u is a genuine collision
rule, so conservation and entropy dissipation hold direction by direction.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, linalg, ndimage
from scipy.interpolate import CubicSpline
from scipy.special import erf

from .velocity_space import (
    SQRT6,
    TOL_Q,
    VelocityGrid,
    hydro_basis,
    hydro_projection,
    maxwellian,
    MaxwellianParams,
    mu0,
)

TOL_COLL = 1e-4
TOL_NULL = 1e-8
TOL_SYM = 1e-10

# closed-form kernel constants (see derive_kernel_constants for the fit)
C1 = 1.0 / np.sqrt(2 * np.pi)
C2 = 4.0 / np.sqrt(2 * np.pi)
SQ2PI = np.sqrt(2 / np.pi)


# ---------------------------------------------------------------- quadrature


@dataclass(frozen=True)
class SphereQuadrature:
    """Product Gauss-Legendre (cos theta) x uniform azimuth rule on S^2."""

    nodes: np.ndarray
    weights: np.ndarray

    def half(self) -> "SphereQuadrature":
        keep = self.nodes[:, 2] > 0
        return SphereQuadrature(self.nodes[keep], self.weights[keep])


def sphere_quadrature(n_theta: int = 16, n_phi: int = 32) -> SphereQuadrature:
    if n_theta % 2 or n_phi % 2:
        raise ValueError("n_theta and n_phi must be even (antipodal closure)")
    x, w = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    X, P = np.meshgrid(x, phi, indexing="ij")
    s = np.sqrt(1 - X**2)
    nodes = np.stack([s * np.cos(P), s * np.sin(P), X], axis=-1).reshape(-1, 3)
    weights = np.repeat(w * 2 * np.pi / n_phi, n_phi)
    return SphereQuadrature(nodes, weights)


@dataclass(frozen=True)
class CollisionConfig:
    grid: VelocityGrid
    n_theta: int = 16
    n_phi: int = 32
    eps_reg: float = 1e-12
    interp_order: int = 3
    dt_factor: float = 0.5
    tol_Q: float = TOL_COLL
    tol_null: float = TOL_NULL
    tol_sym: float = TOL_SYM

    def __post_init__(self):
        if self.n_theta * self.n_phi < 26:
            raise ValueError("angular rule needs at least 26 points")
        if not self.eps_reg > 0:
            raise ValueError("eps_reg must be positive")
        if abs(self.sphere.weights.sum() - 4 * np.pi) > TOL_Q * 4 * np.pi:
            raise ValueError("angular weights do not sum to 4 pi")

    @cached_property
    def sphere(self) -> SphereQuadrature:
        return sphere_quadrature(self.n_theta, self.n_phi)

    @cached_property
    def half_sphere(self) -> SphereQuadrature:
        return self.sphere.half()


# ---------------------------------------------------------------- Maxwellian mixtures


def mean_abs(a, T):
    """E|a + sqrt(T) Z| for standard normal Z."""
    s = np.sqrt(2 * T)
    return np.sqrt(2 * T / np.pi) * np.exp(-(a * a) / (2 * T)) + a * erf(a / s)


@dataclass(frozen=True)
class MaxwellianMixture:
    """F(v) = sum_a R_a M_{1, U_a, T_a}(v); R_a may be negative (signed fields)."""

    R: np.ndarray
    U: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.atleast_1d(np.asarray(self.R, float)))
        object.__setattr__(self, "U", np.atleast_2d(np.asarray(self.U, float)))
        object.__setattr__(self, "T", np.atleast_1d(np.asarray(self.T, float)))
        if np.any(self.T <= 0):
            raise ValueError("temperatures must be positive")

    @classmethod
    def single(cls, R=1.0, U=(0.0, 0.0, 0.0), T=1.0) -> "MaxwellianMixture":
        return cls([R], [U], [T])

    @classmethod
    def random(cls, rng, n_comp=3, R=(0.3, 1.0), U=0.4, T=(0.6, 0.9), signed=False):
        r = rng.uniform(*R, n_comp)
        if signed:
            r = r * rng.choice([-1.0, 1.0], n_comp)
        return cls(r, rng.uniform(-U, U, (n_comp, 3)), rng.uniform(*T, n_comp))

    def __add__(self, other: "MaxwellianMixture") -> "MaxwellianMixture":
        return MaxwellianMixture(
            np.r_[self.R, other.R], np.r_[self.U, other.U], np.r_[self.T, other.T]
        )

    def scale(self, c: float) -> "MaxwellianMixture":
        return MaxwellianMixture(c * self.R, self.U, self.T)

    def _w(self, v):
        return np.asarray(v, float)[..., None, :] - self.U

    def __call__(self, v) -> np.ndarray:
        w = self._w(v)
        e = np.exp(-np.sum(w * w, -1) / (2 * self.T))
        return e @ (self.R * (2 * np.pi * self.T) ** -1.5)

    def plane(self, v, u) -> np.ndarray:
        a = self._w(v) @ u
        return np.exp(-(a * a) / (2 * self.T)) @ (self.R * (2 * np.pi * self.T) ** -0.5)

    def line(self, v, u) -> np.ndarray:
        w = self._w(v)
        a = w @ u
        perp = np.sum(w * w, -1) - a * a
        return (np.exp(-perp / (2 * self.T)) * mean_abs(a, self.T)) @ (
            self.R / (2 * np.pi * self.T)
        )

    def line_plane(self, v, u) -> np.ndarray:
        a = self._w(v) @ u
        return mean_abs(a, self.T) @ self.R


# ---------------------------------------------------------------- Q on grids


@dataclass
class CollisionResult:
    gain: np.ndarray
    loss: np.ndarray
    Q: np.ndarray
    conservative: np.ndarray
    moments: np.ndarray  # raw (mass, momentum, energy) moments of Q
    scale: float  # int |Q| (1 + |v|^2), used for relative moments

    @property
    def relative_moments(self) -> np.ndarray:
        return np.abs(self.moments) / max(self.scale, 1e-300)


def collision_invariants(grid: VelocityGrid) -> np.ndarray:
    v = grid.nodes
    return np.stack([np.ones(grid.size), v[:, 0], v[:, 1], v[:, 2], (grid.speed2 - 3) / SQRT6])


def conservative_correction(Qv: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Remove the (mass, momentum, energy) moments by a least-norm correction."""
    C = collision_invariants(grid) * grid.weights
    return Qv - C.T @ np.linalg.solve(C @ C.T, C @ Qv)


def _finish(gain, loss, grid) -> CollisionResult:
    Qv = gain - loss
    m = collision_invariants(grid) @ (Qv * grid.weights)
    scale = float(np.sum(np.abs(Qv) * (1 + grid.speed2) * grid.weights))
    return CollisionResult(gain, loss, Qv, conservative_correction(Qv, grid), m, scale)


def collide_mixture(F: MaxwellianMixture, G: MaxwellianMixture, v, sphere: SphereQuadrature):
    """(gain, loss) of Q(F, G) at arbitrary points v, exact per direction."""
    v = np.asarray(v, float)
    Fv, Gv = F(v), G(v)
    gain = np.zeros(v.shape[:-1])
    loss = np.zeros(v.shape[:-1])
    for u, w in zip(sphere.nodes, sphere.weights):
        lf, lg = F.line(v, u), G.line(v, u)
        pf, pg = F.plane(v, u), G.plane(v, u)
        gain += w * (lf * pg + lg * pf)
        loss += w * (Fv * G.line_plane(v, u) + Gv * F.line_plane(v, u))
    return gain, loss


class _GridTransforms:
    """Line and plane integrals of a grid function along a direction."""

    def __init__(self, grid: VelocityGrid, values: np.ndarray, order: int, dt_factor: float):
        self.grid = grid
        self.order = order
        cube = grid.to_cube(values)
        self.coef = ndimage.spline_filter(cube, order=order, mode="grid-constant") if order > 1 else cube
        h = grid.h
        self.dt = dt_factor * h
        reach = np.sqrt(3) * grid.cutoff
        self.nt = int(np.ceil(2 * reach / self.dt))
        self.t = self.dt * np.arange(-self.nt, self.nt + 1)
        self.np_ = int(np.ceil(reach / self.dt))
        self.p = self.dt * np.arange(-self.np_, self.np_ + 1)
        na = int(np.ceil(np.sqrt(2) * grid.cutoff / h))
        self.ab = h * np.arange(-na, na + 1)
        # second derivatives for the kink correction
        self.hess = np.empty((3, 3) + cube.shape)
        grads = np.gradient(cube, h)
        for i in range(3):
            gi = np.gradient(grads[i], h)
            for j in range(3):
                self.hess[i, j] = gi[j]
        self.values = np.asarray(values)

    def _sample(self, pts):
        idx = (pts + self.grid.cutoff) / self.grid.h - 0.5
        coords = np.moveaxis(idx, -1, 0).reshape(3, -1)
        out = ndimage.map_coordinates(
            self.coef, coords, order=self.order, mode="grid-constant", cval=0.0, prefilter=False
        )
        return out.reshape(pts.shape[:-1])

    def line(self, u, v):
        pts = v[:, None, :] + self.t[:, None] * u
        vals = self._sample(pts)
        s = vals @ (np.abs(self.t) * self.dt)
        d2 = np.einsum("i,ij...,j->...", u, self.hess, u).reshape(-1)
        return s + self.dt**2 / 6 * self.values - self.dt**4 / 120 * d2

    def radon(self, u):
        e1 = np.cross(u, [1.0, 0, 0] if abs(u[0]) < 0.9 else [0, 1.0, 0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(u, e1)
        A, B = np.meshgrid(self.ab, self.ab, indexing="ij")
        plane = A[..., None] * e1 + B[..., None] * e2
        pts = self.p[:, None, None, None] * u + plane[None]
        da = self.ab[1] - self.ab[0]
        return self._sample(pts).sum(axis=(1, 2)) * da * da

    def radon_line(self, R):
        """int |t| R(p + t) dt on the p-grid, with the kink correction."""
        k = np.abs(self.dt * np.arange(-2 * self.np_, 2 * self.np_ + 1)) * self.dt
        off = (len(k) - 1) // 2
        conv = np.convolve(R, k, mode="full")[off : off + len(R)]
        d2 = np.gradient(np.gradient(R, self.dt), self.dt)
        return conv + self.dt**2 / 6 * R - self.dt**4 / 120 * d2


def _collide_grid(F, G, cfg: CollisionConfig, sphere: SphereQuadrature):
    grid = cfg.grid
    v = grid.nodes
    TF = _GridTransforms(grid, F, cfg.interp_order, cfg.dt_factor)
    TG = _GridTransforms(grid, G, cfg.interp_order, cfg.dt_factor)
    gain = np.zeros(grid.size)
    loss = np.zeros(grid.size)
    for u, w in zip(sphere.nodes, sphere.weights):
        pv = v @ u
        RF, RG = TF.radon(u), TG.radon(u)
        piF = CubicSpline(TF.p, RF)(pv)
        piG = CubicSpline(TF.p, RG)(pv)
        lpF = CubicSpline(TF.p, TF.radon_line(RF))(pv)
        lpG = CubicSpline(TF.p, TF.radon_line(RG))(pv)
        gain += w * (TF.line(u, v) * piG + TG.line(u, v) * piF)
        loss += w * (F * lpG + G * lpF)
    return gain, loss


def _check_shell(vals, grid, name):
    shell = np.max(np.abs(vals[grid.outer_shell]))
    if shell > 1e-8:
        warnings.warn(
            f"{name} reaches {shell:.1e} on the outer shell; post-collision "
            "velocities leave the grid and are treated as zero",
            RuntimeWarning,
            stacklevel=3,
        )


def collide_Q(F, G, cfg: CollisionConfig, sphere: SphereQuadrature | None = None) -> CollisionResult:
    """Symmetrised hard-sphere Q(F, G) on cfg.grid.

    F, G are either MaxwellianMixture objects (exact line/plane integrals) or
    arrays of grid values (spline interpolation of post-collision values).
    """
    sphere = sphere or cfg.half_sphere
    grid = cfg.grid
    if isinstance(F, MaxwellianMixture) and isinstance(G, MaxwellianMixture):
        _check_shell(F(grid.nodes), grid, "F")
        _check_shell(G(grid.nodes), grid, "G")
        gain, loss = collide_mixture(F, G, grid.nodes, sphere)
    else:
        Fv = F(grid.nodes) if isinstance(F, MaxwellianMixture) else np.asarray(F, float)
        Gv = G(grid.nodes) if isinstance(G, MaxwellianMixture) else np.asarray(G, float)
        _check_shell(Fv, grid, "F")
        _check_shell(Gv, grid, "G")
        gain, loss = _collide_grid(Fv, Gv, cfg, sphere)
    return _finish(gain, loss, grid)


def entropy_production(F, cfg: CollisionConfig) -> float:
    """int Q(F, F) ln F dv (non-positive for a genuine collision rule)."""
    res = collide_Q(F, F, cfg)
    Fv = F(cfg.grid.nodes) if isinstance(F, MaxwellianMixture) else np.asarray(F)
    return float(np.sum(res.Q * np.log(Fv) * cfg.grid.weights))


def apply_Gamma(f, g, cfg: CollisionConfig, bulk=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Gamma(f, g) = Q(sqrt(mu) f, sqrt(mu) g)/sqrt(mu) with mu = M_{1, bulk, 1}."""
    sq = np.sqrt(maxwellian(MaxwellianParams(U=tuple(bulk)), cfg.grid.nodes))
    res = collide_Q(sq * f, sq * g, cfg)
    return res.Q / sq


def sqrt_mu_mixture(bulk=(0.0, 0.0, 0.0), scale: float = 1.0) -> MaxwellianMixture:
    """scale * sqrt(M_{1, bulk, 1}) as a Maxwellian (R = (8 pi)^{3/4}, T = 2)."""
    return MaxwellianMixture.single(scale * (8 * np.pi) ** 0.75, bulk, 2.0)


# ---------------------------------------------------------------- nu_0 and kernels


def collision_frequency_nu0(v, method: str = "closed", sphere: SphereQuadrature | None = None):
    """nu_0(v) = int int |(v - v_*).u| mu_0(v_*) du dv_*."""
    v = np.asarray(v, float)
    if method == "closed":
        r = np.linalg.norm(v, axis=-1)
        rs = np.maximum(r, 1e-8)
        out = 2 * np.pi * (SQ2PI * np.exp(-rs**2 / 2) + (rs + 1 / rs) * erf(rs / np.sqrt(2)))
        return np.where(r < 1e-8, 4 * np.sqrt(2 * np.pi), out)
    if method == "sphere":
        sphere = sphere or sphere_quadrature(16, 32)
        return mean_abs(v @ sphere.nodes.T, 1.0) @ sphere.weights
    raise ValueError(method)


def nu0_radial_oracle(speed: float) -> float:
    """2 pi int |v - v_*| mu_0(v_*) dv_* reduced to one radial integral."""
    s = float(speed)

    def avg(r):
        if s < 1e-12:
            return r
        return ((s + r) ** 3 - abs(s - r) ** 3) / (6 * s * r)

    f = lambda r: 4 * np.pi * r * r * (2 * np.pi) ** -1.5 * np.exp(-r * r / 2) * avg(r)
    val = integrate.quad(f, 0, max(s, 0.0), epsabs=1e-13, epsrel=1e-13)[0] if s > 0 else 0.0
    val += integrate.quad(f, max(s, 0.0), np.inf, epsabs=1e-13, epsrel=1e-13)[0]
    return 2 * np.pi * val


def grad_nu0(v) -> np.ndarray:
    v = np.asarray(v, float)
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    rs = np.maximum(r, 1e-4)
    d = 2 * np.pi * ((1 - 1 / rs**2) * erf(rs / np.sqrt(2)) + SQ2PI * np.exp(-rs**2 / 2) / rs)
    small = 2 * np.pi * SQ2PI * 2 / 3
    return np.where(r < 1e-4, small * v, d * v / rs)


def kernel_parts(v, vs, eps_reg: float = 1e-12):
    """Unit-constant pieces (k1, k2) with k_0 = C2 k2 - C1 k1."""
    v = np.asarray(v, float)
    vs = np.asarray(vs, float)
    V = vs - v
    V2 = np.maximum(np.sum(V * V, -1), eps_reg**2)
    a = np.sum(v * v, -1)
    b = np.sum(vs * vs, -1)
    k1 = np.sqrt(V2) * np.exp(-(a + b) / 4)
    k2 = np.exp(-V2 / 8 - (a - b) ** 2 / (8 * V2)) / np.sqrt(V2)
    return k1, k2


def kernel_k0(v, vs, eps_reg: float = 1e-12, constants=(C1, C2)):
    """k_0 = C2/|V| exp(-|V|^2/8 - (|v|^2-|v_*|^2)^2/(8|V|^2)) - C1 |V| exp(-(|v|^2+|v_*|^2)/4)."""
    k1, k2 = kernel_parts(v, vs, eps_reg)
    return constants[1] * k2 - constants[0] * k1


def kernel_k_theta(v, vs, theta: float = 1 / 8, eps_reg: float = 1e-12):
    v = np.asarray(v, float)
    vs = np.asarray(vs, float)
    V2 = np.maximum(np.sum((vs - v) ** 2, -1), eps_reg**2)
    d = np.sum(v * v, -1) - np.sum(vs * vs, -1)
    return np.exp(-theta * V2 - theta * d * d / V2) / np.sqrt(V2)


def kernel_k0_translation_grad(v, vs, eps_reg: float = 1e-12):
    """(grad_v + grad_{v_*}) k_0(v, v_*), shape (..., 3)."""
    v = np.asarray(v, float)
    vs = np.asarray(vs, float)
    k1, k2 = kernel_parts(v, vs, eps_reg)
    V = vs - v
    V2 = np.maximum(np.sum(V * V, -1), eps_reg**2)
    d = np.sum(v * v, -1) - np.sum(vs * vs, -1)
    g1 = -(C1 * k1)[..., None] * (v + vs) / 2
    g2 = (C2 * k2 * d / (2 * V2))[..., None] * V
    return g2 - g1


def pyramid_cell_rule(h: float, q: int = 8):
    """Points/weights for the average of a 1/|r|-singular function over [-h/2, h/2]^3.

    The cube is split into six pyramids with apex at the centre; the radial
    Jacobian s^2 cancels the singularity, so tensor Gauss-Legendre converges fast.
    Weights are normalised so that sum(weights) = 1.
    """
    x, w = np.polynomial.legendre.leggauss(q)
    s, ws = (x + 1) / 2, w / 2
    a, wa = x * h / 2, w * h / 2
    S, A, B = np.meshgrid(s, a, a, indexing="ij")
    W = np.einsum("i,j,k->ijk", ws, wa, wa) * S**2 * h / 2
    pts, wts = [], []
    for ax in range(3):
        o = [c for c in range(3) if c != ax]
        for sg in (1.0, -1.0):
            P = np.zeros(S.shape + (3,))
            P[..., ax] = sg * h / 2
            P[..., o[0]] = A
            P[..., o[1]] = B
            pts.append((S[..., None] * P).reshape(-1, 3))
            wts.append(W.reshape(-1))
    return np.concatenate(pts), np.concatenate(wts) / h**3


def _cell_average(fun, centres, h, shift=None):
    pts, wts = pyramid_cell_rule(h)
    out = []
    for c in centres:
        a = c if shift is None else c - shift
        out.append(np.tensordot(wts, fun(a[None], a[None] + pts), axes=(0, 0)))
    return np.array(out)


# ---------------------------------------------------------------- kernel-constant fit


def polar_kernel_action(v: np.ndarray, f, rmax: float = 14.0, nr: int = 64, sphere=None):
    """int k1 f and int k2 f at a point v, in polar coordinates centred at v."""
    sphere = sphere or sphere_quadrature(32, 64)
    x, w = np.polynomial.legendre.leggauss(nr)
    r = (x + 1) * rmax / 2
    wr = w * rmax / 2
    pts = v + r[:, None, None] * sphere.nodes[None]
    fv = f(pts)
    k1, k2 = kernel_parts(np.broadcast_to(v, pts.shape), pts)
    jac = (wr * r * r)[:, None] * sphere.weights[None]
    return float(np.sum(k1 * fv * jac)), float(np.sum(k2 * fv * jac))


def derive_kernel_constants(rng, n_points: int = 24, sphere=None):
    """Least-squares (C1, C2) from the direct linearization L f = -(2/sqrt mu0) Q(mu0, sqrt(mu0) f).

    f is chosen with sqrt(mu0) f a signed Maxwellian mixture, so both Q and the
    kernel integrals are evaluated without velocity-grid error.
    """
    sphere = sphere or sphere_quadrature(24, 48).half()
    mix = MaxwellianMixture(
        rng.uniform(0.5, 1.5, 3) * np.array([1, -1, 1]),
        rng.uniform(-0.5, 0.5, (3, 3)),
        rng.uniform(0.7, 1.6, 3),
    )
    f = lambda x: mix(x) / np.sqrt(mu0(x))
    mu = MaxwellianMixture.single()
    pts = rng.uniform(-2.0, 2.0, (n_points, 3))
    gain, loss = collide_mixture(mu, mix, pts, sphere)
    LQ = -2 * (gain - loss) / np.sqrt(mu0(pts))
    y = collision_frequency_nu0(pts) * f(pts) - LQ  # = C2 K2 f - C1 K1 f
    A = np.array([polar_kernel_action(p, f) for p in pts])
    X = np.stack([-A[:, 0], A[:, 1]], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = np.linalg.norm(X @ coef - y) / np.linalg.norm(y)
    return coef, resid


# ---------------------------------------------------------------- dense linearized operator

SIGNS = list(itertools.product([1, -1], repeat=3))
HADAMARD = np.array([[np.prod([p if s == -1 else 1 for p, s in zip(par, sg)]) for sg in SIGNS] for par in SIGNS], float)


def _octant_views(grid: VelocityGrid):
    m = grid.resolution // 2
    sl = {1: slice(m, None), -1: slice(m - 1, None, -1)}
    return [tuple(sl[s] for s in sg) for sg in SIGNS]


@dataclass
class LinearizedOperator:
    """Discrete L = nu - K around bulk velocity `bulk`, deflated onto N-perp.

    mode "parity" (bulk = 0): K is stored as eight parity blocks over the
    positive octant. mode "full": one dense matrix over the whole grid.
    Matrices already include the quadrature weight h^3.
    """

    grid: VelocityGrid
    bulk: tuple
    mode: str
    nu: np.ndarray
    mats: np.ndarray  # (8, M, M) deflated blocks or (1, N, N)
    raw_defect: float
    asymmetry: float
    bases: list = field(default_factory=list)  # per block orthonormal null basis (k, M)
    _chol: dict = field(default_factory=dict, repr=False)

    @property
    def block_weight(self) -> float:
        return (8.0 if self.mode == "parity" else 1.0) * self.grid.h**3

    # parity bookkeeping
    def split(self, f) -> np.ndarray:
        if self.mode == "full":
            return np.asarray(f)[None]
        cube = self.grid.to_cube(f)
        S = np.stack([cube[v].reshape(-1) for v in _octant_views(self.grid)])
        return HADAMARD @ S / 8.0

    def merge(self, parts) -> np.ndarray:
        if self.mode == "full":
            return parts[0]
        S = HADAMARD.T @ parts
        m = self.grid.resolution // 2
        cube = np.empty(self.grid.shape)
        for sv, row in zip(_octant_views(self.grid), S):
            cube[sv] = row.reshape(m, m, m)
        return cube.reshape(-1)

    def apply(self, f) -> np.ndarray:
        parts = self.split(f)
        return self.merge(np.stack([M @ p for M, p in zip(self.mats, parts)]))

    def nu_block(self, b: int) -> np.ndarray:
        """nu on the nodes carried by block b (the positive octant in parity mode)."""
        if self.mode == "full":
            return self.nu
        return self.split(self.nu)[0]

    def null_projector(self, b: int) -> np.ndarray:
        Bq = self.bases[b]
        return self.block_weight * Bq.T @ Bq if len(Bq) else None

    def solve(self, g) -> np.ndarray:
        parts = self.split(g)
        out = []
        for b, p in enumerate(parts):
            if not np.any(p):
                out.append(np.zeros_like(p))
                continue
            if b not in self._chol:
                A = self.mats[b].copy()
                P = self.null_projector(b)
                if P is not None:
                    A += np.mean(self.nu) * P
                self._chol[b] = linalg.cho_factor(A)
            out.append(linalg.cho_solve(self._chol[b], p))
        return self.merge(np.stack(out))


def _octant_nodes(grid):
    m = grid.resolution // 2
    a = grid.axis[m:]
    return np.stack(np.meshgrid(a, a, a, indexing="ij"), -1).reshape(-1, 3)


def _orthonormal(B, weight):
    if len(B) == 0:
        return np.zeros((0, B.shape[1] if B.ndim == 2 else 0))
    G = weight * B @ B.T
    return np.linalg.solve(np.linalg.cholesky(G), B)


def _deflate(Lraw, Bq, weight, nu):
    """Pi L Pi with Pi = I - P, symmetrised; also the raw defect |L psi|/|nu psi|."""
    if len(Bq) == 0:
        return 0.5 * (Lraw + Lraw.T), 0.0
    LB = Lraw @ Bq.T
    defect = np.linalg.norm(LB) / np.linalg.norm(nu[:, None] * Bq.T)
    # Pi L Pi through rank-k updates, Pi = I - w B^T B
    BL = Bq @ Lraw
    BLB = Bq @ LB
    L = Lraw - weight * (Bq.T @ BL) - weight * (LB @ Bq) + weight**2 * (Bq.T @ BLB @ Bq)
    return 0.5 * (L + L.T), defect


def build_linearized(grid: VelocityGrid, bulk=(0.0, 0.0, 0.0), mode: str = "auto", eps_reg: float = 1e-12) -> LinearizedOperator:
    """Assemble the dense L = nu_0(v - b) - K_0(v - b, v_* - b) on the grid.

    Off-diagonal entries are point values of k_0; the singular diagonal is the
    cell average of k_0(v, v + r) over the grid cell.
    """
    bulk = tuple(float(x) for x in np.broadcast_to(bulk, 3))
    b = np.asarray(bulk)
    if mode == "auto":
        mode = "parity" if not np.any(b) else "full"
    if mode == "parity" and np.any(b):
        raise ValueError("parity blocks need zero bulk velocity")
    if mode == "parity" and grid.resolution % 2:
        raise ValueError("parity blocks need an even resolution")
    h3 = grid.h**3
    kfun = lambda x, y: kernel_k0(x, y, eps_reg)
    if mode == "parity":
        O = _octant_nodes(grid)
        M = len(O)
        mats = np.empty((8, M, M))
        for s, sg in enumerate(SIGNS):
            mats[s] = kfun(O[:, None, :], (O * np.array(sg))[None])
        mats[0][np.diag_indices(M)] = _cell_average(kfun, O, grid.h)
        # Hadamard transform of the sign-pattern kernels into parity blocks, in place
        flat = mats.reshape(8, -1)
        for i in range(0, flat.shape[1], 1 << 20):
            flat[:, i : i + (1 << 20)] = HADAMARD @ flat[:, i : i + (1 << 20)]
        nu = collision_frequency_nu0(O)
        full_basis = hydro_basis(grid)
        raws, bases = [], []
        op = LinearizedOperator(grid, bulk, mode, collision_frequency_nu0(grid.nodes), mats, 0.0, 0.0)
        for blk in range(8):
            parts = np.stack([op.split(bf)[blk] for bf in full_basis])
            keep = np.linalg.norm(parts, axis=1) > 1e-8 * np.linalg.norm(full_basis, axis=1)
            Bq = _orthonormal(parts[keep], 8 * h3)
            Lraw = np.diag(nu) - mats[blk] * h3
            asym = np.max(np.abs(Lraw - Lraw.T))
            mats[blk], d = _deflate(Lraw, Bq, 8 * h3, nu)
            raws.append(d)
            bases.append(Bq)
        op.raw_defect = float(max(raws))
        op.asymmetry = float(asym)
        op.bases = bases
        return op
    V = grid.nodes
    K = kfun(V[:, None, :] - b, V[None, :, :] - b)
    K[np.diag_indices(len(V))] = _cell_average(kfun, V, grid.h, shift=b)
    nu = collision_frequency_nu0(V - b)
    Lraw = np.diag(nu) - K * h3
    del K
    asym = float(np.max(np.abs(Lraw - Lraw.T)))
    Bq = hydro_projection(grid, bulk).ortho
    L, d = _deflate(Lraw, Bq, h3, nu)
    return LinearizedOperator(grid, bulk, mode, nu, L[None], float(d), asym, [Bq])


def raw_matrix(grid: VelocityGrid, bulk, eps_reg: float = 1e-12) -> np.ndarray:
    """Undeflated full dense matrix of nu - K h^3 around `bulk`."""
    b = np.asarray(bulk, float)
    V = grid.nodes
    K = kernel_k0(V[:, None, :] - b, V[None, :, :] - b, eps_reg)
    K[np.diag_indices(len(V))] = _cell_average(lambda x, y: kernel_k0(x, y, eps_reg), V, grid.h, shift=b)
    return np.diag(collision_frequency_nu0(V - b)) - K * grid.h**3


def raw_matrix_rate(grid: VelocityGrid, bulk, rate, eps_reg: float = 1e-12) -> np.ndarray:
    """d/dt of raw_matrix when the bulk moves with velocity `rate` (= eps d_t u)."""
    b = np.asarray(bulk, float)
    a = np.asarray(rate, float)
    V = grid.nodes
    G = kernel_k0_translation_grad(V[:, None, :] - b, V[None, :, :] - b, eps_reg) @ a
    gfun = lambda x, y: kernel_k0_translation_grad(x, y, eps_reg) @ a
    G[np.diag_indices(len(V))] = _cell_average(gfun, V, grid.h, shift=b)
    return np.diag(-(grad_nu0(V - b) @ a)) + G * grid.h**3


def apply_L(op: LinearizedOperator, f) -> np.ndarray:
    return op.apply(np.asarray(f, float))


def invert_L(op: LinearizedOperator, g, tol_null: float = TOL_NULL) -> np.ndarray:
    """Fredholm inverse on N-perp; rejects inputs with a hydrodynamic part."""
    g = np.asarray(g, float)
    proj = hydro_projection(op.grid, op.bulk)
    pg = proj.apply(g)
    if np.linalg.norm(pg) > tol_null * np.linalg.norm(g):
        raise ValueError(
            f"input has a hydrodynamic part |Pg|/|g| = {np.linalg.norm(pg) / np.linalg.norm(g):.2e}; "
            "L is not invertible there"
        )
    return op.solve(g)


def spectral_gap(op: LinearizedOperator) -> tuple[float, np.ndarray]:
    """sigma_0 = min <Lf, f>/<nu f, f> over N-perp, per parity block."""
    vals = []
    for b, M in enumerate(op.mats):
        nu = op.nu_block(b)
        Bq = op.bases[b]
        Z = linalg.null_space(Bq) if len(Bq) else np.eye(len(M))
        A = Z.T @ M @ Z
        W = Z.T @ (nu[:, None] * Z)
        vals.append(linalg.eigh(A, W, eigvals_only=True, subset_by_index=[0, 0])[0])
    vals = np.array(vals)
    return float(vals.min()), vals


def nystrom_evaluate(op: LinearizedOperator, A: np.ndarray, g_fun, v) -> np.ndarray:
    """Off-grid evaluation of h = L^{-1} g via h(v) = [g(v) + int k(v, v_*) h(v_*) dv_*]/nu(v)."""
    v = np.atleast_2d(np.asarray(v, float))
    b = np.asarray(op.bulk)
    out = np.empty(len(v))
    for i, x in enumerate(v):
        k = kernel_k0(x - b, op.grid.nodes - b)
        out[i] = (g_fun(x[None])[0] + k @ A * op.grid.h**3) / collision_frequency_nu0(x - b)
    return out


# ---------------------------------------------------------------- Burnett functions

PAIRS = [(i, j) for i in range(3) for j in range(3)]


def burnett_sources(grid: VelocityGrid, bulk=(0.0, 0.0, 0.0)) -> np.ndarray:
    """g_lm = (w_l w_m - delta_lm |w|^2/3) sqrt(mu), w = v - bulk; shape (3, 3, N)."""
    w = grid.nodes - np.asarray(bulk, float)
    sq = np.sqrt(maxwellian(MaxwellianParams(U=tuple(bulk)), grid.nodes))
    w2 = np.sum(w * w, 1)
    g = np.einsum("ni,nj->ijn", w, w)
    for i in range(3):
        g[i, i] -= w2 / 3
    return g * sq


def isotropic_tensor() -> np.ndarray:
    d = np.eye(3)
    # T[i, k, l, m] = d_lk d_mi + d_li d_mk - 2/3 d_lm d_ik
    return (
        np.einsum("lk,mi->iklm", d, d) + np.einsum("li,mk->iklm", d, d) - 2 / 3 * np.einsum("lm,ik->iklm", d, d)
    )


@dataclass
class BurnettTensor:
    A: np.ndarray  # (3, 3, N)
    gram: np.ndarray  # (3, 3, 3, 3): gram[i, k, l, m] = <L A_ik, A_lm>
    eta0: float
    residual: float
    null_overlap: float  # max |<A_ij, phi_k sqrt mu>|
    rows04: np.ndarray  # <phi_i phi_k sqrt mu, A_lm> for i in (0, 4)
    trace: np.ndarray  # sum_k gram[k, k, l, l]
    source_defect: float  # |P g| / |g| before inversion
    bulk: tuple = (0.0, 0.0, 0.0)

    def capture_tensor(self, grid: VelocityGrid) -> np.ndarray:
        """C[i, k, l, m] = <phi_i phi_k sqrt mu, A_lm>, i = 0..4."""
        B = hydro_basis(grid, self.bulk)
        w = grid.nodes - np.asarray(self.bulk)
        phik = np.stack([w[:, k] for k in range(3)])
        return np.einsum("in,kn,lmn->iklm", B, phik, self.A) * grid.h**3


def fit_isotropic(G: np.ndarray) -> tuple[float, float]:
    T = isotropic_tensor()
    eta = float(np.sum(G * T) / np.sum(T * T))
    return eta, float(np.linalg.norm(G - eta * T) / np.linalg.norm(G))


def burnett_tensor(op: LinearizedOperator) -> BurnettTensor:
    grid = op.grid
    g = burnett_sources(grid, op.bulk)
    proj = hydro_projection(grid, op.bulk)
    A = np.empty_like(g)
    src_def = 0.0
    for i, j in PAIRS:
        if j < i:
            A[i, j] = A[j, i]
            continue
        gij = g[i, j]
        pg = proj.apply(gij)
        src_def = max(src_def, np.linalg.norm(pg) / np.linalg.norm(gij))
        A[i, j] = op.solve(gij - pg)
    w = grid.h**3
    G = np.einsum("ikn,lmn->iklm", g, A) * w
    eta, res = fit_isotropic(G)
    overlap = float(np.max(np.abs(np.einsum("jn,lmn->jlm", proj.basis, A) * w)))
    tens = BurnettTensor(A, G, eta, res, overlap, None, np.einsum("kkll->l", G), float(src_def), op.bulk)
    tens.rows04 = tens.capture_tensor(grid)[[0, 4]]
    return tens


# ---------------------------------------------------------------- commutators


@dataclass
class Commutators:
    Lt: np.ndarray  # L_t (I - P) f
    LPt: np.ndarray  # L (I - P)(P_t f)
    Pt: np.ndarray  # P_t f
    Gamma_t: np.ndarray | None


def P_t(f, grid: VelocityGrid, bulk, rate) -> np.ndarray:
    """sum_j (P_j f) d_t(phi_j sqrt mu) for a bulk moving with velocity `rate`."""
    b = np.asarray(bulk, float)
    a = np.asarray(rate, float)
    c = hydro_projection(grid, bulk).coeffs(f)
    w = grid.nodes - b
    sq = np.sqrt(maxwellian(MaxwellianParams(U=tuple(bulk)), grid.nodes))
    aw = w @ a
    w2 = np.sum(w * w, 1)
    # d/dt of phi_j sqrt(mu) with w = v - b(t), d_t w = -a
    d = np.stack(
        [
            0.5 * aw * sq,
            (-a[0] + 0.5 * w[:, 0] * aw) * sq,
            (-a[1] + 0.5 * w[:, 1] * aw) * sq,
            (-a[2] + 0.5 * w[:, 2] * aw) * sq,
            (-2 * aw + 0.5 * (w2 - 3) * aw) / SQRT6 * sq,
        ]
    )
    return c @ d


def gamma_t(f, g, cfg: CollisionConfig, bulk, rate) -> np.ndarray:
    """d/dt of Gamma(f, g) at fixed f, g: Gamma(c f, g) + Gamma(f, c g) - c Gamma(f, g),
    with c(v) = rate.(v - bulk)/2 the log-derivative of sqrt(mu)."""
    c = 0.5 * (cfg.grid.nodes - np.asarray(bulk, float)) @ np.asarray(rate, float)
    return apply_Gamma(c * f, g, cfg, bulk) + apply_Gamma(f, c * g, cfg, bulk) - c * apply_Gamma(f, g, cfg, bulk)


def commutators(grid: VelocityGrid, bulk, rate, f, L: np.ndarray | None = None, g=None, cfg=None) -> Commutators:
    """L_t (I-P) f, L (I-P) P_t f and (optionally) Gamma_t(f, g).

    `rate` is eps * d_t u. L defaults to the deflated dense operator around bulk.
    """
    f = np.asarray(f, float)
    rate = np.asarray(rate, float)
    proj = hydro_projection(grid, bulk)
    if not np.any(rate):
        z = np.zeros_like(f)
        return Commutators(z, z.copy(), z.copy(), None if g is None else z.copy())
    Lt = raw_matrix_rate(grid, bulk, rate)
    if L is None:
        L = build_linearized(grid, bulk, mode="full").mats[0]
    qf = f - proj.apply(f)
    pt = P_t(f, grid, bulk, rate)
    qpt = pt - proj.apply(pt)
    Gt = None if g is None else gamma_t(f, g, cfg, bulk, rate)
    return Commutators(Lt @ qf, L @ qpt, pt, Gt)
