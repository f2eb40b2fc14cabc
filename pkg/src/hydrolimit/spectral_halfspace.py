"""Spatial machinery on T^2 x R_+.

Horizontal: full FFT on a (3M+1)^2 grid, modes |xi_i| <= M kept, which makes
quadratic products alias-free. Vertical: Chebyshev-Lobatto collocation in
s in [0, 1], mapped by z = Z_max sinh(a s) / sinh(a) to cluster nodes at the wall.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from functools import cached_property

import numpy as np
import scipy.linalg as sla

SNAPSHOT_VERSION = 1
TOL_DIV = 1e-6


def cheb_lobatto(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes x_j = cos(pi j / K) and the first-derivative matrix."""
    j = np.arange(K + 1)
    x = np.cos(np.pi * j / K)
    c = np.where((j == 0) | (j == K), 2.0, 1.0) * (-1.0) ** j
    X = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (X + np.eye(K + 1))
    D -= np.diag(D.sum(axis=1))
    return x, D


def clenshaw_curtis(K: int) -> np.ndarray:
    """Weights on [-1, 1] for the nodes cos(pi j / K)."""
    theta = np.pi * np.arange(K + 1) / K
    w = np.zeros(K + 1)
    v = np.ones(K - 1)
    if K % 2 == 0:
        w[0] = w[K] = 1.0 / (K**2 - 1)
        for k in range(1, K // 2):
            v -= 2 * np.cos(2 * k * theta[1:-1]) / (4 * k * k - 1)
        v -= np.cos(K * theta[1:-1]) / (K**2 - 1)
    else:
        w[0] = w[K] = 1.0 / K**2
        for k in range(1, (K - 1) // 2 + 1):
            v -= 2 * np.cos(2 * k * theta[1:-1]) / (4 * k * k - 1)
    w[1:-1] = 2 * v / K
    return w


@dataclass(frozen=True)
class SpatialGrid:
    """Modes |xi_i| <= M (M2 for the second axis; M2 = 0 gives x2-independent fields).

    Vertical nodes z_0 = 0 < ... < z_K = Z_max.
    """

    M: int = 16
    M2: int | None = None
    K: int = 256
    zmax: float = 20.0
    stretch: float = 6.0

    def __post_init__(self):
        if self.M < 0 or (self.M2 is not None and self.M2 < 0):
            raise ValueError("mode counts must be nonnegative")
        if self.K < 8:
            raise ValueError("need at least 8 vertical intervals")
        if self.zmax <= 0 or self.stretch <= 0:
            raise ValueError("zmax and stretch must be positive")

    @property
    def m2(self) -> int:
        return self.M if self.M2 is None else self.M2

    @property
    def n1(self) -> int:
        return 3 * self.M + 1

    @property
    def n2(self) -> int:
        return 3 * self.m2 + 1

    @property
    def nz(self) -> int:
        return self.K + 1

    @cached_property
    def xi1(self) -> np.ndarray:
        return np.rint(np.fft.fftfreq(self.n1) * self.n1)[:, None]

    @cached_property
    def xi2(self) -> np.ndarray:
        return np.rint(np.fft.fftfreq(self.n2) * self.n2)[None, :]

    @cached_property
    def absxi(self) -> np.ndarray:
        return np.sqrt(self.xi1**2 + self.xi2**2)

    @cached_property
    def mask(self) -> np.ndarray:
        """Retained modes; the rest are zeroed after every product."""
        return (np.abs(self.xi1) <= self.M) & (np.abs(self.xi2) <= self.m2)

    @cached_property
    def x1(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n1) / self.n1

    @cached_property
    def x2(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n2) / self.n2

    @cached_property
    def s(self) -> np.ndarray:
        x, _ = cheb_lobatto(self.K)
        return (1 - x) / 2

    @cached_property
    def z(self) -> np.ndarray:
        a = self.stretch
        z = self.zmax * np.sinh(a * self.s) / np.sinh(a)
        z[0] = 0.0
        return z

    @cached_property
    def dzds(self) -> np.ndarray:
        a = self.stretch
        return self.zmax * a * np.cosh(a * self.s) / np.sinh(a)

    @cached_property
    def wz(self) -> np.ndarray:
        """Quadrature weights for int_0^Z_max dz."""
        return clenshaw_curtis(self.K) / 2 * self.dzds

    @cached_property
    def D1(self) -> np.ndarray:
        _, D = cheb_lobatto(self.K)
        return (-2.0 * D) / self.dzds[:, None]

    @cached_property
    def D2(self) -> np.ndarray:
        return self.D1 @ self.D1

    @cached_property
    def Icum(self) -> np.ndarray:
        """Matrix of the antiderivative vanishing at z = 0."""
        A = self.D1.copy()
        A[0] = 0.0
        A[0, 0] = 1.0
        rhs = np.eye(self.nz)
        rhs[0] = 0.0
        return np.linalg.solve(A, rhs)

    def nodes_below(self, width: float) -> int:
        return int(np.sum(self.z[1:] <= width))

    def check_layer(self, kappa_min: float) -> int:
        n = self.nodes_below(np.sqrt(kappa_min))
        if n < 8:
            raise ValueError(f"only {n} vertical nodes inside [0, sqrt(kappa)] for kappa={kappa_min}")
        return n

    def descriptor(self) -> dict:
        return {"M": self.M, "M2": self.m2, "K": self.K, "zmax": self.zmax, "stretch": self.stretch}

    def unique_abs(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct |xi| over retained modes and the inverse index map (n1, n2)."""
        r = np.round(self.absxi**2).astype(int)
        vals, inv = np.unique(r, return_inverse=True)
        return np.sqrt(vals.astype(float)), inv.reshape(r.shape)


@dataclass
class SpectralField:
    """Per-mode complex z-profiles, shape (ncomp, n1, n2, nz) in FFT order."""

    data: np.ndarray
    grid: SpatialGrid
    real: bool = True

    def __post_init__(self):
        d = np.asarray(self.data, dtype=complex)
        if d.ndim == 3:
            d = d[None]
        g = self.grid
        if d.shape[1:] != (g.n1, g.n2, g.nz):
            raise ValueError(f"field shape {d.shape} does not fit grid {(g.n1, g.n2, g.nz)}")
        self.data = d

    @property
    def ncomp(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, grid: SpatialGrid, ncomp: int = 3) -> "SpectralField":
        return cls(np.zeros((ncomp, grid.n1, grid.n2, grid.nz), complex), grid)

    def copy(self) -> "SpectralField":
        return SpectralField(self.data.copy(), self.grid, self.real)

    def like(self, data) -> "SpectralField":
        return SpectralField(data, self.grid, self.real)

    def __add__(self, other):
        return self.like(self.data + other.data)

    def __sub__(self, other):
        return self.like(self.data - other.data)

    def __mul__(self, c):
        return self.like(self.data * c)

    __rmul__ = __mul__

    def __getitem__(self, i) -> "SpectralField":
        return self.like(self.data[i : i + 1] if isinstance(i, int) else self.data[i])

    def mode(self, k1: int, k2: int) -> np.ndarray:
        return self.data[:, k1 % self.grid.n1, k2 % self.grid.n2]

    def reality_defect(self) -> float:
        d = self.data
        flip = np.roll(d[:, ::-1, ::-1], 1, axis=(1, 2))
        return float(np.max(np.abs(d - np.conj(flip)), initial=0.0))

    def tail(self) -> float:
        return float(np.max(np.abs(self.data[..., -1]), initial=0.0))

    def truncate(self) -> "SpectralField":
        return self.like(self.data * self.grid.mask[None, :, :, None])

    def to_physical(self) -> np.ndarray:
        return inverse_transform_h(self)

    def norm_l2(self) -> float:
        """L^2(T^2 x R_+) norm via Parseval."""
        p = np.sum(np.abs(self.data) ** 2, axis=(0, 1, 2))
        return float(np.sqrt((2 * np.pi) ** 2 * p @ self.grid.wz))


def transform_h(phys: np.ndarray, grid: SpatialGrid) -> SpectralField:
    """g_xi(z) = (2 pi)^-2 int e^{-i x.xi} g dx, i.e. fft / (n1 n2)."""
    phys = np.asarray(phys)
    if phys.ndim == 3:
        phys = phys[None]
    d = np.fft.fft2(phys, axes=(1, 2)) / (grid.n1 * grid.n2)
    return SpectralField(d, grid, real=bool(np.isrealobj(phys)))


def inverse_transform_h(f: SpectralField) -> np.ndarray:
    g = f.grid
    out = np.fft.ifft2(f.data, axes=(1, 2)) * (g.n1 * g.n2)
    return out.real if f.real else out


def dz(f: SpectralField) -> SpectralField:
    return f.like(f.data @ f.grid.D1.T)


def dzz(f: SpectralField) -> SpectralField:
    return f.like(f.data @ f.grid.D2.T)


def dh(f: SpectralField, axis: int) -> SpectralField:
    k = f.grid.xi1 if axis == 0 else f.grid.xi2
    return f.like(f.data * (1j * k)[None, :, :, None])


def grad(f: SpectralField) -> list[SpectralField]:
    return [dh(f, 0), dh(f, 1), dz(f)]


def div(u: SpectralField) -> SpectralField:
    return dh(u[0], 0) + dh(u[1], 1) + dz(u[2])


def curl(u: SpectralField) -> SpectralField:
    u1, u2, u3 = u[0], u[1], u[2]
    c1 = dh(u3, 1) - dz(u2)
    c2 = dz(u1) - dh(u3, 0)
    c3 = dh(u2, 0) - dh(u1, 1)
    return u.like(np.concatenate([c1.data, c2.data, c3.data]))


def laplacian(f: SpectralField) -> SpectralField:
    return f.like(f.data @ f.grid.D2.T - (f.grid.absxi**2)[None, :, :, None] * f.data)


# ---------------------------------------------------------------- elliptic

class EllipticSolver:
    """(|xi|^2 - d_zz) phi = rhs with phi(0) = 0 (or phi'(0) = 0) and the decaying
    condition phi' + |xi| phi = 0 at Z_max. LU factors are cached per |xi|."""

    def __init__(self, grid: SpatialGrid):
        self.grid = grid
        self._lu: dict = {}

    def factor(self, a: float, bc: str = "dirichlet"):
        # lattice modes have integer |xi|^2; off-lattice values keep their own factor
        key = (round(a * a, 10), bc)
        if key not in self._lu:
            g = self.grid
            A = a * a * np.eye(g.nz) - g.D2
            A[0] = 0.0
            if bc == "dirichlet":
                A[0, 0] = 1.0
            elif bc == "neumann":
                A[0] = g.D1[0]
            else:
                raise ValueError(f"unknown boundary condition {bc!r}")
            A[-1] = g.D1[-1]
            A[-1, -1] += a
            self._lu[key] = sla.lu_factor(A)
        return self._lu[key]

    def solve(self, rhs: np.ndarray, a: float, bc: str = "dirichlet") -> np.ndarray:
        if a <= 0:
            raise ValueError("xi = 0 goes through the antiderivative handler")
        r = np.array(rhs, dtype=complex)
        r[..., 0] = 0.0
        r[..., -1] = 0.0
        lu = self.factor(a, bc)
        shp = r.shape
        out = sla.lu_solve(lu, r.reshape(-1, shp[-1]).T).T.reshape(shp)
        if bc == "dirichlet":
            out[..., 0] = 0.0
        return out

    def apply_field(self, f: SpectralField, bc: str = "dirichlet") -> SpectralField:
        """Solve mode by mode; the xi = 0 mode is left at zero."""
        g = self.grid
        out = np.zeros_like(f.data)
        vals, inv = g.unique_abs()
        for k, a in enumerate(vals):
            if a == 0:
                continue
            sel = (inv == k) & g.mask
            if not sel.any():
                continue
            out[:, sel] = self.solve(f.data[:, sel], a, bc)
        return f.like(out)


_SOLVERS: dict = {}


def elliptic_solver(grid: SpatialGrid) -> EllipticSolver:
    if grid not in _SOLVERS:
        _SOLVERS[grid] = EllipticSolver(grid)
    return _SOLVERS[grid]


def elliptic_dirichlet(omega: np.ndarray, xi_abs: float, grid: SpatialGrid) -> np.ndarray:
    """Collocation solve of (|xi|^2 - d_zz) phi = omega, phi(0) = 0."""
    if xi_abs == 0:
        raise ValueError("xi = 0 has no decaying Dirichlet Green function; use antiderivative()")
    return elliptic_solver(grid).solve(omega, float(xi_abs))


def _panel_rule(grid: SpatialGrid, q: int = 12):
    """Gauss panels between consecutive z nodes plus the barycentric interpolation matrix."""
    x, w = np.polynomial.legendre.leggauss(q)
    z = grid.z
    lo, hi = z[:-1, None], z[1:, None]
    pts = (lo + hi) / 2 + (hi - lo) / 2 * x[None, :]
    wts = (hi - lo) / 2 * w[None, :]
    # barycentric interpolation in s for the Lobatto nodes
    a = grid.stretch
    sp = np.arcsinh(pts * np.sinh(a) / grid.zmax) / a
    xs = 1 - 2 * sp.ravel()
    xn, _ = cheb_lobatto(grid.K)
    K = grid.K
    bw = (-1.0) ** np.arange(K + 1)
    bw[0] *= 0.5
    bw[-1] *= 0.5
    diff = xs[:, None] - xn[None, :]
    exact = np.isclose(diff, 0.0, atol=1e-15)
    diff[exact] = 1.0
    W = bw[None, :] / diff
    W /= W.sum(axis=1, keepdims=True)
    rows = np.where(exact.any(axis=1))[0]
    W[rows] = exact[rows].astype(float)
    return pts, wts, W.reshape(pts.shape + (K + 1,))


def elliptic_green(omega: np.ndarray, xi_abs: float, grid: SpatialGrid, q: int = 12,
                   sign: int = -1) -> np.ndarray:
    """Independent route: the explicit half-line Green function
    G(z, y) = (e^{-a|z-y|} + sign e^{-a(z+y)}) / (2a), integrated panel by panel with
    stable exponential recursions. sign = -1 is the Dirichlet kernel, +1 the Neumann one."""
    a = float(xi_abs)
    if a <= 0:
        raise ValueError("xi = 0 excluded")
    pts, wts, W = _panel_rule(grid, q)
    om = np.einsum("pqk,k->pq", W, np.asarray(omega, dtype=complex))
    z = grid.z
    lo, hi = z[:-1], z[1:]
    # left sums L(z_j) = int_0^{z_j} e^{-a(z_j - y)} om dy
    left_inc = np.sum(wts * np.exp(-a * (hi[:, None] - pts)) * om, axis=1)
    L = np.zeros(grid.nz, complex)
    for j in range(grid.K):
        L[j + 1] = np.exp(-a * (hi[j] - lo[j])) * L[j] + left_inc[j]
    right_inc = np.sum(wts * np.exp(-a * (pts - lo[:, None])) * om, axis=1)
    Rr = np.zeros(grid.nz, complex)
    for j in range(grid.K - 1, -1, -1):
        Rr[j] = np.exp(-a * (hi[j] - lo[j])) * Rr[j + 1] + right_inc[j]
    E = np.sum(wts * np.exp(-a * pts) * om)
    return (L + Rr + sign * np.exp(-a * z) * E) / (2 * a)


def antiderivative(g: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    """int_0^z g(y) dy on the nodes."""
    return np.asarray(g) @ grid.Icum.T


def trace_a(g: np.ndarray, xi_abs: float, grid: SpatialGrid) -> complex:
    """a_xi = int_0^inf e^{-|xi| y} g(y) dy. For xi = 0 this is int_0^inf g."""
    g = np.asarray(g)
    return (g * np.exp(-float(xi_abs) * grid.z)) @ grid.wz


def trace_a_via_solve(g: np.ndarray, xi_abs: float, grid: SpatialGrid) -> complex:
    """d_z (-Delta_xi)^{-1} g at z = 0, by collocation solve and differentiation."""
    phi = elliptic_dirichlet(g, xi_abs, grid)
    return phi @ grid.D1[0]


# ---------------------------------------------------------------- Biot-Savart

def stream_function(omega: SpectralField, psi3_bc: str = "dirichlet") -> SpectralField:
    solver = elliptic_solver(omega.grid)
    psi_h = solver.apply_field(omega[0:2], "dirichlet")
    psi_3 = solver.apply_field(omega[2], psi3_bc)
    return omega.like(np.concatenate([psi_h.data, psi_3.data]))


def biot_savart(omega: SpectralField, psi3_bc: str = "dirichlet", check: bool = True) -> SpectralField:
    """u = curl (-Delta)^{-1} omega.

    Every stream component is Dirichlet by default. psi3_bc="neumann" instead
    gives the stream function with div psi = 0 when omega_3 carries a nonzero
    e^{-|xi| y} moment; both agree when that moment vanishes (planar flows).
    The xi = 0 mode is rebuilt from the antiderivatives of omega_h.
    """
    g = omega.grid
    if omega.ncomp != 3:
        raise ValueError("vorticity must be a 3-vector")
    if check:
        d = div(omega)
        scale = max(np.max(np.abs(omega.data), initial=0.0), 1e-300)
        rel = np.max(np.abs(d.data[0] * g.mask[..., None]), initial=0.0) / scale
        if rel > TOL_DIV * 10:
            warnings.warn(f"vorticity divergence residual {rel:.2e}", RuntimeWarning, stacklevel=2)
    psi = stream_function(omega, psi3_bc)
    u = curl(psi).data
    w0 = omega.data[:, 0, 0]
    u[0, 0, 0] = antiderivative(w0[1], g)
    u[1, 0, 0] = -antiderivative(w0[0], g)
    u[2, 0, 0] = 0.0
    u *= g.mask[None, :, :, None]
    return omega.like(u)


# ---------------------------------------------------------------- weights and norms

@dataclass(frozen=True)
class NormParams:
    lam0: float = 0.5
    gamma0: float = 1.0
    alpha: float = 0.5
    alpha_bar: float = 0.5
    tau: float = 2.0
    kappa: float = 1e-2

    def __post_init__(self):
        if not (self.lam0 > 0 and self.gamma0 > 0 and self.alpha_bar > 0 and self.alpha > 0):
            raise ValueError("lam0, gamma0, alpha, alpha_bar must be positive")
        if not self.tau > 1:
            raise ValueError("tau must exceed 1")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")

    def radius(self, t: float = 0.0) -> float:
        return self.lam0 - self.gamma0 * t


def weight_phi(params: NormParams, z, t: float | None = None, kappa: float | None = None):
    """phi_kappa(z) = kappa^-1/2 phi(z / sqrt kappa), phi(z) = 1/(1 + |Re z|^tau).

    With t given, returns the initial-boundary weight with kappa t in place of kappa.
    """
    k = params.kappa if kappa is None else kappa
    if t is not None:
        if t <= 0:
            raise ValueError("t must be positive")
        k = k * t
    r = np.abs(np.real(z)) / np.sqrt(k)
    return 1.0 / np.sqrt(k) / (1.0 + r**params.tau)


def zeta(z):
    return z / (1.0 + z)


def _lp(prof: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    return np.abs(prof) @ grid.wz


def norm_1(f: SpectralField, lam: float) -> float:
    """sum_xi e^{lam|xi|} int |g_xi| dz on the real axis, summed over components."""
    g = f.grid
    per = _lp(f.data, g) * g.mask
    return float(np.sum(np.exp(lam * g.absxi) * per))


def norm_inf(f: SpectralField, lam: float, weight: np.ndarray | None = None) -> float:
    g = f.grid
    w = np.ones(g.nz) if weight is None else weight
    per = np.max(np.abs(f.data) * w, axis=-1) * g.mask
    return float(np.sum(np.exp(lam * g.absxi) * per))


def bl_weight(params: NormParams, grid: SpatialGrid, kind: str = "kappa", t: float | None = None) -> np.ndarray:
    z = grid.z
    e = np.exp(params.alpha_bar * z)
    if kind == "zero":
        return e
    den = 1.0 + weight_phi(params, z)
    if kind == "kappa_t":
        den = den + weight_phi(params, z, t=t)
    return e / den


def norm_inf_kappa(f: SpectralField, lam: float, params: NormParams, kind: str = "kappa", t=None) -> float:
    return norm_inf(f, lam, bl_weight(params, f.grid, kind, t))


def bracket_norm(f: SpectralField, lam: float, params: NormParams, kind: str = "kappa", t=None) -> float:
    """[[g]]: layer weight on the horizontal components, plain e^{alpha_bar z} on g_3."""
    h = norm_inf_kappa(f[0:2], lam, params, kind, t)
    v = norm_inf_kappa(f[2], lam, params, "zero")
    return h + v


def conormal(f: SpectralField, beta: tuple[int, int, int]) -> SpectralField:
    """D^beta = d_1^b1 d_2^b2 (zeta d_z)^b3."""
    out = f
    for _ in range(beta[0]):
        out = dh(out, 0)
    for _ in range(beta[1]):
        out = dh(out, 1)
    zz = zeta(f.grid.z)
    for _ in range(beta[2]):
        out = out.like(zz * (out.data @ f.grid.D1.T))
    return out


def multi_indices(order: int) -> list[tuple[int, int, int]]:
    return [(a, b, c) for a in range(order + 1) for b in range(order + 1) for c in range(order + 1) if a + b + c == order]


def one_plus_grad_h(f: SpectralField) -> SpectralField:
    """(1 + |nabla_h|) as the Fourier multiplier 1 + |xi|."""
    return f.like(f.data * (1 + f.grid.absxi)[None, :, :, None])


@dataclass
class NormReport:
    lam: float
    norm_1: float
    norm_inf_kappa: float
    norm_inf_kappa_t: float | None
    bracket_kappa: float
    bracket_kappa_t: float | None
    triple_1: float
    triple_inf_kappa: float
    triple_inf_kappa_t: float | None

    def as_dict(self) -> dict:
        return asdict(self)


def _triple(f, params, t, n_lam, term):
    lmax = params.radius(t)
    lams = np.linspace(0.0, lmax, n_lam, endpoint=False)
    d01 = [conormal(f, b) for o in (0, 1) for b in multi_indices(o)]
    d2 = [conormal(f, b) for b in multi_indices(2)]
    best = 0.0
    for lam in lams:
        val = sum(term(g, lam) for g in d01)
        val += (lmax - lam) ** params.alpha * sum(term(g, lam) for g in d2)
        best = max(best, val)
    return best


def analytic_norms(f: SpectralField, params: NormParams, t: float = 0.0, lam: float | None = None,
                   n_lam: int = 16) -> NormReport:
    """Real-axis versions of the analytic and layer norms.

    lam is the radius for the single-radius norms (default: half the current radius).
    The composite norms take the sup over a lam-grid below lam0 - gamma0 t.
    """
    lmax = params.radius(t)
    if lmax <= 0:
        raise ValueError("analyticity radius exhausted at this time")
    lam = 0.5 * lmax if lam is None else lam
    if lam >= lmax:
        raise ValueError(f"lam={lam} outside the shrinking radius {lmax}")
    vec = f.ncomp == 3
    has_t = t > 0
    n1 = norm_1(f, lam)
    nk = norm_inf_kappa(f, lam, params)
    nkt = norm_inf_kappa(f, lam, params, "kappa_t", t) if has_t else None
    bk = bracket_norm(f, lam, params) if vec else nk
    bkt = (bracket_norm(f, lam, params, "kappa_t", t) if vec else nkt) if has_t else None
    tr1 = _triple(f, params, t, n_lam, lambda g, l: norm_1(one_plus_grad_h(g), l))
    if vec:
        trk = _triple(f, params, t, n_lam, lambda g, l: bracket_norm(g, l, params))
        trkt = _triple(f, params, t, n_lam, lambda g, l: bracket_norm(g, l, params, "kappa_t", t)) if has_t else None
    else:
        trk = _triple(f, params, t, n_lam, lambda g, l: norm_inf_kappa(g, l, params))
        trkt = _triple(f, params, t, n_lam, lambda g, l: norm_inf_kappa(g, l, params, "kappa_t", t)) if has_t else None
    return NormReport(lam, n1, nk, nkt, bk, bkt, tr1, trk, trkt)


def contour_lp_norm(g, lam: float, p: float = 1.0, n_sigma: int = 9, zmax: float = 40.0, n: int = 4000) -> float:
    """sup over 0 <= sigma <= lam of the L^p norm of a closed-form holomorphic g along
    the two boundary rays of H_sigma, z = r +- i sigma min(r, 1)."""
    from scipy.integrate import simpson

    r = np.linspace(0.0, zmax, n + 1)
    best = 0.0
    for sig in np.linspace(0.0, lam, n_sigma):
        jac = np.where(r < 1, np.sqrt(1 + sig * sig), 1.0)
        for sgn in (1, -1):
            zc = r + sgn * 1j * sig * np.minimum(r, 1.0)
            val = simpson(np.abs(g(zc)) ** p * jac, x=r) ** (1 / p)
            best = max(best, float(val))
    return best


def fitted_constant(lhs, rhs, floor: float = 1e-12) -> float:
    """max of lhs / (rhs + floor) over samples."""
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    return float(np.max(lhs / (rhs + floor)))


# ---------------------------------------------------------------- snapshots

def save_snapshot(path, fields: dict[str, SpectralField], meta: dict | None = None) -> None:
    """Versioned binary container: grid descriptor, mode table and complex profiles."""
    first = next(iter(fields.values()))
    g = first.grid
    header = {"version": SNAPSHOT_VERSION, "grid": g.descriptor(), "meta": meta or {}, "fields": list(fields)}
    arrays = {f"field_{k}": v.data for k, v in fields.items()}
    modes = np.stack(np.broadcast_arrays(g.xi1, g.xi2), axis=-1).astype(np.int64)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                            modes=modes, z=g.z, **arrays)


def load_snapshot(path) -> tuple[dict[str, SpectralField], dict]:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"snapshot version {header.get('version')} != {SNAPSHOT_VERSION}")
        d = header["grid"]
        g = SpatialGrid(M=d["M"], M2=d["M2"], K=d["K"], zmax=d["zmax"], stretch=d["stretch"])
        fields = {k: SpectralField(z[f"field_{k}"], g) for k in header["fields"]}
    return fields, header["meta"]


def export_profiles_csv(path, f: SpectralField, modes: list[tuple[int, int]], comp: int = 0) -> None:
    g = f.grid
    cols = ["z"]
    data = [g.z]
    for k1, k2 in modes:
        prof = f.mode(k1, k2)[comp]
        cols += [f"re_{k1}_{k2}", f"im_{k1}_{k2}"]
        data += [prof.real, prof.imag]
    np.savetxt(path, np.column_stack(data), delimiter=",", header=",".join(cols), comments="", fmt="%.12e")
