"""Velocity grids, Maxwellians, hydrodynamic projection and the wall flux projection."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

TOL_Q = 1e-6
SQRT6 = np.sqrt(6.0)


@dataclass(frozen=True)
class VelocityGrid:
    """Cell-centred tensor grid on [-V_max, V_max]^3.

    Nodes sit at -V_max + (i + 1/2) h, so the node set is closed under v -> -v
    and no node lies on a coordinate plane. Every node carries weight h^3.
    Arrays are flattened in C order over (i, j, k).
    """

    resolution: int
    cutoff: float

    @cached_property
    def h(self) -> float:
        return 2.0 * self.cutoff / self.resolution

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.cutoff + (np.arange(self.resolution) + 0.5) * self.h

    @cached_property
    def nodes(self) -> np.ndarray:
        a = self.axis
        V = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)
        return V.reshape(-1, 3)

    @cached_property
    def weights(self) -> np.ndarray:
        return np.full(self.resolution**3, self.h**3)

    @property
    def size(self) -> int:
        return self.resolution**3

    @property
    def shape(self) -> tuple[int, int, int]:
        n = self.resolution
        return (n, n, n)

    @cached_property
    def speed2(self) -> np.ndarray:
        return np.sum(self.nodes**2, axis=1)

    @cached_property
    def outer_shell(self) -> np.ndarray:
        """Mask of nodes on the outermost layer of the box."""
        n = self.resolution
        idx = np.indices(self.shape).reshape(3, -1)
        return np.any((idx == 0) | (idx == n - 1), axis=0)

    @cached_property
    def mirror(self) -> np.ndarray:
        """Index permutation implementing v -> -v."""
        return np.arange(self.size)[::-1].copy()

    def integrate(self, f: np.ndarray) -> np.ndarray:
        """Quadrature over the last axis."""
        return np.asarray(f) @ self.weights

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(np.sum(f * g) * self.h**3)

    def to_cube(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f).reshape(np.shape(f)[:-1] + self.shape)


def build_grid(resolution: int = 24, cutoff: float = 6.0) -> VelocityGrid:
    if resolution < 8:
        raise ValueError(f"resolution {resolution} < 8 gives an unusable quadrature")
    if cutoff < 5.0:
        raise ValueError(f"cutoff {cutoff} < 5 thermal units truncates the Maxwellian")
    return VelocityGrid(int(resolution), float(cutoff))


@dataclass(frozen=True)
class MaxwellianParams:
    R: float = 1.0
    U: tuple[float, float, float] = (0.0, 0.0, 0.0)
    T: float = 1.0

    def __post_init__(self):
        if not self.R > 0 or not self.T > 0:
            raise ValueError("Maxwellian needs R > 0 and T > 0")
        object.__setattr__(self, "U", tuple(float(x) for x in np.broadcast_to(self.U, 3)))


def maxwellian(params: MaxwellianParams, v: np.ndarray) -> np.ndarray:
    """R (2 pi T)^{-3/2} exp(-|v - U|^2 / 2T), evaluated over the last axis of v."""
    v = np.asarray(v, dtype=float)
    w = v - np.asarray(params.U)
    return params.R * (2 * np.pi * params.T) ** -1.5 * np.exp(-np.sum(w * w, axis=-1) / (2 * params.T))


def mu0(v: np.ndarray) -> np.ndarray:
    return maxwellian(MaxwellianParams(), v)


@dataclass
class DistributionField:
    """Values on a velocity grid plus the weight convention.

    convention "F" is a plain density, "f" a fluctuation (F - mu)/sqrt(mu).
    """

    values: np.ndarray
    grid: VelocityGrid
    convention: str = "f"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape[-1] != self.grid.size:
            raise ValueError("field size does not match the grid")
        if self.convention not in ("F", "f"):
            raise ValueError("convention must be 'F' or 'f'")


def _vals(f) -> np.ndarray:
    return f.values if isinstance(f, DistributionField) else np.asarray(f)


def hydro_basis(grid: VelocityGrid, bulk=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Rows phi_i sqrt(mu), i = 0..4, with mu = M_{1, bulk, 1}."""
    w = grid.nodes - np.asarray(bulk, dtype=float)
    sq = np.sqrt(maxwellian(MaxwellianParams(U=tuple(bulk)), grid.nodes))
    w2 = np.sum(w * w, axis=1)
    return np.stack([sq, w[:, 0] * sq, w[:, 1] * sq, w[:, 2] * sq, (w2 - 3) / SQRT6 * sq])


@dataclass(frozen=True)
class HydroProjection:
    """Projection onto span{phi_i sqrt(mu)}.

    basis holds the raw functions; ortho is a discretely orthonormalised copy
    (Cholesky of the grid Gram matrix), so the discrete P is exactly idempotent.
    """

    grid: VelocityGrid
    bulk: tuple[float, float, float]
    basis: np.ndarray
    gram: np.ndarray
    ortho: np.ndarray

    def coeffs(self, f) -> np.ndarray:
        return self.grid.integrate(_vals(f)[..., None, :] * self.basis)

    def apply(self, f) -> np.ndarray:
        f = _vals(f)
        c = self.grid.integrate(f[..., None, :] * self.ortho)
        return c @ self.ortho

    def gram_defect(self) -> float:
        return float(np.max(np.abs(self.gram - np.eye(5))))


def hydro_projection(grid: VelocityGrid, bulk=(0.0, 0.0, 0.0)) -> HydroProjection:
    bulk = tuple(float(b) for b in np.broadcast_to(bulk, 3))
    B = hydro_basis(grid, bulk)
    G = (B * grid.weights) @ B.T
    C = np.linalg.cholesky(G)
    Q = np.linalg.solve(C, B)
    return HydroProjection(grid, bulk, B, G, Q)


def project_P(f, bulk, grid: VelocityGrid) -> tuple[np.ndarray, np.ndarray]:
    """Return (Pf, coeffs) with coeffs the raw inner products <f, phi_i sqrt(mu)>."""
    proj = hydro_projection(grid, bulk)
    return proj.apply(f), proj.coeffs(f)


def moments(F, grid: VelocityGrid, mach: float) -> np.ndarray:
    """(1/Ma) int (F - mu0)(1, v, (|v|^2 - 3)/sqrt 6) dv as a 5-vector (rho, u1, u2, u3, theta)."""
    F = _vals(F)
    d = F - mu0(grid.nodes)
    v = grid.nodes
    test = np.stack([np.ones(grid.size), v[:, 0], v[:, 1], v[:, 2], (grid.speed2 - 3) / SQRT6])
    return grid.integrate(d[..., None, :] * test) / mach


@dataclass(frozen=True)
class WallProjection:
    """Diffuse-reflection projection at a wall point where mu = mu0."""

    grid: VelocityGrid
    normal: tuple[float, float, float]
    c_mu: float
    flux: np.ndarray = field(repr=False)
    outgoing: np.ndarray = field(repr=False)
    root: np.ndarray = field(repr=False)

    def __call__(self, g) -> np.ndarray:
        g = _vals(g)
        w = self.grid.weights * self.flux * self.outgoing
        return np.sum(g * self.root * w, axis=-1)[..., None] * self.root


def wall_projection(grid: VelocityGrid, normal=(0.0, 0.0, -1.0)) -> WallProjection:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    nv = grid.nodes @ n
    out = nv > 0
    m = mu0(grid.nodes)
    c_mu = 1.0 / np.sum(m * nv * out * grid.weights)
    return WallProjection(grid, tuple(n), float(c_mu), nv, out, np.sqrt(c_mu * m))


def boundary_projection_Pgamma(g, grid: VelocityGrid, normal=(0.0, 0.0, -1.0)) -> np.ndarray:
    """sqrt(c_mu mu) int_{n.v>0} g sqrt(c_mu mu) (n.v) dv, returned on the full grid."""
    return wall_projection(grid, normal)(g)
