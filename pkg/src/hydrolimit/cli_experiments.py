"""Experiment configs, the array cache, reports and the five canonical experiments."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import collision_operator as co
from . import euler_reference as er
from . import hilbert_expansion as hx
from . import kinetic_weights as kw
from . import ns_vorticity_solver as ns
from .spectral_halfspace import NormParams, SpatialGrid, curl, save_snapshot
from .velocity_space import VelocityGrid, build_grid

SCHEMA_VERSION = 1
CACHE_VERSION = 1
DELTA_RULES = ("fixed", "sqrt-eps")
EXPERIMENTS = ("transport-coefficients", "hilbert-residuals", "stokes-verify", "inviscid-sweep", "weight-suite")


# ---------------------------------------------------------------- config

@dataclass
class VelocitySection:
    resolution: int = 16  # kinetic background of the expansion
    cutoff: float = 6.0
    resolutions: tuple = (20, 28)  # dual-resolution transport run
    refinement: tuple = (16, 20)  # residual-fit refinement
    n_theta: int = 6  # angular rule of the Gamma tables
    n_phi: int = 12
    collision_resolution: int = 24
    collision_pairs: int = 20


@dataclass
class SpatialSection:
    M: int = 12
    M2: int = 0
    K: int = 128
    zmax: float = 20.0
    stretch: float = 6.0

    def grid(self) -> SpatialGrid:
        return SpatialGrid(self.M, self.M2, self.K, self.zmax, self.stretch)


@dataclass
class ScalesSection:
    eps: float = 0.05
    kappas: tuple = (1e-2,)
    delta_rule: str = "sqrt-eps"
    delta: float | None = None

    def expansion(self, kappa: float) -> hx.ExpansionScales:
        if self.delta_rule == "sqrt-eps":
            return hx.ExpansionScales.sqrt_eps(self.eps, kappa)
        return hx.ExpansionScales(self.eps, kappa, self.delta)


@dataclass
class WeightSection:
    rho: float = 0.1
    beta: float = 5e-4  # below rho_prime/(2 pi) * 0.1 so the primed weight is admissible too
    rho_prime: float = 0.05
    samples: int = 100_000

    def params(self) -> kw.WeightParams:
        p = kw.WeightParams(self.rho, self.beta, self.rho_prime)
        p.primed()
        return p


@dataclass
class NormSection:
    lam0: float = 0.5
    gamma0: float = 1.0
    alpha: float = 0.5
    alpha_bar: float = 0.5
    tau: float = 2.0

    def params(self, kappa: float) -> NormParams:
        return NormParams(self.lam0, self.gamma0, self.alpha, self.alpha_bar, self.tau, kappa)


@dataclass
class SolverSection:
    dt: float = 5e-4
    T: float = 0.1
    snapshot_every: int = 50
    eta0: float | None = None  # None: take eta0 from the kinetic background
    psi3_bc: str = "dirichlet"
    nonlinear: bool = True


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    experiment: str = "hilbert-residuals"
    seed: int = 0
    out: str = "runs"
    cache: str | None = None
    velocity: VelocitySection = field(default_factory=VelocitySection)
    spatial: SpatialSection = field(default_factory=SpatialSection)
    scales: ScalesSection = field(default_factory=ScalesSection)
    weights: WeightSection = field(default_factory=WeightSection)
    norms: NormSection = field(default_factory=NormSection)
    solver: SolverSection = field(default_factory=SolverSection)
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"config schema {self.schema_version} != {SCHEMA_VERSION}")
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        sc = self.scales
        if sc.delta_rule not in DELTA_RULES:
            raise ValueError(f"delta rule must be one of {DELTA_RULES}")
        if sc.delta_rule == "fixed" and sc.delta is None:
            raise ValueError("delta rule 'fixed' needs a delta value")
        for k in sc.kappas:
            sc.expansion(k)  # revalidates eps, kappa, delta in (0, 1)
        self.weights.params()
        for k in sc.kappas:
            self.norms.params(k)
        self.spatial.grid()
        build_grid(self.velocity.resolution, self.velocity.cutoff)
        s = self.solver
        if not (s.dt > 0 and s.T > 0 and s.snapshot_every >= 0):
            raise ValueError("solver dt, T must be positive")
        if s.eta0 is not None and not s.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if s.psi3_bc not in ("dirichlet", "neumann"):
            raise ValueError("psi3_bc is dirichlet or neumann")
        unknown = set(self.tolerances) - set(DEFAULT_TOLERANCES)
        if unknown:
            raise ValueError(f"unknown tolerances {sorted(unknown)}")

    def tol(self, name: str) -> float:
        return float(self.tolerances.get(name, DEFAULT_TOLERANCES[name]))

    def to_dict(self) -> dict:
        return _plain(asdict(self))


DEFAULT_TOLERANCES = {
    "conservation": 1e-4,
    "entropy": 1e-6,
    "gap_drift": 0.2,
    "eta_drift": 0.1,
    "gram_structure": 0.05,
    "capture_rows": 1e-6,
    "capture": 0.05,
    "solvability_div_free": 1e-8,
    "solvability": 1e-4,
    "cancellation": 1.0,
    "fit_drift": 2.0,
    "robin_kernel": 1e-8,
    "semigroup": 1e-5,
    "corrector": 1e-6,
    "backend_linear": 1e-4,
    "backend_nonlinear": 1e-3,
    "structural": 1e-6,
    "energy_dt2": 10.0,
    "compatibility": 1e-6,
    "layer_signature": 10.0,
    "profile_growth": 2.0,
    "slope_lo": -1.1,
    "slope_hi": 0.0,
    "trend": 0.10,
    "moments": 1e-6,
    "jacobian": 1e-6,
}

PRESETS = {
    "transport-coefficients": {},
    "hilbert-residuals": {},
    "stokes-verify": {"spatial": {"M": 3, "K": 64, "zmax": 16.0}, "scales": {"kappas": [1e-2]},
                      "solver": {"dt": 2.5e-3, "T": 0.02, "eta0": 1.0}},
    "inviscid-sweep": {"spatial": {"M": 16, "K": 256}, "scales": {"kappas": [1e-2, 5e-3, 2.5e-3]},
                       "solver": {"dt": 2.5e-3, "T": 0.25, "snapshot_every": 20, "eta0": 0.088}},
    "weight-suite": {},
}

_SECTIONS = {"velocity": VelocitySection, "spatial": SpatialSection, "scales": ScalesSection,
             "weights": WeightSection, "norms": NormSection, "solver": SolverSection}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_from_dict(d: dict, experiment: str | None = None) -> ExperimentConfig:
    d = dict(d or {})
    exp = experiment or d.get("experiment", "hilbert-residuals")
    if exp not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {exp!r}")
    d = _merge(PRESETS[exp], d)
    d["experiment"] = exp
    kwargs = {}
    for k, v in d.items():
        if k in _SECTIONS:
            cls = _SECTIONS[k]
            names = {f.name for f in dataclasses.fields(cls)}
            bad = set(v) - names
            if bad:
                raise ValueError(f"unknown keys in [{k}]: {sorted(bad)}")
            v = {kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()}
            kwargs[k] = cls(**v)
        elif k in {f.name for f in dataclasses.fields(ExperimentConfig)}:
            kwargs[k] = v
        else:
            raise ValueError(f"unknown config key {k!r}")
    return ExperimentConfig(**kwargs)


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    """YAML or JSON (JSON is valid YAML)."""
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    return config_from_dict(d, experiment)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


# ---------------------------------------------------------------- cache

class ArrayCache:
    """npz files keyed by a content hash of a JSON descriptor; a version mismatch forces a rebuild."""

    def __init__(self, root=None, version: int = CACHE_VERSION):
        self.root = Path(root) if root else None
        self.version = version
        self.hits = 0
        self.misses = 0
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(kind: str, desc: dict) -> str:
        blob = json.dumps({"kind": kind, **_plain(desc)}, sort_keys=True).encode()
        return f"{kind}-{hashlib.sha256(blob).hexdigest()[:20]}"

    def path(self, kind: str, desc: dict) -> Path | None:
        return self.root / f"{self.key(kind, desc)}.npz" if self.root else None

    def get(self, kind: str, desc: dict) -> dict | None:
        p = self.path(kind, desc)
        if p is None or not p.exists():
            return None
        with np.load(p) as z:
            if int(z["_version"]) != self.version:
                return None
            return {k: z[k] for k in z.files if k != "_version"}

    def put(self, kind: str, desc: dict, arrays: dict) -> None:
        p = self.path(kind, desc)
        if p is None:
            return
        tmp = p.with_suffix(".tmp.npz")
        np.savez(tmp, _version=np.array(self.version), **arrays)
        tmp.replace(p)

    def fetch(self, kind: str, desc: dict, build, pack, unpack):
        got = self.get(kind, desc)
        if got is not None:
            self.hits += 1
            return unpack(got)
        self.misses += 1
        obj = build()
        self.put(kind, desc, pack(obj))
        return obj


def _grid_desc(grid: VelocityGrid) -> dict:
    return {"resolution": grid.resolution, "cutoff": float(grid.cutoff)}


def cached_linearized(cache: ArrayCache, grid: VelocityGrid) -> co.LinearizedOperator:
    desc = {**_grid_desc(grid), "bulk": [0.0, 0.0, 0.0]}

    def pack(op):
        d = {"mats": op.mats, "nu": op.nu, "mode": np.array(op.mode), "raw_defect": np.array(op.raw_defect),
             "asymmetry": np.array(op.asymmetry), "n_bases": np.array(len(op.bases))}
        d.update({f"basis_{i}": b for i, b in enumerate(op.bases)})
        return d

    def unpack(d):
        bases = [d[f"basis_{i}"] for i in range(int(d["n_bases"]))]
        return co.LinearizedOperator(grid, (0.0, 0.0, 0.0), str(d["mode"]), d["nu"], d["mats"],
                                     float(d["raw_defect"]), float(d["asymmetry"]), bases)

    return cache.fetch("linearized", desc, lambda: co.build_linearized(grid), pack, unpack)


def cached_background(cache: ArrayCache, resolution: int, cutoff: float, n_theta: int, n_phi: int):
    grid = build_grid(resolution, cutoff)
    return hx.kinetic_background(grid, n_theta=n_theta, n_phi=n_phi, op=cached_linearized(cache, grid))


def gamma_builder(cache: ArrayCache):
    """table_builder for build_f2 that stores Gamma pair tables by (grid, angular rule, span)."""

    def build(bg, mats):
        E = hx.gamma_span(mats)
        desc = {**_grid_desc(bg.grid), "n_theta": bg.gamma_cfg.n_theta, "n_phi": bg.gamma_cfg.n_phi,
                "span": np.round(E, 12).tolist()}
        return cache.fetch("gamma", desc, lambda: hx.gamma_table_on(bg, E),
                           lambda t: {"E": t.E, "T": t.T, "shell": np.array(t.shell)},
                           lambda d: hx.GammaTable(d["E"], d["T"], float(d["shell"])))

    return build


# ---------------------------------------------------------------- reports

@dataclass
class Row:
    anchor: str
    quantity: str
    value: float
    measure: float  # fitted constant or residual compared with the tolerance
    tolerance: float
    passed: bool
    kind: str = "le"  # le: measure <= tol; ge: measure >= tol; info: not asserted


@dataclass
class Report:
    experiment: str
    rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def le(self, anchor, quantity, measure, tol, value=None):
        m = float(measure)
        self.rows.append(Row(anchor, quantity, float(m if value is None else value), m, float(tol),
                             bool(np.isfinite(m) and m <= tol), "le"))

    def ge(self, anchor, quantity, measure, tol, value=None):
        m = float(measure)
        self.rows.append(Row(anchor, quantity, float(m if value is None else value), m, float(tol),
                             bool(np.isfinite(m) and m >= tol), "ge"))

    def check(self, anchor, quantity, ok: bool, value=np.nan, measure=np.nan):
        self.rows.append(Row(anchor, quantity, float(value), float(measure), np.nan, bool(ok), "bool"))

    def info(self, anchor, quantity, value, measure=np.nan):
        self.rows.append(Row(anchor, quantity, float(value), float(measure), np.nan, True, "info"))

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def failures(self) -> list:
        return [r for r in self.rows if not r.passed]

    def write(self, out: Path, cfg: ExperimentConfig | None = None) -> tuple[Path, Path]:
        out.mkdir(parents=True, exist_ok=True)
        stem = self.experiment.replace("-", "_")
        cpath = out / f"{stem}.csv"
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["anchor", "quantity", "value", "measure", "tolerance", "kind", "pass"])
            for r in self.rows:
                w.writerow([r.anchor, r.quantity, _fmt(r.value), _fmt(r.measure), _fmt(r.tolerance), r.kind,
                            "pass" if r.passed else "FAIL"])
        jpath = out / f"{stem}.json"
        summary = {
            "experiment": self.experiment,
            "passed": self.passed,
            "rows": len(self.rows),
            "failures": [asdict(r) for r in self.failures()],
            "extra": _plain(self.extra),
            "timings_s": {k: round(v, 3) for k, v in self.timings.items()},
            "config": cfg.to_dict() if cfg else None,
        }
        with open(jpath, "w") as fh:
            json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        return cpath, jpath


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.10g}"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


class _Clock:
    def __init__(self, report: Report):
        self.report = report

    def __call__(self, name: str):
        rep = self.report

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *a):
                rep.timings[name] = rep.timings.get(name, 0.0) + time.perf_counter() - self.t

        return _T()


# ---------------------------------------------------------------- transport coefficients

def run_transport_coefficients(cfg: ExperimentConfig, cache: ArrayCache | None = None) -> Report:
    cache = cache or ArrayCache(cfg.cache)
    rep = Report("transport-coefficients")
    clock = _Clock(rep)
    rng = np.random.default_rng(cfg.seed)
    vs = cfg.velocity

    cgrid = build_grid(vs.collision_resolution, vs.cutoff)
    ccfg = co.CollisionConfig(cgrid)
    worst_m, worst_h = 0.0, -np.inf
    with clock("conservation"):
        for _ in range(vs.collision_pairs):
            F, G = co.MaxwellianMixture.random(rng), co.MaxwellianMixture.random(rng)
            worst_m = max(worst_m, float(np.max(co.collide_Q(F, G, ccfg).relative_moments)))
    with clock("entropy"):
        for _ in range(vs.collision_pairs):
            worst_h = max(worst_h, co.entropy_production(co.MaxwellianMixture.random(rng), ccfg))
    rep.le("collision.conservation", "max relative mass/momentum/energy moment of Q", worst_m, cfg.tol("conservation"))
    rep.le("collision.entropy", "max int Q(F,F) ln F", worst_h, cfg.tol("entropy"))

    gaps, etas = {}, {}
    for n in vs.resolutions:
        grid = build_grid(n, vs.cutoff)
        with clock(f"operator_{n}"):
            op = cached_linearized(cache, grid)
        with clock(f"gap_{n}"):
            sigma, _ = co.spectral_gap(op)
        with clock(f"burnett_{n}"):
            bt = co.burnett_tensor(op)
        gaps[n], etas[n] = sigma, bt.eta0
        rep.ge("gap.sigma0", f"sigma0 at {n}^3", sigma, 0.0)
        rep.ge("viscosity.eta0", f"eta0 at {n}^3", bt.eta0, 0.0)
        rep.le("viscosity.gram_structure", f"off-isotropic Gram residual at {n}^3", bt.residual, cfg.tol("gram_structure"))
        rep.le("viscosity.rows_0_4", f"max |<phi_i phi_k sqrt mu, A_lm>|, i in (0,4), at {n}^3",
               np.max(np.abs(bt.rows04)), cfg.tol("capture_rows"))
        rep.info("operator.symmetry", f"max |L - L^T| at {n}^3", op.asymmetry)
        rep.info("operator.null_defect", f"|L sqrt(mu) phi| before deflation at {n}^3", op.raw_defect)
    if len(vs.resolutions) > 1:
        g = np.array(list(gaps.values()))
        e = np.array(list(etas.values()))
        rep.le("gap.drift", "sigma0 max/min - 1 across resolutions", g.max() / g.min() - 1, cfg.tol("gap_drift"))
        rep.le("viscosity.drift", "eta0 max/min - 1 across resolutions", e.max() / e.min() - 1, cfg.tol("eta_drift"))
    rep.extra.update(sigma0=gaps, eta0=etas, cache_hits=cache.hits, cache_misses=cache.misses)
    return rep


# ---------------------------------------------------------------- Hilbert residuals

BOUND_NAMES = ("R1", "R2", "f2", "dt_f2", "log_mu", "dt_log_mu")


def _structural(rep: Report, rows: list, tol: float, label: str, dt: float, ctol: float):
    for k in ("div_u", "no_slip", "omega3_wall", "robin"):
        rep.le(f"ns.{k}", f"max over steps, {label}", max(r[k] for r in rows), tol)
    eb = max(abs(r["energy_balance"]) for r in rows)
    e0 = max(rows[0]["energy"], 1e-300)
    rep.le("ns.energy_balance", f"max per-step defect / (E0 dt^2), {label}", eb / (e0 * dt * dt), ctol, value=eb)


def manufactured_cancellation(bg, scales: hx.ExpansionScales, rng, n: int = 6, t: float = 0.3) -> dict:
    """Leading-term cancellation on exact Navier-Stokes solutions."""
    D = scales.kappa * bg.eta0
    x = rng.uniform(0, 2 * np.pi, (n, 3))
    out = {}
    for name, flow in (("beltrami", hx.BeltramiFlow(D=D)), ("taylor_green", hx.TaylorGreenFlow(D=D))):
        b = hx.build_f2(flow.jet(x, t), scales, bg, gamma=False)
        out[name] = hx.leading_cancellation_check(b, hx.assemble_sources(b), D=D)
    return out


def run_hilbert_residuals(cfg: ExperimentConfig, cache: ArrayCache | None = None, zero_flow: bool = False) -> Report:
    cache = cache or ArrayCache(cfg.cache)
    rep = Report("hilbert-residuals")
    clock = _Clock(rep)
    rng = np.random.default_rng(cfg.seed)
    vs, sv = cfg.velocity, cfg.solver
    with clock("background"):
        bg = cached_background(cache, vs.resolution, vs.cutoff, vs.n_theta, vs.n_phi)
    tb = gamma_builder(cache)
    rep.info("viscosity.eta0", f"eta0 of the {vs.resolution}^3 background", bg.eta0)

    for kappa in cfg.scales.kappas:
        sc = cfg.scales.expansion(kappa)
        lab = f"kappa={kappa:g}"
        with clock("manufactured"):
            man = manufactured_cancellation(bg, sc, rng)
        for name, c in man.items():
            rep.le("cancellation.leading", f"sup|leading| / budget, {name}, {lab}", c.ratio, cfg.tol("cancellation"))
            rep.le("cancellation.leading_t", f"sup|d_t leading| / budget, {name}, {lab}", c.ratio_t,
                   cfg.tol("cancellation"))

        with clock("solvability"):
            x = rng.uniform(0, 2 * np.pi, (6, 3))
            jd = hx.BeltramiFlow(D=kappa * bg.eta0).jet(x, 0.3)
            rep.le("solvability.div_free", f"max |defect|, divergence-free, {lab}",
                   np.max(np.abs(hx.solvability_defect(jd, bg))), cfg.tol("solvability_div_free"))
            jc = hx.FlowJet(x[:4], np.zeros((4, 3)), rng.normal(size=(4, 3, 3)))
            rep.le("solvability.compressible", f"max |defect - expected|, {lab}",
                   np.max(np.abs(hx.solvability_defect(jc, bg) - hx.solvability_expected(jc))), cfg.tol("solvability"))
            zs = np.column_stack([np.zeros(5), np.zeros(5), np.linspace(0.2, 3, 5)])
            cap = hx.viscosity_capture_check(hx.build_f2(hx.ShearFlow().jet(zs), sc, bg, gamma=False))
            rep.le("viscosity.capture", f"relative defect on a localized shear, {lab}", cap.defect, cfg.tol("capture"))

        eta0 = sv.eta0 or bg.eta0
        ncfg = ns.NSConfig(kappa=kappa, eta0=eta0, dt=sv.dt, T=sv.T, nonlinear=sv.nonlinear, psi3_bc=sv.psi3_bc)
        grid = cfg.spatial.grid()
        with clock("navier_stokes"):
            if zero_flow:
                w0 = curl(ns.seed_velocity(ns.PlanarSeed(modes=(), shear=0.0), grid))
            else:
                w0 = ns.build_compatible_data(ns.PlanarSeed(), grid, ncfg).omega0
            snaps, rows = ns.run_direct(w0, ncfg, every=0, pressure_at_snap=True)
        _structural(rep, rows, cfg.tol("structural"), lab, sv.dt, cfg.tol("energy_dt2"))
        st = snaps[-1]
        rep.info("ns.dt_robin", f"time-differentiated Robin residual at t={st.t:.3g}, {lab}",
                 ns.dt_robin_residual(st, ncfg))
        jet = hx.flow_jet(st, hx.sample_indices(grid))
        rep.info("ns.jet_residual", f"NS residual at the sample points, {lab}",
                 float(np.max(np.abs(jet.ns_residual(ncfg.D)))))

        with clock("expansion"):
            b = hx.build_f2(jet, sc, bg, table_builder=tb)
            S = hx.assemble_sources(b)
        rep.le("expansion.orthogonality", f"max |P (I-P) f2|, {lab}", b.orthogonality(), 1e-8)
        rep.info("expansion.null_overlap", f"max |<(I-P) f2, phi sqrt mu>|, {lab}", b.null_overlap())
        for name in ("R1", "R2", "R3", "R4", "f2", "dt_f2", "log_mu", "dt_log_mu"):
            c = S.fits[name]
            rep.check(f"bound.{name}", f"fitted constant finite, {lab}", bool(np.isfinite(c)), c, c)
        canc = hx.leading_cancellation_check(b, S, D=ncfg.D)
        rep.le("cancellation.leading", f"sup|leading| / budget, solver data, {lab}", canc.ratio, cfg.tol("cancellation"))
        rep.le("cancellation.leading_t", f"sup|d_t leading| / budget, solver data, {lab}", canc.ratio_t,
               cfg.tol("cancellation"))

        with clock("refinement"):
            bgs = [bg if r == vs.resolution else cached_background(cache, r, vs.cutoff, vs.n_theta, vs.n_phi)
                   for r in vs.refinement]
            ref = hx.refinement_fit(jet, sc, vs.refinement, vs.cutoff, backgrounds=bgs, table_builder=tb)
        for name in BOUND_NAMES:
            rep.le(f"bound.{name}", f"fit drift {vs.refinement[0]}^3 -> {vs.refinement[-1]}^3, {lab}",
                   ref.drift[name], cfg.tol("fit_drift"))

        Gw, ww = hx.wall_gradients(st)
        bm = hx.boundary_mismatch(Gw, ww, sc, bg)
        rep.info("boundary.l2_gamma", f"|(eps/delta)(1-P_gamma)(I-P) f2|_L2gamma, {lab}", bm.l2_gamma)
        rep.info("boundary.l4_gamma", f"L4gamma norm of the mismatch, {lab}", bm.l4_gamma)
        rep.check("boundary.pattern", f"mismatch / (eps kappa/delta |grad u|) finite, {lab}",
                  bool(np.isfinite(bm.pattern)), bm.pattern, bm.pattern)
        rep.extra.setdefault("fits", {})[lab] = S.fits
        rep.extra.setdefault("drift", {})[lab] = ref.drift
        if cfg.out:
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            save_snapshot(out / f"hilbert_state_kappa{kappa:g}.npz",
                          {"omega": st.omega, "u": st.u, "p": st.p}, {"t": st.t, "kappa": kappa})
    rep.extra.update(cache_hits=cache.hits, cache_misses=cache.misses)
    return rep


# ---------------------------------------------------------------- Stokes kernels and backends

def run_stokes_verify(cfg: ExperimentConfig, cache: ArrayCache | None = None) -> Report:
    rep = Report("stokes-verify")
    clock = _Clock(rep)
    sv = cfg.solver
    grid = cfg.spatial.grid()
    kappa = cfg.scales.kappas[0]
    eta0 = sv.eta0 or 1.0
    G = ns.build_greens(grid, kappa, eta0, [0.0, sv.dt])
    ys = np.linspace(0.0, 2.0, 50)
    avals = (0.0, 1.0, 3.0, 8.0)

    with clock("kernels"):
        dir_max = max(float(np.max(np.abs(G.G_3(t, 0.0, ys, a)))) for a in avals for t in (0.01, 0.05, 0.2))
        rep.check("stokes.dirichlet", "max |G_3(t, 0, y)| == 0", dir_max == 0.0, dir_max, dir_max)
        rob = max(float(np.max(np.abs(G.robin_residual(t, ys, a)))) for a in avals for t in (0.01, 0.05, 0.2))
        rep.le("stokes.robin", "max |D (d_x + a) G_h| at the wall", rob, cfg.tol("robin_kernel"))

        x, w = np.polynomial.legendre.leggauss(40)
        e = np.linspace(0, 4, 401)
        zp = ((e[:-1, None] + e[1:, None]) / 2 + (e[1:, None] - e[:-1, None]) / 2 * x).ravel()
        wp = ((e[1:, None] - e[:-1, None]) / 2 * w).ravel()
        X = np.array([0.0, 0.1, 0.3, 0.7])
        Y = np.array([0.05, 0.2, 0.5])
        semi = 0.0
        for a in (0.0, 2.0, 5.0):
            for kern in (G.G_h, G.G_3):
                comp = np.einsum("xq,qy->xy", kern(0.04, X[:, None], zp[None, :], a) * wp, kern(0.03, zp[:, None], Y[None, :], a))
                direct = kern(0.07, X[:, None], Y[None, :], a)
                semi = max(semi, float(np.max(np.abs(comp - direct)) / np.max(np.abs(direct))))
        rep.le("stokes.semigroup", "max relative |G(t) G(s) - G(t+s)|", semi, cfg.tol("semigroup"))

        corr = 0.0
        for a, y in ((1.0, 0.1), (4.0, 0.05)):
            z, r = ns.boundary_corrector(G, a, y, 0.05)
            ref = G.R(0.05, z + y, a)
            corr = max(corr, float(np.max(np.abs(r - ref)) / np.max(np.abs(ref))))
        rep.le("stokes.corrector", "numerical vs closed-form boundary corrector", corr, cfg.tol("corrector"))

        for k in (0, 1):
            c = max(ns.envelope_fit(G, a, 0.1, k) for a in (0.0, 1.0, 4.0, 16.0))
            rep.check("stokes.envelope", f"fitted constant of the order-{k} envelope finite", bool(np.isfinite(c)), c, c)
        params = cfg.norms.params(kappa)
        c = max(ns.trace_kernel_fit(G, a, params, grid) for a in (0.0, 1.0, 4.0))
        rep.check("stokes.trace", "sqrt(t - s) trace-kernel constant finite", bool(np.isfinite(c)), c, c)

    seed = ns.PlanarSeed()
    n = int(round(sv.T / sv.dt))
    for nonlinear in (False, True):
        ncfg = ns.NSConfig(kappa=kappa, eta0=eta0, dt=sv.dt, T=sv.T, nonlinear=nonlinear, psi3_bc=sv.psi3_bc)
        with clock("backends"):
            w0 = ns.build_compatible_data(seed, grid, ncfg).omega0
            ref_cfg = ns.NSConfig(**{**ncfg.__dict__, "dt": sv.dt / 8})
            snaps, rows = ns.run_direct(w0, ref_cfg, derivatives_at_snap=False)
            res = ns.step_duhamel(w0, ncfg, n)
        wR = snaps[-1].omega.data
        rel = float(np.max(np.abs(res.omegas[-1].data - wR)) / np.max(np.abs(wR)))
        label = "nonlinear" if nonlinear else "linear"
        rep.le("backend.duhamel_vs_direct", f"relative difference, {label}", rel,
               cfg.tol("backend_nonlinear" if nonlinear else "backend_linear"))
        _structural(rep, rows, cfg.tol("structural"), f"{label} reference run", ref_cfg.dt, cfg.tol("energy_dt2"))

    ncfg = ns.NSConfig(kappa=kappa, eta0=eta0, dt=sv.dt, T=sv.T, psi3_bc=sv.psi3_bc)
    with clock("compatibility"):
        good = ns.build_compatible_data(seed, grid, ncfg)
        for k, v in good.residuals.items():
            rep.le("compatibility.residual", f"{k} of the corrected data", v, cfg.tol("compatibility"))
        bad = curl(ns.seed_velocity(seed, grid))
        rep.info("compatibility.violated", "Robin residual of the uncorrected seed",
                 ns.compatibility_check(bad, ncfg)["robin"])
        dg = ns.dual_path_dt_omega(good.omega0, ncfg, n)
        db = ns.dual_path_dt_omega(bad, ncfg, n)
    rep.info("compatibility.dual_path", "mild vs chain d_t omega mismatch at T, compatible", dg.mismatch[-1])
    rep.info("compatibility.dual_path", "mild vs chain d_t omega mismatch at T, violated", db.mismatch[-1])
    rep.ge("compatibility.layer_signature", "violated / compatible mismatch at T",
           db.wall_mismatch[-1] / max(dg.mismatch[-1], 1e-300), cfg.tol("layer_signature"))
    rep.extra.update(dual_path_compatible=dg.mismatch, dual_path_violated=db.mismatch)
    return rep


# ---------------------------------------------------------------- inviscid sweep

def _monotone_within(vals: list, slack: float) -> bool:
    """Nonincreasing as kappa decreases, allowing a relative rise of `slack` per step."""
    return all(b <= a * (1 + slack) for a, b in zip(vals[:-1], vals[1:]))


def run_inviscid_sweep(cfg: ExperimentConfig, cache: ArrayCache | None = None, seed_flow: ns.PlanarSeed | None = None) -> Report:
    rep = Report("inviscid-sweep")
    clock = _Clock(rep)
    sv = cfg.solver
    grid = cfg.spatial.grid()
    seed = seed_flow or ns.PlanarSeed()
    eta0 = sv.eta0
    if eta0 is None:
        cache = cache or ArrayCache(cfg.cache)
        vs = cfg.velocity
        eta0 = co.burnett_tensor(cached_linearized(cache, build_grid(vs.resolution, vs.cutoff))).eta0
    kappas = sorted(cfg.scales.kappas, reverse=True)
    grid.check_layer(min(kappas))

    with clock("euler"):
        w0 = curl(ns.seed_velocity(seed, grid))
        E = er.run_euler(w0, sv.dt, sv.T)
    eul = {round(s.t, 8): s for s in E}
    runs, l2, kato, md = {}, [], {c: [] for c in (0.5, 1.0, 2.0)}, []
    for kap in kappas:
        lab = f"kappa={kap:g}"
        ncfg = ns.NSConfig(kappa=kap, eta0=eta0, dt=sv.dt, T=sv.T, nonlinear=sv.nonlinear, psi3_bc=sv.psi3_bc)
        with clock(f"ns_{kap:g}"):
            data = ns.build_compatible_data(seed, grid, ncfg)
            allst = []
            snaps, rows = ns.run_direct(data.omega0, ncfg, every=sv.snapshot_every, pressure_at_snap=True,
                                        callback=allst.append)
        allst = [snaps[0]] + allst
        runs[kap] = snaps
        _structural(rep, rows, cfg.tol("structural"), lab, sv.dt, cfg.tol("energy_dt2"))
        l2.append(max(er.l2_distance(s.u, eul[round(s.t, 8)].u) for s in allst))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for c in kato:
                kato[c].append(er.kato_functional(allst, kap, c))
        md.append(er.maxwellian_distance(snaps[-1].u, E[-1].u, cfg.scales.eps) if np.any(snaps[-1].u.data) else 0.0)
        rep.info("inviscid.l2", f"sup_t |u - u_E|_L2, {lab}", l2[-1])
        rep.info("inviscid.maxwellian", f"Maxwellian distance at T, {lab}", md[-1])
        for c in kato:
            rep.info("inviscid.kato", f"K(kappa), layer {c:g} kappa, {lab}", kato[c][-1])

    slack = cfg.tol("trend")
    rep.check("inviscid.l2", "nonincreasing over the sweep within 10%", _monotone_within(l2, slack), l2[-1])
    rep.check("inviscid.maxwellian", "nonincreasing over the sweep within 10%", _monotone_within(md, slack), md[-1])
    for c, vals in kato.items():
        rep.check("inviscid.kato", f"K(kappa) decreasing, layer {c:g} kappa",
                  all(b < a for a, b in zip(vals[:-1], vals[1:])) or not any(vals), vals[-1])

    if any(np.any(s.omega.data) for s in runs[kappas[0]]):
        fits = ns.profile_diagnostics(runs, cfg.norms.params(kappas[0]))
        for name, f in fits.items():
            rep.le(f"profile.{name}", "fitted-constant growth over the sweep", f.growth, cfg.tol("profile_growth"),
                   value=max(f.constants.values()))
        slope, vals = ns.wall_gradient_slope(runs)
        rep.check("profile.wall_gradient_slope", "log-log slope of sup|d_z omega_h| in [-1.1, 0]",
                  cfg.tol("slope_lo") <= slope <= cfg.tol("slope_hi"), slope, slope)
        rep.extra.update(fits={k: {"constants": f.constants, "growth": f.growth} for k, f in fits.items()},
                         wall_gradient=vals)
    rep.extra.update(kappas=kappas, l2=l2, maxwellian=md, kato=kato)
    return rep


# ---------------------------------------------------------------- weight suite

def run_weight_suite(cfg: ExperimentConfig, cache: ArrayCache | None = None) -> Report:
    rep = Report("weight-suite")
    clock = _Clock(rep)
    rng = np.random.default_rng(cfg.seed)
    wp = cfg.weights.params()
    eps = cfg.scales.eps

    with clock("transport"):
        h = kw.transport_valid_height(wp)
        x, v = kw.sample_phase_points(rng, cfg.weights.samples, wp, x3_max=h)
        lhs, rhs = kw.weight_transport_inequality(wp, x, v)
        viol = int(np.sum(lhs < rhs * (1 - 1e-12)))
    rep.le("weight.transport", f"violations of -v.grad w >= (beta z/2)|v|^2 w at {cfg.weights.samples} points",
           viol, 0)
    rep.info("weight.transport_height", "largest x3 with the inequality for |x_h| <= 2 sqrt(2) pi", h)
    # v = e3 above x3 = 2/beta - 1: lhs/rhs = 2/(beta (1 + x3)) < 1, the reason for the height cap
    l_t, r_t = kw.weight_transport_inequality(wp, np.array([[0.0, 0.0, 2 / wp.beta + 10.0]]), np.array([[0.0, 0.0, 1.0]]))
    rep.info("weight.transport_tail", "lhs/rhs at v = e3, x3 = 2/beta + 10", float(l_t[0] / r_t[0]))
    left = float(kw.z_beta(wp, wp.knee))
    right = float(kw.z_beta(wp, np.nextafter(wp.knee, np.inf)))
    rep.le("weight.continuity", "|z_beta| jump at 1/beta - 1", abs(left - right), 1e-12)

    with clock("nu_B"):
        worst = np.inf
        for kappa in cfg.scales.kappas:
            for scale in (0.2, 1.0):
                fl = kw.FlowPoint(tuple(scale * rng.normal(size=3)), tuple(map(tuple, scale * 0.3 * rng.normal(size=(3, 3)))),
                                  tuple(scale * rng.normal(size=3)))
                xs, vs_ = kw.sample_phase_points(rng, 20_000, wp, x3_max=5.0)
                val, bound = kw.nu_B(wp, eps, kappa, fl, xs, vs_, check=False)
                worst = min(worst, float(np.min(val / bound)))
    rep.ge("weight.nu_B", "min nu_B / (nu/2 + eps kappa z |v|^2/4) on admissible scales", worst, 1.0)
    try:
        kw.flow_strength_guard(eps, 1e-2, kw.FlowPoint(grad_u=((50.0, 0, 0), (0, 0, 0), (0, 0, 0))), 1.0)
        rejected = False
    except ValueError:
        rejected = True
    rep.check("weight.nu_B_guard", "strong flow rejected by the admissibility guard", rejected)

    with clock("kernel"):
        fit = kw.kernel_decay_fit(wp)
    rep.check("weight.kernel_decay", "sup (1+|v|) int k_w finite", bool(np.isfinite(fit.constant)), fit.constant,
              fit.constant)
    rep.le("weight.kernel_decay", "tail slope of int k_w vs (1+|v|) (<= -1 up to 0.1)", fit.tail_slope, -0.9)

    ex = kw.exit_geometry([1.0, 2.0, 0.5], [0.3, 0.2, 0.4], eps)
    ok = np.isclose(ex.t_b, eps * 0.5 / 0.4) and np.allclose(ex.x_b, [1.0 - 0.375, 2.0 - 0.25, 0.0])
    rep.check("exit.geometry", "t_b = eps x3/v3 and x_b on the wall", bool(ok), ex.t_b)
    jac = 0.0
    for _ in range(20):
        xx = np.array([rng.uniform(2.0, 4.0), rng.uniform(2.0, 4.0), rng.uniform(0.05, 0.3)])
        vv = np.array([rng.uniform(-0.3, 0.3), rng.uniform(0.1, 0.3), rng.uniform(0.8, 1.2)])
        bj = kw.boundary_jacobians(xx, vv)
        jac = max(jac, abs(bj.jac_fd - bj.jac_2) / bj.jac_2)
    rep.le("exit.jacobian", "closed-form |v2/v3| vs finite-difference Jacobian", jac, cfg.tol("jacobian"))
    bump = lambda a, b: np.exp(-(a**2 + b**2))
    cov = max(abs(l - r) / r for l, r in (kw.change_of_variables_check([0.3, 0.5, 0.7], bump),
                                          kw.change_of_variables_check([-0.4, -0.6, 0.9], bump, x2=0.4)))
    rep.le("exit.change_of_variables", "relative defect of the wall change of variables", cov, 1e-8)

    with clock("embedding"):
        worst_e = 0.0
        for _ in range(50):
            T = rng.uniform(0.2, 5.0)
            t = np.linspace(0.0, T, 2001)
            c = rng.normal(size=4)
            fr = rng.uniform(0.5, 6.0, 4)
            g = sum(ci * np.sin(fi * t + ci) for ci, fi in zip(c, fr))
            dg = sum(ci * fi * np.cos(fi * t + ci) for ci, fi in zip(c, fr))
            e = kw.embedding_1d_check(g, dg, t)
            worst_e = max(worst_e, e.lhs / e.rhs)
    rep.le("embedding.sup", "max sup|g|^2 / (C_T |g|_H1^2) over random functions", worst_e, 1.0)

    with clock("functionals"):
        hom = _functional_homogeneity(rng, eps)
    rep.le("functionals.homogeneity", "max |E, D, F(c f) / c^2 E, D, F(f) - 1|", hom, 1e-10)

    mom = kw.moment_identities()
    rep.le("moments.identities", "max |integral| at beta = (10, 1, 5)", np.max(np.abs(mom)), cfg.tol("moments"))
    rep.le("moments.closed_form", "max |closed-form Gaussian moments|",
           np.max(np.abs(kw.moment_identities_closed())), 1e-12)
    return rep


def _functional_homogeneity(rng, eps: float, kappa: float = 1e-2, c: float = 3.0) -> float:
    grid = build_grid(12, 6.0)
    n_x = 4
    xw = np.full(n_x, 0.25)
    xp = rng.uniform(0, 2 * np.pi, (n_x, 3))
    times = np.linspace(0.0, 0.1, 3)
    base = np.exp(-grid.speed2 / 2)

    def field_(s):
        vals = np.stack([base * (1 + s * grid.nodes[:, i % 3]) for i in range(n_x)])
        bnd = np.stack([base * (1 + s * grid.nodes[:, 2])] * 2)
        return kw.PhaseField(vals, xw, grid, boundary=bnd, boundary_weights=np.ones(2))

    fs = [field_(0.1 + t) for t in times]
    dfs = [field_(1.0 + t) for t in times]
    a = np.array(kw.functionals_E_D_F(fs, dfs, times, eps, kappa, x_points=xp))
    b = np.array(kw.functionals_E_D_F([f.scaled(c) for f in fs], [f.scaled(c) for f in dfs], times, eps, kappa,
                                      x_points=xp))
    return float(np.max(np.abs(b / (c * c * a) - 1)))


# ---------------------------------------------------------------- CLI

RUNNERS = {
    "transport-coefficients": run_transport_coefficients,
    "hilbert-residuals": run_hilbert_residuals,
    "stokes-verify": run_stokes_verify,
    "inviscid-sweep": run_inviscid_sweep,
    "weight-suite": run_weight_suite,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hydrolimit", description="Hydrodynamic-limit numerical experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="YAML or JSON experiment config")
        s.add_argument("--out", type=Path, help="report directory (default from config)")
        s.add_argument("--seed", type=int, help="deterministic seed (default from config)")
        s.add_argument("--cache", type=Path, help="array cache directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.command) if args.config else config_from_dict({}, args.command)
    if args.out is not None:
        cfg.out = str(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.cache is not None:
        cfg.cache = str(args.cache)
    cache = ArrayCache(cfg.cache)
    rep = RUNNERS[args.command](cfg, cache)
    out = Path(cfg.out)
    cpath, _ = rep.write(out, cfg)
    for r in rep.rows:
        mark = "pass" if r.passed else "FAIL"
        shown = r.value if np.isnan(r.measure) else r.measure
        tol = "" if np.isnan(r.tolerance) else f" (tol {r.tolerance:g})"
        print(f"[{mark}] {r.anchor:<32} {r.quantity}: {shown:.4g}{tol}")
    print(f"{sum(r.passed for r in rep.rows)}/{len(rep.rows)} rows pass; report {cpath}")
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
