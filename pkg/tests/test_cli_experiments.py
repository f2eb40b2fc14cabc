import json

import numpy as np
import pytest
import yaml

from hydrolimit import cli_experiments as cx
from hydrolimit import ns_vorticity_solver as ns
from hydrolimit.velocity_space import build_grid


# ---------------------------------------------------------------- config

def test_default_config_valid():
    for exp in cx.EXPERIMENTS:
        cfg = cx.config_from_dict({}, exp)
        assert cfg.experiment == exp


def test_preset_merge():
    cfg = cx.config_from_dict({"spatial": {"K": 48}}, "stokes-verify")
    assert cfg.spatial.M == 3 and cfg.spatial.K == 48
    assert cfg.solver.eta0 == 1.0


@pytest.mark.parametrize("bad", [
    {"schema_version": 99},
    {"bogus": 1},
    {"spatial": {"N": 4}},
    {"scales": {"delta_rule": "cubic"}},
    {"scales": {"delta_rule": "fixed"}},
    {"scales": {"eps": 1.5}},
    {"weights": {"beta": 0.01}},
    {"solver": {"dt": -1.0}},
    {"solver": {"psi3_bc": "robin"}},
    {"tolerances": {"made_up": 1.0}},
])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        cx.config_from_dict(bad, "hilbert-residuals")


def test_unknown_experiment():
    with pytest.raises(ValueError):
        cx.config_from_dict({}, "nope")


def test_delta_rules():
    cfg = cx.config_from_dict({"scales": {"eps": 0.04}}, "hilbert-residuals")
    assert cfg.scales.expansion(0.01).delta == pytest.approx(0.2)
    cfg = cx.config_from_dict({"scales": {"delta_rule": "fixed", "delta": 0.3}}, "hilbert-residuals")
    assert cfg.scales.expansion(0.01).delta == 0.3


def test_yaml_round_trip(tmp_path):
    cfg = cx.config_from_dict({"scales": {"kappas": [0.02, 0.01]}, "tolerances": {"capture": 0.04}}, "inviscid-sweep")
    p = tmp_path / "c.yaml"
    cx.dump_config(cfg, p)
    back = cx.load_config(p)
    assert back.to_dict() == cfg.to_dict()
    assert back.tol("capture") == 0.04 and back.tol("trend") == cx.DEFAULT_TOLERANCES["trend"]


def test_json_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"experiment": "weight-suite", "seed": 7}))
    cfg = cx.load_config(p)
    assert cfg.experiment == "weight-suite" and cfg.seed == 7


# ---------------------------------------------------------------- cache

def test_cache_hit_and_key(tmp_path):
    c = cx.ArrayCache(tmp_path)
    calls = []

    def build():
        calls.append(1)
        return np.arange(4.0)

    pack, unpack = (lambda a: {"a": a}), (lambda d: d["a"])
    a = c.fetch("thing", {"n": 4}, build, pack, unpack)
    b = c.fetch("thing", {"n": 4}, build, pack, unpack)
    assert np.array_equal(a, b) and len(calls) == 1
    assert (c.hits, c.misses) == (1, 1)
    assert cx.ArrayCache.key("thing", {"n": 4}) != cx.ArrayCache.key("thing", {"n": 5})
    assert cx.ArrayCache.key("thing", {"n": 4, "m": 1}) == cx.ArrayCache.key("thing", {"m": 1, "n": 4})


def test_cache_version_rebuild(tmp_path):
    pack, unpack = (lambda a: {"a": a}), (lambda d: d["a"])
    cx.ArrayCache(tmp_path, version=1).fetch("t", {}, lambda: np.ones(2), pack, unpack)
    c2 = cx.ArrayCache(tmp_path, version=2)
    got = c2.fetch("t", {}, lambda: np.zeros(2), pack, unpack)
    assert c2.misses == 1 and not np.any(got)
    c3 = cx.ArrayCache(tmp_path, version=2)
    assert not np.any(c3.fetch("t", {}, lambda: np.ones(2), pack, unpack))
    assert c3.hits == 1


def test_cache_disabled():
    c = cx.ArrayCache(None)
    assert c.path("t", {}) is None
    c.put("t", {}, {"a": np.ones(1)})
    assert c.get("t", {}) is None


def test_cached_linearized_round_trip(tmp_path):
    g = build_grid(12)
    a = cx.cached_linearized(cx.ArrayCache(tmp_path), g)
    c = cx.ArrayCache(tmp_path)
    b = cx.cached_linearized(c, g)
    assert c.hits == 1
    f = np.exp(-g.speed2 / 3) * (1 + g.nodes[:, 0])
    from hydrolimit.collision_operator import apply_L
    assert np.array_equal(apply_L(a, f), apply_L(b, f))
    assert a.raw_defect == b.raw_defect


# ---------------------------------------------------------------- reports

def test_report_semantics(tmp_path):
    rep = cx.Report("weight-suite")
    rep.le("a", "le", 1.0, 2.0)
    rep.ge("b", "ge", 1.0, 2.0)
    rep.le("c", "nan", np.nan, 2.0)
    rep.info("d", "info", 5.0)
    assert [r.passed for r in rep.rows] == [True, False, False, True]
    assert not rep.passed and len(rep.failures()) == 2
    cpath, jpath = rep.write(tmp_path)
    lines = cpath.read_text().splitlines()
    assert lines[0] == "anchor,quantity,value,measure,tolerance,kind,pass"
    assert len(lines) == 5
    summary = json.loads(jpath.read_text())
    assert summary["passed"] is False and summary["rows"] == 4


def _csv(out):
    return (out / "weight_suite.csv").read_bytes()


def test_cli_weight_suite_deterministic(tmp_path, capsys):
    assert cx.main(["weight-suite", "--out", str(tmp_path / "a"), "--seed", "5"]) == 0
    assert cx.main(["weight-suite", "--out", str(tmp_path / "b"), "--seed", "5"]) == 0
    assert _csv(tmp_path / "a") == _csv(tmp_path / "b")
    out = capsys.readouterr().out
    assert "rows pass" in out and "[FAIL]" not in out


def test_cli_exit_code_on_failure(tmp_path):
    p = tmp_path / "strict.yaml"
    p.write_text(yaml.safe_dump({"tolerances": {"moments": 0.0}}))
    assert cx.main(["weight-suite", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    summary = json.loads((tmp_path / "o" / "weight_suite.json").read_text())
    assert any(f["anchor"] == "moments.identities" for f in summary["failures"])


def test_cli_flags_override_config(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"seed": 1, "out": str(tmp_path / "ignored")}))
    args = ["weight-suite", "--config", str(p), "--out", str(tmp_path / "used"), "--seed", "2",
            "--cache", str(tmp_path / "cache")]
    assert cx.main(args) == 0
    summary = json.loads((tmp_path / "used" / "weight_suite.json").read_text())
    assert summary["config"]["seed"] == 2
    assert summary["config"]["cache"] == str(tmp_path / "cache")
    assert not (tmp_path / "ignored").exists()


def test_parser_subcommands():
    p = cx.build_parser()
    for name in cx.EXPERIMENTS:
        a = p.parse_args([name, "--seed", "3"])
        assert a.command == name and a.seed == 3
    with pytest.raises(SystemExit):
        p.parse_args(["unknown"])


# ---------------------------------------------------------------- zero-flow smoke runs

SMALL = {"velocity": {"resolution": 12, "refinement": [12, 16]}, "spatial": {"M": 3, "K": 48, "zmax": 16.0},
         "solver": {"dt": 2.5e-3, "T": 0.01}, "out": ""}


def test_hilbert_residuals_zero_flow(tmp_path):
    cfg = cx.config_from_dict(SMALL, "hilbert-residuals")
    rep = cx.run_hilbert_residuals(cfg, cx.ArrayCache(tmp_path), zero_flow=True)
    assert rep.passed, [r for r in rep.failures()]
    fits = rep.extra["fits"]["kappa=0.01"]
    assert all(v == 0.0 for v in fits.values())


def test_inviscid_sweep_zero_flow():
    cfg = cx.config_from_dict({"spatial": {"M": 3, "K": 64, "zmax": 16.0}, "scales": {"kappas": [0.02, 0.01]},
                               "solver": {"dt": 2.5e-3, "T": 0.01, "snapshot_every": 2}}, "inviscid-sweep")
    rep = cx.run_inviscid_sweep(cfg, seed_flow=ns.PlanarSeed(modes=(), shear=0.0))
    assert rep.passed
    assert not any(rep.extra["l2"]) and not any(rep.extra["maxwellian"])
    assert all(not any(v) for v in rep.extra["kato"].values())


def test_stokes_verify_preset():
    rep = cx.run_stokes_verify(cx.config_from_dict({}, "stokes-verify"))
    assert rep.passed, [r for r in rep.failures()]
