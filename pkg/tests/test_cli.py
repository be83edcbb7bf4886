import csv
import json
import struct

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from convch.cli import ConfigError, dump_field, load_config, main, read_field, run
from convch.grid import FieldPair, build_channel_grid

G85 = build_channel_grid(2.0, 1.0, 8, 5)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 8), elements=st.floats(allow_nan=False, width=64)),
       arrays(np.float64, (2, 8), elements=st.floats(allow_nan=True, width=64)))
def test_dump_round_trip_is_bitwise(tmp_path_factory, bulk, bdry):
    d = tmp_path_factory.mktemp("dump")
    dump_field(bulk, d / "a.bin", G85, 0.5)
    got, meta = read_field(d / "a.bin")
    assert got.tobytes() == bulk.tobytes() and meta["t"] == 0.5
    dump_field(FieldPair(bulk, bdry), d / "b.bin", G85)
    got, meta = read_field(d / "b.bin")
    assert got.bulk.tobytes() == bulk.tobytes() and got.bdry.tobytes() == bdry.tobytes()
    assert meta["kind"] == 1


def test_dump_header_layout(tmp_path):
    dump_field(np.zeros((5, 8)), tmp_path / "f.bin", G85, 1.25)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == b"CCHFIELD" and len(raw[:16]) == 16
    kind, nx, ny, Lx, Ly, t = struct.unpack_from("<IIIddd", raw, 16)
    assert (kind, nx, ny, Lx, Ly, t) == (0, 8, 5, 2.0, 1.0, 1.25)
    assert len(raw) == 16 + 36 + 8 * 40


def test_truncated_dump_reports_lengths(tmp_path):
    dump_field(np.ones((5, 8)), tmp_path / "f.bin", G85)
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "f.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match=f"expected {len(raw)} bytes, got {len(raw) - 8}"):
        read_field(tmp_path / "f.bin")
    (tmp_path / "g.bin").write_bytes(b"junk")
    with pytest.raises(ValueError, match="truncated"):
        read_field(tmp_path / "g.bin")


def test_dump_shape_mismatch(tmp_path):
    with pytest.raises(ValueError):
        dump_field(np.zeros((4, 8)), tmp_path / "x.bin", G85)


def write_cfg(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_unknown_key_is_config_error(tmp_path, capsys):
    with pytest.raises(ConfigError, match="solver.dtt"):
        load_config({"solver": {"dtt": 0.1}})
    p = write_cfg(tmp_path / "c.yaml", {"grid": {"nx": 8, "bogus": 1}})
    assert run(p, tmp_path / "out") == 2
    assert "grid.bogus" in capsys.readouterr().err


def test_invalid_values_rejected():
    with pytest.raises(ConfigError, match="potential.family"):
        load_config({"potential": {"family": "quartic"}})
    with pytest.raises(ConfigError, match="grid"):
        load_config({"grid": {"nx": 2}})
    with pytest.raises(ConfigError, match="'T'"):
        load_config({"T": -1})


SMALL = {"grid": {"Lx": 2.0, "Ly": 1.0, "nx": 8, "ny": 5}, "solver": {"dt": 0.05}, "T": 0.5}


def test_constant_simulate_run(tmp_path):
    cfg = dict(SMALL, experiment="simulate", initial={"kind": "constant", "mean": 0.3},
               velocity={"kind": "zero"})
    out = tmp_path / "out"
    assert run(write_cfg(tmp_path / "c.yaml", cfg), out) == 0
    with open(out / "diagnostics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["t", "mass", "energy_noMu", "energy_ftot", "grad_mu_norm",
                             "dual_dt_norm", "mu_std"]
    assert len(rows) == 11
    assert len({r["mass"] for r in rows}) == 1
    assert len({r["energy_noMu"] for r in rows}) == 1
    s = json.loads((out / "summary.json").read_text())
    assert s["passed"] and s["checks"]["energy_nonincreasing"]
    f, meta = read_field(out / "rho_final.bin")
    np.testing.assert_allclose(f.bulk, 0.3, atol=1e-14)


def test_effective_config_reproduces_run(tmp_path):
    cfg = dict(SMALL, experiment="simulate", seed=4)
    a = tmp_path / "a"
    assert run(write_cfg(tmp_path / "c.yaml", cfg), a) == 0
    b = tmp_path / "b"
    assert main([str(a / "effective_config.yaml"), "-o", str(b)]) == 0
    assert (a / "diagnostics.csv").read_bytes() == (b / "diagnostics.csv").read_bytes()
    assert load_config(a / "effective_config.yaml")["seed"] == 4


def test_gradcheck_run(tmp_path, capsys):
    cfg = {"experiment": "gradcheck", "T": 0.2, "solver": {"dt": 0.01},
           "grid": {"nx": 16, "ny": 9},
           "initial": {"kind": "random", "amplitude": 0.3, "modes": 2},
           "control": {"beta3": 1.0, "beta5": 1.0, "beta7": 0.1,
                       "targets": {"source": "constant", "value": 0.0}, "scheme": "backward_euler"},
           "checks": {"directions": 3}}
    assert run(write_cfg(tmp_path / "c.yaml", cfg), tmp_path / "o") == 0
    out = capsys.readouterr().out
    assert out.count("relative error") == 3 and "PASS  gradient" in out


def test_tausweep_run(tmp_path, capsys):
    cfg = dict(SMALL, experiment="tausweep", grid={"nx": 16, "ny": 9}, solver={"dt": 0.01},
               initial={"amplitude": 0.3})
    assert run(write_cfg(tmp_path / "c.yaml", cfg), tmp_path / "o") == 0
    assert "PASS  monotone" in capsys.readouterr().out
    with open(tmp_path / "o" / "tausweep.csv") as fh:
        assert len(list(csv.reader(fh))) == 5


def test_optimize_with_dump_targets(tmp_path):
    g = build_channel_grid(2.0, 1.0, 8, 5)
    dump_field(FieldPair.constant(0.1, g), tmp_path / "target.bin", g)
    cfg = dict(SMALL, experiment="optimize", T=0.2,
               initial={"kind": "constant", "mean": 0.1},
               control={"targets": {"source": "dump", "path": str(tmp_path / "target.bin")},
                        "probes": 5})
    out = tmp_path / "o"
    assert run(write_cfg(tmp_path / "c.yaml", cfg), out) == 0
    assert (out / "iterations.csv").exists() and (out / "u_opt.npy").exists()


def test_missing_dump_path_is_error(tmp_path):
    cfg = dict(SMALL, experiment="simulate", initial={"kind": "dump"})
    assert run(write_cfg(tmp_path / "c.yaml", cfg), tmp_path / "o") == 2
