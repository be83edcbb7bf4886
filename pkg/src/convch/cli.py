"""Command-line driver: YAML config in, CSV diagnostics / binary field dumps /
JSON summary out.

Exit status: 0 if every configured check passes, 1 if a check fails, 2 on
configuration or solver errors.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import struct
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .adjoint import SCHEMES, Targets, assemble_adjoint_data, solve_adjoint
from .control import (ControlBox, CostSpec, as_schedule, cost, gradient, inner, optimize,
                      random_admissible)
from .grid import FieldPair, Grid, Velocity, build_channel_grid, velocity_from_stream
from .potentials import FAMILIES, make_spec
from .state_solver import SolverParams, Trajectory, simulate

log = logging.getLogger("convch")

EXPERIMENTS = ("simulate", "longtime", "tausweep", "optimize", "gradcheck")


class ConfigError(ValueError):
    pass


# -- binary field dumps -------------------------------------------------------

MAGIC = b"CCHFIELD"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_META = struct.Struct("<IIIddd")
KIND_BULK, KIND_PAIR = 0, 1


def dump_field(field, path, g: Grid, t: float = 0.0) -> None:
    """Write a bulk array (ny, nx) or a FieldPair in the little-endian dump format."""
    if isinstance(field, FieldPair):
        kind = KIND_PAIR
        bulk = np.asarray(field.bulk, dtype="<f8")
        extra = np.asarray(field.bdry, dtype="<f8")
    else:
        kind = KIND_BULK
        bulk = np.asarray(field, dtype="<f8")
        extra = None
    if bulk.shape != g.shape:
        raise ValueError(f"field has shape {bulk.shape}, grid expects {g.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0))
        fh.write(_META.pack(kind, g.nx, g.ny, g.Lx, g.Ly, float(t)))
        fh.write(np.ascontiguousarray(bulk).tobytes())
        if extra is not None:
            fh.write(np.ascontiguousarray(extra.reshape(2, g.nx)).tobytes())


def read_field(path):
    """Read a dump; returns (field, meta) with field an array or FieldPair."""
    raw = Path(path).read_bytes()
    head = _HEADER.size + _META.size
    if len(raw) < head:
        raise ValueError(f"truncated field dump {path}: expected at least {head} bytes, got {len(raw)}")
    magic, version, _ = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path} is not a field dump (bad magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"unsupported dump version {version}")
    kind, nx, ny, Lx, Ly, t = _META.unpack_from(raw, _HEADER.size)
    if kind not in (KIND_BULK, KIND_PAIR):
        raise ValueError(f"unknown field kind {kind}")
    nvals = nx * ny + (2 * nx if kind == KIND_PAIR else 0)
    expected = head + 8 * nvals
    if len(raw) != expected:
        raise ValueError(f"field dump {path} has wrong length: expected {expected} bytes, got {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=head).astype(float)
    bulk = vals[:nx * ny].reshape(ny, nx)
    meta = {"kind": kind, "nx": nx, "ny": ny, "Lx": Lx, "Ly": Ly, "t": t}
    if kind == KIND_PAIR:
        return FieldPair(bulk, vals[nx * ny:].reshape(2, nx)), meta
    return bulk, meta


# -- configuration --------------------------------------------------------------

DEFAULTS = {
    "experiment": "simulate",
    "seed": 0,
    "output_dir": "run",
    "T": 1.0,
    "grid": {"Lx": 2 * math.pi, "Ly": 1.0, "nx": 32, "ny": 17},
    "potential": {"family": "regular", "surface_family": None, "c1": 2.0, "c2": 1.0,
                  "eps": 1e-3, "eta": 1.0, "Ccc": 0.0},
    "solver": {"tauO": 0.0, "tauG": 0.0, "dt": None, "newton_tol": 1e-10, "newton_max": 30,
               "linear_tol": 1e-12},
    "initial": {"kind": "random", "mean": 0.1, "amplitude": 0.1, "modes": 3, "path": None},
    "velocity": {"kind": "stream", "amplitude": 1.0, "decay": 1.0},
    "control": {"beta3": 1.0, "beta4": 0.0, "beta5": 1.0, "beta6": 0.0, "beta7": 1e-3,
                "targets": {"source": "reference", "value": 0.0, "amplitude": 0.8, "path": None},
                "Ubar": 2.0, "R0": None, "projection_iters": 5, "mode": "pure",
                "max_iter": 200, "fp_tol": 1e-6, "vi_tol": 1e-6, "rel_tol": 1e-8, "probes": 100,
                "taus": [0.2, 0.1, 0.05, 0.025, 0.0], "scheme": "exact"},
    "checks": {"mass_tol": 1e-10, "energy_tol": 1e-12, "omega_tol": 1e-4, "residual_tol": 1e-3,
               "gradcheck_tol": 1e-2, "directions": 5, "fd_step": 1e-4},
    "output": {"dump_every": 0, "store_every": 1},
}

_CHOICES = {
    ("experiment",): EXPERIMENTS,
    ("potential", "family"): FAMILIES,
    ("potential", "surface_family"): FAMILIES + (None,),
    ("initial", "kind"): ("constant", "random", "dump"),
    ("velocity", "kind"): ("zero", "stream", "decaying"),
    ("control", "mode"): ("pure", "tau_sweep"),
    ("control", "scheme"): SCHEMES,
    ("control", "targets", "source"): ("constant", "reference", "dump"),
}


def _merge(defaults: dict, given: dict, path=()) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        where = ".".join(path + (str(key),))
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{where}' must be a mapping")
            out[key] = _merge(defaults[key], val, path + (key,))
        else:
            out[key] = val
    return out


def _check_choices(cfg: dict) -> None:
    for path, allowed in _CHOICES.items():
        node = cfg
        for k in path:
            node = node[k]
        if node not in allowed:
            raise ConfigError(f"config key '{'.'.join(path)}' must be one of {allowed}, got {node!r}")


def load_config(source) -> dict:
    """Parse YAML (path or mapping), fill defaults, reject unknown keys."""
    if isinstance(source, dict):
        given = source
    else:
        with open(source) as fh:
            given = yaml.safe_load(fh) or {}
    if not isinstance(given, dict):
        raise ConfigError("config root must be a mapping")
    cfg = _merge(DEFAULTS, given)
    _check_choices(cfg)
    build(cfg)   # re-validate numeric constraints through the constructors
    return cfg


def build(cfg: dict):
    """Instantiate grid, potentials and solver parameters; errors name the key."""
    def guarded(key, fn):
        try:
            return fn()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid '{key}': {exc}") from exc

    gc, pc, sc = cfg["grid"], cfg["potential"], cfg["solver"]
    g = guarded("grid", lambda: build_channel_grid(gc["Lx"], gc["Ly"], gc["nx"], gc["ny"]))
    spec = guarded("potential", lambda: make_spec(pc["family"], pc["surface_family"], c1=pc["c1"],
                                                  c2=pc["c2"], eps=pc["eps"], eta=pc["eta"],
                                                  Ccc=pc["Ccc"]))
    p = guarded("solver", lambda: SolverParams(**sc))
    if not (isinstance(cfg["T"], (int, float)) and cfg["T"] >= 0):
        raise ConfigError(f"invalid 'T': must be a nonnegative number, got {cfg['T']!r}")
    return g, spec, p


# -- data construction ----------------------------------------------------------

def initial_datum(cfg: dict, g: Grid) -> FieldPair:
    ic = cfg["initial"]
    if ic["kind"] == "constant":
        return FieldPair.constant(ic["mean"], g)
    if ic["kind"] == "dump":
        if not ic["path"]:
            raise ConfigError("'initial.path' is required for kind 'dump'")
        f, _ = read_field(ic["path"])
        return f if isinstance(f, FieldPair) else FieldPair.from_bulk(f)
    rng = np.random.default_rng(cfg["seed"])
    X, Y = g.mesh
    r = np.zeros(g.shape)
    for a in range(ic["modes"] + 1):
        for b in range(ic["modes"]):
            c = rng.standard_normal(2)
            kx = 2 * np.pi * a * X / g.Lx
            r += (c[0] * np.cos(kx) + c[1] * np.sin(kx)) * np.cos(b * np.pi * Y / g.Ly)
    r -= analysis.generalized_mean(FieldPair.from_bulk(r), g)
    scale = np.max(np.abs(r)) or 1.0
    return FieldPair.from_bulk(ic["mean"] + ic["amplitude"] * r / scale)


def base_velocity(cfg: dict, g: Grid, amplitude: float | None = None) -> Velocity:
    a = cfg["velocity"]["amplitude"] if amplitude is None else amplitude
    X, Y = g.mesh
    psi = a * np.sin(np.pi * Y / g.Ly) ** 2 * np.cos(2 * np.pi * X / g.Lx)
    return velocity_from_stream(psi, g)


def velocity_schedule(cfg: dict, g: Grid):
    vc = cfg["velocity"]
    if vc["kind"] == "zero":
        return None
    u0 = base_velocity(cfg, g)
    if vc["kind"] == "stream":
        return u0
    return analysis.decaying_schedule(u0, vc["decay"])


# -- outputs ------------------------------------------------------------------

CSV_COLUMNS = ("t", "mass", "energy_noMu", "energy_ftot", "grad_mu_norm", "dual_dt_norm", "mu_std")


def write_diagnostics(traj: Trajectory, path) -> None:
    d = traj.diagnostics
    n = len(d["mass"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for k in range(n):
            w.writerow([repr(float(k * traj.dt)), repr(float(d["mass"][k])), repr(float(d["energy"][k])),
                        repr(float(d["energy_ftot"][k])), repr(float(d["grad_mu_norm"][k])),
                        repr(float(d["dual_dt_norm"][k])), repr(float(d["mu_std"][k]))])


def _dump_state(traj: Trajectory, k: int, out: Path, tag: str) -> None:
    s = traj.state(k)
    dump_field(s.rho, out / f"rho_{tag}.bin", traj.grid, s.t)
    dump_field(s.mu, out / f"mu_{tag}.bin", traj.grid, s.t)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# -- experiments ----------------------------------------------------------------

def _simulate(cfg, g, spec, p, out):
    rho0 = initial_datum(cfg, g)
    u = velocity_schedule(cfg, g)
    traj = simulate(rho0, u, p, spec, g, cfg["T"], store_every=cfg["output"]["store_every"])
    write_diagnostics(traj, out / "diagnostics.csv")
    _dump_state(traj, 0, out, "initial")
    _dump_state(traj, -1, out, "final")
    every = cfg["output"]["dump_every"]
    if every:
        for k in range(every, len(traj.times), every):
            _dump_state(traj, k, out, f"{k:06d}")
    ck = cfg["checks"]
    m0 = traj.m0
    drift = float(np.max(np.abs(traj.diagnostics["mass"] - m0)))
    checks = {"mass": drift <= ck["mass_tol"] * (1 + abs(m0))}
    metrics = {"m0": m0, "mass_drift": drift}
    if u is None:
        e = traj.diagnostics["energy"]
        rise = float(np.max(np.diff(e), initial=0.0))
        checks["energy_nonincreasing"] = rise <= ck["energy_tol"] * abs(e[0])
        metrics["max_energy_rise"] = rise
    return checks, metrics


def _longtime(cfg, g, spec, p, out):
    rho0 = initial_datum(cfg, g)
    u0 = base_velocity(cfg, g) if cfg["velocity"]["kind"] != "zero" else None
    ck = cfg["checks"]
    rep = analysis.run_longtime(rho0, u0, cfg["velocity"]["decay"], p, spec, g, cfg["T"],
                                ck["omega_tol"], residual_tol=ck["residual_tol"])
    write_diagnostics(rep.trajectory, out / "diagnostics.csv")
    _dump_state(rep.trajectory, -1, out, "final")
    metrics = {"grad_mu_norm": rep.grad_mu_norm, "dual_dt_norm": rep.dual_dt_norm,
               "mu_std": rep.mu_std, "r_bulk": rep.stationary_residuals[0],
               "r_surf": rep.stationary_residuals[1], "mu_mean_final": rep.mu_mean_history[-1]}
    return {"omega_limit": rep.converged}, metrics


def _tausweep(cfg, g, spec, p, out):
    rho0 = initial_datum(cfg, g)
    u = velocity_schedule(cfg, g)
    taus = [t for t in cfg["control"]["taus"] if t > 0]
    sw = analysis.viscosity_sweep(rho0, u, p, spec, g, cfg["T"], taus)
    print(f"{'tau':>8} {'|rho_tau - rho_0|_C0':>22} {'max_t |rho_tau|_V':>18}")
    for t, gap, vn in zip(sw.taus, sw.sup_gaps, sw.v_norms):
        print(f"{t:8.4f} {gap:22.6e} {vn:18.6e}")
    with open(out / "tausweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("tau", "sup_gap", "v_norm"))
        for row in zip(sw.taus, sw.sup_gaps, sw.v_norms):
            w.writerow([repr(float(x)) for x in row])
    allv = np.append(sw.v_norms, sw.reference_v_norm)
    checks = {"monotone": sw.monotone, "uniform_bound": bool(allv.max() < 2 * allv.min())}
    return checks, {"taus": sw.taus, "sup_gaps": sw.sup_gaps.tolist(), "v_norms": sw.v_norms.tolist()}


def _cost_setup(cfg, g, spec, p, rho0):
    cc = cfg["control"]
    tc = cc["targets"]
    if tc["source"] == "constant":
        targets = Targets(tc["value"], tc["value"], tc["value"], tc["value"])
    elif tc["source"] == "dump":
        if not tc["path"]:
            raise ConfigError("'control.targets.path' is required for source 'dump'")
        f, _ = read_field(tc["path"])
        f = f if isinstance(f, FieldPair) else FieldPair.from_bulk(f)
        targets = Targets(f.bulk, f.bdry, f.bulk, f.bdry)
    else:
        X, Y = g.mesh
        uref = velocity_from_stream(tc["amplitude"] * Y
                                    + 0.25 * tc["amplitude"] * np.sin(np.pi * Y / g.Ly) ** 2
                                    * np.cos(2 * np.pi * X / g.Lx), g)
        ref = simulate(rho0, uref, p, spec, g, cfg["T"])
        nt = len(ref.times)
        rho = ref.rho.reshape((nt,) + g.shape)
        targets = Targets(rho, rho[:, [0, -1]], rho[-1], rho[-1][[0, -1]])
    try:
        cs = CostSpec(cc["beta3"], cc["beta4"], cc["beta5"], cc["beta6"], cc["beta7"], targets)
        box = ControlBox(cc["Ubar"], math.inf if cc["R0"] is None else cc["R0"], cc["projection_iters"])
    except ValueError as exc:
        raise ConfigError(f"invalid 'control': {exc}") from exc
    return cs, box


def _optimize(cfg, g, spec, p, out):
    cc = cfg["control"]
    rho0 = initial_datum(cfg, g)
    cs, box = _cost_setup(cfg, g, spec, p, rho0)
    rows = []
    res = optimize(rho0, cs, box, p, spec, g, cfg["T"], cc["mode"], max_iter=cc["max_iter"],
                   fp_tol=cc["fp_tol"], vi_tol=cc["vi_tol"], rel_tol=cc["rel_tol"],
                   probes=cc["probes"], taus=tuple(cc["taus"]), seed=cfg["seed"],
                   scheme=cc["scheme"], callback=rows.append)
    with open(out / "iterations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iter", "J", "grad_norm", "step", "vi_residual"))
        for r in rows:
            w.writerow([r["iter"], repr(r["J"]), repr(r["grad_norm"]), repr(r["step"]),
                        repr(r["vi_residual"])])
    if cc["mode"] == "pure":
        write_diagnostics(res.trajectory, out / "diagnostics.csv")
        _dump_state(res.trajectory, -1, out, "final")
        np.save(out / "u_opt.npy", res.u_opt)
        checks = {"converged": res.converged,
                  "monotone_descent": bool(np.all(np.diff(res.J_history) <= 0))}
        metrics = {"J_history": res.J_history, "vi_residual": res.vi_residual,
                   "vi_scale": res.vi_scale, "fp_residual": res.fp_residual,
                   "iterations": res.iterations}
        return checks, metrics
    gaps = np.array(res.control_gaps)
    jg = np.array(res.cost_gaps)
    print(f"{'tau':>8} {'|u_tau - u_0|':>16} {'|J~_tau - J_0|':>16}")
    for t, a, b in zip(res.taus, gaps, jg):
        print(f"{t:8.4f} {a:16.6e} {b:16.6e}")
    checks = {"controls_nonincreasing": bool(np.all(np.diff(gaps) <= 0)),
              "cost_gap": bool(jg[-1] <= 0.1 * jg[0]),
              "all_converged": bool(res.pure.converged and all(r.converged for r in res.results))}
    metrics = {"taus": res.taus, "control_gaps": gaps.tolist(), "cost_gaps": jg.tolist(),
               "state_gaps": res.state_gaps}
    return checks, metrics


def gradient_check(rho0, cs: CostSpec, p, spec, g, T, ndir: int = 5, h: float = 1e-4,
                   scheme: str = "backward_euler", seed: int = 0, U=None):
    """Relative errors between adjoint and central-difference directional derivatives.

    Base control and directions are constant in time, so refinements of dt
    probe the same continuous perturbations.
    """
    rng = np.random.default_rng(seed)
    box = ControlBox(Ubar=1.0)
    N = int(math.ceil(T / p.step_size(g) - 1e-9))
    if U is None:
        U = np.repeat(random_admissible(1, box, g, rng), N, axis=0)
    dirs = [np.repeat(random_admissible(1, box, g, rng), N, axis=0) for _ in range(ndir)]

    def J(V):
        return cost(simulate(rho0, V, p, spec, g, T, validate=False), V, cs, g)

    traj = simulate(rho0, U, p, spec, g, T)
    data = assemble_adjoint_data(traj, cs.targets, cs.betas[:4], spec)
    adj = solve_adjoint(traj, U, data, None, p, g, scheme=scheme)
    G = gradient(traj, adj, U, cs.beta7)
    errs = []
    for d in dirs:
        fd = (J(U + h * d) - J(U - h * d)) / (2 * h)
        errs.append(abs(inner(G, d, g, traj.dt) - fd) / max(abs(fd), 1e-300))
    return np.array(errs)


def _gradcheck(cfg, g, spec, p, out):
    rho0 = initial_datum(cfg, g)
    cs, _ = _cost_setup(cfg, g, spec, p, rho0)
    ck = cfg["checks"]
    errs = gradient_check(rho0, cs, p, spec, g, cfg["T"], ck["directions"], ck["fd_step"],
                          scheme=cfg["control"]["scheme"], seed=cfg["seed"])
    for i, e in enumerate(errs):
        print(f"direction {i}: adjoint vs FD relative error {e:.3e}")
    return {"gradient": bool(np.max(errs) <= ck["gradcheck_tol"])}, {"relative_errors": errs.tolist()}


_RUNNERS = {"simulate": _simulate, "longtime": _longtime, "tausweep": _tausweep,
            "optimize": _optimize, "gradcheck": _gradcheck}


def run(config_path, output_dir=None) -> int:
    try:
        cfg = load_config(config_path)
        if output_dir is not None:
            cfg["output_dir"] = str(output_dir)
        g, spec, p = build(cfg)
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "effective_config.yaml", "w") as fh:
            yaml.safe_dump(cfg, fh, sort_keys=True)
        t0 = time.perf_counter()
        checks, metrics = _RUNNERS[cfg["experiment"]](cfg, g, spec, p, out)
        elapsed = time.perf_counter() - t0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    passed = all(checks.values())
    summary = {"experiment": cfg["experiment"], "passed": passed, "checks": checks,
               "metrics": metrics, "elapsed_s": elapsed}
    with open(out / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if passed else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="convch", description=__doc__.splitlines()[0])
    ap.add_argument("config", help="YAML run configuration")
    ap.add_argument("-o", "--output-dir", help="override output_dir from the config")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.config, args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
