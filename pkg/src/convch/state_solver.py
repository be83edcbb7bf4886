"""Backward-Euler time stepping for the convective Cahn-Hilliard system with
dynamic boundary conditions.

One step solves, for the unknown pair (rho, mu) on the shared dof vector,

    M (rho - rho_n)/dt + C(u_n) rho_n + K mu                        = 0
    T (rho - rho_n)/dt + K rho + F(rho) + G(rho_n) - M mu            = 0

with M the lumped bulk+surface mass, K the coupled stiffness, T the
viscosity-weighted mass, F the quadrature of the Yosida-regularized convex
parts and G the quadrature of the concave perturbations.  Convection and
the concave part are explicit, the convex part is implicit and handled by
Newton's method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import analysis
from .grid import FieldPair, Grid, Velocity, convection_matrix, divergence, laplacian_bulk
from .potentials import PotentialSpec, check_mean_admissible, eval_potential


class ConvergenceError(RuntimeError):
    """Newton iteration or linear solve failed."""

    def __init__(self, msg: str, residual: float = math.nan, step_index: int | None = None):
        super().__init__(msg)
        self.residual = residual
        self.step_index = step_index


@dataclass
class SolverParams:
    tauO: float = 0.0
    tauG: float = 0.0
    dt: float | None = None
    newton_tol: float = 1e-10
    newton_max: int = 30
    linear_tol: float = 1e-12

    def __post_init__(self):
        if self.tauO < 0 or self.tauG < 0:
            raise ValueError("viscosity coefficients must be nonnegative")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("time step must be positive")
        if self.newton_max < 1:
            raise ValueError("newton_max must be at least 1")

    def step_size(self, g: Grid) -> float:
        if self.dt is not None:
            return self.dt
        return 1e-3 * g.Lx * g.Ly / (g.nx * g.ny)


@dataclass
class State:
    rho: FieldPair
    mu: FieldPair
    t: float = 0.0

    @classmethod
    def from_flat(cls, rho: np.ndarray, mu: np.ndarray, g: Grid, t: float = 0.0) -> "State":
        return cls(FieldPair.from_flat(rho, g), FieldPair.from_flat(mu, g), t)


@dataclass
class Trajectory:
    """Stored states as flat arrays of shape (nstored, n).

    ``stride`` is the number of time steps between stored states.  Per-step
    diagnostics cover every step regardless of the stride.
    """

    grid: Grid
    spec: PotentialSpec
    params: SolverParams
    dt: float
    times: np.ndarray
    rho: np.ndarray
    mu: np.ndarray
    m0: float
    stride: int = 1
    controls: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def state(self, k: int) -> State:
        return State.from_flat(self.rho[k], self.mu[k], self.grid, float(self.times[k]))

    @property
    def states(self) -> list[State]:
        return [self.state(k) for k in range(len(self.times))]

    def __len__(self) -> int:
        return len(self.times)


# -- assembly ---------------------------------------------------------------

def _nonlinear(rho: np.ndarray, spec: PotentialSpec, g: Grid, order: int) -> np.ndarray:
    """Quadrature of the regularized convex part (or its derivative) per dof."""
    from .potentials import yosida, yosida_derivative
    wall = g.wall_nodes.ravel()
    fun = yosida if order == 0 else yosida_derivative
    out = g.mass_bulk * fun(spec.bulk, spec.level("bulk"), rho)
    out[wall] += g.bdry_weights.ravel() * fun(spec.surface, spec.level("surface"), rho[wall])
    return out


def _concave(rho: np.ndarray, spec: PotentialSpec, g: Grid) -> np.ndarray:
    from .potentials import pi
    wall = g.wall_nodes.ravel()
    out = g.mass_bulk * pi(spec.bulk, rho)
    out[wall] += g.bdry_weights.ravel() * pi(spec.surface, rho[wall])
    return out


def chemical_potential(rho: np.ndarray, spec: PotentialSpec, g: Grid) -> np.ndarray:
    """mu with  M mu = K rho + F(rho) + G(rho)  (the lumped L2 Riesz map of E'(rho))."""
    rho = np.ravel(rho)
    return (g.stiffness @ rho + _nonlinear(rho, spec, g, 0) + _concave(rho, spec, g)) / g.mass


def viscous_mass(p: SolverParams, g: Grid) -> np.ndarray:
    return p.tauO * g.mass_bulk + p.tauG * g.mass_bdry


def _velocity_arrays(u) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(u, Velocity):
        return u.ux, u.uy
    u = np.asarray(u, dtype=float)
    return u[0], u[1]


def residuals(rho_prev, rho, mu, u, p: SolverParams, spec: PotentialSpec, g: Grid,
              dt: float | None = None, conv: sp.spmatrix | None = None):
    """Residual vectors (R1, R2) of one backward-Euler step."""
    dt = dt or p.step_size(g)
    rho_prev, rho, mu = np.ravel(rho_prev), np.ravel(rho), np.ravel(mu)
    if conv is None:
        conv = convection_matrix(*_velocity_arrays(u), g) if u is not None else None
    d = (rho - rho_prev) / dt
    r1 = g.mass * d + g.stiffness @ mu
    if conv is not None:
        r1 += conv @ rho_prev
    r2 = (viscous_mass(p, g) * d + g.stiffness @ rho + _nonlinear(rho, spec, g, 0)
          + _concave(rho_prev, spec, g) - g.mass * mu)
    return r1, r2


def weak_residual(s_prev: State, s_next: State, u, p: SolverParams, spec: PotentialSpec,
                  g: Grid) -> tuple[float, float]:
    """Dual-norm residuals of the two weak equations between consecutive states.

    Each residual is a functional on the discrete space; its size is measured
    in the norm dual to  |grad v|^2 + |grad_G v_G|^2 + mean(v)^2.
    """
    dt = s_next.t - s_prev.t
    if not dt > 0:
        dt = p.step_size(g)
    r1, r2 = residuals(s_prev.rho.flat(), s_next.rho.flat(), s_next.mu.flat(), u, p, spec, g, dt)
    return analysis.full_dual_norm(r1, g), analysis.full_dual_norm(r2, g)


# -- validation ---------------------------------------------------------------

@dataclass
class ValidationReport:
    passed: bool
    checks: dict
    eps_norms: np.ndarray
    messages: list = field(default_factory=list)


def _pair_norm(a: np.ndarray, b: np.ndarray, g: Grid) -> float:
    """Discrete V-norm of a (bulk, boundary) pair with a trace-mismatch penalty."""
    a = np.asarray(a).reshape(g.shape)
    hx, hy = g.hx, g.hy
    w = g.bulk_weights
    gx = (np.roll(a, -1, axis=1) - a) / hx
    gy = np.diff(a, axis=0) / hy
    bulk = float(np.sum(0.5 * (w + np.roll(w, -1, axis=1)) * gx**2) + np.sum(hx * hy * gy**2))
    gb = (np.roll(b, -1, axis=1) - b) / hx
    surf = float(np.sum(hx * gb**2))
    mean = analysis.generalized_mean(FieldPair(a, b), g)
    mismatch = float(np.sum(g.bdry_weights * (b - g.trace(a)) ** 2)) / hy
    return math.sqrt(bulk + surf + mean**2 + mismatch)


def compatibility_pair(rho0: FieldPair, spec: PotentialSpec, g: Grid, eps: float):
    """(-Lap rho0 + f_eps'(rho0),  d_nu rho0 - Lap_G rho0 + f_G,eps'(rho0))."""
    from dataclasses import replace
    from .grid import laplace_beltrami, normal_derivative
    s = replace(spec, eps=eps)
    r = np.asarray(rho0.bulk, dtype=float)
    a = -laplacian_bulk(r, g) + eval_potential(s, "bulk", r, 1)
    b = (normal_derivative(r, g) - laplace_beltrami(rho0.bdry, g)
         + eval_potential(s, "surface", rho0.bdry, 1))
    return a, b


def _control_samples(u_sched, g: Grid, nsteps: int, dt: float):
    if u_sched is None:
        return
    if isinstance(u_sched, Velocity):
        yield u_sched
        return
    if callable(u_sched):
        for k in range(max(nsteps, 1)):
            yield u_sched(k * dt)
        return
    for u in u_sched:
        yield u if isinstance(u, Velocity) else Velocity(*np.asarray(u, dtype=float))


def validate_data(rho0: FieldPair, u_sched, spec: PotentialSpec, g: Grid, *,
                  nsteps: int = 1, dt: float = 1.0, n_eps: int = 5,
                  growth_tol: float = 0.25, trace_tol: float = 1e-12,
                  div_tol: float = 1e-9) -> ValidationReport:
    """Check admissibility of initial data and controls; never raises."""
    checks, msgs = {}, []
    checks["trace"] = rho0.is_trace_compatible(trace_tol)
    if not checks["trace"]:
        msgs.append(f"initial datum is not trace compatible (mismatch {rho0.trace_mismatch():.2e})")
    m0 = analysis.generalized_mean(rho0, g)
    checks["mean_interior"] = check_mean_admissible(m0, spec.surface)
    if not checks["mean_interior"]:
        msgs.append(f"mean {m0:.6g} is not interior to the surface domain")

    # bounded in eps <=> the per-decade increments of the pair contract
    eps_seq = spec.eps * 10.0 ** -np.arange(n_eps)
    norms, incs = [], []
    prev = None
    with np.errstate(all="ignore"):
        for e in eps_seq:
            a, b = compatibility_pair(rho0, spec, g, e)
            norms.append(_pair_norm(a, b, g))
            if prev is not None:
                incs.append(_pair_norm(a - prev[0], b - prev[1], g))
            prev = (a, b)
    norms = np.array(norms)
    incs = np.array(incs)
    finite = bool(np.all(np.isfinite(norms)) and np.all(np.isfinite(incs)))
    checks["eps_bounded"] = finite and (incs.size == 0 or
                                        incs[-1] <= growth_tol * incs[0] + 1e-12 * (1.0 + norms[0]))
    if not checks["eps_bounded"]:
        msgs.append(f"compatibility pair does not settle as eps decreases: increments {incs[0]:.3e} -> "
                    f"{incs[-1]:.3e} (norms {norms[0]:.3e} -> {norms[-1]:.3e})")

    div_ok = tang_ok = True
    for k, u in enumerate(_control_samples(u_sched, g, nsteps, dt)):
        scale = 1.0 + float(np.max(np.abs(u.ux)) + np.max(np.abs(u.uy))) / min(g.hx, g.hy)
        if np.max(np.abs(divergence(u, g))) > div_tol * scale:
            div_ok = False
            msgs.append(f"control sample {k} is not divergence free")
            break
        if np.max(np.abs(u.uy[[0, -1]])) > div_tol * (1.0 + np.max(np.abs(u.uy))):
            tang_ok = False
            msgs.append(f"control sample {k} is not tangent to the walls")
            break
    checks["divergence_free"] = div_ok
    checks["wall_tangent"] = tang_ok
    return ValidationReport(all(checks.values()), checks, norms, msgs)


# -- time stepping ------------------------------------------------------------

class _JacobianCache:
    """LU of the Schur complement, reused while Newton still contracts fast."""

    def __init__(self):
        self.lu = None
        self.a = None
        self.key = None


def _newton(rho_prev, mu_guess, conv, p: SolverParams, spec: PotentialSpec, g: Grid, dt: float,
            cache: _JacobianCache | None = None):
    cache = cache or _JacobianCache()
    m = g.mass
    k = g.stiffness
    tm = viscous_mass(p, g)
    explicit = _concave(rho_prev, spec, g)
    explicit_flux = conv @ rho_prev if conv is not None else 0.0
    rho = rho_prev.copy()
    mu = mu_guess.copy()
    kminv = k @ sp.diags(1.0 / m)
    if cache.key != (dt, p.tauO, p.tauG):
        cache.lu = None
    cache.key = (dt, p.tauO, p.tauG)

    def resid(rho, mu):
        d = (rho - rho_prev) / dt
        r1 = m * d + k @ mu + explicit_flux
        r2 = tm * d + k @ rho + _nonlinear(rho, spec, g, 0) + explicit - m * mu
        return r1, r2

    def size(r1, r2):
        return max(analysis.full_dual_norm(r1, g), analysis.full_dual_norm(r2, g))

    def factor(rho):
        a = sp.diags(tm / dt + _nonlinear(rho, spec, g, 1)) + k
        # Schur complement in rho after eliminating the diagonal mu-block
        s = (sp.diags(m / dt) + kminv @ a).tocsc()
        try:
            cache.lu = spla.splu(s, permc_spec="MMD_ATA")
        except RuntimeError as exc:
            raise ConvergenceError(f"linear solve failed: {exc}", res) from exc
        cache.a = a

    r1, r2 = resid(rho, mu)
    res = size(r1, r2)
    fresh = False
    for it in range(4 * p.newton_max + 1):
        if res <= p.newton_tol:
            return rho, mu, res, it
        if it == 4 * p.newton_max:
            break
        if cache.lu is None:
            factor(rho)
            fresh = True
        drho = cache.lu.solve(-r1 - kminv @ r2)
        if not np.all(np.isfinite(drho)):
            raise ConvergenceError("linear solve produced non-finite values", res)
        dmu = (cache.a @ drho + r2) / m
        lam = 1.0
        while True:
            rn, mn = rho + lam * drho, mu + lam * dmu
            q1, q2 = resid(rn, mn)
            new = size(q1, q2)
            if new < res or lam < 1e-4 or not fresh:
                break
            lam *= 0.5
        if not fresh and not new < 0.2 * res:
            # stale Jacobian contracts too slowly: refactor and retry
            cache.lu = None
            continue
        small = np.max(np.abs(lam * drho)) <= 1e-14 * (1.0 + np.max(np.abs(rho)))
        stalled = new >= res
        rho, mu, r1, r2 = rn, mn, q1, q2
        res = new
        if small and (stalled or res <= 1e3 * p.newton_tol):
            # update below round-off: accept the roundoff-limited residual
            return rho, mu, res, it + 1
        if stalled and lam < 1e-4:
            break
        fresh = False
    raise ConvergenceError(f"Newton did not converge in {p.newton_max} iterations "
                           f"(last residual {res:.3e})", res)


def step(s: State, u, p: SolverParams, spec: PotentialSpec, g: Grid,
         dt: float | None = None) -> State:
    """Advance one backward-Euler step with convection by ``u`` (or None)."""
    dt = dt or p.step_size(g)
    conv = convection_matrix(*_velocity_arrays(u), g) if u is not None else None
    rho, mu, _, _ = _newton(s.rho.flat(), s.mu.flat(), conv, p, spec, g, dt)
    return State.from_flat(rho, mu, g, s.t + dt)


def _resolve_schedule(u_sched, nsteps: int, dt: float, g: Grid) -> Callable[[int], Velocity | None]:
    if u_sched is None:
        return lambda k: None
    if isinstance(u_sched, Velocity):
        return lambda k: u_sched
    if callable(u_sched):
        return lambda k: u_sched(k * dt)
    if isinstance(u_sched, np.ndarray):
        if u_sched.ndim != 4 or u_sched.shape[1:] != (2,) + g.shape:
            raise ValueError(f"control array has shape {u_sched.shape}, expected (N, 2, {g.ny}, {g.nx})")
    seq: Sequence = u_sched
    if len(seq) < nsteps:
        raise ValueError(f"control schedule has {len(seq)} entries, need {nsteps}")
    return lambda k: seq[k]


def initial_state(rho0: FieldPair, spec: PotentialSpec, g: Grid) -> State:
    rho = rho0.flat()
    return State.from_flat(rho, chemical_potential(rho, spec, g), g, 0.0)


def simulate(rho0: FieldPair, u_sched, p: SolverParams, spec: PotentialSpec, g: Grid, T: float, *,
             validate: bool = True, store_every: int = 1, store_controls: bool = False,
             callback=None) -> Trajectory:
    """Integrate from ``rho0`` to time T.

    ``u_sched`` may be None, a Velocity (steady), a callable t -> Velocity, a
    sequence of Velocity, or an array of shape (N, 2, ny, nx); step k uses
    the control at t_k.  ``callback(k, state)`` is invoked after each step.
    """
    dt = p.step_size(g)
    if T < 0:
        raise ValueError("final time must be nonnegative")
    nsteps = int(math.ceil(T / dt - 1e-9)) if T > 0 else 0
    if validate:
        rep = validate_data(rho0, u_sched, spec, g, nsteps=nsteps, dt=dt)
        if not rep.passed:
            raise ValueError("invalid data: " + "; ".join(rep.messages))
    ctrl = _resolve_schedule(u_sched, nsteps, dt, g)
    m0 = analysis.generalized_mean(rho0, g)

    s = initial_state(rho0, spec, g)
    rho_store, mu_store, t_store = [s.rho.flat()], [s.mu.flat()], [0.0]
    controls = [] if store_controls else None
    diag = {k: np.empty(nsteps + 1) for k in
            ("mass", "energy", "energy_ftot", "grad_mu_norm", "dual_dt_norm", "mu_std",
             "newton_iters")}
    m = analysis.StationarityMetrics(
        float(np.sqrt(max(analysis.gradient_energy(s.mu.flat(), g), 0.0))), 0.0,
        analysis.weighted_std(s.mu.flat(), g), 0.0, 0.0)
    _record(diag, 0, s.rho.flat(), s.mu.flat(), m, spec, g, 0)

    rho, mu = s.rho.flat(), s.mu.flat()
    cache = _JacobianCache()
    for k in range(nsteps):
        u = ctrl(k)
        if controls is not None:
            controls.append(np.zeros((2,) + g.shape) if u is None else np.stack(_velocity_arrays(u)))
        conv = convection_matrix(*_velocity_arrays(u), g) if u is not None else None
        try:
            rho_n, mu_n, _, its = _newton(rho, mu, conv, p, spec, g, dt, cache)
        except ConvergenceError as exc:
            exc.step_index = k
            raise ConvergenceError(f"step {k} (t={k * dt:.6g}): {exc}", exc.residual, k) from exc
        met = analysis._step_metrics(rho, rho_n, mu_n, dt, spec, g)
        rho, mu = rho_n, mu_n
        _record(diag, k + 1, rho, mu, met, spec, g, its)
        if (k + 1) % store_every == 0 or k + 1 == nsteps:
            rho_store.append(rho)
            mu_store.append(mu)
            t_store.append((k + 1) * dt)
        if callback is not None:
            callback(k + 1, State.from_flat(rho, mu, g, (k + 1) * dt))

    return Trajectory(g, spec, p, dt, np.array(t_store), np.array(rho_store), np.array(mu_store),
                      m0, store_every, None if controls is None else np.array(controls), diag)


def _record(diag, k, rho, mu, met, spec, g, its):
    diag["mass"][k] = analysis.generalized_mean(rho, g)
    diag["energy"][k] = analysis.lyapunov_energy(rho, spec, g)
    diag["energy_ftot"][k] = diag["energy"][k] - float(g.mass @ (mu * rho))
    diag["grad_mu_norm"][k] = met.grad_mu_norm
    diag["dual_dt_norm"][k] = met.dual_dt_norm
    diag["mu_std"][k] = met.mu_std
    diag["newton_iters"][k] = its
