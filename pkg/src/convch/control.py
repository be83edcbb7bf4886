"""Velocity control: cost functionals, the admissible set, projected gradient
optimization and first-order (variational inequality) certification.

Controls are piecewise constant in time: a schedule is an array of shape
(N, 2, ny, nx) whose slice n acts on the step t_n -> t_{n+1}.  Space-time
inner products use the bulk quadrature weights and the step size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import Targets, assemble_adjoint_data, solve_adjoint
from .grid import FieldPair, Grid, Velocity, leray_project, velocity_from_stream
from .potentials import PotentialSpec
from .state_solver import SolverParams, Trajectory, simulate

log = logging.getLogger(__name__)

DEFAULT_TAUS = (0.2, 0.1, 0.05, 0.025, 0.0)


class LineSearchError(RuntimeError):
    def __init__(self, msg: str, J: float, grad_norm: float):
        super().__init__(msg)
        self.J = J
        self.grad_norm = grad_norm


@dataclass
class ControlBox:
    Ubar: float | np.ndarray = 1.0
    R0: float = math.inf
    projection_iters: int = 5

    def __post_init__(self):
        if np.any(np.asarray(self.Ubar) < 0):
            raise ValueError("Ubar must be nonnegative")
        if not self.R0 > 0:
            raise ValueError("R0 must be positive")
        if self.projection_iters < 1:
            raise ValueError("projection_iters must be at least 1")


@dataclass
class CostSpec:
    beta3: float = 0.0
    beta4: float = 0.0
    beta5: float = 0.0
    beta6: float = 0.0
    beta7: float = 0.0
    targets: Targets = field(default_factory=Targets)

    def __post_init__(self):
        b = self.betas
        if any(x < 0 for x in b):
            raise ValueError("cost coefficients must be nonnegative")
        if not any(x > 0 for x in b):
            raise ValueError("cost coefficients must not all vanish")

    @property
    def betas(self) -> tuple[float, ...]:
        return (self.beta3, self.beta4, self.beta5, self.beta6, self.beta7)

    def scaled(self, a: float) -> "CostSpec":
        return replace(self, beta3=a * self.beta3, beta4=a * self.beta4, beta5=a * self.beta5,
                       beta6=a * self.beta6, beta7=a * self.beta7)


# -- space-time quadrature ----------------------------------------------------

def as_schedule(u, nsteps: int, g: Grid) -> np.ndarray:
    """Any accepted control description -> array (N, 2, ny, nx)."""
    if u is None:
        return np.zeros((nsteps, 2) + g.shape)
    if isinstance(u, Velocity):
        return np.broadcast_to(u.stacked(), (nsteps, 2) + g.shape).copy()
    arr = np.array([v.stacked() if isinstance(v, Velocity) else v for v in u], dtype=float)
    if arr.shape != (nsteps, 2) + g.shape:
        raise ValueError(f"control schedule has shape {arr.shape}, expected {(nsteps, 2) + g.shape}")
    return arr


def inner(a: np.ndarray, b: np.ndarray, g: Grid, dt: float) -> float:
    """L2(Q) inner product of two control schedules."""
    return float(dt * np.sum(g.bulk_weights * np.sum(a * b, axis=1)))


def norm(a: np.ndarray, g: Grid, dt: float) -> float:
    return math.sqrt(max(inner(a, a, g, dt), 0.0))


def _tracking(traj: Trajectory, cs: CostSpec, g: Grid) -> float:
    nt = len(traj.times)
    rho = traj.rho.reshape((nt,) + g.shape)
    tr = rho[:, [0, -1], :]
    t = cs.targets
    dq = rho[1:] - np.broadcast_to(_as_series(t.rhoQ, nt, g.shape), rho.shape)[1:]
    ds = tr[1:] - np.broadcast_to(_as_series(t.rhoSig, nt, (2, g.nx)), tr.shape)[1:]
    wb, wg = g.bulk_weights, g.bdry_weights
    J = traj.dt * (0.5 * cs.beta3 * np.sum(wb * dq**2) + 0.5 * cs.beta4 * np.sum(wg * ds**2))
    J += 0.5 * cs.beta5 * np.sum(wb * (rho[-1] - t.rhoOm) ** 2)
    J += 0.5 * cs.beta6 * np.sum(wg * (tr[-1] - t.rhoGam) ** 2)
    return float(J)


def _as_series(target, nt, shape):
    a = np.asarray(target, dtype=float)
    if a.ndim == len(shape) + 1 and a.shape[0] == nt:
        return a
    return np.broadcast_to(a, shape)


def cost(traj: Trajectory, u, cs: CostSpec, g: Grid | None = None) -> float:
    """Tracking terms (right-endpoint in time) plus beta7/2 ||u||^2."""
    g = g or traj.grid
    N = len(traj.times) - 1
    U = as_schedule(u, N, g)
    return _tracking(traj, cs, g) + 0.5 * cs.beta7 * inner(U, U, g, traj.dt)


def adapted_cost(traj: Trajectory, u, cs: CostSpec, ubar_ref, g: Grid | None = None) -> float:
    """cost + 1/2 ||u - ubar_ref||^2 over the space-time cylinder."""
    g = g or traj.grid
    N = len(traj.times) - 1
    d = as_schedule(u, N, g) - as_schedule(ubar_ref, N, g)
    return cost(traj, u, cs, g) + 0.5 * inner(d, d, g, traj.dt)


def gradient(traj: Trajectory, adj, u, beta7: float, ubar_ref=None) -> np.ndarray:
    """L2(Q) gradient  rho grad p + beta7 u  (+ u - ubar_ref in adapted mode)."""
    g = traj.grid
    N = len(traj.times) - 1
    U = as_schedule(u, N, g)
    P = adj.P[:N]
    rho = traj.rho[:N]
    gx = (g.dx @ P.T).T * rho
    gy = (g.dy @ P.T).T * rho
    out = np.stack([gx, gy], axis=1).reshape((N, 2) + g.shape) + beta7 * U
    if ubar_ref is not None:
        out += U - as_schedule(ubar_ref, N, g)
    return out


# -- admissible set -----------------------------------------------------------

def _clamp(ux, uy, ubar):
    mag = np.hypot(ux, uy)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(mag > ubar, ubar / mag, 1.0)
    return ux * f, uy * f


def _into_box(ux, uy, ubar):
    """Uniform scaling of one time slice into the box (keeps it solenoidal)."""
    mag = np.hypot(ux, uy)
    over = mag > ubar
    if not np.any(over):
        return ux, uy
    a = float(np.min(np.broadcast_to(ubar, mag.shape)[over] / mag[over]))
    return a * ux, a * uy


def project_slice(ux, uy, box: ControlBox, g: Grid):
    ubar = np.asarray(box.Ubar, dtype=float)
    for _ in range(box.projection_iters):
        ux, uy = leray_project(ux, uy, g)
        ux, uy = _clamp(ux, uy, ubar)
    ux, uy = leray_project(ux, uy, g)
    return _into_box(ux, uy, ubar)


def project_Uad(u, box: ControlBox, g: Grid) -> np.ndarray:
    """Alternating Leray/clamp projection onto the admissible controls.

    Each of the ``projection_iters`` rounds applies the Leray projection and
    then the pointwise clamp; a closing Leray step and a uniform rescaling
    of each time slice make the result solenoidal and inside the box.
    """
    U = np.asarray(u.stacked() if isinstance(u, Velocity) else u, dtype=float)
    single = U.ndim == 3
    U = U[None] if single else U
    out = np.empty_like(U)
    for k in range(U.shape[0]):
        out[k, 0], out[k, 1] = project_slice(U[k, 0], U[k, 1], box, g)
    if np.isfinite(box.R0):
        # the global cap is applied as a plain rescaling of the whole schedule
        nrm = math.sqrt(float(np.sum(g.bulk_weights * np.sum(out**2, axis=1))))
        if nrm > box.R0:
            out *= box.R0 / nrm
    return out[0] if single else out


def is_admissible(U: np.ndarray, box: ControlBox, g: Grid, tol: float = 1e-10) -> bool:
    from .grid import divergence
    ubar = np.asarray(box.Ubar, dtype=float)
    for sl in np.asarray(U).reshape((-1, 2) + g.shape):
        v = Velocity(sl[0], sl[1])
        if np.any(np.hypot(sl[0], sl[1]) > ubar * (1 + tol) + tol):
            return False
        if np.max(np.abs(divergence(v, g))) > tol * (1 + np.max(np.abs(sl))) / min(g.hx, g.hy):
            return False
        if np.max(np.abs(sl[1][[0, -1]])) > tol:
            return False
    return True


def random_admissible(nsteps: int, box: ControlBox, g: Grid, rng: np.random.Generator,
                      modes: int = 3) -> np.ndarray:
    """Random smooth solenoidal schedule inside the box."""
    X, Y = g.mesh
    out = np.empty((nsteps, 2) + g.shape)
    ubar = np.asarray(box.Ubar, dtype=float)
    for k in range(nsteps):
        psi = np.zeros(g.shape)
        for a in range(1, modes + 1):
            for b in range(0, modes + 1):
                c = rng.standard_normal(2) / (a + b)
                psi += (np.sin(np.pi * Y / g.Ly) ** 2
                        * (c[0] * np.cos(2 * np.pi * a * X / g.Lx + b) + c[1] * np.sin(2 * np.pi * b * X / g.Lx)))
        psi += rng.standard_normal() * Y
        v = velocity_from_stream(psi, g)
        ux, uy = _into_box(v.ux, v.uy, ubar)
        s = rng.uniform(0.0, 1.0)
        out[k, 0], out[k, 1] = s * ux, s * uy
    return out


def vi_residual(u, grad_field, box: ControlBox, g: Grid, probes=100, *, dt: float = 1.0,
                beta7: float = 0.0, rng=None, return_scale: bool = False):
    """Minimum of  int_Q grad_field . (v - u)  over sampled admissible v.

    Probes are random admissible schedules plus, when beta7 > 0, the
    candidate  v* = P(u - grad_field / beta7).  A value >= -tol * scale
    certifies first-order stationarity; ``scale`` is ||grad|| * max ||v - u||.
    ``probes`` is a count or a prebuilt list of admissible schedules.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    U = np.asarray(u, dtype=float)
    G = np.asarray(grad_field, dtype=float)
    N = U.shape[0]
    if isinstance(probes, int):
        cands = [random_admissible(N, box, g, rng) for _ in range(probes)]
    else:
        cands = list(probes)
    if beta7 > 0:
        cands.append(project_Uad(U - G / beta7, box, g))
    vals = [inner(G, v - U, g, dt) for v in cands]
    best = min(vals) if vals else 0.0
    if return_scale:
        scale = norm(G, g, dt) * max((norm(v - U, g, dt) for v in cands), default=0.0)
        return best, scale
    return best


# -- optimization -------------------------------------------------------------

@dataclass
class OptResult:
    u_opt: np.ndarray
    J_history: list
    vi_residual: float
    grad_norm_history: list
    iterations: int
    converged: bool
    fp_residual: float = math.nan
    vi_scale: float = math.nan
    trajectory: Trajectory | None = field(default=None, repr=False)
    history: list = field(default_factory=list)


@dataclass
class SweepResult:
    pure: OptResult
    taus: tuple
    results: list
    control_gaps: list      # ||u^tau - ubar||
    cost_gaps: list         # |J~_tau(u^tau) - J_0(ubar)|
    state_gaps: list        # ||rho^tau - rho^0||_C0


class _Problem:
    """Forward/adjoint evaluation of the (adapted) reduced cost."""

    def __init__(self, rho0, cs, p, spec, g, T, scheme, ubar_ref):
        self.rho0, self.cs, self.p, self.spec, self.g, self.T = rho0, cs, p, spec, g, T
        self.scheme = scheme
        self.ubar_ref = ubar_ref
        self.dt = p.step_size(g)
        self.N = int(math.ceil(T / self.dt - 1e-9))

    def forward(self, U):
        traj = simulate(self.rho0, U, self.p, self.spec, self.g, self.T, validate=False)
        if self.ubar_ref is None:
            return traj, cost(traj, U, self.cs, self.g)
        return traj, adapted_cost(traj, U, self.cs, self.ubar_ref, self.g)

    def grad(self, traj, U):
        data = assemble_adjoint_data(traj, self.cs.targets, self.cs.betas[:4], self.spec)
        adj = solve_adjoint(traj, U, data, None, self.p, self.g, scheme=self.scheme)
        return gradient(traj, adj, U, self.cs.beta7, self.ubar_ref)


def _fixed_point(U, G, beta7, box, g, dt):
    if beta7 <= 0:
        return math.nan
    # u - P(-rho grad p / beta7) with rho grad p = G - beta7 u (adapted term included in G)
    return norm(U - project_Uad(U - G / beta7, box, g), g, dt)


def _minimize(prob: _Problem, box: ControlBox, U0, *, max_iter, fp_tol, vi_tol, rel_tol, probes,
              sigma, rng, callback):
    g, dt = prob.g, prob.dt
    beta7 = prob.cs.beta7 + (1.0 if prob.ubar_ref is not None else 0.0)
    U = project_Uad(U0, box, g) if not is_admissible(U0, box, g) else np.array(U0, dtype=float)
    traj, J = prob.forward(U)
    G = prob.grad(traj, U)
    Js, gns, hist = [J], [norm(G, g, dt)], []
    s = 1.0
    U_prev = G_prev = None
    probe_set = [random_admissible(prob.N, box, g, rng) for _ in range(probes)]

    def certificate(U, G):
        fp = _fixed_point(U, G, beta7, box, g, dt)
        vi, scale = vi_residual(U, G, box, g, probe_set, dt=dt, beta7=beta7, return_scale=True)
        fp_ok = beta7 <= 0 or fp <= fp_tol * (1.0 + norm(U, g, dt))
        return fp, vi, scale, bool(fp_ok and vi >= -vi_tol * scale)

    fp, vi, scale, ok = certificate(U, G)
    for it in range(max_iter):
        if ok:
            break
        if U_prev is not None:
            du, dg = U - U_prev, G - G_prev
            curv = inner(du, dg, g, dt)
            if curv > 0:
                s = min(max(inner(du, du, g, dt) / curv, 1e-8), 1e8)
        accepted = False
        for _ in range(31):
            Un = project_Uad(U - s * G, box, g)
            d = Un - U
            slope = inner(G, d, g, dt)
            trajn, Jn = prob.forward(Un)
            if Jn <= J + sigma * slope:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            if norm(d, g, dt) <= 1e-14 * (1.0 + norm(U, g, dt)) or Jn <= J * (1 + 1e-14):
                break   # round-off floor reached
            raise LineSearchError(f"line search failed after 30 halvings (J={J:.6e}, "
                                  f"|grad|={gns[-1]:.3e})", J, gns[-1])
        U_prev, G_prev = U, G
        rel = (J - Jn) / max(abs(J), 1e-300)
        U, J, traj = Un, Jn, trajn
        G = prob.grad(traj, U)
        fp, vi, scale, ok = certificate(U, G)
        Js.append(J)
        gns.append(norm(G, g, dt))
        hist.append({"iter": it + 1, "J": J, "grad_norm": gns[-1], "step": s,
                     "vi_residual": vi, "fp_residual": fp})
        if callback is not None:
            callback(hist[-1])
        log.debug("iter %d J=%.6e step=%.3e fp=%.3e", it + 1, J, s, fp)
        if rel < rel_tol:
            break
    return OptResult(U, Js, vi, gns, len(Js) - 1, ok, fp, scale, traj, hist)


def optimize(rho0: FieldPair, cs: CostSpec, box: ControlBox, p: SolverParams, spec: PotentialSpec,
             g: Grid, T: float, mode: str = "pure", *, u0=None, max_iter: int = 200,
             fp_tol: float = 1e-6, vi_tol: float = 1e-6, rel_tol: float = 1e-8, probes: int = 100,
             sigma: float = 1e-4, taus=DEFAULT_TAUS, seed: int = 0, scheme: str = "exact",
             callback=None):
    """Projected gradient with Armijo backtracking.

    ``mode='pure'`` minimizes J at the viscosities in ``p``.  ``mode='tau_sweep'``
    first minimizes J for the pure problem (tau = 0) giving ubar, then for each
    tau in ``taus`` minimizes J~ = J + 1/2 ||u - ubar||^2 with tau_O = tau_G =
    tau, warm-starting from the previous optimum.
    """
    rng = np.random.default_rng(seed)
    kw = dict(max_iter=max_iter, fp_tol=fp_tol, vi_tol=vi_tol, rel_tol=rel_tol, probes=probes,
              sigma=sigma, rng=rng, callback=callback)
    if mode == "pure":
        prob = _Problem(rho0, cs, p, spec, g, T, scheme, None)
        return _minimize(prob, box, as_schedule(u0, prob.N, g), **kw)
    if mode != "tau_sweep":
        raise ValueError(f"mode must be 'pure' or 'tau_sweep', got {mode!r}")
    p0 = replace(p, tauO=0.0, tauG=0.0)
    prob0 = _Problem(rho0, cs, p0, spec, g, T, scheme, None)
    pure = _minimize(prob0, box, as_schedule(u0, prob0.N, g), **kw)
    ubar = pure.u_opt
    J0 = pure.J_history[-1]
    rho_ref = pure.trajectory.rho
    results, cgaps, jgaps, sgaps = [], [], [], []
    U = ubar
    for tau in taus:
        prob = _Problem(rho0, cs, replace(p, tauO=tau, tauG=tau), spec, g, T, scheme, ubar)
        res = _minimize(prob, box, U, **kw)
        U = res.u_opt
        results.append(res)
        cgaps.append(norm(U - ubar, g, prob.dt))
        jgaps.append(abs(res.J_history[-1] - J0))
        sgaps.append(float(np.max(np.abs(res.trajectory.rho - rho_ref))))
    return SweepResult(pure, tuple(taus), results, cgaps, jgaps, sgaps)
