"""Generalized mean, the coupled inverse Laplacian N, dual norms, energies and
stationarity metrics, plus the long-time driver.

Fields enter either as :class:`FieldPair` objects or as flat dof vectors
(trace-compatible pairs); functionals on V enter as flat vectors of pairings
against the nodal basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import FieldPair, Grid, Velocity
from .potentials import PotentialSpec, eval_potential


class MeanError(ValueError):
    """Input to the inverse Laplacian does not have zero generalized mean."""


def _total_measure(g: Grid) -> float:
    return g.area + g.perimeter


def generalized_mean(v, g: Grid) -> float:
    """(int_Omega v + int_Gamma v_G) / (|Omega| + |Gamma|)."""
    if isinstance(v, FieldPair):
        s = np.sum(g.bulk_weights * v.bulk) + np.sum(g.bdry_weights * v.bdry)
    else:
        s = float(g.mass @ np.ravel(v))
    return float(s) / _total_measure(g)


def pairing(v: FieldPair, g: Grid) -> np.ndarray:
    """Represent an H-class pair as the functional <(v, v_G), .> on the dof basis."""
    return g.mass_bulk * np.ravel(v.bulk) + g.scatter_bdry(g.bdry_weights * v.bdry)


def functional_mean(b: np.ndarray, g: Grid) -> float:
    return float(np.sum(b)) / _total_measure(g)


def solve_N_functional(b: np.ndarray, g: Grid, tol: float = 1e-10) -> np.ndarray:
    """Mean-free solution xi of  K xi = b  for a functional b with zero total."""
    b = np.asarray(b, dtype=float)
    scale = float(np.sum(np.abs(b))) or 1.0
    if abs(np.sum(b)) > tol * max(scale, 1.0):
        raise MeanError(f"functional has nonzero mean {functional_mean(b, g):.3e}")
    sol = g.neumann_solver.solve(np.append(b, 0.0))
    return sol[:-1]


def solve_N(gstar: FieldPair, g: Grid, tol: float = 1e-10) -> FieldPair:
    """Apply the operator N to an H-class pair with zero generalized mean."""
    m = generalized_mean(gstar, g)
    if abs(m) > tol:
        raise MeanError(f"generalized mean {m:.3e} is not zero; project first")
    return FieldPair.from_flat(solve_N_functional(pairing(gstar, g), g, tol=np.inf), g)


def dual_norm_functional(b: np.ndarray, g: Grid) -> float:
    xi = solve_N_functional(b, g, tol=np.inf)
    return float(np.sqrt(max(xi @ (g.stiffness @ xi), 0.0)))


def dual_norm(gstar: FieldPair, g: Grid) -> float:
    m = generalized_mean(gstar, g)
    if abs(m) > 1e-10:
        raise MeanError(f"generalized mean {m:.3e} is not zero")
    return dual_norm_functional(pairing(gstar, g), g)


def full_dual_norm(b: np.ndarray, g: Grid) -> float:
    """Dual norm of a functional w.r.t. |grad v|^2 + |grad_G v_G|^2 + mean(v)^2."""
    b = np.asarray(b, dtype=float)
    total = float(np.sum(b))
    b0 = b - total / float(np.sum(g.mass)) * g.mass
    return float(np.hypot(dual_norm_functional(b0, g), total))


def gradient_energy(v: np.ndarray, g: Grid) -> float:
    """int |grad v|^2 + int_Gamma |grad_G v|^2 for a V-class dof vector.

    Summed edge by edge with the stiffness weights, so constants give 0 exactly.
    """
    a = np.asarray(v, dtype=float).reshape(g.shape)
    hx, hy = g.hx, g.hy
    ex = (np.roll(a, -1, axis=1) - a) ** 2
    cy = np.full(g.ny, hy / hx)
    cy[[0, -1]] = 0.5 * hy / hx + 1.0 / hx
    return float(cy @ ex.sum(axis=1) + hx / hy * np.sum(np.diff(a, axis=0) ** 2))


def weighted_std(v: np.ndarray, g: Grid) -> float:
    v = np.ravel(v)
    mean = generalized_mean(v, g)
    return float(np.sqrt(g.mass @ (v - mean) ** 2 / _total_measure(g)))


def potential_energy(rho: np.ndarray, spec: PotentialSpec, g: Grid) -> float:
    rho = np.ravel(rho)
    tr = rho[g.wall_nodes.ravel()]
    fb = eval_potential(spec, "bulk", rho, 0)
    fs = eval_potential(spec, "surface", tr, 0)
    return float(g.mass_bulk @ fb + g.bdry_weights.ravel() @ fs)


def lyapunov_energy(rho: np.ndarray, spec: PotentialSpec, g: Grid) -> float:
    return potential_energy(rho, spec, g) + 0.5 * gradient_energy(rho, g)


def free_energy(s, spec: PotentialSpec, g: Grid, include_mu_coupling: bool = False) -> float:
    """Total free energy of a state.

    Without coupling this is the Lyapunov functional
    int f(rho) + |grad rho|^2/2 plus its surface analog; with coupling the
    terms -int mu rho - int_Gamma mu_G rho_G are added.  Gradient terms use
    the same edge differences as the stiffness matrix.
    """
    rho = s.rho.flat()
    e = lyapunov_energy(rho, spec, g)
    if include_mu_coupling:
        e -= float(np.sum(g.bulk_weights * s.mu.bulk * s.rho.bulk)
                   + np.sum(g.bdry_weights * s.mu.bdry * s.rho.bdry))
    return e


# -- stationarity --------------------------------------------------------------

@dataclass
class StationarityMetrics:
    grad_mu_norm: float
    dual_dt_norm: float
    mu_std: float
    r_bulk: float
    r_surf: float
    mu_mean: float = 0.0

    def as_tuple(self):
        return (self.grad_mu_norm, self.dual_dt_norm, self.mu_std, self.r_bulk, self.r_surf)


def strong_residuals(rho: np.ndarray, mu_s: float, spec: PotentialSpec, g: Grid) -> tuple[float, float]:
    """Max-norm residuals of the stationary boundary value problem.

    Bulk: -Lap rho + f'(rho) - mu_s at interior nodes.  Surface:
    d_nu rho - Lap_G rho + f_G'(rho) - mu_s with the normal derivative taken
    from the centered ghost-node closure of the wall rows, i.e. the wall
    equation of the coupled stiffness with the bulk part eliminated.
    """
    rho = np.ravel(rho)
    kr = g.stiffness @ rho
    fb = eval_potential(spec, "bulk", rho, 1)
    wall = g.wall_nodes.ravel()
    fs = eval_potential(spec, "surface", rho[wall], 1)
    res = kr + g.mass_bulk * (fb - mu_s)
    res_b = (res / g.mass_bulk).reshape(g.shape)[1:-1]
    wg = g.bdry_weights.ravel()
    res_s = (res[wall] + wg * (fs - mu_s)) / wg
    return float(np.max(np.abs(res_b))), float(np.max(np.abs(res_s)))


def _step_metrics(rho_prev, rho_next, mu_next, dt, spec, g) -> StationarityMetrics:
    drho = g.mass * (np.ravel(rho_next) - np.ravel(rho_prev)) / dt
    drho -= np.sum(drho) / np.sum(g.mass) * g.mass
    mu = np.ravel(mu_next)
    mu_s = generalized_mean(mu, g)
    rb, rs = strong_residuals(rho_next, mu_s, spec, g)
    return StationarityMetrics(
        grad_mu_norm=float(np.sqrt(max(gradient_energy(mu, g), 0.0))),
        dual_dt_norm=dual_norm_functional(drho, g),
        mu_std=weighted_std(mu, g),
        r_bulk=rb, r_surf=rs, mu_mean=mu_s)


def stationarity_metrics(traj, g: Grid | None = None, spec: PotentialSpec | None = None,
                         window: float = 0.05) -> StationarityMetrics:
    """Stationarity metrics averaged over the tail of a trajectory.

    The tail is the last ``window`` fraction of the stored steps (at least
    one step).
    """
    g = g or traj.grid
    spec = spec or traj.spec
    nstates = traj.rho.shape[0]
    if nstates < 2:
        raise ValueError("need at least two states")
    nsteps = nstates - 1
    ntail = max(1, int(round(window * nsteps)))
    dt = traj.dt * traj.stride
    rows = [_step_metrics(traj.rho[k - 1], traj.rho[k], traj.mu[k], dt, spec, g)
            for k in range(nstates - ntail, nstates)]
    avg = np.mean([r.as_tuple() + (r.mu_mean,) for r in rows], axis=0)
    return StationarityMetrics(*map(float, avg))


# -- long-time behaviour -----------------------------------------------------

@dataclass
class OmegaReport:
    final_state: object
    grad_mu_norm: float
    dual_dt_norm: float
    mu_std: float
    mu_mean_history: np.ndarray
    stationary_residuals: tuple[float, float]
    converged: bool
    tol: float = 0.0
    trajectory: object = field(default=None, repr=False)


def decaying_schedule(u0: Velocity, lam: float):
    """u(t) = u0 exp(-lam t)."""
    if not lam > 0:
        raise ValueError("decay rate must be positive")

    def sched(t: float) -> Velocity:
        a = np.exp(-lam * t)
        return Velocity(a * u0.ux, a * u0.uy)
    return sched


def run_longtime(rho0, u0: Velocity | None, lam: float, p, spec: PotentialSpec, g: Grid,
                 T: float, tol: float, *, residual_tol: float | None = None,
                 window: float = 0.05, validate: bool = True, callback=None) -> OmegaReport:
    """Simulate with a decaying velocity and test the tail for stationarity."""
    from .state_solver import simulate

    u0 = u0 if u0 is not None else Velocity.zero(g)
    traj = simulate(rho0, decaying_schedule(u0, lam), p, spec, g, T,
                    validate=validate, callback=callback)
    if traj.rho.shape[0] < 2:
        metrics = StationarityMetrics(0.0, 0.0, weighted_std(traj.mu[0], g),
                                      *strong_residuals(traj.rho[0], generalized_mean(traj.mu[0], g), spec, g),
                                      generalized_mean(traj.mu[0], g))
    else:
        metrics = stationarity_metrics(traj, g, spec, window)
    mu_hist = np.array([generalized_mean(m, g) for m in traj.mu])
    conv = (metrics.grad_mu_norm <= tol
            and metrics.mu_std <= tol * (1.0 + abs(metrics.mu_mean))
            and metrics.dual_dt_norm <= tol)
    if residual_tol is not None:
        conv = conv and max(metrics.r_bulk, metrics.r_surf) <= residual_tol
    return OmegaReport(traj.state(-1), metrics.grad_mu_norm, metrics.dual_dt_norm, metrics.mu_std,
                       mu_hist, (metrics.r_bulk, metrics.r_surf), bool(conv), tol, traj)


# -- viscosity limit -----------------------------------------------------------

@dataclass
class ViscositySweep:
    taus: tuple
    sup_gaps: np.ndarray        # max over nodes and times of |rho^tau - rho^0|
    v_norms: np.ndarray         # max over time of the discrete V-norm of rho^tau
    reference_v_norm: float

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.sup_gaps) < 0))


def viscosity_sweep(rho0, u_sched, p, spec: PotentialSpec, g: Grid, T: float,
                    taus=(0.2, 0.1, 0.05, 0.025)) -> ViscositySweep:
    """Compare tau_O = tau_G = tau runs against the pure (tau = 0) run."""
    from dataclasses import replace
    from .state_solver import simulate

    def vnorm(traj):
        grad2 = np.einsum("ij,ij->i", traj.rho, (g.stiffness @ traj.rho.T).T)
        return float(np.sqrt(np.max(grad2 + traj.rho**2 @ g.mass)))

    ref = simulate(rho0, u_sched, replace(p, tauO=0.0, tauG=0.0), spec, g, T)
    gaps, norms = [], []
    for tau in taus:
        tr = simulate(rho0, u_sched, replace(p, tauO=tau, tauG=tau), spec, g, T, validate=False)
        gaps.append(float(np.max(np.abs(tr.rho - ref.rho))))
        norms.append(vnorm(tr))
    return ViscositySweep(tuple(taus), np.array(gaps), np.array(norms), vnorm(ref))
