"""Backward-in-time adjoint system for velocity control.

With multipliers (p, q) the adjoint march reads, in the lumped-mass notation
of :mod:`convch.state_solver`,

    M p_k + T q_k + dt (K + F'(rho_{k+1})) q_k
        = M p_{k+1} + T q_{k+1} - dt [C(u_{k+1})^T p_{k+1} + G' q_{k+1}] + dt Phi3_{k+1}
    K p_k - M q_k = 0

from the terminal pair  M p_N + T q_N = Phi5,  K p_N = M q_N.  This is the
exact adjoint of the forward march ("exact" scheme): the gradient it yields
is the derivative of the discrete cost.  The "backward_euler" scheme instead
discretizes the continuous adjoint equation

    -d/dt (p + tau q) - Lap q + psi q - u.grad p = phi3,   q = -Lap p

implicitly backward in time with all coefficients at t_k; it is first-order
consistent with the exact scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import FieldPair, Grid, convection_matrix
from .potentials import PotentialSpec, eval_potential, pi_derivative
from .state_solver import SolverParams, Trajectory, viscous_mass

SCHEMES = ("exact", "backward_euler")


class AdjointError(RuntimeError):
    def __init__(self, msg: str, step_index: int | None = None):
        super().__init__(msg)
        self.step_index = step_index


@dataclass
class Targets:
    """Tracking targets; static fields or series indexed like the trajectory."""

    rhoQ: np.ndarray | float = 0.0
    rhoSig: np.ndarray | float = 0.0
    rhoOm: np.ndarray | float = 0.0
    rhoGam: np.ndarray | float = 0.0


@dataclass
class AdjointData:
    psi: np.ndarray      # (N+1, ny, nx)
    psiG: np.ndarray     # (N+1, 2, nx)
    phi3: np.ndarray     # (N+1, ny, nx)
    phi4: np.ndarray     # (N+1, 2, nx)
    phi5: np.ndarray     # (ny, nx)
    phi6: np.ndarray     # (2, nx)

    def source(self, k: int, g: Grid) -> np.ndarray:
        """Running source Phi3 at time index k as a functional on the dofs."""
        return g.mass_bulk * self.phi3[k].ravel() + g.scatter_bdry(g.bdry_weights * self.phi4[k])

    def terminal(self, g: Grid) -> np.ndarray:
        return g.mass_bulk * self.phi5.ravel() + g.scatter_bdry(g.bdry_weights * self.phi6)

    def curvature(self, k: int, g: Grid) -> np.ndarray:
        """Diagonal of the lumped matrix of f''(rho_k) (bulk + surface)."""
        return g.mass_bulk * self.psi[k].ravel() + g.scatter_bdry(g.bdry_weights * self.psiG[k])


def _series(target, nt: int, shape: tuple, name: str) -> np.ndarray:
    a = np.asarray(target, dtype=float)
    if a.ndim == 0:
        return np.full((nt,) + shape, float(a))
    if a.shape == shape:
        return np.broadcast_to(a, (nt,) + shape)
    if a.shape == (nt,) + shape:
        return a
    raise ValueError(f"target {name} has shape {a.shape}, expected {shape} or {(nt,) + shape}")


def _field(target, shape: tuple, name: str) -> np.ndarray:
    a = np.asarray(target, dtype=float)
    if a.ndim == 0:
        return np.full(shape, float(a))
    if a.shape != shape:
        raise ValueError(f"target {name} has shape {a.shape}, expected {shape}")
    return a


def assemble_adjoint_data(traj: Trajectory, targets: Targets, betas, spec: PotentialSpec | None = None
                          ) -> AdjointData:
    """psi = f''(rho), phi3..phi6 = weighted tracking mismatches.

    ``betas`` is (beta3, beta4, beta5, beta6) or any longer sequence starting
    with them.
    """
    g = traj.grid
    spec = spec or traj.spec
    if traj.stride != 1:
        raise ValueError("adjoint needs every time step stored (stride 1)")
    b3, b4, b5, b6 = (float(b) for b in list(betas)[:4])
    nt = len(traj.times)
    rho = traj.rho.reshape((nt,) + g.shape)
    tr = rho[:, [0, -1], :]
    psi = eval_potential(spec, "bulk", rho, 2)
    psiG = eval_potential(spec, "surface", tr, 2)
    phi3 = b3 * (rho - _series(targets.rhoQ, nt, g.shape, "rhoQ"))
    phi4 = b4 * (tr - _series(targets.rhoSig, nt, (2, g.nx), "rhoSig"))
    phi5 = b5 * (rho[-1] - _field(targets.rhoOm, g.shape, "rhoOm"))
    phi6 = b6 * (tr[-1] - _field(targets.rhoGam, (2, g.nx), "rhoGam"))
    return AdjointData(psi, psiG, phi3, phi4, phi5, phi6)


@dataclass
class AdjointState:
    p: FieldPair
    q: FieldPair
    combo: FieldPair


@dataclass
class AdjointTrajectory:
    grid: Grid
    times: np.ndarray
    P: np.ndarray        # (N+1, n)
    Q: np.ndarray        # (N+1, n)
    tau: tuple[float, float]
    scheme: str
    combo: np.ndarray = field(repr=False, default=None)

    def state(self, k: int) -> AdjointState:
        g = self.grid
        return AdjointState(FieldPair.from_flat(self.P[k], g), FieldPair.from_flat(self.Q[k], g),
                            FieldPair.from_flat(self.combo[k], g))


def _controls_array(ubar, nsteps: int, g: Grid):
    """Normalize a control schedule to an (N, 2, ny, nx) array, or None for u=0."""
    from .grid import Velocity
    if ubar is None:
        return None
    if isinstance(ubar, Velocity):
        return np.broadcast_to(ubar.stacked(), (nsteps, 2) + g.shape)
    arr = np.array([u.stacked() if isinstance(u, Velocity) else np.asarray(u) for u in ubar], dtype=float)
    if arr.shape[0] < nsteps:
        raise ValueError(f"control schedule has {arr.shape[0]} entries, need {nsteps}")
    return arr


def solve_adjoint(traj: Trajectory, ubar, data: AdjointData, tau=None, p: SolverParams | None = None,
                  g: Grid | None = None, *, scheme: str = "exact") -> AdjointTrajectory:
    """March the adjoint backward from t=T; one sparse solve per step."""
    g = g or traj.grid
    p = p or traj.params
    if tau is not None:
        p = SolverParams(tauO=tau[0], tauG=tau[1], dt=traj.dt)
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    if traj.stride != 1:
        raise AdjointError("adjoint needs the full trajectory (stride 1)")
    spec = traj.spec
    dt = traj.dt
    nt = len(traj.times)
    N = nt - 1
    if callable(ubar):
        ubar = [ubar(k * dt) for k in range(N)]
    U = _controls_array(ubar, N, g)
    m = g.mass
    M = sp.diags(m)
    K = g.stiffness
    tm = viscous_mass(p, g)
    TM = sp.diags(tm)
    wall = g.wall_nodes.ravel()
    gp = g.mass_bulk * pi_derivative(spec.bulk, np.zeros(g.n))
    gp[wall] += g.bdry_weights.ravel() * pi_derivative(spec.surface, np.zeros(wall.size))
    lower = sp.hstack([K, -M])

    def conv(k):
        if U is None:
            return None
        return convection_matrix(U[k, 0], U[k, 1], g)

    def solve(upper, rhs, k):
        a = sp.vstack([upper, lower]).tocsc()
        try:
            z = spla.splu(a).solve(np.concatenate([rhs, np.zeros(g.n)]))
        except RuntimeError as exc:
            raise AdjointError(f"singular adjoint block at step {k}: {exc}", k) from exc
        if not np.all(np.isfinite(z)):
            raise AdjointError(f"non-finite adjoint at step {k}", k)
        return z[:g.n], z[g.n:]

    P = np.zeros((nt, g.n))
    Q = np.zeros((nt, g.n))
    P[N], Q[N] = solve(sp.hstack([M, TM]), data.terminal(g), N)
    for k in range(N - 1, -1, -1):
        if scheme == "exact":
            fprime = data.curvature(k + 1, g) - gp
            upper = sp.hstack([M, TM + dt * (K + sp.diags(fprime))])
            rhs = m * P[k + 1] + tm * Q[k + 1] + dt * data.source(k + 1, g)
            if k + 1 < N:
                rhs -= dt * gp * Q[k + 1]
                c = conv(k + 1)
                if c is not None:
                    rhs -= dt * (c.T @ P[k + 1])
        else:
            c = conv(k)
            left = M if c is None else M + dt * c.T
            upper = sp.hstack([left, TM + dt * (K + sp.diags(data.curvature(k, g)))])
            rhs = m * P[k + 1] + tm * Q[k + 1] + dt * data.source(k, g)
        P[k], Q[k] = solve(upper, rhs, k)
    combo = P + (p.tauO * g.mass_bulk + p.tauG * g.mass_bdry)[None, :] / m * Q
    return AdjointTrajectory(g, np.asarray(traj.times), P, Q, (p.tauO, p.tauG), scheme, combo)


def backward_convolution(series, dt: float) -> np.ndarray:
    """(1*v)_k = dt * sum_{j>k} v_j  (right-endpoint rule; zero at the final time)."""
    v = np.asarray(series, dtype=float)
    out = np.zeros_like(v)
    if v.shape[0] > 1:
        out[:-1] = dt * np.cumsum(v[::-1][:-1], axis=0)[::-1]
    return out


@dataclass
class IntegratedResidual:
    residual: float
    first: np.ndarray     # per-time max residual of the integrated evolution equation
    second: np.ndarray    # per-time max residual of the elliptic relation


def check_time_integrated_form(adj: AdjointTrajectory, data: AdjointData, ubar, g: Grid,
                               dt: float) -> IntegratedResidual:
    """Residual of the time-integrated pure adjoint system.

    p + 1*(-Lap q) + 1*(psi q) - 1*(u.grad p) = 1*phi3 + phi5 (and its
    boundary analog) is tested against every nodal basis function, the
    result divided by the lumped mass; the elliptic relation q = -Lap p is
    checked the same way.  The control on (t_{j-1}, t_j] is u_{j-1}.
    """
    nt = adj.P.shape[0]
    N = nt - 1
    m = g.mass
    U = _controls_array(ubar, N, g)
    psiq = np.array([data.curvature(j, g) * adj.Q[j] for j in range(nt)])
    ctp = np.zeros_like(adj.P)
    if U is not None:
        for j in range(1, nt):
            ctp[j] = convection_matrix(U[j - 1, 0], U[j - 1, 1], g).T @ adj.P[j]
    src = np.array([data.source(j, g) for j in range(nt)])
    kq = (g.stiffness @ adj.Q.T).T
    r = (m * adj.P + backward_convolution(kq + psiq + ctp - src, dt) - data.terminal(g)[None, :])
    first = np.max(np.abs(r / m), axis=1)
    second = np.max(np.abs((g.stiffness @ adj.P.T).T / m - adj.Q), axis=1)
    return IntegratedResidual(float(np.max(first)), first, second)
