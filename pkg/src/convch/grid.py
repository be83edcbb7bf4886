"""Channel geometry, periodic in x, with two flat walls at y=0 and y=Ly.

Unknowns live on the nodes ``(x_i, y_j) = (i*hx, j*hy)`` with
``i = 0..nx-1`` (periodic) and ``j = 0..ny-1``.  Bulk fields are stored as
``(ny, nx)`` arrays, boundary fields as ``(2, nx)`` arrays (row 0 is the
bottom wall, row 1 the top wall).  Boundary nodes share their degrees of
freedom with the wall rows of the bulk grid, so the trace of a bulk field is
just a view of its first and last rows.

Flattened degree-of-freedom vectors use row-major order, ``k = j*nx + i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

BOTTOM, TOP = 0, 1


@dataclass(frozen=True, eq=False)
class Grid:
    Lx: float
    Ly: float
    nx: int
    ny: int

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / (self.ny - 1)

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @cached_property
    def x(self) -> np.ndarray:
        return np.arange(self.nx) * self.hx

    @cached_property
    def y(self) -> np.ndarray:
        return np.arange(self.ny) * self.hy

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) node coordinates, each of shape (ny, nx)."""
        return np.meshgrid(self.x, self.y)

    @cached_property
    def bulk_weights(self) -> np.ndarray:
        cy = np.ones(self.ny)
        cy[0] = cy[-1] = 0.5
        return np.outer(cy * self.hy, np.full(self.nx, self.hx))

    @cached_property
    def bdry_weights(self) -> np.ndarray:
        return np.full((2, self.nx), self.hx)

    @cached_property
    def wall_nodes(self) -> np.ndarray:
        """Flat bulk index of every boundary node, shape (2, nx)."""
        i = np.arange(self.nx)
        return np.stack([i, (self.ny - 1) * self.nx + i])

    @cached_property
    def wall_ids(self) -> list[tuple[str, int]]:
        return [(side, i) for side in ("bottom", "top") for i in range(self.nx)]

    @property
    def area(self) -> float:
        return self.Lx * self.Ly

    @property
    def perimeter(self) -> float:
        return 2.0 * self.Lx

    # -- lumped mass ----------------------------------------------------
    @cached_property
    def mass_bulk(self) -> np.ndarray:
        return self.bulk_weights.ravel().copy()

    @cached_property
    def mass_bdry(self) -> np.ndarray:
        """Surface quadrature weights scattered onto the flat dof vector."""
        m = np.zeros(self.n)
        m[self.wall_nodes.ravel()] = self.bdry_weights.ravel()
        return m

    @cached_property
    def mass(self) -> np.ndarray:
        return self.mass_bulk + self.mass_bdry

    # -- stiffness of the coupled bulk/surface Dirichlet form ----------------
    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Matrix of  v -> int grad v.grad w + int_Gamma grad_G v.grad_G w.

        Assembled from edge differences: x-edges weighted by the
        trapezoidal row weight, y-edges by hx*hy, and x-edges on the walls
        once more for the surface term.  Symmetric positive semidefinite
        with kernel spanned by constants.
        """
        nx, ny, hx, hy = self.nx, self.ny, self.hx, self.hy
        lper = _periodic_graph_laplacian(nx)
        lpath = _path_graph_laplacian(ny)
        cy = np.ones(ny)
        cy[0] = cy[-1] = 0.5
        kx = sp.kron(sp.diags(cy * hy / hx), lper)
        ky = sp.kron(lpath * (hx / hy), sp.identity(nx))
        wall = np.zeros(ny)
        wall[0] = wall[-1] = 1.0
        ks = sp.kron(sp.diags(wall / hx), lper)
        return (kx + ky + ks).tocsr()

    # -- first-derivative operators on the flat dof vector ------------------
    @cached_property
    def dx(self) -> sp.csr_matrix:
        """Centered periodic d/dx."""
        d1 = sp.diags([-1.0, 1.0, -1.0, 1.0], [-1, 1, self.nx - 1, -(self.nx - 1)],
                      shape=(self.nx, self.nx)) / (2.0 * self.hx)
        return sp.kron(sp.identity(self.ny), d1).tocsr()

    @cached_property
    def dy(self) -> sp.csr_matrix:
        """Centered d/dy inside, one-sided first order at the walls.

        With the trapezoidal weights H this is a summation-by-parts operator,
        H Dy + Dy^T H = diag(-1, 0, ..., 0, 1), so discrete gradients are
        orthogonal to curls of wall-constant stream functions.
        """
        ny, h = self.ny, self.hy
        d1 = sp.lil_matrix((ny, ny))
        for j in range(1, ny - 1):
            d1[j, j - 1] = -0.5 / h
            d1[j, j + 1] = 0.5 / h
        d1[0, 0:2] = np.array([-1.0, 1.0]) / h
        d1[ny - 1, ny - 2:ny] = np.array([-1.0, 1.0]) / h
        return sp.kron(d1.tocsr(), sp.identity(self.nx)).tocsr()

    # -- cached solvers ---------------------------------------------------
    @cached_property
    def neumann_solver(self):
        """LU of the stiffness matrix bordered by the mass constraint.

        Solves  K xi + lam m = b,  m.xi = 0  for the mean-free coupled
        Laplacian problem.
        """
        m = self.mass
        a = sp.bmat([[self.stiffness, sp.csc_matrix(m[:, None])],
                     [sp.csr_matrix(m[None, :]), None]], format="csc")
        return spla.splu(a)

    @cached_property
    def stream_basis(self) -> np.ndarray:
        """Orthonormal basis (in the weighted L2 product) of discrete solenoidal fields.

        Columns are ``W^{1/2} curl(psi)`` for admissible stream functions
        (zero on the bottom wall, a free constant on the top wall),
        orthonormalized.  Used for the L2 projection onto the divergence-free,
        wall-tangent subspace.
        """
        r = self.curl_matrix
        w = np.sqrt(np.concatenate([self.mass_bulk, self.mass_bulk]))
        a = (r.toarray() * w[:, None])
        u, s, _ = np.linalg.svd(a, full_matrices=False)
        rank = int(np.sum(s > s[0] * 1e-10))
        return u[:, :rank]

    @cached_property
    def curl_matrix(self) -> sp.csr_matrix:
        """Map from free stream-function values to stacked (ux, uy) node values."""
        nx, ny = self.nx, self.ny
        # free unknowns: interior rows, plus one constant for the top wall
        n_int = (ny - 2) * nx
        rows = np.arange(nx, (ny - 1) * nx)
        e = sp.lil_matrix((self.n, n_int + 1))
        e[rows, np.arange(n_int)] = 1.0
        e[(ny - 1) * nx + np.arange(nx), n_int] = 1.0
        e = e.tocsr()
        return sp.vstack([self.dy @ e, -self.dx @ e]).tocsr()

    # -- helpers ----------------------------------------------------------
    def trace(self, bulk: np.ndarray) -> np.ndarray:
        bulk = np.asarray(bulk).reshape(self.shape)
        return np.stack([bulk[0], bulk[-1]])

    def scatter_bdry(self, bdry: np.ndarray) -> np.ndarray:
        """Place boundary values onto a zero flat dof vector."""
        v = np.zeros(self.n)
        v[self.wall_nodes.ravel()] = np.asarray(bdry).ravel()
        return v


def _periodic_graph_laplacian(n: int) -> sp.csr_matrix:
    return sp.diags([2.0 * np.ones(n), -np.ones(n - 1), -np.ones(n - 1), [-1.0], [-1.0]],
                    [0, 1, -1, n - 1, -(n - 1)], shape=(n, n)).tocsr()


def _path_graph_laplacian(n: int) -> sp.csr_matrix:
    d = 2.0 * np.ones(n)
    d[0] = d[-1] = 1.0
    return sp.diags([d, -np.ones(n - 1), -np.ones(n - 1)], [0, 1, -1]).tocsr()


def build_channel_grid(Lx: float, Ly: float, nx: int, ny: int) -> Grid:
    if not (Lx > 0 and Ly > 0):
        raise ValueError(f"channel dimensions must be positive, got Lx={Lx}, Ly={Ly}")
    if nx < 4 or ny < 3:
        raise ValueError(f"need nx >= 4 and ny >= 3, got nx={nx}, ny={ny}")
    return Grid(float(Lx), float(Ly), int(nx), int(ny))


@dataclass
class FieldPair:
    """A (bulk, boundary) pair; bulk has shape (ny, nx), bdry shape (2, nx)."""

    bulk: np.ndarray
    bdry: np.ndarray

    @classmethod
    def from_bulk(cls, bulk: np.ndarray) -> "FieldPair":
        """V-class pair whose boundary part is the trace of ``bulk``."""
        bulk = np.array(bulk, dtype=float)
        return cls(bulk, np.stack([bulk[0], bulk[-1]]))

    @classmethod
    def from_flat(cls, v: np.ndarray, g: Grid) -> "FieldPair":
        return cls.from_bulk(np.asarray(v).reshape(g.shape))

    @classmethod
    def constant(cls, c: float, g: Grid) -> "FieldPair":
        return cls(np.full(g.shape, float(c)), np.full((2, g.nx), float(c)))

    def flat(self) -> np.ndarray:
        return np.asarray(self.bulk, dtype=float).ravel()

    def trace_mismatch(self) -> float:
        return float(np.max(np.abs(self.bdry - np.stack([self.bulk[0], self.bulk[-1]]))))

    def is_trace_compatible(self, tol: float = 0.0) -> bool:
        return self.trace_mismatch() <= tol

    def __add__(self, other) -> "FieldPair":
        if isinstance(other, FieldPair):
            return FieldPair(self.bulk + other.bulk, self.bdry + other.bdry)
        return FieldPair(self.bulk + other, self.bdry + other)

    __radd__ = __add__

    def __sub__(self, other) -> "FieldPair":
        return self + (-1.0) * other

    def __neg__(self) -> "FieldPair":
        return (-1.0) * self

    def __mul__(self, a: float) -> "FieldPair":
        if isinstance(a, FieldPair):
            return NotImplemented
        return FieldPair(a * self.bulk, a * self.bdry)

    __rmul__ = __mul__


@dataclass
class Velocity:
    ux: np.ndarray
    uy: np.ndarray
    stream: np.ndarray | None = None

    def stacked(self) -> np.ndarray:
        return np.stack([self.ux, self.uy])

    @classmethod
    def zero(cls, g: Grid) -> "Velocity":
        return cls(np.zeros(g.shape), np.zeros(g.shape))


def _check_bulk(f, g: Grid) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != g.shape and f.shape != (g.n,):
        raise ValueError(f"bulk field has shape {f.shape}, expected {g.shape}")
    return f.reshape(g.shape)


def _check_bdry(fG, g: Grid) -> np.ndarray:
    fG = np.asarray(fG, dtype=float)
    if fG.shape != (2, g.nx):
        raise ValueError(f"boundary field has shape {fG.shape}, expected {(2, g.nx)}")
    return fG


def _dxx(f: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(f, -1, axis=-1) - 2.0 * f + np.roll(f, 1, axis=-1)) / h**2


def normal_derivative(f, g: Grid) -> np.ndarray:
    """Outward normal derivative on both walls, one-sided 3-point stencil."""
    f = _check_bulk(f, g)
    h = g.hy
    bottom = -(-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2 * h)
    top = (3.0 * f[-1] - 4.0 * f[-2] + f[-3]) / (2 * h)
    return np.stack([bottom, top])


def laplacian_bulk(f, g: Grid, dnu: np.ndarray | None = None) -> np.ndarray:
    """5-point Laplacian, periodic in x.

    On the wall rows a ghost value is built from the outward normal
    derivative ``dnu`` (defaults to the one-sided estimate of
    :func:`normal_derivative`), i.e. ``f_ghost = f_inner + 2*hy*dnu``.
    """
    f = _check_bulk(f, g)
    if dnu is None:
        dnu = normal_derivative(f, g)
    h = g.hy
    out = _dxx(f, g.hx)
    out[1:-1] += (f[2:] - 2.0 * f[1:-1] + f[:-2]) / h**2
    out[0] += (2.0 * f[1] - 2.0 * f[0] + 2.0 * h * dnu[0]) / h**2
    out[-1] += (2.0 * f[-2] - 2.0 * f[-1] + 2.0 * h * dnu[1]) / h**2
    return out


def laplace_beltrami(fG, g: Grid) -> np.ndarray:
    """Periodic second difference along each wall."""
    fG = _check_bdry(fG, g)
    return _dxx(fG, g.hx)


def velocity_from_stream(psi, g: Grid, tol: float = 1e-12) -> Velocity:
    """u = (d psi/dy, -d psi/dx); psi must be constant along each wall."""
    psi = _check_bulk(psi, g)
    scale = max(1.0, float(np.max(np.abs(psi))))
    for row in (psi[0], psi[-1]):
        if np.ptp(row) > tol * scale:
            raise ValueError("stream function is not constant along a wall")
    p = psi.ravel()
    ux = (g.dy @ p).reshape(g.shape)
    uy = -(g.dx @ p).reshape(g.shape)
    uy[0] = 0.0
    uy[-1] = 0.0
    return Velocity(ux, uy, psi.copy())


def divergence(u: Velocity, g: Grid) -> np.ndarray:
    """Discrete divergence with the same difference operators as the curl."""
    return (g.dx @ np.ravel(u.ux) + g.dy @ np.ravel(u.uy)).reshape(g.shape)


def gradient(f, g: Grid) -> np.ndarray:
    """Centered nodal gradient, shape (2, ny, nx)."""
    f = np.ravel(_check_bulk(f, g))
    return np.stack([(g.dx @ f).reshape(g.shape), (g.dy @ f).reshape(g.shape)])


def advect(rho, u: Velocity, g: Grid) -> np.ndarray:
    """Advective form grad(rho).u with centered differences."""
    grad = gradient(rho, g)
    return grad[0] * u.ux + grad[1] * u.uy


def advect_conservative(rho, u: Velocity, g: Grid) -> np.ndarray:
    """Conservative form div(rho u)."""
    rho = _check_bulk(rho, g)
    return divergence(Velocity(rho * u.ux, rho * u.uy), g)


def convection_matrix(ux: np.ndarray, uy: np.ndarray, g: Grid) -> sp.csr_matrix:
    """Weak convection operator C(u): (C rho)_i = -sum_k w_k rho_k u_k.(grad e_i)_k.

    This is the discrete form of  -int rho u.grad v ; its column sums
    vanish, so the total mass is conserved exactly.
    """
    w = g.mass_bulk
    wx = sp.diags(w * np.ravel(ux))
    wy = sp.diags(w * np.ravel(uy))
    return -(g.dx.T @ wx + g.dy.T @ wy).tocsr()


def leray_project(ux: np.ndarray, uy: np.ndarray, g: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Weighted-L2 orthogonal projection onto curls of admissible stream functions."""
    w = np.sqrt(g.mass_bulk)
    q = g.stream_basis
    v = np.concatenate([np.ravel(ux) * w, np.ravel(uy) * w])
    pv = q @ (q.T @ v)
    n = g.n
    return (pv[:n] / w).reshape(g.shape), (pv[n:] / w).reshape(g.shape)
