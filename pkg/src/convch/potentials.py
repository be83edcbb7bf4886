"""Double-well potentials split as convex part + smooth concave perturbation.

Three families are supported:

* ``regular``      f(r) = (r^2 - 1)^2 / 4,     beta(r) = r^3,               pi(r) = -r
* ``logarithmic``  f(r) = (1+r)ln(1+r) + (1-r)ln(1-r) - c1 r^2,
                   beta(r) = ln((1+r)/(1-r)),  pi(r) = -2 c1 r
* ``obstacle``     f(r) = I_[-1,1](r) - c2 r^2, beta = subdifferential of the
                   indicator,                  pi(r) = -2 c2 r

The nonsmooth or singular convex parts are replaced by their Yosida
regularization (Moreau envelope for the potential value).  The surface
potential is regularized at level ``eta * eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

FAMILIES = ("regular", "logarithmic", "obstacle")


class DomainError(ValueError):
    """Argument outside the effective domain of an unregularized potential."""


@dataclass(frozen=True)
class Potential:
    family: str = "regular"
    c1: float = 2.0
    c2: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown potential family {self.family!r}")
        if self.family == "logarithmic" and not self.c1 > 1:
            raise ValueError("logarithmic potential needs c1 > 1")
        if self.family == "obstacle" and not self.c2 > 0:
            raise ValueError("obstacle potential needs c2 > 0")

    @property
    def domain(self) -> tuple[float, float, bool]:
        """(lo, hi, closed) description of D(beta)."""
        if self.family == "regular":
            return (-np.inf, np.inf, False)
        if self.family == "logarithmic":
            return (-1.0, 1.0, False)
        return (-1.0, 1.0, True)


@dataclass(frozen=True)
class PotentialSpec:
    bulk: Potential = field(default_factory=Potential)
    surface: Potential = field(default_factory=Potential)
    eps: float = 1e-3
    eta: float = 1.0
    Ccc: float = 0.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("Yosida parameter eps must be positive")
        if not self.eta > 0:
            raise ValueError("compatibility constant eta must be positive")

    def side(self, side: str) -> Potential:
        if side == "bulk":
            return self.bulk
        if side == "surface":
            return self.surface
        raise ValueError(f"side must be 'bulk' or 'surface', got {side!r}")

    def level(self, side: str) -> float:
        """Regularization level: eps in the bulk, eta*eps on the boundary."""
        return self.eps if side == "bulk" else self.eta * self.eps


def make_spec(family: str = "regular", surface_family: str | None = None, *,
              c1: float = 2.0, c2: float = 1.0, eps: float = 1e-3,
              eta: float = 1.0, Ccc: float = 0.0) -> PotentialSpec:
    bulk = Potential(family, c1, c2)
    surf = Potential(surface_family or family, c1, c2)
    return PotentialSpec(bulk, surf, eps, eta, Ccc)


# -- convex part -------------------------------------------------------------

def _log_resolvent(r: np.ndarray, eps: float, tol: float = 1e-12, maxit: int = 100) -> np.ndarray:
    """Solve s + eps*2*artanh(s) = r for s in (-1, 1); safeguarded Newton."""
    r = np.asarray(r, dtype=float)
    lo = np.full(r.shape, -1.0)
    hi = np.full(r.shape, 1.0)
    s = np.clip(r / (1.0 + 2.0 * eps), -1.0 + 1e-15, 1.0 - 1e-15)
    for _ in range(maxit):
        om = np.maximum(1.0 - s * s, 1e-300)
        with np.errstate(divide="ignore"):
            g = s + 2.0 * eps * np.arctanh(s) - r
        lo = np.where(g < 0, s, lo)
        hi = np.where(g > 0, s, hi)
        s_new = s - g / (1.0 + 2.0 * eps / om)
        bad = ~((s_new > lo) & (s_new < hi))
        s_new = np.where(bad, 0.5 * (lo + hi), s_new)
        step = np.abs(s_new - s)
        s = s_new
        if np.all(step <= tol * np.maximum(1.0 - np.abs(s), 1e-300)) or np.all(step <= 1e-16):
            break
    return s


def yosida(pot: Potential, eps: float, r) -> np.ndarray:
    """Yosida regularization beta_eps of the convex part at level ``eps``.

    The regular family is already single valued and smooth and is returned
    unchanged.
    """
    if not eps > 0:
        raise ValueError("Yosida parameter must be positive")
    r = np.asarray(r, dtype=float)
    if pot.family == "regular":
        return r**3
    if pot.family == "obstacle":
        return (r - np.clip(r, -1.0, 1.0)) / eps
    s = _log_resolvent(r, eps)
    inner = 1.0 - np.abs(s) > 1e-8
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = 2.0 * np.arctanh(np.where(inner, s, 0.0))
    return np.where(inner, exact, (r - s) / eps)


def yosida_derivative(pot: Potential, eps: float, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if pot.family == "regular":
        return 3.0 * r**2
    if pot.family == "obstacle":
        return np.where(np.abs(r) > 1.0, 1.0 / eps, 0.0)
    s = _log_resolvent(r, eps)
    return 2.0 / ((1.0 - s * s) + 2.0 * eps)


def _beta_hat(pot: Potential, r: np.ndarray) -> np.ndarray:
    if pot.family == "regular":
        return 0.25 * r**4
    if pot.family == "logarithmic":
        return xlogy(1.0 + r, 1.0 + r) + xlogy(1.0 - r, 1.0 - r)
    return np.zeros_like(r)


def moreau_envelope(pot: Potential, eps: float, r) -> np.ndarray:
    """Regularized convex potential whose derivative is :func:`yosida`."""
    r = np.asarray(r, dtype=float)
    if pot.family == "regular":
        return _beta_hat(pot, r)
    if pot.family == "obstacle":
        return (r - np.clip(r, -1.0, 1.0)) ** 2 / (2.0 * eps)
    s = _log_resolvent(r, eps)
    return _beta_hat(pot, s) + (r - s) ** 2 / (2.0 * eps)


def beta_min_section(pot: Potential, r) -> np.ndarray:
    """Minimal-norm section beta°(r); raises outside D(beta)."""
    r = np.asarray(r, dtype=float)
    _check_domain(pot, r)
    if pot.family == "regular":
        return r**3
    if pot.family == "logarithmic":
        return 2.0 * np.arctanh(r)
    return np.zeros_like(r)


def _check_domain(pot: Potential, r: np.ndarray) -> None:
    lo, hi, closed = pot.domain
    if closed:
        ok = (r >= lo) & (r <= hi)
    else:
        ok = (r > lo) & (r < hi)
    if not np.all(ok):
        raise DomainError(f"{pot.family} potential evaluated outside its domain")


# -- concave perturbation ---------------------------------------------------

def _pi_coef(pot: Potential) -> float:
    """pi(r) = -a r, pi_hat(r) = -a r^2/2 (+ const)."""
    if pot.family == "regular":
        return 1.0
    if pot.family == "logarithmic":
        return 2.0 * pot.c1
    return 2.0 * pot.c2


def pi(pot: Potential, r) -> np.ndarray:
    return -_pi_coef(pot) * np.asarray(r, dtype=float)


def pi_derivative(pot: Potential, r) -> np.ndarray:
    return np.full(np.shape(r), -_pi_coef(pot))


def pi_hat(pot: Potential, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    const = 0.25 if pot.family == "regular" else 0.0
    return -0.5 * _pi_coef(pot) * r**2 + const


# -- full potential ----------------------------------------------------------

def eval_potential(spec: PotentialSpec, side: str, r, order: int = 0,
                   regularized: bool = True) -> np.ndarray:
    """f, f' or f'' of the bulk or surface potential at ``r``.

    With ``regularized`` the convex part is replaced by its Yosida
    regularization at the side's level; otherwise the logarithmic and
    obstacle families raise :class:`DomainError` off their domains.
    """
    pot = spec.side(side)
    eps = spec.level(side)
    r = np.asarray(r, dtype=float)
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    if not regularized and pot.family != "regular":
        if pot.family == "logarithmic":
            _check_domain(pot, r)
            if order == 0:
                return _beta_hat(pot, r) + pi_hat(pot, r)
            if order == 1:
                return 2.0 * np.arctanh(r) + pi(pot, r)
            return 2.0 / (1.0 - r * r) + pi_derivative(pot, r)
        _check_domain(pot, r)
        if order == 0:
            return pi_hat(pot, r)
        if order == 1:
            return pi(pot, r)
        return pi_derivative(pot, r)
    if order == 0:
        return moreau_envelope(pot, eps, r) + pi_hat(pot, r)
    if order == 1:
        return yosida(pot, eps, r) + pi(pot, r)
    return yosida_derivative(pot, eps, r) + pi_derivative(pot, r)


def lower_bound(pot: Potential, eps: float) -> float:
    """Analytic lower bound of the (regularized) potential."""
    if pot.family == "regular":
        return 0.0
    # convex part >= (|r| - 1)_+^2 / (2 eps), concave part = -c r^2
    c = pot.c1 if pot.family == "logarithmic" else pot.c2
    a = 1.0 / (2.0 * eps)
    if a <= c:
        return -np.inf
    return -c * a / (a - c)


# -- structural checks ------------------------------------------------------

@dataclass
class CompatibilityReport:
    passed: bool
    domain_ok: bool
    max_excess: float
    Ccc: float
    message: str = ""


def _domain_included(inner: Potential, outer: Potential) -> bool:
    lo_i, hi_i, closed_i = inner.domain
    lo_o, hi_o, closed_o = outer.domain
    if lo_i < lo_o or hi_i > hi_o:
        return False
    if closed_i and not closed_o and (lo_i == lo_o or hi_i == hi_o):
        return False
    return True


def check_compatibility(bulk: Potential, surf: Potential, samples, *,
                        eta: float = 1.0, Ccc: float = 0.0) -> CompatibilityReport:
    """Check D(beta_G) in D(beta) and |beta°| <= eta |beta_G°| + C on samples."""
    domain_ok = _domain_included(surf, bulk)
    if not domain_ok:
        return CompatibilityReport(False, False, np.inf, Ccc,
                                   f"D(beta_G) of {surf.family} not contained in D(beta) of {bulk.family}")
    r = np.asarray(samples, dtype=float)
    excess = np.abs(beta_min_section(bulk, r)) - eta * np.abs(beta_min_section(surf, r))
    worst = float(np.max(excess)) if excess.size else -np.inf
    return CompatibilityReport(worst <= Ccc, True, worst, Ccc)


def check_mean_admissible(m0: float, surf: Potential) -> bool:
    """True iff m0 lies in the interior of D(beta_G)."""
    lo, hi, _ = surf.domain
    return bool(lo < m0 < hi)
