"""Halfspace constraints on the input and the box-constrained projection QP.

Every filter reduces to ``min |u - u_nom|^2  s.t.  a.u >= b,  lo <= u <= hi``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .barrier import BarrierChain, PsiEval, psi_star_chain

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9


class FilterMode(str, enum.Enum):
    GP_PHOCBF = "gp_phocbf"
    NOMINAL_HOCBF = "nominal_hocbf"
    ROBUST_GP_HOCBF = "robust_gp_hocbf"


@dataclass(frozen=True, eq=False)
class HalfspaceConstraint:
    """``a . u >= b``; ``psi`` carries the chain evaluation it was built from."""

    a: np.ndarray
    b: float
    psi: Optional[PsiEval] = field(default=None, repr=False)

    def slack(self, u) -> float:
        return float(self.a @ np.asarray(u, dtype=float) - self.b)


@dataclass(frozen=True)
class InputBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have equal length")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, limit, s: int) -> "InputBox":
        lim = np.broadcast_to(np.asarray(limit, dtype=float), (s,))
        return cls(-lim, lim)

    @classmethod
    def unbounded(cls, s: int) -> "InputBox":
        return cls(np.full(s, -np.inf), np.full(s, np.inf))

    def clip(self, u) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)

    def contains(self, u, tol: float = 0.0) -> bool:
        return bool(np.all(u >= self.lower - tol) and np.all(u <= self.upper + tol))


@dataclass(frozen=True)
class QPResult:
    u_star: np.ndarray
    status: str
    objective: float
    multiplier: float
    halfspace_active: bool
    at_lower: np.ndarray
    at_upper: np.ndarray
    constraint: Optional[HalfspaceConstraint] = field(default=None, repr=False, compare=False)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _result(u, u_nom, box, status, nu, c):
    diff = u - u_nom
    return QPResult(
        u_star=u,
        status=status,
        objective=float(diff @ diff),
        multiplier=2.0 * nu,
        halfspace_active=bool(nu > 0) or (status == "optimal" and abs(c.a @ u - c.b) <= FEAS_TOL),
        at_lower=u <= box.lower,
        at_upper=u >= box.upper,
        constraint=c,
    )


def solve_qp(u_nom, c: HalfspaceConstraint, box: InputBox) -> QPResult:
    """Exact minimizer by sweeping the multiplier of the halfspace.

    Stationarity gives ``u(nu) = clip(u_nom + nu a)``; ``a . u(nu)`` is
    nondecreasing and piecewise linear in ``nu``, with kinks where coordinates
    enter or leave the box. Walking the kinks in order locates the active set.
    """
    u_nom = np.asarray(u_nom, dtype=float).ravel()
    a = np.asarray(c.a, dtype=float).ravel()
    lo, hi = box.lower, box.upper
    if not (u_nom.size == a.size == lo.size):
        raise ValueError("dimension mismatch between u_nom, constraint and box")

    u0 = np.clip(u_nom, lo, hi)
    if not math.isfinite(c.b) or not np.all(np.isfinite(a)):
        if c.b == -math.inf:
            return _result(u0, u_nom, box, "optimal", 0.0, c)
        return _infeasible(u_nom, c, box)
    if a @ u0 >= c.b:
        return _result(u0, u_nom, box, "optimal", 0.0, c)

    sup = float(np.sum(a[a > 0] * hi[a > 0]) + np.sum(a[a < 0] * lo[a < 0]))
    if sup < c.b - FEAS_TOL * max(1.0, abs(c.b)):
        return _infeasible(u_nom, c, box)

    nz = a != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = np.where(nz, (lo - u_nom) / a, np.inf)
        t_hi = np.where(nz, (hi - u_nom) / a, np.inf)
    kinks = np.concatenate([np.minimum(t_lo, t_hi), np.maximum(t_lo, t_hi)])
    kinks = np.unique(kinks[np.isfinite(kinks) & (kinks > 0)])

    phi = lambda nu: float(a @ np.clip(u_nom + nu * a, lo, hi))
    prev, phi_prev = 0.0, float(a @ u0)
    nu_star = None
    for k in kinks:
        phi_k = phi(k)
        if phi_k >= c.b:
            nu_star = prev + (c.b - phi_prev) * (k - prev) / (phi_k - phi_prev)
            break
        prev, phi_prev = k, phi_k
    if nu_star is None:
        # past the last kink only coordinates with an infinite bound still move
        free = nz & np.where(a > 0, np.isinf(hi), np.isinf(lo))
        slope = float(np.sum(a[free] ** 2))
        if slope <= 0.0:
            if phi_prev >= c.b - FEAS_TOL * max(1.0, abs(c.b)):
                u = np.clip(u_nom + prev * a, lo, hi)
                return _result(u, u_nom, box, "optimal", prev, c)
            return _infeasible(u_nom, c, box)
        nu_star = prev + (c.b - phi_prev) / slope
    u = np.clip(u_nom + nu_star * a, lo, hi)
    return _result(u, u_nom, box, "optimal", nu_star, c)


def _infeasible(u_nom, c, box):
    """Box-clamped projection onto the hyperplane ``a . u = b``."""
    a = np.asarray(c.a, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        nrm2 = float(a @ a)
    u = u_nom
    if 0 < nrm2 < math.inf and math.isfinite(c.b) and np.all(np.isfinite(a)):
        with np.errstate(over="ignore", invalid="ignore"):
            proj = u_nom + (c.b - a @ u_nom) / nrm2 * a
        if np.all(np.isfinite(proj)):
            u = proj
    u = box.clip(u)
    return _result(u, u_nom, box, "infeasible", 0.0, c)


def _lie_terms(system, x, grad):
    return grad @ system.g(x), float(grad @ system.f(x))


def build_constraint(chain: BarrierChain, gp, system, x) -> HalfspaceConstraint:
    """Admissible-input halfspace of the shrunk chain with GP mean compensation."""
    x = np.asarray(x, dtype=float)
    pe = psi_star_chain(chain, system, x)
    gs = pe.grad_psi_star
    a, lf = _lie_terms(system, x, gs)
    mu = gp.mean(x) if gp is not None else np.zeros(x.size)
    # eps can underflow deep inside the safe set; +inf makes the step infeasible
    with np.errstate(divide="ignore", over="ignore"):
        comp = float(np.divide(gs @ gs, pe.eps)) if gs @ gs > 0 else 0.0
    b = comp - chain.gains[-1] * pe.psi_star[-1] - lf - float(gs @ mu)
    return HalfspaceConstraint(a, b, pe)


def build_constraint_nominal(chain: BarrierChain, system, x) -> HalfspaceConstraint:
    """Plain HOCBF condition on the known model; the disturbance is ignored."""
    x = np.asarray(x, dtype=float)
    pe = psi_star_chain(chain, system, x)
    gp_ = pe.grad_psi
    a, lf = _lie_terms(system, x, gp_)
    b = -chain.gains[-1] * pe.psi[-1] - lf
    return HalfspaceConstraint(a, b, pe)


def build_constraint_robust(chain: BarrierChain, gp, system, x) -> HalfspaceConstraint:
    """Full-compensation baseline: unshrunk chain, GP mean, plus ``|grad psi| eta_bar``.

    A reconstruction of the usual robust-CBF-with-GP recipe, not a port of
    any particular published controller.
    """
    x = np.asarray(x, dtype=float)
    pe = psi_star_chain(chain, system, x)
    gp_ = pe.grad_psi
    a, lf = _lie_terms(system, x, gp_)
    mu = gp.mean(x) if gp is not None else np.zeros(x.size)
    eta_bar = math.sqrt(chain.eta_bar_sq)
    b = float(np.linalg.norm(gp_)) * eta_bar - chain.gains[-1] * pe.psi[-1] - lf - float(gp_ @ mu)
    return HalfspaceConstraint(a, b, pe)


def make_constraint(mode, chain, gp, system, x) -> HalfspaceConstraint:
    mode = FilterMode(mode)
    if mode is FilterMode.GP_PHOCBF:
        return build_constraint(chain, gp, system, x)
    if mode is FilterMode.NOMINAL_HOCBF:
        return build_constraint_nominal(chain, system, x)
    return build_constraint_robust(chain, gp, system, x)


def filter_control(mode, chain, gp, system, x, u_nom, box: InputBox):
    """Project ``u_nom`` onto the mode's admissible set; returns ``(u, QPResult)``."""
    c = make_constraint(mode, chain, gp, system, x)
    res = solve_qp(u_nom, c, box)
    if not res.optimal:
        logger.debug("QP infeasible at x=%s (b=%.4g)", x, c.b)
    return res.u_star, res
