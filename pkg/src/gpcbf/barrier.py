"""High-order barrier chains and their parameterized (shrunk) counterparts.

``psi_0 = h`` and ``psi_i = Lf psi_{i-1} + a_i psi_{i-1}``.  The shrunk chain
subtracts ``gamma_{i+1}(psi_i)``, where with linear class-K gains

    gamma_i(psi) = eps(psi) * eta_bar^2 / (4 * a_i * a_{i+1} * ... * a_m).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .systems import fd_gradient

_EXP_CAP = 700.0


@dataclass(frozen=True)
class LinearClassK:
    gain: float

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError(f"class-K gain must be positive, got {self.gain}")

    def __call__(self, s):
        return self.gain * s

    def inverse(self, s):
        return s / self.gain


@dataclass(frozen=True)
class EpsilonFn:
    """``eps(psi) = floor + (eps0 - floor) * exp(-lam * psi)``.

    ``floor = 0`` is the pure exponential family. A positive floor keeps
    ``eps`` bounded away from zero deep inside the safe set, where ``1/eps``
    would otherwise blow up the compensation term.
    """

    eps0: float = 1.0
    lam: float = 0.0
    floor: float = 0.0

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if not 0.0 <= self.floor < self.eps0:
            raise ValueError("floor must lie in [0, eps0)")

    def _decay(self, psi):
        return np.exp(np.minimum(-self.lam * np.asarray(psi, dtype=float), _EXP_CAP))

    def __call__(self, psi):
        val = self.floor + (self.eps0 - self.floor) * self._decay(psi)
        return float(val) if np.ndim(val) == 0 else val

    def deriv(self, psi):
        val = -self.lam * (self.eps0 - self.floor) * self._decay(psi)
        return float(val) if np.ndim(val) == 0 else val


@dataclass(frozen=True, eq=False)
class BarrierChain:
    """Safety function ``h`` of relative degree ``m = len(gains)``.

    ``h_grad``/``h_hess`` give the closed-form chain for ``m <= 2``; without
    them (or for ``m > 2``) the chain falls back to central differences.
    """

    h: Callable[[np.ndarray], float]
    gains: tuple
    eps: EpsilonFn = field(default_factory=EpsilonFn)
    eta_bar_sq: float = 0.0
    shrink_from: int = 0
    h_grad: Optional[Callable] = None
    h_hess: Optional[Callable] = None
    fd_step: float = 1e-6

    def __post_init__(self):
        gains = tuple(float(a) for a in self.gains)
        object.__setattr__(self, "gains", gains)
        if len(gains) < 1:
            raise ValueError("relative degree m must be >= 1")
        for a in gains:
            LinearClassK(a)
        if self.eta_bar_sq < 0:
            raise ValueError("eta_bar_sq must be nonnegative")
        if not 0 <= self.shrink_from < len(gains):
            raise ValueError(f"shrink_from must be in [0, {len(gains) - 1}]")

    @property
    def m(self) -> int:
        return len(self.gains)

    @property
    def alphas(self):
        return [LinearClassK(a) for a in self.gains]

    @property
    def analytic(self) -> bool:
        return self.h_grad is not None and self.h_hess is not None and self.m <= 2


@dataclass(frozen=True)
class PsiEval:
    psi: np.ndarray
    psi_star: np.ndarray
    grad_psi: np.ndarray
    grad_psi_star: np.ndarray
    eps: float


def gamma(chain: BarrierChain, i: int, psi_val):
    if not 1 <= i <= chain.m:
        raise ValueError(f"order index {i} outside 1..{chain.m}")
    denom = 4.0 * math.prod(chain.gains[i - 1 :])
    return chain.eps(psi_val) * chain.eta_bar_sq / denom


def dgamma(chain: BarrierChain, i: int, psi_val):
    """Derivative of ``gamma_i`` w.r.t. its ``psi`` argument (always <= 0 for lam >= 0)."""
    denom = 4.0 * math.prod(chain.gains[i - 1 :])
    return chain.eps.deriv(psi_val) * chain.eta_bar_sq / denom


def _grad_h(chain, x):
    if chain.h_grad is not None:
        return np.asarray(chain.h_grad(x), dtype=float)
    return fd_gradient(chain.h, x, chain.fd_step)


def _psi_functions(chain: BarrierChain, system):
    """Callables ``psi_0..psi_{m-1}`` built by finite-difference Lie derivatives.

    Each nesting level differentiates a function that already carries
    difference noise, so the step widens to ``fd_step ** (1 / (i + 1))``.
    """
    funcs = [lambda x: float(chain.h(x))]
    grads = [lambda x: _grad_h(chain, x)]
    for i in range(1, chain.m):
        prev, gprev, a = funcs[i - 1], grads[i - 1], chain.gains[i - 1]

        def psi_i(x, prev=prev, gprev=gprev, a=a):
            return float(gprev(x) @ system.f(x) + a * prev(x))

        step = chain.fd_step ** (1.0 / (i + 1))
        funcs.append(psi_i)
        grads.append(lambda x, fn=psi_i, step=step: fd_gradient(fn, x, step))
    return funcs, grads


def _psi_and_grad(chain: BarrierChain, system, x):
    x = np.asarray(x, dtype=float)
    if chain.analytic:
        h = float(chain.h(x))
        gh = np.asarray(chain.h_grad(x), dtype=float)
        if chain.m == 1:
            return np.array([h]), gh
        a1 = chain.gains[0]
        fx = system.f(x)
        psi1 = float(gh @ fx + a1 * h)
        grad1 = np.asarray(chain.h_hess(x)) @ fx + system.drift_vjp(x, gh) + a1 * gh
        return np.array([h, psi1]), grad1
    funcs, grads = _psi_functions(chain, system)
    return np.array([fn(x) for fn in funcs]), grads[-1](x)


def psi_chain(chain: BarrierChain, system, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if chain.analytic or chain.m == 1:
        if chain.m == 1:
            return np.array([float(chain.h(x))])
        return _psi_and_grad(chain, system, x)[0]
    funcs, _ = _psi_functions(chain, system)
    return np.array([fn(x) for fn in funcs])


def shrink(chain: BarrierChain, psi: np.ndarray) -> np.ndarray:
    """Apply ``psi*_i = psi_i - gamma_{i+1}(psi_i)`` from ``shrink_from`` upward."""
    out = np.array(psi, dtype=float)
    for i in range(chain.shrink_from, chain.m):
        out[i] = psi[i] - gamma(chain, i + 1, psi[i])
    return out


def psi_star_chain(chain: BarrierChain, system, x) -> PsiEval:
    psi, grad = _psi_and_grad(chain, system, x)
    top = psi[-1]
    mult = 1.0 - dgamma(chain, chain.m, top)
    return PsiEval(
        psi=psi,
        psi_star=shrink(chain, psi),
        grad_psi=grad,
        grad_psi_star=mult * grad,
        eps=chain.eps(top),
    )


def grad_psi_star(chain: BarrierChain, system, x) -> np.ndarray:
    return psi_star_chain(chain, system, x).grad_psi_star


def delta_term(chain: BarrierChain, i: int, psi_prev: float, psi_cur: float) -> float:
    if not 1 <= i <= chain.m - 1:
        raise ValueError(f"order index {i} outside 1..{chain.m - 1}")
    return max(0.0, gamma(chain, i + 1, psi_cur) - gamma(chain, i + 1, psi_prev))


@dataclass(frozen=True)
class EpsilonReport:
    monotone_ok: bool
    relaxed_ok: bool
    max_slope: float
    relaxed_limit: float
    min_value: float

    @property
    def ok(self) -> bool:
        return self.monotone_ok


def epsilon_condition_check(chain: BarrierChain, grid: Optional[Sequence[float]] = None) -> EpsilonReport:
    """Check ``d eps/d psi <= 0`` on a grid, plus the weaker slope limit ``4 a_m / eta_bar^2``."""
    if grid is None:
        grid = np.linspace(-1.0, 5.0, 601)
    grid = np.asarray(grid, dtype=float)
    slopes = np.atleast_1d(chain.eps.deriv(grid))
    values = np.atleast_1d(chain.eps(grid))
    max_slope = float(np.max(slopes))
    limit = math.inf if chain.eta_bar_sq == 0 else 4.0 * chain.gains[-1] / chain.eta_bar_sq
    return EpsilonReport(
        monotone_ok=max_slope <= 0.0,
        relaxed_ok=max_slope <= limit,
        max_slope=max_slope,
        relaxed_limit=limit,
        min_value=float(np.min(values)),
    )


def obstacle_chain(system, obstacle, gains, eps=None, eta_bar_sq=0.0, shrink_from=0) -> BarrierChain:
    """Chain for a position-level keep-out constraint on a mechanical plant."""
    h, grad, hess = obstacle.state_functions(system)
    return BarrierChain(
        h=h,
        gains=tuple(gains),
        eps=eps if eps is not None else EpsilonFn(),
        eta_bar_sq=eta_bar_sq,
        shrink_from=shrink_from,
        h_grad=grad,
        h_hess=hess,
    )
