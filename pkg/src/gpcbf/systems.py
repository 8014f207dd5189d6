"""Control-affine plants ``xdot = f(x) + g(x) u + d(x)`` with state ``x = (q, qdot)``.

The disturbance oracle ``d_true`` is matched: it only ever touches velocity
rows, which is what keeps the position-level barrier chain free of ``d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

MAX_COND = 1e12


class SingularInertiaError(np.linalg.LinAlgError):
    pass


class MechanicalSystem:
    """Base for second-order plants; subclasses supply ``accel_terms``."""

    dof: int = 0
    descriptor: str = ""

    @property
    def n(self) -> int:
        return 2 * self.dof

    @property
    def s(self) -> int:
        return self.dof

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[: self.dof], x[self.dof :]

    # drift acceleration and input gain, q'' = a(q, qd) + B(q) u (+ disturbance)
    def accel_terms(self, q, qd):
        raise NotImplementedError

    def disturbance_accel(self, q, qd):
        return np.zeros(self.dof)

    def f(self, x) -> np.ndarray:
        q, qd = self.split(x)
        a, _ = self.accel_terms(q, qd)
        return np.concatenate([qd, a])

    def g(self, x) -> np.ndarray:
        q, qd = self.split(x)
        _, B = self.accel_terms(q, qd)
        return np.vstack([np.zeros((self.dof, self.dof)), B])

    def d_true(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return np.array([self.d_true(row) for row in x])
        q, qd = self.split(x)
        return np.concatenate([np.zeros(self.dof), self.disturbance_accel(q, qd)])

    def drift_vjp(self, x, v, step: float = 1e-6) -> np.ndarray:
        """Row vector ``v^T df/dx``.

        Exact when ``v`` vanishes on the velocity rows (position rows of ``f``
        are just ``qdot``); central differences otherwise.
        """
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        vq, vv = v[: self.dof], v[self.dof :]
        out = np.concatenate([np.zeros(self.dof), vq])
        if np.any(vv != 0.0):
            fa = lambda y: vv @ self.f(y)[self.dof :]
            out = out + fd_gradient(fa, x, step)
        return out

    def kinematics(self, q):
        """End-effector position, Jacobian and per-coordinate Hessians."""
        raise NotImplementedError

    def with_known_disturbance(self) -> "KnownDisturbance":
        return KnownDisturbance(self)


class KnownDisturbance(MechanicalSystem):
    """Same true plant, but the drift a controller sees already contains ``d``."""

    def __init__(self, base: MechanicalSystem):
        self.base = base
        self.dof = base.dof
        self.descriptor = f"{base.descriptor} (disturbance folded into drift)"

    def accel_terms(self, q, qd):
        a, B = self.base.accel_terms(q, qd)
        return a + self.base.disturbance_accel(q, qd), B

    def kinematics(self, q):
        return self.base.kinematics(q)

    def __getattr__(self, name):
        return getattr(self.base, name)


def fd_gradient(fun, x, step: float = 1e-6, floor: float = 1e-3) -> np.ndarray:
    """Central differences with per-coordinate step ``step * max(|x_j|, floor)``."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        hj = step * max(abs(x[j]), floor)
        xp = x.copy()
        xm = x.copy()
        xp[j] += hj
        xm[j] -= hj
        grad[j] = (fun(xp) - fun(xm)) / (2.0 * hj)
    return grad


class PointMass(MechanicalSystem):
    """Planar double integrator ``q'' = u + d(x)``."""

    def __init__(self, disturbance: Optional[Callable] = None, mass: float = 1.0):
        self.dof = 2
        self.mass = float(mass)
        self._dist = disturbance
        self.descriptor = "point mass (2-D double integrator)"

    def accel_terms(self, q, qd):
        return np.zeros(2), np.eye(2) / self.mass

    def disturbance_accel(self, q, qd):
        if self._dist is None:
            return np.zeros(2)
        return np.asarray(self._dist(np.concatenate([q, qd])), dtype=float)

    def kinematics(self, q):
        q = np.asarray(q, dtype=float)
        return q.copy(), np.eye(2), np.zeros((2, 2, 2))

    def inverse_kinematics(self, p):
        return np.asarray(p, dtype=float).copy()


class TwoLinkArm(MechanicalSystem):
    """Planar two-link arm in a vertical plane, point masses at the link tips.

    Angles are measured from the horizontal x axis; gravity acts along -y.
    The true plant is ``M q'' + C qd + G + scale (C qd + G) = u``.
    """

    def __init__(self, m1=1.0, m2=1.0, l1=0.5, l2=0.5, gravity=9.81, disturbance_scale=0.2):
        for name, val in (("m1", m1), ("m2", m2), ("l1", l1), ("l2", l2)):
            if not val > 0:
                raise ValueError(f"{name} must be positive")
        self.dof = 2
        self.m1, self.m2, self.l1, self.l2 = float(m1), float(m2), float(l1), float(l2)
        self.gravity = float(gravity)
        self.disturbance_scale = float(disturbance_scale)
        self.descriptor = "planar two-link arm"

    def mass_matrix(self, q):
        m1, m2, l1, l2 = self.m1, self.m2, self.l1, self.l2
        c2 = math.cos(q[1])
        m12 = m2 * l2**2 + m2 * l1 * l2 * c2
        return np.array(
            [[(m1 + m2) * l1**2 + m2 * l2**2 + 2 * m2 * l1 * l2 * c2, m12], [m12, m2 * l2**2]]
        )

    def coriolis(self, q, qd):
        hs = self.m2 * self.l1 * self.l2 * math.sin(q[1])
        return np.array([[-hs * qd[1], -hs * (qd[0] + qd[1])], [hs * qd[0], 0.0]])

    def gravity_vector(self, q):
        g = self.gravity
        c1, c12 = math.cos(q[0]), math.cos(q[0] + q[1])
        return np.array(
            [(self.m1 + self.m2) * g * self.l1 * c1 + self.m2 * g * self.l2 * c12, self.m2 * g * self.l2 * c12]
        )

    def potential_energy(self, q):
        s1, s12 = math.sin(q[0]), math.sin(q[0] + q[1])
        return self.gravity * (self.m1 * self.l1 * s1 + self.m2 * (self.l1 * s1 + self.l2 * s12))

    def energy(self, x):
        q, qd = self.split(x)
        return 0.5 * qd @ self.mass_matrix(q) @ qd + self.potential_energy(q)

    def _minv(self, q):
        Mq = self.mass_matrix(q)
        if np.linalg.cond(Mq) > MAX_COND:
            raise SingularInertiaError(f"inertia matrix ill-conditioned at q={q}")
        return np.linalg.inv(Mq)

    def accel_terms(self, q, qd):
        Minv = self._minv(q)
        return -Minv @ (self.coriolis(q, qd) @ qd + self.gravity_vector(q)), Minv

    def disturbance_accel(self, q, qd):
        tau = self.disturbance_scale * (self.coriolis(q, qd) @ qd + self.gravity_vector(q))
        return -self._minv(q) @ tau

    def kinematics(self, q):
        return forward_kinematics(self, q) + (self.fk_hessian(q),)

    def fk_hessian(self, q):
        l1, l2 = self.l1, self.l2
        c1, s1 = math.cos(q[0]), math.sin(q[0])
        c12, s12 = math.cos(q[0] + q[1]), math.sin(q[0] + q[1])
        Hx = -np.array([[l1 * c1 + l2 * c12, l2 * c12], [l2 * c12, l2 * c12]])
        Hy = -np.array([[l1 * s1 + l2 * s12, l2 * s12], [l2 * s12, l2 * s12]])
        return np.stack([Hx, Hy])

    def inverse_kinematics(self, p, elbow: int = 1):
        """Joint angles reaching ``p``; ``elbow`` selects the sign of ``q2``."""
        x, y = float(p[0]), float(p[1])
        c2 = (x * x + y * y - self.l1**2 - self.l2**2) / (2 * self.l1 * self.l2)
        if abs(c2) > 1.0:
            raise ValueError(f"point {p} outside the reachable annulus")
        q2 = elbow * math.acos(c2)
        q1 = math.atan2(y, x) - math.atan2(self.l2 * math.sin(q2), self.l1 + self.l2 * math.cos(q2))
        return np.array([q1, q2])


def forward_kinematics(arm: TwoLinkArm, q):
    l1, l2 = arm.l1, arm.l2
    c1, s1 = math.cos(q[0]), math.sin(q[0])
    c12, s12 = math.cos(q[0] + q[1]), math.sin(q[0] + q[1])
    p = np.array([l1 * c1 + l2 * c12, l1 * s1 + l2 * s12])
    J = np.array([[-l1 * s1 - l2 * s12, -l2 * s12], [l1 * c1 + l2 * c12, l2 * c12]])
    return p, J


def dynamics_eval(sys: MechanicalSystem, x, u, include_disturbance: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.size != sys.n or u.size != sys.s:
        raise ValueError(f"expected x in R^{sys.n}, u in R^{sys.s}")
    q, qd = sys.split(x)
    a, B = sys.accel_terms(q, qd)
    acc = a + B @ u
    if include_disturbance:
        acc = acc + sys.disturbance_accel(q, qd)
    return np.concatenate([qd, acc])


def disturbance_true(sys: MechanicalSystem, x) -> np.ndarray:
    return sys.d_true(x)


@dataclass(frozen=True)
class SphereObstacle:
    """Keep-out ball for the end effector: ``h(q) = |p(q) - center|^2 - r^2``."""

    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def h(self, sys: MechanicalSystem, q) -> float:
        p = sys.kinematics(q)[0]
        e = p - np.asarray(self.center)
        return float(e @ e - self.radius**2)

    def h_grad(self, sys: MechanicalSystem, q) -> np.ndarray:
        p, J, _ = sys.kinematics(q)
        return 2.0 * (p - np.asarray(self.center)) @ J

    def h_hess(self, sys: MechanicalSystem, q) -> np.ndarray:
        p, J, H = sys.kinematics(q)
        e = p - np.asarray(self.center)
        return 2.0 * (J.T @ J + np.einsum("k,kij->ij", e, H))

    def state_functions(self, sys: MechanicalSystem):
        """``h``, gradient and Hessian as functions of the full state."""
        k = sys.dof

        def h(x):
            return self.h(sys, np.asarray(x)[:k])

        def grad(x):
            out = np.zeros(2 * k)
            out[:k] = self.h_grad(sys, np.asarray(x)[:k])
            return out

        def hess(x):
            out = np.zeros((2 * k, 2 * k))
            out[:k, :k] = self.h_hess(sys, np.asarray(x)[:k])
            return out

        return h, grad, hess
