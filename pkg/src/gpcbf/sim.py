"""Fixed-step closed-loop rollouts with a zero-order-hold safety filter."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .barrier import BarrierChain, delta_term, psi_chain
from .gp import Dataset, GPModel, error_bound_pointwise, latin_hypercube
from .safety_filter import FilterMode, InputBox, filter_control
from .systems import MechanicalSystem, dynamics_eval

logger = logging.getLogger(__name__)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class UnsafeInitialState(ValueError):
    pass


class SimulationAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class CircleReference:
    """End-effector circle ``c + R (cos(w t + phase), sin(w t + phase))`` mapped to joints."""

    center: tuple
    radius: float
    period: float = 8.0
    phase: float = 0.0
    elbow: int = 1

    def point(self, t):
        w = 2 * math.pi / self.period
        th = w * t + self.phase
        c = np.asarray(self.center, dtype=float)
        p = c + self.radius * np.array([math.cos(th), math.sin(th)])
        v = self.radius * w * np.array([-math.sin(th), math.cos(th)])
        return p, v

    def __call__(self, system, t):
        p, v = self.point(t)
        if hasattr(system, "l1"):
            q = system.inverse_kinematics(p, self.elbow)
        else:
            q = system.inverse_kinematics(p)
        J = system.kinematics(q)[1]
        return q, np.linalg.solve(J, v)


@dataclass(frozen=True)
class WaypointReference:
    """Piecewise-linear joint-space reference; held at the last waypoint."""

    times: tuple
    points: tuple

    def __call__(self, system, t):
        times = np.asarray(self.times, dtype=float)
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if t >= times[-1]:
            return pts[-1].copy(), np.zeros(pts.shape[1])
        k = max(int(np.searchsorted(times, t, side="right")) - 1, 0)
        span = times[k + 1] - times[k]
        slope = (pts[k + 1] - pts[k]) / span
        return pts[k] + slope * (t - times[k]), slope


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.001
    T: float = 10.0
    integrator: str = "rk4"
    seed: int = 0
    mode: FilterMode = FilterMode.GP_PHOCBF
    reference: object = None
    Kp: float = 30.0
    Kd: float = 15.0
    pd_sign: str = "stabilizing"
    gravity_feedforward: bool = False
    x0: Optional[tuple] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < self.dt:
            raise ValueError("horizon T must be at least dt")
        if self.integrator not in ("rk4", "euler"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.pd_sign not in ("stabilizing", "literal"):
            raise ValueError(f"unknown pd_sign {self.pd_sign!r}")
        object.__setattr__(self, "mode", FilterMode(self.mode))

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass(frozen=True)
class TrainingConfig:
    M: int = 400
    lower: tuple = ()
    upper: tuple = ()
    sigma_v: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("M must be nonnegative")
        if len(self.lower) != len(self.upper):
            raise ValueError("sampling box bounds differ in length")
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError("sampling box is empty")
        if self.sigma_v < 0:
            raise ValueError("sigma_v must be nonnegative")


def collect_training_data(system: MechanicalSystem, cfg: TrainingConfig) -> Dataset:
    """Latin-hypercube states over the box, targets ``d_true(x) + U[-sigma_v, sigma_v]``."""
    rng = np.random.default_rng(cfg.seed)
    X = latin_hypercube(cfg.lower, cfg.upper, cfg.M, rng)
    if cfg.M == 0:
        return Dataset.empty(system.n, system.n, cfg.sigma_v)
    Y = system.d_true(X)
    noise = rng.uniform(-cfg.sigma_v, cfg.sigma_v, size=Y.shape)
    return Dataset(X, Y + noise, cfg.sigma_v)


def pd_nominal(x, ref_q, ref_qd, Kp=30.0, Kd=15.0, sign: str = "stabilizing") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    k = x.size // 2
    q, qd = x[:k], x[k:]
    u = Kp * (np.asarray(ref_q) - q) + Kd * (np.asarray(ref_qd) - qd)
    return u if sign == "stabilizing" else -u


def integrate_step(system, x, u, dt, method="rk4", include_disturbance=True) -> np.ndarray:
    """One step of the plant with ``u`` held constant over ``dt``."""
    def f(y):
        if not np.all(np.isfinite(y)):
            raise SimulationAbort(f"non-finite intermediate state from x={x}")
        return dynamics_eval(system, y, u, include_disturbance)

    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(u)):
        raise SimulationAbort(f"non-finite input u={u}")
    if method == "euler":
        x_next = x + dt * f(x)
    elif method == "rk4":
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x_next = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    else:
        raise ValueError(f"unknown integrator {method!r}")
    if not np.all(np.isfinite(x_next)):
        raise SimulationAbort(f"non-finite state after step from x={x}")
    return x_next


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    u_nom: np.ndarray
    h: np.ndarray
    psi: np.ndarray
    psi_star: np.ndarray
    slack: np.ndarray
    qp_status: np.ndarray
    eta: np.ndarray
    q_ref: np.ndarray
    eq11_residual: np.ndarray
    saturated: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def min_h(self) -> float:
        return float(np.min(self.h))

    @property
    def infeasible_steps(self) -> int:
        return int(np.sum(self.qp_status != 0))

    @property
    def saturated_steps(self) -> int:
        return int(np.sum(self.saturated))

    @property
    def tracking_error_integral(self) -> float:
        k = self.q_ref.shape[1]
        err = np.linalg.norm(self.x[:, :k] - self.q_ref, axis=1)
        return float(_trapezoid(err, self.t))

    def summary(self) -> dict:
        return {
            "min_h": self.min_h,
            "min_psi": [float(v) for v in self.psi.min(axis=0)],
            "tracking_error_integral": self.tracking_error_integral,
            "infeasible_steps": self.infeasible_steps,
            "saturated_steps": self.saturated_steps,
            "max_abs_u": [float(v) for v in np.abs(self.u).max(axis=0)],
        }

    def header(self) -> list:
        n, s, m = self.x.shape[1], self.u.shape[1], self.psi.shape[1]
        return (
            ["t"]
            + [f"x_{i + 1}" for i in range(n)]
            + [f"u_{i + 1}" for i in range(s)]
            + [f"u_nom_{i + 1}" for i in range(s)]
            + ["h"]
            + [f"psi_{i}" for i in range(m)]
            + [f"psi_star_{i}" for i in range(m)]
            + ["slack", "qp_status", "eta"]
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for k in range(self.t.size):
                row = (
                    [self.t[k]]
                    + list(self.x[k])
                    + list(self.u[k])
                    + list(self.u_nom[k])
                    + [self.h[k]]
                    + list(self.psi[k])
                    + list(self.psi_star[k])
                    + [self.slack[k]]
                )
                w.writerow([repr(float(v)) for v in row] + [int(self.qp_status[k]), repr(float(self.eta[k]))])


def _eta(gp, x):
    if isinstance(gp, GPModel) and np.all(gp.beta > 0):
        return error_bound_pointwise(gp, x)
    return math.nan


def _nominal_input(system, cfg: SimConfig, x, t):
    q_ref, qd_ref = cfg.reference(system, t)
    u = pd_nominal(x, q_ref, qd_ref, cfg.Kp, cfg.Kd, cfg.pd_sign)
    if cfg.gravity_feedforward and hasattr(system, "gravity_vector"):
        u = u + system.gravity_vector(np.asarray(x)[: system.dof])
    return u, q_ref


def initial_state(system, cfg: SimConfig) -> np.ndarray:
    if cfg.x0 is not None:
        return np.asarray(cfg.x0, dtype=float)
    q0, _ = cfg.reference(system, 0.0)
    return np.concatenate([q0, np.zeros(system.dof)])


def _chain_residual(chain, rec, k, dt):
    """``dpsi*_{i-1}/dt + a_i psi*_{i-1} + Delta_i - psi*_i`` between samples k-1 and k.

    The backward difference is centred on the half step, so the other terms
    are averaged over both samples; this removes the O(dt) lag of pairing
    the difference with the end-of-step values alone.
    """
    psi, ps = rec["psi"], rec["psi_star"]
    out = np.empty(chain.m - 1)
    for i in range(1, chain.m):
        terms = [
            chain.gains[i - 1] * ps[j, i - 1] + delta_term(chain, i, psi[j, i - 1], psi[j, i]) - ps[j, i]
            for j in (k - 1, k)
        ]
        out[i - 1] = (ps[k, i - 1] - ps[k - 1, i - 1]) / dt + 0.5 * (terms[0] + terms[1])
    return out


def run_experiment(system, chain: BarrierChain, gp, cfg: SimConfig, box: InputBox, x0=None) -> Trajectory:
    """Closed loop: nominal PD, mode-specific halfspace, exact QP, ZOH, true plant."""
    if cfg.reference is None:
        raise ValueError("SimConfig.reference is required")
    x = initial_state(system, cfg) if x0 is None else np.asarray(x0, dtype=float)
    psi0 = psi_chain(chain, system, x)
    if np.any(psi0 < 0):
        raise UnsafeInitialState(f"x(0) outside C_1..C_m: psi = {psi0}")

    N = cfg.steps
    n, s, m = system.n, system.s, chain.m
    rec = {
        "t": np.arange(N + 1) * cfg.dt,
        "x": np.empty((N + 1, n)),
        "u": np.empty((N + 1, s)),
        "u_nom": np.empty((N + 1, s)),
        "h": np.empty(N + 1),
        "psi": np.empty((N + 1, m)),
        "psi_star": np.empty((N + 1, m)),
        "slack": np.empty(N + 1),
        "qp_status": np.zeros(N + 1, dtype=int),
        "eta": np.empty(N + 1),
        "q_ref": np.empty((N + 1, system.dof)),
        "eq11_residual": np.full((N + 1, max(m - 1, 0)), np.nan),
        "saturated": np.zeros(N + 1, dtype=bool),
    }
    for k in range(N + 1):
        t = rec["t"][k]
        u_nom, q_ref = _nominal_input(system, cfg, x, t)
        u, res = filter_control(cfg.mode, chain, gp, system, x, u_nom, box)
        pe = res.constraint.psi
        rec["x"][k] = x
        rec["u"][k] = u
        rec["u_nom"][k] = u_nom
        rec["h"][k] = pe.psi[0]
        rec["psi"][k] = pe.psi
        rec["psi_star"][k] = pe.psi_star
        rec["slack"][k] = res.constraint.slack(u)
        rec["qp_status"][k] = 0 if res.optimal else 1
        rec["eta"][k] = _eta(gp, x)
        rec["q_ref"][k] = q_ref
        rec["saturated"][k] = bool(np.any(res.at_lower | res.at_upper))
        if k > 0:
            rec["eq11_residual"][k] = _chain_residual(chain, rec, k, cfg.dt)
        if not res.optimal:
            logger.debug("t=%.3f: QP infeasible, using clamped projection", t)
        if k < N:
            x = integrate_step(system, x, u, cfg.dt, cfg.integrator, include_disturbance=True)
    traj = Trajectory(**rec)
    if traj.infeasible_steps:
        logger.info("%d of %d steps used the infeasible fallback", traj.infeasible_steps, N + 1)
    traj.meta = {"mode": cfg.mode.value, "dt": cfg.dt, "T": cfg.T}
    return traj
