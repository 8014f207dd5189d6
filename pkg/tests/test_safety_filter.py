import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpcbf.barrier import EpsilonFn, gamma, obstacle_chain, psi_chain
from gpcbf.gp import ExactDisturbance
from gpcbf.safety_filter import (
    FilterMode,
    HalfspaceConstraint,
    InputBox,
    build_constraint,
    build_constraint_nominal,
    build_constraint_robust,
    filter_control,
    make_constraint,
    solve_qp,
)
from gpcbf.systems import PointMass, SphereObstacle, TwoLinkArm

from qp_oracle import enumerate_qp, kkt_residual, random_instance

PM = PointMass()
CENTER = np.array([0.5, -0.2])
MU = np.array([0.0, 0.0, 0.3, -0.7])
gp_stub = ExactDisturbance(lambda x: MU)


def pm_chain(lam=0.0, eta_sq=12.68, eps0=1.0):
    return obstacle_chain(PM, SphereObstacle(tuple(CENTER), 0.1), (5.0, 10.0), EpsilonFn(eps0, lam), eta_sq)


def hand_terms(x):
    e, v = x[:2] - CENTER, x[2:]
    h = e @ e - 0.01
    psi1 = 2 * e @ v + 5 * h
    grad = np.r_[2 * v + 10 * e, 2 * e]
    return psi1, grad


X = np.array([0.8, 0.1, -0.4, 0.2])


def test_qp_reference_cases():
    box = InputBox.unbounded(2)
    res = solve_qp([0.3, -0.1], HalfspaceConstraint(np.array([1.0, 1.0]), 0.0), box)
    assert res.optimal and np.array_equal(res.u_star, [0.3, -0.1]) and res.objective == 0.0
    res = solve_qp([0.0, 0.0], HalfspaceConstraint(np.array([1.0, 1.0]), 2.0), box)
    assert np.allclose(res.u_star, [1.0, 1.0]) and res.objective == pytest.approx(2.0)
    assert res.halfspace_active
    res = solve_qp([0.0], HalfspaceConstraint(np.array([1.0]), 5.0), InputBox([-1.0], [1.0]))
    assert res.status == "infeasible" and res.u_star[0] == 1.0


def test_qp_box_becomes_active():
    res = solve_qp([0.0, 0.0], HalfspaceConstraint(np.array([1.0, 1.0]), 2.0), InputBox([-1, -1], [0.5, 5.0]))
    assert res.optimal and np.allclose(res.u_star, [0.5, 1.5])
    assert res.at_upper.tolist() == [True, False]


def test_qp_degenerate_constraints():
    box = InputBox.symmetric(1.0, 2)
    assert solve_qp([3.0, 0.0], HalfspaceConstraint(np.zeros(2), -1.0), box).optimal
    assert not solve_qp([3.0, 0.0], HalfspaceConstraint(np.zeros(2), 1.0), box).optimal
    assert solve_qp([0.0, 0.0], HalfspaceConstraint(np.ones(2), -math.inf), box).optimal
    res = solve_qp([0.0, 0.0], HalfspaceConstraint(np.ones(2), math.inf), box)
    assert not res.optimal and box.contains(res.u_star)
    with pytest.raises(ValueError):
        solve_qp([0.0], HalfspaceConstraint(np.ones(2), 0.0), box)


def test_infeasible_fallback_is_clamped_projection():
    box = InputBox([-1.0, -1.0], [1.0, 1.0])
    res = solve_qp([0.0, 0.5], HalfspaceConstraint(np.array([1.0, 0.0]), 3.0), box)
    assert not res.optimal
    assert np.allclose(res.u_star, [1.0, 0.5])


def test_input_box_validation():
    with pytest.raises(ValueError):
        InputBox([1.0], [0.0])
    with pytest.raises(ValueError):
        InputBox([0.0, 0.0], [1.0])


@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 3, 4]))
def test_qp_matches_enumeration(seed, s):
    rng = np.random.default_rng(seed)
    u_nom, a, b, lo, hi = random_instance(rng, s, infeasible=rng.random() < 0.1)
    res = solve_qp(u_nom, HalfspaceConstraint(a, b), InputBox(lo, hi))
    best, _ = enumerate_qp(u_nom, a, b, lo, hi)
    assert res.optimal == math.isfinite(best)
    assert np.all(res.u_star >= lo) and np.all(res.u_star <= hi)
    if res.optimal:
        assert a @ res.u_star >= b - 1e-9
        assert res.objective == pytest.approx(best, abs=1e-9)
        assert kkt_residual(res, u_nom, a, b, lo, hi) < 1e-8


def test_gp_phocbf_constraint_hand_computed():
    for lam in (0.0, 3.0):
        chain = pm_chain(lam=lam)
        psi1, grad = hand_terms(X)
        g2 = gamma(chain, 2, psi1)
        mult = 1.0 + lam * g2
        eps = math.exp(-lam * psi1)
        c = build_constraint(chain, gp_stub, PM, X)
        assert np.allclose(c.a, mult * 2 * (X[:2] - CENTER), rtol=1e-12)
        drift = np.r_[X[2:], 0.0, 0.0]
        b = mult**2 * grad @ grad / eps - 10 * (psi1 - g2) - mult * grad @ (drift + MU)
        assert c.b == pytest.approx(b, rel=1e-12)


def test_nominal_and_robust_constraints_hand_computed():
    chain = pm_chain()
    psi1, grad = hand_terms(X)
    drift = np.r_[X[2:], 0.0, 0.0]
    nom = build_constraint_nominal(chain, PM, X)
    assert nom.b == pytest.approx(-10 * psi1 - grad @ drift, rel=1e-12)
    assert np.allclose(nom.a, 2 * (X[:2] - CENTER))
    rob = build_constraint_robust(chain, gp_stub, PM, X)
    assert rob.b - nom.b == pytest.approx(np.linalg.norm(grad) * math.sqrt(12.68) - grad @ MU, rel=1e-12)
    gpp = build_constraint(chain, gp_stub, PM, X)
    # term-level difference: 1/eps compensation and psi -> psi* substitution
    assert gpp.b - nom.b == pytest.approx(grad @ grad + 10 * gamma(chain, 2, psi1) - grad @ MU, rel=1e-12)


def test_zero_gradient_constraint():
    chain = pm_chain()
    # at rest on the obstacle center's level set is impossible; use psi chain at the center with zero velocity
    x = np.r_[CENTER, 0.0, 0.0]
    c = build_constraint(chain, gp_stub, PM, x)
    psi = psi_chain(chain, PM, x)
    assert np.array_equal(c.a, np.zeros(2))
    assert c.b == pytest.approx(-10 * (psi[1] - gamma(chain, 2, psi[1])))
    rob = build_constraint_robust(chain, gp_stub, PM, x)
    assert rob.b == pytest.approx(-10 * psi[1])
    assert not solve_qp(np.zeros(2), c, InputBox.unbounded(2)).optimal


def test_compensation_term_monotone_in_eps():
    chain_b = [build_constraint(pm_chain(eps0=e, eta_sq=0.0), gp_stub, PM, X).b for e in (0.1, 0.5, 1.0, 4.0, 1e3)]
    assert all(b1 >= b2 for b1, b2 in zip(chain_b, chain_b[1:]))


def test_mode_consistency_without_uncertainty():
    zero = ExactDisturbance(lambda x: np.zeros(4))
    chain = pm_chain(eps0=1e12, eta_sq=0.0)
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.uniform(-1, 1, 4)
        c1, c2 = build_constraint(chain, zero, PM, x), build_constraint_nominal(chain, PM, x)
        assert np.allclose(c1.a, c2.a, atol=1e-6) and abs(c1.b - c2.b) < 1e-6
        c3 = build_constraint_robust(chain, zero, PM, x)
        assert c3.b == pytest.approx(c2.b, abs=1e-12)


def test_filter_control_respects_box_and_dispatch():
    arm = TwoLinkArm()
    chain = obstacle_chain(arm, SphereObstacle((0.55, -0.29), 0.1), (5.0, 10.0), EpsilonFn(), 12.68)
    box = InputBox.symmetric(5.0, 2)
    rng = np.random.default_rng(7)
    exact = ExactDisturbance(arm.d_true)
    for mode in FilterMode:
        for _ in range(10):
            x = np.r_[rng.uniform(-2, 2, 2), rng.uniform(-1, 1, 2)]
            u, res = filter_control(mode, chain, exact, arm, x, rng.uniform(-20, 20, 2), box)
            assert box.contains(u)
            assert res.constraint.b == pytest.approx(make_constraint(mode, chain, exact, arm, x).b)


def test_far_from_obstacle_leaves_input_alone():
    chain = pm_chain(eps0=1e6, eta_sq=0.0)
    x = np.array([3.5, 2.0, 0.0, 0.0])
    u_nom = np.array([0.2, -0.1])
    c = build_constraint(chain, gp_stub, PM, x)
    assert c.slack(u_nom) > 0
    u, res = filter_control("gp_phocbf", chain, gp_stub, PM, x, u_nom, InputBox.symmetric(1.0, 2))
    assert np.array_equal(u, u_nom) and not res.halfspace_active
