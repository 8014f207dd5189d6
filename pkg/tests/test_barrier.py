import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpcbf.barrier import (
    BarrierChain,
    EpsilonFn,
    LinearClassK,
    delta_term,
    dgamma,
    epsilon_condition_check,
    gamma,
    grad_psi_star,
    obstacle_chain,
    psi_chain,
    psi_star_chain,
    shrink,
)
from gpcbf.systems import PointMass, SphereObstacle, TwoLinkArm

PM = PointMass()
ARM = TwoLinkArm()
Q0 = np.array([0.5, -0.2])


def pm_chain(lam=0.0, eta_sq=12.68, shrink_from=0, analytic=True, gains=(5.0, 10.0)):
    if analytic:
        return obstacle_chain(PM, SphereObstacle(tuple(Q0), 0.1), gains, EpsilonFn(1.0, lam), eta_sq, shrink_from)
    h = lambda x: float((x[:2] - Q0) @ (x[:2] - Q0) - 0.01)
    return BarrierChain(h, gains, EpsilonFn(1.0, lam), eta_sq, shrink_from)


def test_linear_class_k():
    a = LinearClassK(5.0)
    assert a(0.0) == 0.0 and a(2.0) == 10.0 and a.inverse(a(0.37)) == pytest.approx(0.37)
    with pytest.raises(ValueError):
        LinearClassK(0.0)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 200), st.floats(0.01, 10))
def test_epsilon_positive_nonincreasing(p1, p2, lam, eps0):
    eps = EpsilonFn(eps0, lam)
    lo, hi = min(p1, p2), max(p1, p2)
    assert eps(hi) >= 0 and eps(lo) > 0
    assert eps(hi) <= eps(lo)
    assert eps.deriv(lo) <= 0


def test_epsilon_validation_and_floor():
    with pytest.raises(ValueError):
        EpsilonFn(0.0)
    with pytest.raises(ValueError):
        EpsilonFn(1.0, 1.0, floor=1.0)
    eps = EpsilonFn(1.0, 100.0, floor=0.25)
    assert eps(0.0) == 1.0 and eps(10.0) == pytest.approx(0.25)
    assert EpsilonFn(1.0, 3.0).deriv(0.2) == pytest.approx(-3.0 * math.exp(-0.6))


def test_chain_validation():
    h = lambda x: 0.0
    with pytest.raises(ValueError):
        BarrierChain(h, ())
    with pytest.raises(ValueError):
        BarrierChain(h, (5.0, -1.0))
    with pytest.raises(ValueError):
        BarrierChain(h, (5.0, 10.0), shrink_from=2)
    with pytest.raises(ValueError):
        BarrierChain(h, (5.0,), eta_bar_sq=-1.0)


def test_point_mass_psi_chain(rng):
    chain = pm_chain()
    for _ in range(20):
        x = rng.uniform(-1, 1, 4)
        e = x[:2] - Q0
        h = e @ e - 0.01
        assert np.allclose(psi_chain(chain, PM, x), [h, 2 * e @ x[2:] + 5 * h], atol=1e-14)
    boundary = np.r_[Q0 + [0.1, 0.0], 0.0, 0.0]
    assert np.allclose(psi_chain(chain, PM, boundary), [0.0, 0.0], atol=1e-15)
    one = BarrierChain(chain.h, (5.0,))
    assert psi_chain(one, PM, boundary).shape == (1,)


def test_finite_difference_chain_matches_analytic(rng):
    ana, num = pm_chain(lam=2.0), pm_chain(lam=2.0, analytic=False)
    for _ in range(10):
        x = rng.uniform(-1, 1, 4)
        a, n = psi_star_chain(ana, PM, x), psi_star_chain(num, PM, x)
        assert np.allclose(a.psi, n.psi, rtol=1e-8, atol=1e-10)
        assert np.allclose(a.grad_psi_star, n.grad_psi_star, rtol=1e-5, atol=1e-7)


def test_third_order_chain_is_recursive(rng):
    chain = pm_chain(analytic=False, gains=(1.0, 2.0, 3.0))
    # the plain point mass has zero drift; a damped variant makes Lf psi_1 nontrivial
    damped = type("Damped", (PointMass,), {"accel_terms": lambda self, q, qd: (-qd, np.eye(2))})()
    x = rng.uniform(-1, 1, 4)
    psi = psi_chain(chain, damped, x)
    e, v = x[:2] - Q0, x[2:]
    h = e @ e - 0.01
    psi1 = 2 * e @ v + h
    # Lf psi1 = 2 v.v + 2 e.(-v) + 2 e.v  along qdd = -qd
    psi2 = 2 * v @ v - 2 * e @ v + 2 * e @ v + 2 * psi1
    assert np.allclose(psi, [h, psi1, psi2], rtol=1e-6, atol=1e-8)


def test_gamma_reference_values():
    chain = pm_chain()
    assert gamma(chain, 2, 0.3) == pytest.approx(0.317, rel=1e-12)
    assert gamma(chain, 1, -4.0) == pytest.approx(0.0634, rel=1e-12)
    assert gamma(pm_chain(lam=100.0), 2, 0.1) == pytest.approx(1.4391777734707698e-05, rel=1e-12)
    assert gamma(pm_chain(eta_sq=0.0), 1, 0.7) == 0.0
    with pytest.raises(ValueError):
        gamma(chain, 3, 0.0)


def test_shrunk_chain_values():
    chain = pm_chain()
    assert np.allclose(shrink(chain, np.array([0.2, 1.0])), [0.2 - 0.0634, 0.683], rtol=1e-12)
    top_only = pm_chain(shrink_from=1)
    out = shrink(top_only, np.array([0.2, 1.0]))
    assert out[0] == 0.2 and out[1] == pytest.approx(0.683)
    assert np.array_equal(shrink(pm_chain(eta_sq=0.0), np.array([0.2, 1.0])), [0.2, 1.0])


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 150), st.floats(0, 40), st.integers(0, 1))
def test_shrink_nonnegative_and_selective(p0, p1, lam, eta_sq, start):
    chain = pm_chain(lam=lam, eta_sq=eta_sq, shrink_from=start)
    psi = np.array([p0, p1])
    out = shrink(chain, psi)
    assert np.all(out <= psi)
    assert np.array_equal(out[:start], psi[:start])


def test_grad_psi_star_multiplier(rng):
    for lam in (0.0, 2.0, 100.0):
        chain = pm_chain(lam=lam)
        for _ in range(10):
            x = rng.uniform(-1, 1, 4)
            pe = psi_star_chain(chain, PM, x)
            mult = 1.0 + lam * gamma(chain, 2, pe.psi[1])
            assert mult >= 1.0
            assert np.allclose(pe.grad_psi_star, mult * pe.grad_psi, rtol=1e-12)
            if lam == 0.0:
                assert np.array_equal(pe.grad_psi_star, pe.grad_psi)
            assert 1.0 - dgamma(chain, 2, pe.psi[1]) == pytest.approx(mult, rel=1e-12)
            assert np.array_equal(grad_psi_star(chain, PM, x), pe.grad_psi_star)


def test_gradient_zero_in_unused_coordinates():
    h = lambda x: float(x[0] ** 2)
    chain = BarrierChain(h, (5.0,))
    g = psi_star_chain(chain, PM, np.array([0.3, 0.7, 0.1, -0.2])).grad_psi_star
    assert g[1] == 0.0 and g[2] == 0.0 and g[3] == 0.0
    assert g[0] == pytest.approx(0.6, rel=1e-8)


def test_delta_term():
    flat = pm_chain()
    assert delta_term(flat, 1, 0.2, 0.05) == 0.0
    steep = pm_chain(lam=10.0)
    assert delta_term(steep, 1, 0.3, 0.1) == pytest.approx(gamma(steep, 2, 0.1) - gamma(steep, 2, 0.3))
    assert delta_term(steep, 1, 0.1, 0.3) == 0.0
    assert delta_term(steep, 1, 0.2, 0.2) == 0.0
    with pytest.raises(ValueError):
        delta_term(steep, 2, 0.0, 0.0)


def test_epsilon_condition_check():
    assert epsilon_condition_check(pm_chain()).ok
    rep = epsilon_condition_check(pm_chain(lam=100.0))
    assert rep.monotone_ok and rep.relaxed_ok and rep.max_slope <= 0
    assert rep.relaxed_limit == pytest.approx(4 * 10.0 / 12.68)
    bad = BarrierChain(lambda x: 0.0, (5.0, 10.0), EpsilonFn(1.0, -2.0), 12.68)
    rep = epsilon_condition_check(bad, np.linspace(0.0, 1.0, 11))
    assert rep.max_slope > rep.relaxed_limit
    assert not rep.monotone_ok and not rep.relaxed_ok


def test_arm_chain_uses_nominal_drift_only(rng):
    chain = obstacle_chain(ARM, SphereObstacle((0.55, -0.29), 0.1), (5.0, 10.0), EpsilonFn(), 12.68)
    x = np.r_[rng.uniform(-2, 2, 2), rng.uniform(-1, 1, 2)]
    p, J, _ = ARM.kinematics(x[:2])
    e = p - np.array([0.55, -0.29])
    h = e @ e - 0.01
    assert np.allclose(psi_chain(chain, ARM, x), [h, 2 * e @ J @ x[2:] + 5 * h], rtol=1e-12)
