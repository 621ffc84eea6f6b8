"""Tests for the homoclinic parameterizations of the pendula."""

import numpy as np
import pytest

from app.exceptions.custom_exceptions import HomoclinicError
from app.services import expr as ex
from app.services.fixtures import standard_config
from app.services.hamiltonian import Pendulum, build_model
from app.services.separatrix import (
    StandardHomoclinic,
    model_homoclinics,
    numeric_homoclinic,
    product_separatrix,
    standard_separatrix,
)

TAU = np.linspace(-20.0, 20.0, 2001)


def make_pendulum(text: str) -> Pendulum:
    V = ex.parse(text)
    curvature = ex.evaluate(ex.diff(ex.diff(V, "q1"), "q1"), {"q1": 0.0})
    return Pendulum(V=V, sign=1, alpha=float(np.sqrt(max(-curvature, 0.0))), variable="q1")


def test_standard_separatrix_values():
    """Closed form at the symmetry point, at tau = 1 and far away."""
    p, q = standard_separatrix(0.0)
    assert p == pytest.approx(2.0)
    assert q == pytest.approx(np.pi)
    p, _ = standard_separatrix(1.0)
    assert p == pytest.approx(1.29853, abs=1e-5)
    p, q = standard_separatrix(60.0)
    assert p == pytest.approx(0.0, abs=1e-20)
    assert q == pytest.approx(2 * np.pi)


def test_standard_energy_identity():
    """p^2/2 + cos q - 1 vanishes along the analytic separatrix."""
    p, q = standard_separatrix(TAU)
    assert np.max(np.abs(0.5 * p**2 + np.cos(q) - 1.0)) <= 1e-12


def test_standard_time_symmetry():
    """p*(-tau) = p*(tau) and q*(-tau) = 2 pi - q*(tau)."""
    p_plus, q_plus = standard_separatrix(TAU)
    p_minus, q_minus = standard_separatrix(-TAU)
    np.testing.assert_allclose(p_minus, p_plus, atol=1e-9)
    np.testing.assert_allclose(q_minus, 2 * np.pi - q_plus, atol=1e-9)


def test_standard_decay_rate():
    """log|p*| + tau stays bounded on [5, 20]."""
    tau = np.linspace(5.0, 20.0, 200)
    p, _ = standard_separatrix(tau)
    drift = np.log(np.abs(p)) + tau
    assert np.ptp(drift) < 0.01
    assert drift[-1] == pytest.approx(np.log(4.0), abs=1e-9)


def test_lower_branch_reflects():
    """The lower branch negates p and reflects q."""
    p, q = standard_separatrix(TAU, branch=1)
    pm, qm = StandardHomoclinic(branch=-1)(TAU)
    np.testing.assert_allclose(pm, -p)
    np.testing.assert_allclose(qm, -q)


def test_numeric_matches_analytic():
    """Shooting the standard pendulum reproduces the closed form."""
    hom = numeric_homoclinic(make_pendulum("cos(q1) - 1"))
    assert hom.alpha == pytest.approx(1.0)
    assert hom.q_plus == pytest.approx(2 * np.pi, abs=1e-10)
    tau = np.linspace(-15.0, 15.0, 601)
    p, q = hom(tau)
    p0, q0 = standard_separatrix(tau)
    np.testing.assert_allclose(p, p0, atol=1e-8)
    np.testing.assert_allclose(q, q0, atol=1e-8)


def test_numeric_energy_identity():
    """Energy identity of a shot orbit for a non-standard potential."""
    pendulum = make_pendulum("cos(q1) - 1 + 0.2*sin(q1)^2")
    hom = numeric_homoclinic(pendulum)
    defect = hom.energy_defect(pendulum._V, np.linspace(-20.0, 20.0, 801))
    assert np.max(np.abs(defect)) <= 1e-9


def test_scaled_potential_doubles_rate():
    """V = 4(cos q - 1) has Lyapunov exponent 2."""
    hom = numeric_homoclinic(make_pendulum("4*cos(q1) - 4"))
    assert hom.alpha == pytest.approx(2.0)
    p, q = hom(0.0)
    assert p == pytest.approx(4.0, abs=1e-8)
    assert q == pytest.approx(np.pi, abs=1e-8)


def test_numeric_lower_branch():
    """Branch -1 of a shot orbit mirrors branch +1."""
    pendulum = make_pendulum("cos(q1) - 1")
    up = numeric_homoclinic(pendulum, branch=1)
    down = numeric_homoclinic(pendulum, branch=-1)
    tau = np.linspace(-10.0, 10.0, 101)
    np.testing.assert_allclose(down(tau)[0], -up(tau)[0], atol=1e-8)
    np.testing.assert_allclose(down(tau)[1], -up(tau)[1], atol=1e-8)


def test_degenerate_saddle():
    """A flat maximum is not a hyperbolic saddle."""
    with pytest.raises(HomoclinicError):
        numeric_homoclinic(make_pendulum("-q1^4"))


def test_no_return_to_level():
    """A potential that never comes back to V(0) has no homoclinic orbit."""
    with pytest.raises(HomoclinicError):
        numeric_homoclinic(make_pendulum("-q1^2"))


def test_product_separatrix_independent_origins():
    """Each pendulum carries its own time origin."""
    config = standard_config()
    config["pendulum"].append({"V": "cos(q2) - 1", "sign": "+"})
    m = build_model(config)
    p, q = product_separatrix(m, [0.0, 5.0])
    assert p[0] == pytest.approx(2.0)
    assert q[0] == pytest.approx(np.pi)
    p5, q5 = standard_separatrix(5.0)
    assert p[1] == pytest.approx(p5)
    assert q[1] == pytest.approx(q5)
    p, q = product_separatrix(m, [80.0, 80.0])
    np.testing.assert_allclose(p, 0.0, atol=1e-30)


def test_model_homoclinics_cached(model):
    """Homoclinics are built once per branch."""
    first = model_homoclinics(model)
    assert model_homoclinics(model) is first
    assert isinstance(first[0], StandardHomoclinic)
