"""Tests for the Poisson algebra, the homological solver and the resonant normal forms."""

import numpy as np
import pytest

from app.exceptions.custom_exceptions import HypothesisError, RegionError
from app.services import expr as ex
from app.services.averaging import (
    TrigPolyField,
    average_to_order,
    averaged_coefficients_grid,
    bump,
    chart_coordinates,
    expr_bracket,
    first_integral,
    lie_step,
    inner_graded,
    normalize,
    resonant_keep,
    poisson_bracket,
    resonant_normal_form,
    solve_homological,
    symbolic_generator,
    zero_mode,
)
from app.services.fixtures import standard_model
from app.services.resonance import build_web


def mode_field(d, k, l, c=1.0, s=0.0):
    return TrigPolyField(d, {(tuple(k), l): (ex.as_expr(c), ex.as_expr(s))})


def random_points(rng, count=20):
    I = rng.uniform(0.2, 1.8, size=(count, 2))
    phi = rng.uniform(0.0, 2 * np.pi, size=(count, 2))
    s = rng.uniform(0.0, 2 * np.pi, size=count)
    return zip(I, phi, s)


def test_bracket_with_integrable_part(model, rng):
    """{h, cos(k.phi + l s)} = (omega.k) sin and {h + I0, .} adds l."""
    k, l = (1, 1), -1
    cosine = mode_field(2, k, l)
    h = TrigPolyField.constant(2, model.h)
    h_tilde = TrigPolyField.constant(2, model.h, clock=1.0)
    for I, phi, s in random_points(rng):
        theta = np.dot(k, phi) + l * s
        omega_k = float(model.frequency(I) @ k)
        assert poisson_bracket(h, cosine).evaluate(I, phi, s) == pytest.approx(omega_k * np.sin(theta), abs=1e-12)
        nu = omega_k + l
        assert poisson_bracket(h_tilde, cosine).evaluate(I, phi, s) == pytest.approx(nu * np.sin(theta), abs=1e-12)


def test_bracket_antisymmetry(model, rng):
    """{A, A} = 0 and {A, B} = -{B, A}."""
    A = TrigPolyField.from_terms(model.inner_terms(), 2) + TrigPolyField.constant(2, model.h)
    B = mode_field(2, (2, -1), 1, c=ex.parse("I1*I2"), s=ex.parse("exp(I1)"))
    AA = poisson_bracket(A, A)
    AB = poisson_bracket(A, B)
    BA = poisson_bracket(B, A)
    for I, phi, s in random_points(rng):
        assert AA.evaluate(I, phi, s) == pytest.approx(0.0, abs=1e-12)
        assert AB.evaluate(I, phi, s) == pytest.approx(-BA.evaluate(I, phi, s), abs=1e-12)


def test_canonical_pair_ordering():
    """{phi1, I1} = 1 and {I1, sin(phi1)} = -cos(phi1)."""
    assert ex.evaluate(expr_bracket(ex.var("phi1"), ex.var("I1"), 1), {}) == 1.0
    action = TrigPolyField.constant(1, ex.var("I1"))
    sine = mode_field(1, (1,), 0, c=0.0, s=1.0)
    bracket = poisson_bracket(action, sine)
    for phi in (0.0, 0.4, 2.5):
        assert bracket.evaluate([0.7], [phi]) == pytest.approx(-np.cos(phi))


def test_expr_bracket_matches_field_bracket(model, rng):
    """The expression bracket agrees with the trigonometric-polynomial bracket."""
    A = TrigPolyField.from_terms(model.inner_terms(), 2)
    B = mode_field(2, (1, 0), 0, s=ex.parse("I1^2"))
    direct = ex.compile_expr(expr_bracket(A.to_expr(), B.to_expr(), 2), ["I1", "I2", "phi1", "phi2", "t", "I0"])
    field = poisson_bracket(A, B)
    for I, phi, s in random_points(rng, 10):
        assert field.evaluate(I, phi, s) == pytest.approx(float(direct(*I, *phi, s, 0.0)), abs=1e-12)


def test_homological_single_rotator(rotator_model):
    """h = I^2/2, K = cos(phi): G = sin(phi)/I and K_bar = 0 off resonance."""
    K = TrigPolyField.from_terms(rotator_model.inner_terms(), 1)
    K_bar, G = symbolic_generator(K, rotator_model)
    assert K_bar.support() == set()
    coeffs = G.coefficients_at(np.array([[2.0]]))
    np.testing.assert_allclose(coeffs[((1,), 0)][:, 0], [0.0, 0.5])
    h_tilde = TrigPolyField.constant(1, rotator_model.h, clock=1.0)
    residual = K + poisson_bracket(h_tilde, G) - K_bar
    for phi in np.linspace(0.0, 2 * np.pi, 7):
        assert residual.evaluate([2.0], [phi]) == pytest.approx(0.0, abs=1e-14)


def test_homological_solver_cases(rotator_model):
    """Pointwise solver: off-resonance away from R(1|0), plateau on it."""
    K = TrigPolyField.from_terms(rotator_model.inner_terms(), 1)
    solver = solve_homological(K, rotator_model, L=0.5, web=build_web(rotator_model, 2))
    away = solver.at([2.0])
    assert away.cases[((1,), 0)] == "off"
    np.testing.assert_allclose(away.averaged[((1,), 0)], [0.0, 0.0])
    np.testing.assert_allclose(away.generator[((1,), 0)], [0.0, 0.5])
    assert away.residual() <= 1e-12

    on = solver.at([0.0])
    assert on.cases[((1,), 0)] == "on-k"
    np.testing.assert_allclose(on.averaged[((1,), 0)], [1.0, 0.0])
    assert on.residual() <= 1e-12
    assert on.residual(phi=[0.3]) <= 1e-12

    constant = solve_homological(TrigPolyField.constant(1, 2.0), rotator_model, L=0.5).at([1.0])
    assert constant.cases[zero_mode(1)] == "mean"
    assert constant.generator == {}


def test_one_step_cancels_non_resonant_modes(model, rng):
    """After one non-resonant step the order-eps angle modes vanish."""
    norm = normalize(model, 1)
    first = norm.graded[1]
    points = rng.uniform(-0.5, 2.0, size=(100, 2))
    coeffs = first.coefficients_at(points)
    for mode, values in coeffs.items():
        if mode != zero_mode(2):
            assert np.max(np.abs(values)) <= 1e-12
    assert set(norm.generators[1].support()) == {((1, 0), 0), ((0, 1), 0), ((1, 1), -1)}


def test_lie_step_with_zero_generator(model):
    graded = inner_graded(model, 3)
    assert lie_step(graded, TrigPolyField.zero(2), 1, 3) == graded


def test_trivial_perturbation_is_fixed(zero_model):
    """Averaging a model without perturbation changes nothing."""
    norm = normalize(zero_model, 2)
    for j in (1, 2, 3):
        assert norm.graded.get(j, TrigPolyField.zero(2)).support() == set()
    assert norm.generators[1].is_zero()


def test_averaged_potential_at_resonances():
    """Near I2 = 0 the order-one potential is a2 cos(phi2); near I1 = 0 it is a1 cos(phi1)."""
    m = standard_model(a=(0.7, 1.3, 1.0))
    averaged = average_to_order(m, 1, L=0.02, delta=0.05)
    at = averaged.at([1.9, 0.0])
    assert at.region == "resonant"
    assert at.resonance == "R(0,1|0)"
    assert at.resonant == [(1, 1, pytest.approx(1.3), pytest.approx(0.0))]
    theta = np.linspace(0.0, 2 * np.pi, 9)
    np.testing.assert_allclose(at.potential(theta), 1.3 * np.cos(theta), atol=1e-12)

    at = averaged.at([0.0, 1.5])
    assert at.resonance == "R(1,0|0)"
    np.testing.assert_allclose(at.potential(theta), 0.7 * np.cos(theta), atol=1e-12)

    free = averaged.at([1.0, 0.5])
    assert free.region == "free"
    assert free.resonant == []
    assert free.mean[1] == pytest.approx(0.0, abs=1e-14)
    assert free.value([0.1, 0.2], 0.3, 1e-3) == pytest.approx(m.h_value([1.0, 0.5]))


def test_averaged_hamiltonian_regions():
    """Points near B or in the annulus are refused."""
    m = standard_model()
    averaged = average_to_order(m, 1, L=0.02, delta=0.05)
    with pytest.raises(RegionError):
        averaged.at([0.01, 0.01])
    shift = 0.03 / np.sqrt(2.0)
    with pytest.raises(RegionError):
        averaged.at([0.5 + shift, 0.5 + shift])


def test_quasi_convexity_of_normal_form(model):
    """a(E_hat) = Omega1 + Omega2 on R(1,1|-1) with a cosine potential."""
    nf = resonant_normal_form(model, (1, 1), -1, [0.2])
    np.testing.assert_allclose(nf.B_star, [0.4, 0.6], atol=1e-12)
    assert nf.a == pytest.approx(2.0)
    assert nf.order == 1
    assert nf.saddle_theta == pytest.approx(0.0, abs=1e-10) or nf.saddle_theta == pytest.approx(2 * np.pi, abs=1e-10)
    assert nf.saddle_curvature == pytest.approx(-1.0)
    assert nf.scan_maxima == 1


def test_normal_form_at_single_mode_resonance():
    """R(1,0|0) at order one: U* = a1 cos(theta) with the saddle at theta = 0."""
    m = standard_model(a=(0.7, 1.3, 1.0))
    nf = resonant_normal_form(m, (1, 0), 0, [1.5])
    np.testing.assert_allclose(nf.B_star, [0.0, 1.5], atol=1e-12)
    theta = np.linspace(0.0, 2 * np.pi, 17)
    np.testing.assert_allclose(nf.U(theta), 0.7 * np.cos(theta), atol=1e-12)
    assert nf.a == pytest.approx(1.0)


def test_separatrix_touches_saddle(model):
    """At E_m = E* the graph closes at the saddle and satisfies the energy identity."""
    nf = resonant_normal_form(model, (1, 1), -1, [0.2])
    eps = 1e-3
    E_star = nf.critical_energy(eps)
    assert E_star == pytest.approx(eps)
    assert float(nf.ell(nf.saddle_theta, E_star, eps)) == pytest.approx(0.0, abs=1e-9)
    theta = np.linspace(0.3, 6.0, 50)
    for E_m in (E_star, E_star + 1e-4):
        defect = nf.energy_defect(theta, E_m, eps)
        assert np.nanmax(np.abs(defect)) <= 1e-9
    assert np.all(np.isnan(nf.ell(theta, -2 * eps, eps)))


def test_normal_form_h5_failure():
    """Omega = (1, -1) makes a vanish on R(1,1|-1)."""
    m = standard_model(omega=(1.0, -1.0))
    with pytest.raises(HypothesisError) as info:
        resonant_normal_form(m, (1, 1), -1, [0.2])
    assert info.value.hypothesis == "H5"


def test_normal_form_h6_failure():
    """A flat resonant potential has no saddle."""
    m = standard_model(a=(0.0, 1.0, 1.0))
    with pytest.raises(HypothesisError) as info:
        resonant_normal_form(m, (1, 0), 0, [1.5], order=1)
    assert info.value.hypothesis == "H6"


def test_normal_form_to_dict(model):
    data = resonant_normal_form(model, (1, 1), -1, [0.2]).to_dict(samples=8)
    assert data["resonance"] == "R(1,1|-1)"
    assert data["a"] == pytest.approx(2.0)
    assert len(data["U_samples"]["U"]) == 8


def test_chart_coordinates():
    E_hat, ratio = chart_coordinates([0.7, 0.9], (1, 1), 0)
    np.testing.assert_allclose(E_hat, [0.2])
    assert ratio == pytest.approx(0.7)


def test_first_integrals(model):
    """Order 0 is the action itself; order 1 reduces to it at eps = 0."""
    I, phi, s = np.array([0.7, 1.3]), np.array([0.4, 2.2]), 0.9
    np.testing.assert_allclose(first_integral(model, order=0)(I, phi, s), I)
    np.testing.assert_allclose(first_integral(model, order=1, eps=0.0)(I, phi, s), I)
    F = first_integral(model, order=1, eps=1e-3)
    expected = I + 1e-3 * np.array(
        [np.cos(0.4) / 0.7 + np.cos(0.4 + 2.2 - 0.9) / 1.0, np.cos(2.2) / 1.3 + np.cos(0.4 + 2.2 - 0.9) / 1.0]
    )
    np.testing.assert_allclose(F(I, phi, s), expected, rtol=1e-12)


def test_resonant_first_integral(model):
    """On the resonance with y = 0 the resonant level is eps U*(theta)."""
    nf = resonant_normal_form(model, (1, 1), -1, [0.2])
    F = first_integral(model, eps=1e-3, nf=nf)
    value = F(nf.B_star, np.array([0.3, 0.5]), 0.1)
    np.testing.assert_allclose(value[0], 0.2, atol=1e-12)
    assert value[1] == pytest.approx(1e-3 * np.cos(0.3 + 0.5 - 0.1), abs=1e-12)


def test_bump_plateau():
    """psi is 1 on [-1, 1], 0 outside [-2, 2] and monotone in between."""
    x = np.linspace(-3.0, 3.0, 601)
    psi = bump(x)
    assert np.all(psi[np.abs(x) <= 1.0] == 1.0)
    assert np.all(psi[np.abs(x) >= 2.0] == 0.0)
    right = psi[(x >= 1.0) & (x <= 2.0)]
    assert np.all(np.diff(right) <= 0.0)


def test_averaged_coefficients_grid(model):
    """One row per kept mode and grid point."""
    norm = normalize(model, 1, keep=resonant_keep(((1, 1), -1)))
    rows = averaged_coefficients_grid(norm, np.array([[0.5, 0.5], [1.0, 1.0]]))
    assert len(rows) == 2
    assert all(set(row) == {"order", "k", "l", "I", "cos", "sin"} for row in rows)
    assert [row["cos"] for row in rows] == [1.0, 1.0]
    assert rows[0]["k"] == [1, 1] and rows[0]["l"] == -1
