"""Tests for the resonance web, multiplicities, projections and the reduced domain."""

from fractions import Fraction

import numpy as np
import pytest

from app.exceptions.custom_exceptions import ClearanceError, TangencyError
from app.services.fixtures import standard_config, standard_model
from app.services.hamiltonian import build_model
from app.services.resonance import (
    PointComponent,
    Resonance,
    activated_indices,
    build_reduced_domain,
    build_web,
    check_tube,
    classify,
    default_tube_radius,
    integer_rank,
    multiplicity,
    multiplicity_at,
    sumset,
)

ORDER_ONE = {((1, 0), 0), ((0, 1), 0), ((1, 1), -1)}
ORDER_TWO = {((1, 0), -1), ((0, 1), -1), ((2, 1), -1), ((1, 2), -1)}


@pytest.fixture(scope="module")
def web(model):
    return build_web(model, 2)


@pytest.fixture(scope="module")
def domain(web):
    return build_reduced_domain(web, 0.05, max_order=2)


def test_order_one_indices(model):
    """The three Fourier modes of the perturbation are activated at order one."""
    assert activated_indices(model, 1) == ORDER_ONE


def test_standard_web_has_seven_lines(web):
    """Three resonances at order one and four more at order two."""
    assert len(web.resonances) == 7
    assert {r.index for r in web.by_order(1)} == ORDER_ONE
    assert {r.index for r in web.by_order(2)} == ORDER_TWO
    assert web.summary()["lines_per_order"] == {1: 3, 2: 4}


def test_closure_contains_order_two(web):
    """The combinatorial closure contains every order-two activated index."""
    assert ORDER_TWO <= web.closure
    assert ((1, 1), 0) in web.closure
    assert ((1, 1), 0) not in {r.index for r in web.resonances}


def test_hyperplanes_are_exact(web):
    """Quadratic h gives exact rational hyperplane coefficients."""
    r3 = web.find((1, 1), -1)
    assert r3.hyperplane() == ((Fraction(1), Fraction(1)), Fraction(-1))
    r = web.find((2, 1), -1)
    assert r.hyperplane() == ((Fraction(2), Fraction(1)), Fraction(-1))
    assert web.find((2, 2), -2) is r3
    assert r3.label == "R(1,1|-1)"


def test_single_term_sumset(rotator_model):
    """A single mode activates itself; its sums fold back or vanish."""
    assert activated_indices(rotator_model, 1) == {((1,), 0)}
    assert sumset({((1,), 0)}) == {((2,), 0)}


def test_empty_perturbation_gives_empty_web(config):
    config["perturbation"]["term"] = []
    web = build_web(build_model(config), 2)
    assert web.resonances == []


def test_multiplicity_examples(web):
    """Multiplicity 2 at the double resonance, 1 on a single line, 0 elsewhere."""
    assert multiplicity_at(web, [0.0, 0.0]) == 2
    assert multiplicity_at(web, [0.5, 0.5]) == 1
    assert multiplicity_at(web, [0.123, 0.456]) == 0
    assert multiplicity([0.0, 0.0, 1.0], 1, web) == 2


def test_integer_rank_matches_float_rank(rng):
    """Fraction-free rank agrees with the floating-point rank."""
    for _ in range(1000):
        rows = rng.integers(-3, 4, size=(rng.integers(1, 5), 3))
        if rng.random() < 0.3:
            rows = np.vstack([rows, 2 * rows[:1] - rows[-1:]])
        expected = int(np.linalg.matrix_rank(rows.astype(float), tol=1e-9))
        assert integer_rank(rows.tolist()) == expected
    assert integer_rank([]) == 0
    assert integer_rank([[0, 0, 0]]) == 0


def test_multiplicity_scale_invariant():
    """Scaling an active index does not change the multiplicity."""
    rows = [[1, 0, 0], [0, 1, 0]]
    assert integer_rank(rows) == integer_rank([[3, 0, 0], [0, -2, 0]])
    assert integer_rank(rows + [[5, -7, 0]]) == 2


def test_project_k(web):
    """k-projection onto R(1,1|-1) from (0.8, 0.8) lands at (0.5, 0.5)."""
    r3 = web.find((1, 1), -1)
    point, t = r3.project_k([0.8, 0.8])
    np.testing.assert_allclose(point, [0.5, 0.5], atol=1e-12)
    assert t == pytest.approx(-0.3)
    assert abs(r3.value(point)) <= 1e-12
    same, t = r3.project_k([0.5, 0.5])
    np.testing.assert_allclose(same, [0.5, 0.5])
    assert t == 0.0
    assert r3.projection_comparability([0.8, 0.8]) == pytest.approx(1.0)


def test_project_k_tangency(config):
    """h = I1*I2 with k=(1,0) has k^T D2h k = 0."""
    config["rotator"]["h"] = "I1*I2"
    m = build_model(config)
    r = Resonance(k=(1, 0), l=0, order=1, model=m)
    assert r.a([0.3, 0.4]) == 0.0
    with pytest.raises(TangencyError):
        r.project_k([0.3, 0.4])


def test_quasi_convexity_coefficients():
    """a = k^T D2h k for the order-one and order-two diagonal resonances."""
    omega = (1.3, 0.7)
    m = standard_model(omega=omega)
    point = np.zeros(2)
    cases = {((1, 1), -1): omega[0] + omega[1], ((2, 1), -1): 4 * omega[0] + omega[1], ((1, 2), -1): omega[0] + 4 * omega[1]}
    for (k, l), expected in cases.items():
        assert Resonance(k=k, l=l, order=1, model=m).a(point) == pytest.approx(expected, rel=1e-14)


def test_removed_points(domain):
    """B contains the pairwise intersections of the secular lines."""
    points = [c.point for c in domain.components if isinstance(c, PointComponent)]
    assert len(points) == len(domain.components)
    for expected in ([0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1 / 3, 1 / 3], [0.0, 0.5]):
        assert min(np.linalg.norm(p - np.array(expected)) for p in points) <= 1e-12


def test_path_clearance(domain):
    """I2 = 0.4 clears B; I2 = 0.5 passes through R(1,0|0) x R(1,2|-1)."""
    accepted = domain.check_path(np.array([[-1.0, 0.4], [2.0, 0.4]]))
    assert accepted.accepted
    assert accepted.min_clearance > 0.05

    with pytest.raises(ClearanceError) as info:
        domain.check_path(np.array([[-1.0, 0.5], [2.0, 0.5]]))
    np.testing.assert_allclose(info.value.witness, [0.0, 0.5], atol=1e-12)

    rejected = domain.check_path(np.array([[-0.2, -0.2], [0.2, 0.2]]), raise_on_failure=False)
    assert not rejected.accepted
    np.testing.assert_allclose(rejected.witness, [0.0, 0.0], atol=1e-12)


def test_single_point_path(domain):
    result = domain.check_path(np.array([[1.6, 0.2]]))
    assert result.samples == 1
    assert result.accepted


def test_degenerate_locus_for_indefinite_twist():
    """Omega = (1, -1) makes R(1,1|-1) degenerate everywhere."""
    m = standard_model(omega=(1.0, -1.0))
    domain = build_reduced_domain(build_web(m, 2), 0.05, max_order=2)
    kinds = {(c.kind, c.labels) for c in domain.components if c.kind == "degenerate"}
    assert ("degenerate", ("R(1,1|-1)",)) in kinds


def test_tube_radius(domain):
    """The default tube radius satisfies both tube conditions."""
    L = default_tube_radius(domain)
    assert 0.0 < L < 0.5
    assert check_tube(domain, L).ok
    assert not check_tube(domain, 1.0).ok


def test_classify(domain):
    """Free, resonant and annulus regions for a fixed tube radius."""
    region, res, dist = classify(domain, [0.75, 0.75], L=0.02)
    assert region == "free" and res is None and dist > 0.04
    region, res, dist = classify(domain, [0.5, 0.5], L=0.02)
    assert region == "resonant"
    assert res.label == "R(1,1|-1)"
    assert dist == pytest.approx(0.0, abs=1e-12)
    shift = 0.03 / np.sqrt(2.0)
    region, res, dist = classify(domain, [0.5 + shift, 0.5 + shift], L=0.02)
    assert region == "annulus"
    assert dist == pytest.approx(0.03, abs=1e-10)


def test_web_is_rebuilt_for_higher_order(model):
    """A domain with a larger m0 than the web rebuilds the web."""
    web = build_web(model, 1)
    domain = build_reduced_domain(web, 0.05, max_order=2)
    assert domain.web.order == 2
    assert len(domain.web.resonances) == 7


def test_config_box_override():
    """A box excluding all resonances leaves no removed points."""
    data = standard_config(box=[(1.2, 1.8), (1.2, 1.8)])
    m = build_model(data)
    domain = build_reduced_domain(build_web(m, 2), 0.01, max_order=2)
    assert domain.components == []
