"""Tests for model assembly, validation and the extended vector field."""

import numpy as np
import pytest

from app.exceptions.custom_exceptions import HypothesisError, ModelFileError
from app.models.model_file import parse_model_text
from app.services import expr as ex
from app.services.fixtures import standard_config
from app.services.hamiltonian import FourierTerm, build_model, canonicalize_terms


def test_standard_model_shape(model):
    """The standard family has two rotators, one pendulum and three terms."""
    assert model.d == 2
    assert model.n == 1
    assert len(model.terms) == 3
    indices = sorted((t.k, t.l) for t in model.terms)
    assert indices == [((0, 1), 0), ((1, 0), 0), ((1, 1), -1)]
    assert model.pendula[0].alpha == pytest.approx(1.0)
    assert model.lambda_invariant


def test_minimum_potential_violates_h2(config):
    """A potential with a minimum at the origin is rejected citing H2."""
    config["pendulum"][0]["V"] = "1 - cos(q1)"
    with pytest.raises(HypothesisError) as info:
        build_model(config)
    assert info.value.hypothesis == "H2"


def test_singular_twist_violates_h3(config):
    """A rotator Hamiltonian with singular Hessian is rejected citing H3."""
    config["rotator"]["h"] = "0.5*I1^2"
    with pytest.raises(HypothesisError) as info:
        build_model(config)
    assert info.value.hypothesis == "H3"
    assert info.value.witness is not None


def test_indefinite_twist_is_valid(config):
    """h = I1*I2 has a constant nonsingular Hessian (det = -1)."""
    config["rotator"]["h"] = "I1*I2"
    m = build_model(config)
    assert np.linalg.det(m.hessian_h([0.0, 0.0])) == pytest.approx(-1.0)


def test_malformed_fourier_index(config):
    """An index of the wrong length is reported as an H4 violation."""
    config["perturbation"]["term"][0]["k"] = [1, 0, 0]
    with pytest.raises(HypothesisError) as info:
        build_model(config)
    assert info.value.hypothesis == "H4"


def test_frequency_and_hessian(model):
    """omega = grad h and D2h = diag(Omega)."""
    np.testing.assert_allclose(model.frequency([1.0, 2.0]), [1.0, 2.0])
    np.testing.assert_allclose(model.hessian_h([1.0, 2.0]), np.eye(2))
    np.testing.assert_allclose(model.frequency([0.0, 0.0]), [0.0, 0.0])
    assert model.hessian_constant


def test_vector_field_unperturbed(model):
    """With eps = 0 the saddle is fixed and the angles rotate at omega(I)."""
    x = np.array([1.0, 2.0, 0.3, 0.4, 0.0, 0.0, 0.0])
    field = model.vector_field(x, 0.0)
    np.testing.assert_allclose(field[:2], 0.0)
    np.testing.assert_allclose(field[2:4], [1.0, 2.0])
    np.testing.assert_allclose(field[4:6], 0.0)
    assert field[6] == 1.0

    x = np.array([1.0, 2.0, 0.0, 0.0, 2.0, np.pi, 0.0])
    field = model.vector_field(x, 0.0)
    assert field[5] == pytest.approx(2.0)
    assert field[4] == pytest.approx(0.0, abs=1e-15)


def test_lambda_exactly_invariant(model, rng):
    """At p = q = 0 the pendulum stays at the saddle for every eps."""
    for eps in (1e-3, 0.1, 1.0):
        for _ in range(20):
            I = rng.uniform(-0.5, 2.0, size=2)
            phi = rng.uniform(0.0, 2 * np.pi, size=2)
            x = np.concatenate([I, phi, [0.0, 0.0, rng.uniform(0, 2 * np.pi)]])
            field = model.vector_field(x, eps)
            assert field[4] == pytest.approx(0.0, abs=1e-14)
            assert field[5] == pytest.approx(0.0, abs=1e-14)


def test_energy_derivative_matches_time_dependence(model):
    """The energy variable rate equals -dH/ds."""
    x = np.array([0.7, 1.1, 0.4, 1.3, 0.5, 2.0, 0.9])
    eps = 0.01
    rate = model.vector_field(x, eps, with_energy=True)[-1]
    step = 1e-6
    plus, minus = x.copy(), x.copy()
    plus[-1] += step
    minus[-1] -= step
    numeric = -(model.energy(plus, eps) - model.energy(minus, eps)) / (2 * step)
    assert rate == pytest.approx(numeric, rel=1e-6, abs=1e-10)


def test_inner_hamiltonian(model):
    """K1 is the perturbation at the saddle."""
    phi = np.array([0.3, 1.2])
    s = 0.8
    expected = np.cos(0.3) + np.cos(1.2) + np.cos(0.3 + 1.2 - 0.8)
    assert model.inner_hamiltonian_k1([1.0, 1.0], phi, s) == pytest.approx(expected)


def test_inner_terms_vanish_with_sin_factor(config):
    """A coefficient carrying sin(q1) contributes nothing on the manifold."""
    for term in config["perturbation"]["term"]:
        term["coeff"] = "sin(q1)^2"
    m = build_model(config)
    assert m.inner_terms() == []
    assert m.inner_hamiltonian_k1([0.5, 0.5], [0.1, 0.2], 0.3) == 0.0


def test_inner_term_coefficient_in_actions(config):
    """Coefficients depending on I are evaluated after substituting p = q = 0."""
    config["perturbation"]["term"] = [{"k": [1, 0], "l": 0, "basis": "cos", "coeff": "I1*cos(q1)"}]
    m = build_model(config)
    (term,) = m.inner_terms()
    assert ex.evaluate(term.coeff, {"I1": 2.0}) == pytest.approx(2.0)


def test_canonical_terms_merge():
    """Terms equal after sign canonicalization merge into one."""
    one = ex.parse("1")
    terms = [
        FourierTerm(k=(1, -1), l=0, basis="cos", coeff=one),
        FourierTerm(k=(-1, 1), l=0, basis="cos", coeff=one),
        FourierTerm(k=(-1, 0), l=1, basis="sin", coeff=one),
    ]
    merged = canonicalize_terms(terms)
    assert len(merged) == 2
    cos_term = next(t for t in merged if t.basis == "cos")
    assert cos_term.k == (1, -1)
    assert ex.evaluate(cos_term.coeff, {}) == 2.0
    sin_term = next(t for t in merged if t.basis == "sin")
    assert (sin_term.k, sin_term.l) == ((1, 0), -1)
    assert ex.evaluate(sin_term.coeff, {}) == -1.0
    assert canonicalize_terms(list(reversed(terms))) == merged


def test_model_file_line_numbers():
    """TOML syntax errors carry the line number."""
    with pytest.raises(ModelFileError) as info:
        parse_model_text('[rotator]\nh = "I1^2"\n[domain\n')
    assert info.value.line == 3


def test_model_file_numbered_pendula():
    """[pendulum.1] tables are accepted like [[pendulum]] arrays."""
    text = """
[rotator]
h = "0.5*I1^2"

[pendulum.1]
V = "cos(q1) - 1"

[domain]
box = [[0.5, 3.0]]
"""
    config = parse_model_text(text)
    assert config.pendulum[0].V == "cos(q1) - 1"
    assert config.dimension == 1
    m = build_model(config)
    assert m.d == 1 and m.n == 1 and m.terms == []


def test_missing_section_is_reported():
    """A model without a domain section is a model file error."""
    data = standard_config()
    del data["domain"]
    with pytest.raises(ModelFileError):
        build_model(data)
