"""Tests for the integrators, scattering measurements, first integrals and pseudo-orbits."""

import numpy as np
import pytest

from app.exceptions.custom_exceptions import RegionError, SchemeError
from app.services.averaging import first_integral
from app.services.fixtures import standard_config
from app.config.settings import settings
from app.services.hamiltonian import build_model
from app.services.resonance import build_reduced_domain, build_web
from app.services.scattering import Chain, ChainLevel, ScatteringMap
from app.services.simulate import (
    distance_to_manifold,
    drift_demo,
    first_integral_drift,
    fit_exponent,
    initial_state,
    inner_flow,
    integrate,
    measure_scattering,
    quasi_invariance_experiment,
    scattering_experiment,
)

OFF_MANIFOLD = dict(I=[0.6, 0.9], phi=[0.3, 1.2], p=[0.5], q=[0.4])


def test_unperturbed_inner_flow(model):
    """With eps = 0 the actions are constant and the angles rotate at omega(I)."""
    traj = inner_flow(model, [0.6, 0.9], [0.3, 1.2], 0.0, 0.0, 5.0, samples=11)
    np.testing.assert_allclose(traj.I, np.tile([0.6, 0.9], (11, 1)), atol=1e-14)
    np.testing.assert_allclose(traj.phi[-1], [0.3 + 0.6 * 5.0, 1.2 + 0.9 * 5.0], rtol=1e-10)
    assert traj.energy_drift <= 1e-12


def test_manifold_stays_invariant(model):
    """Orbits started at p = q = 0 never leave it."""
    traj = inner_flow(model, [0.6, 0.9], [0.3, 1.2], 0.4, 0.1, 10.0, samples=51)
    assert np.max(distance_to_manifold(traj)) == 0.0


def test_split_agrees_with_rk8(model):
    """The Yoshida splitting and DOP853 agree off the manifold."""
    x0 = initial_state(model, **OFF_MANIFOLD)
    fine = integrate(model, x0, 0.01, 5.0, "rk8", samples=6)
    split = integrate(model, x0, 0.01, 5.0, "split", step=1e-2, samples=6)
    assert split.scheme == "split" and split.step == pytest.approx(1e-2)
    np.testing.assert_allclose(split.final[:-1], fine.final[:-1], atol=1e-6)
    assert split.energy_drift <= 1e-6
    assert fine.energy_drift <= 1e-9


def test_backward_integration_returns(model):
    x0 = initial_state(model, **OFF_MANIFOLD)
    forward = integrate(model, x0, 0.01, 3.0, samples=2)
    back = integrate(model, forward.final, 0.01, -3.0, samples=2)
    np.testing.assert_allclose(back.final[:-1], x0[:-1], atol=1e-9)


def test_unknown_scheme(model):
    with pytest.raises(SchemeError):
        integrate(model, initial_state(model, [0.6, 0.9], [0.0, 0.0]), 0.01, 1.0, "euler")


def test_split_refuses_action_dependent_coefficients():
    """Coefficients depending on I break the kinetic/potential splitting."""
    config = standard_config()
    config["perturbation"]["term"][0]["coeff"] = "I1*cos(q1)"
    m = build_model(config)
    with pytest.raises(SchemeError):
        integrate(m, initial_state(m, [0.6, 0.9], [0.0, 0.0]), 0.01, 1.0, "split")


def test_trajectory_rows(model):
    traj = inner_flow(model, [0.6, 0.9], [0.3, 1.2], 0.0, 0.01, 1.0, samples=5)
    assert traj.columns() == ["t", "I1", "I2", "phi1", "phi2", "p1", "q1", "s", "energy"]
    rows = traj.rows()
    assert len(rows) == 5 and len(rows[0]) == 9


def test_fit_exponent():
    eps = [1e-3, 2e-3, 4e-3]
    slope, constant = fit_exponent(eps, [3.0 * e**2 for e in eps])
    assert slope == pytest.approx(2.0)
    assert constant == pytest.approx(3.0)
    with pytest.raises(ValueError):
        fit_exponent([1e-3], [1.0])


def test_zero_eps_measurement(model):
    """At eps = 0 nothing is measured and nothing is predicted."""
    meas = measure_scattering(model, 0.0, [0.6, 0.9], [0.5, 1.7])
    np.testing.assert_array_equal(meas.measured, [0.0, 0.0])
    np.testing.assert_array_equal(meas.predicted, [0.0, 0.0])
    assert meas.to_dict()["discrepancy"] == 0.0


@pytest.mark.slow
def test_measured_jump_stable_under_longer_window(model):
    """Doubling the excursion window changes the measured jump by less than 10%."""
    short = measure_scattering(model, 1e-3, [0.6, 0.9], [0.5, 1.7], window=25.0)
    long = measure_scattering(model, 1e-3, [0.6, 0.9], [0.5, 1.7], window=50.0, samples=8001)
    assert np.linalg.norm(long.measured - short.measured) < 0.1 * np.linalg.norm(short.measured)


def test_scattering_experiment_skips_failed_excursions(model, monkeypatch):
    """A point that never re-approaches p = q = 0 is reported and left out of the fit."""
    monkeypatch.setattr(settings, "excursion_approach", 1e-9)
    summary = scattering_experiment(model, [1e-2, 2e-2], [([0.6, 0.9], [0.5, 1.7])], window=5.0)
    (row,) = summary["points"]
    assert "error" in row and "discrepancy" not in row
    assert summary["failed"] == 1 and summary["fitted"] == 0
    assert summary["exponent"] is None


@pytest.mark.slow
def test_scattering_exponent_over_random_points(model):
    """Five random (I, theta) over eps in {1e-2, 1e-3, 1e-4}: the discrepancy decays faster than eps^1.1."""
    rng = np.random.default_rng(7)
    points = [(rng.uniform(model.box[:, 0], model.box[:, 1]).tolist(), rng.uniform(0, 2 * np.pi, model.d).tolist())
              for _ in range(5)]
    summary = scattering_experiment(model, [1e-2, 1e-3, 1e-4], points)
    assert summary["fitted"] + summary["failed"] == 5
    assert summary["fitted"] >= 3
    assert summary["exponent"] > 1.1


@pytest.mark.slow
def test_measured_jump_matches_prediction(model):
    """A homoclinic excursion changes I by eps dL*/dtheta to leading order."""
    eps = 1e-3
    meas = measure_scattering(model, eps, [0.6, 0.9], [0.5, 1.7])
    assert meas.approach <= np.sqrt(eps)
    assert meas.discrepancy <= 0.25 * np.linalg.norm(meas.predicted) + 2 * eps**1.5


def test_averaged_integral_beats_raw_actions(model):
    """Away from resonances I + eps dG1/dphi drifts much less than I."""
    result = quasi_invariance_experiment(model, [1e-2], [1.3, 0.7], [0.2, 0.4], T=10.0, samples=1001)
    (row,) = result["rows"]
    assert row["averaged"] < row["raw"]
    assert row["ratio"] > 3.0


@pytest.mark.slow
def test_quasi_invariance_long_run(model):
    """Over T = 1000 the averaged integral drifts like C eps^2 T with C stable, and beats raw I tenfold at eps = 1e-3."""
    result = quasi_invariance_experiment(model, [1e-2, 1e-3], [1.3, 0.7], [0.2, 0.4], T=1000.0)
    coarse, fine = result["rows"]
    assert fine["ratio"] >= 10.0
    assert 0.5 <= fine["constant"] / coarse["constant"] <= 1.5


def test_split_step_preserves_volume(model):
    """The splitting flow map on (I, phi, p, q) has Jacobian determinant 1."""
    x0 = initial_state(model, **OFF_MANIFOLD)
    h = 2e-5

    def flow(x):
        return integrate(model, x, 0.01, 0.1, "split", step=1e-2, samples=2).final[:-1]

    n = len(x0) - 1
    jac = np.zeros((n, n))
    for j in range(n):
        e = np.zeros_like(x0)
        e[j] = h
        jac[:, j] = (flow(x0 + e) - flow(x0 - e)) / (2 * h)
    assert abs(np.linalg.det(jac) - 1.0) <= 1e-10


def test_first_integral_drift_region(model):
    """Leaving the requested region is reported with the exit time."""
    domain = build_reduced_domain(build_web(model, 2), 0.05)
    traj = inner_flow(model, [1.3, 0.7], [0.2, 0.4], 0.0, 1e-2, 1.0, samples=5)
    drift = first_integral_drift(traj, first_integral(model, 0), domain, "free", 0.02)
    assert drift.shape == (2,)
    with pytest.raises(RegionError) as info:
        first_integral_drift(traj, first_integral(model, 0), domain, "resonant", 0.02)
    assert info.value.witness[0] == 0.0


def hand_chain(model, eps):
    I0, theta = np.array([0.6, 0.9]), np.array([0.5, 1.7])
    I1 = ScatteringMap(model)(eps, I0, theta)[0]
    levels = [
        ChainLevel(chart="free", branch=None, E=I0, action=I0),
        ChainLevel(chart="free", branch=None, E=I1, action=I1, theta=theta, residual=0.0),
    ]
    return Chain(eps=eps, path=np.array([I0, I1]), cap=1.0, levels=levels)


def test_drift_demo_replays_jumps(model):
    """Without dwell the pseudo-orbit lands on the chain actions."""
    chain = hand_chain(model, 1e-3)
    orbit = drift_demo(model, chain, dwell=0.0)
    np.testing.assert_allclose(orbit.actions[-1], chain.levels[-1].action, atol=1e-14)
    assert len(orbit.jumps) == 1
    assert orbit.max_deviation <= 1e-12


def test_drift_demo_reverse(model):
    """Walking the chain backwards undoes the jump up to O(eps^2)."""
    chain = hand_chain(model, 1e-3)
    orbit = drift_demo(model, chain, dwell=0.0, reverse=True)
    np.testing.assert_allclose(orbit.actions[0], chain.levels[-1].action)
    np.testing.assert_allclose(orbit.actions[-1], chain.levels[0].action, atol=1e-5)


def test_drift_demo_with_dwell(model):
    """After the inner flow has moved the action, the link angle is re-solved so the jump still lands on the chain."""
    chain = hand_chain(model, 1e-3)
    orbit = drift_demo(model, chain, dwell=0.5, samples=5)
    assert len(orbit.rows()) == 1 + 4 + 1 + 4
    assert orbit.t[-1] == pytest.approx(1.0)
    (jump,) = orbit.jumps
    assert jump["steered"]
    assert np.linalg.norm(np.array(jump["I"]) - chain.levels[0].action) > 0
    np.testing.assert_allclose(orbit.actions[5], chain.levels[-1].action, atol=1e-10)


def test_drift_demo_anchors_unreachable_links(model):
    """A torus out of reach of the map is reached by re-anchoring and the jump is marked unsteered."""
    chain = hand_chain(model, 1e-3)
    far = chain.levels[0].action + np.array([0.05, 0.0])
    chain.levels[-1] = ChainLevel(chart="free", branch=None, E=far, action=far, theta=chain.levels[-1].theta)
    orbit = drift_demo(model, chain, dwell=0.0)
    assert not orbit.jumps[0]["steered"]
    np.testing.assert_allclose(orbit.actions[-1], far)
