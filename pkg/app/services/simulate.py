"""Direct simulation of the extended flow.

Trajectories of the full system validate the first-order scattering map
against homoclinic excursions, measure how well the averaged first
integrals are conserved, and replay transition chains as pseudo-orbits.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.stats import linregress

from app.config.settings import settings
from app.exceptions.custom_exceptions import (
    ConvergenceError,
    ExcursionError,
    LinkMismatchError,
    NoSolutionError,
    RegionError,
    SchemeError,
)
from app.services.averaging import first_integral, normalize
from app.services.hamiltonian import Model
from app.services.melnikov import MelnikovEval
from app.services.resonance import ReducedDomain, classify
from app.services.scattering import Chain, Polyline, ScatteringMap, heteroclinic_solve, wrap
from app.services.separatrix import product_separatrix
from app.utils.logger import get_logger

logger = get_logger(__name__)

TWO_PI = 2.0 * np.pi
CBRT2 = 2.0 ** (1.0 / 3.0)
YOSHIDA_W1 = 1.0 / (2.0 - CBRT2)
YOSHIDA_W0 = -CBRT2 / (2.0 - CBRT2)
DEFAULT_SAMPLES = 2001


@dataclass
class Trajectory:
    """Samples of the extended flow.

    ``states`` has shape (m, 2d + 2n + 1) in the order (I, phi, p, q, s);
    ``energy`` is H + A, the energy of the autonomous extension.
    """

    model: Model
    t: np.ndarray
    states: np.ndarray
    energy: np.ndarray
    scheme: str
    step: Optional[float]
    eps: float

    @property
    def I(self) -> np.ndarray:
        return self.states[:, : self.model.d]

    @property
    def phi(self) -> np.ndarray:
        d = self.model.d
        return self.states[:, d : 2 * d]

    @property
    def p(self) -> np.ndarray:
        d, n = self.model.d, self.model.n
        return self.states[:, 2 * d : 2 * d + n]

    @property
    def q(self) -> np.ndarray:
        d, n = self.model.d, self.model.n
        return self.states[:, 2 * d + n : 2 * d + 2 * n]

    @property
    def s(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def energy_drift(self) -> float:
        return float(np.max(np.abs(self.energy - self.energy[0]))) if len(self.energy) else 0.0

    @property
    def final(self) -> np.ndarray:
        return self.states[-1].copy()

    def columns(self) -> List[str]:
        m = self.model
        return ["t"] + m.action_names + m.angle_names + m.momentum_names + m.position_names + ["s", "energy"]

    def rows(self, extra: Optional[Dict[str, np.ndarray]] = None) -> List[List[float]]:
        table = np.column_stack([self.t, self.states, self.energy])
        if extra:
            table = np.column_stack([table] + [np.asarray(v).reshape(len(self.t), -1) for v in extra.values()])
        return table.tolist()


def initial_state(model: Model, I, phi, p=None, q=None, s: float = 0.0) -> np.ndarray:
    """Flat extended state (I, phi, p, q, s); p and q default to the saddle."""
    p = np.zeros(model.n) if p is None else np.atleast_1d(np.asarray(p, dtype=float))
    q = np.zeros(model.n) if q is None else np.atleast_1d(np.asarray(q, dtype=float))
    return np.concatenate([np.asarray(I, dtype=float), np.asarray(phi, dtype=float), p, q, [float(s)]])


def autonomous_energy(model: Model, x: np.ndarray, eps: float, A: float) -> float:
    """H(x) + A, conserved by the flow of the autonomous extension."""
    return model.energy(x, eps) + A


def _sample_times(T: float, samples: int) -> np.ndarray:
    return np.linspace(0.0, T, max(2, samples))


def _integrate_rk8(model: Model, x0: np.ndarray, eps: float, T: float, samples: int, tol: float) -> Trajectory:
    def rhs(_t, y):
        return model.vector_field(y, eps, with_energy=True)

    y0 = np.append(x0, 0.0)
    times = _sample_times(T, samples)
    sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", t_eval=times, rtol=tol, atol=tol)
    if not sol.success:
        logger.warning("DOP853 failed", message=sol.message, T=T)
        raise ConvergenceError(f"rk8 integration failed: {sol.message}")
    states = sol.y[:-1].T.copy()
    states[:, -1] = x0[-1] + sol.t
    energy = np.array([autonomous_energy(model, x, eps, A) for x, A in zip(states, sol.y[-1])])
    states[:, -1] = np.mod(states[:, -1], TWO_PI)
    return Trajectory(model, sol.t, states, energy, "rk8", None, eps)


def check_splitting(model: Model) -> None:
    """Raise SchemeError when the perturbation couples to the actions or momenta."""
    coupled = model.coefficients_depend_on & set(model.action_names + model.momentum_names)
    if coupled:
        raise SchemeError(
            f"splitting needs coefficients independent of I and p; they depend on {sorted(coupled)}"
        )


class SplittingStepper:
    """Yoshida-4 composition of Strang steps for H = A(I, p, I0) + B(phi, q, s)."""

    def __init__(self, model: Model, eps: float):
        check_splitting(model)
        self.model = model
        self.eps = eps
        d, n = model.d, model.n
        self.sl_I = slice(0, d)
        self.sl_phi = slice(d, 2 * d)
        self.sl_p = slice(2 * d, 2 * d + n)
        self.sl_q = slice(2 * d + n, 2 * d + 2 * n)
        self.signs = np.array([pend.sign for pend in model.pendula], dtype=float)

    def drift(self, y: np.ndarray, h: float) -> None:
        """Exact flow of the kinetic part: angles and positions move, s advances."""
        y[self.sl_phi] += h * self.model.frequency(y[self.sl_I])
        y[self.sl_q] += h * self.signs * y[self.sl_p]
        y[-2] += h

    def kick(self, y: np.ndarray, h: float) -> None:
        """Exact flow of the potential part: actions, momenta and A move."""
        v = self.model.vector_field(y[:-1], self.eps, with_energy=True)
        y[self.sl_I] += h * v[self.sl_I]
        y[self.sl_p] += h * v[self.sl_p]
        y[-1] += h * v[-1]

    def strang(self, y: np.ndarray, h: float) -> None:
        self.drift(y, 0.5 * h)
        self.kick(y, h)
        self.drift(y, 0.5 * h)

    def step(self, y: np.ndarray, h: float) -> None:
        self.strang(y, YOSHIDA_W1 * h)
        self.strang(y, YOSHIDA_W0 * h)
        self.strang(y, YOSHIDA_W1 * h)


def _integrate_split(model: Model, x0: np.ndarray, eps: float, T: float, step: float, samples: int) -> Trajectory:
    stepper = SplittingStepper(model, eps)
    count = max(1, int(np.ceil(abs(T) / step)))
    h = T / count
    stride = max(1, count // max(1, samples - 1))
    y = np.append(np.asarray(x0, dtype=float).copy(), 0.0)
    times, states, energies = [0.0], [y[:-1].copy()], [autonomous_energy(model, y[:-1], eps, 0.0)]
    for i in range(1, count + 1):
        stepper.step(y, h)
        if i % stride == 0 or i == count:
            times.append(i * h)
            states.append(y[:-1].copy())
            energies.append(autonomous_energy(model, y[:-1], eps, y[-1]))
    states = np.array(states)
    t = np.array(times)
    states[:, -1] = np.mod(x0[-1] + t, TWO_PI)
    return Trajectory(model, t, states, np.array(energies), "split", abs(h), eps)


def integrate(
    model: Model,
    x0,
    eps: float,
    T: float,
    scheme: str = "rk8",
    step: Optional[float] = None,
    samples: int = DEFAULT_SAMPLES,
) -> Trajectory:
    """Trajectory of the extended flow from x0 over [0, T] (T may be negative).

    Raises:
        SchemeError: ``split`` was requested for a model whose perturbation depends on I or p.
    """
    x0 = np.asarray(x0, dtype=float)
    if scheme == "rk8":
        traj = _integrate_rk8(model, x0, eps, T, samples, settings.rk_tol)
    elif scheme == "split":
        traj = _integrate_split(model, x0, eps, T, step or settings.split_step, samples)
    else:
        raise SchemeError(f"unknown scheme {scheme!r}; expected 'split' or 'rk8'")
    logger.debug("Trajectory integrated", scheme=scheme, T=T, eps=eps, energy_drift=traj.energy_drift)
    return traj


def inner_flow(model: Model, I, phi, s: float, eps: float, T: float, samples: int = DEFAULT_SAMPLES) -> Trajectory:
    """Trajectory on p = q = 0 of the restricted Hamiltonian h + eps K."""
    model.require_lambda_invariant()
    return integrate(model, initial_state(model, I, phi, s=s), eps, T, "rk8", samples=samples)


# Scattering validation


@dataclass
class ScatteringMeasurement:
    """Measured and predicted action change across one homoclinic excursion."""

    I: np.ndarray
    theta: np.ndarray
    eps: float
    tau: np.ndarray
    measured: np.ndarray
    predicted: np.ndarray
    approach: float
    window: float

    @property
    def discrepancy(self) -> float:
        return float(np.linalg.norm(self.measured - self.predicted))

    def to_dict(self) -> Dict:
        return {
            "I": self.I.tolist(),
            "theta": self.theta.tolist(),
            "eps": self.eps,
            "tau": self.tau.tolist(),
            "measured": self.measured.tolist(),
            "predicted": self.predicted.tolist(),
            "discrepancy": self.discrepancy,
            "approach": self.approach,
            "window": self.window,
        }


def distance_to_manifold(traj: Trajectory) -> np.ndarray:
    """max_j (|p_j| + |q_j - saddle|) along a trajectory, saddles at q = 0 mod 2 pi."""
    q = np.mod(traj.q + np.pi, TWO_PI) - np.pi
    return np.max(np.abs(traj.p) + np.abs(q), axis=1)


def _asymptotic_action(model: Model, traj: Trajectory, eps: float, tail: int) -> tuple:
    """Action at time 0 of the orbit on p = q = 0 that the excursion approaches.

    The tail samples nearest p = q = 0 are projected onto the manifold and
    carried back to time 0 by the inner flow; their mean is returned.
    """
    dist = distance_to_manifold(traj)
    best = int(np.argmin(dist))
    if best == 0:
        raise ExcursionError("excursion starts at its closest approach; the launch point is not homoclinic")
    closest = float(dist[best])
    bound = settings.excursion_approach * np.sqrt(max(eps, 1e-16))
    if closest > bound:
        raise ExcursionError(
            f"excursion never re-approaches p = q = 0 (closest {closest:.3g}, bound {bound:.3g}) within the window"
        )
    near = np.flatnonzero(dist <= max(2.0 * closest, eps))
    near = near[np.argsort(np.abs(near - best))][:tail]
    actions = []
    for i in near:
        x = traj.states[i]
        I, phi = x[: model.d], x[model.d : 2 * model.d]
        back = inner_flow(model, I, phi, x[-1], eps, -traj.t[i], samples=2)
        actions.append(back.I[-1])
    return np.mean(actions, axis=0), closest


def measure_scattering(
    model: Model,
    eps: float,
    I,
    theta,
    window: Optional[float] = None,
    melnikov: Optional[MelnikovEval] = None,
    tail: int = 8,
    samples: int = 4001,
) -> ScatteringMeasurement:
    """Launch from the unperturbed homoclinic point at tau* and compare I(x+) - I(x-) with eps dL*/dtheta.

    Raises:
        ExcursionError: the orbit does not come back near p = q = 0 within the window.
    """
    model.require_lambda_invariant()
    I = np.asarray(I, dtype=float)
    theta = np.asarray(theta, dtype=float)
    window = window or settings.excursion_window
    ev = melnikov or MelnikovEval(model)
    red = ev.reduced_poincare(I, theta)
    predicted = eps * red.grad_theta
    if eps == 0.0:
        zeros = np.zeros(model.d)
        return ScatteringMeasurement(I, theta, eps, red.tau, zeros, predicted, 0.0, window)
    p0, q0 = product_separatrix(model, red.tau, ev.branch)
    x0 = initial_state(model, I, theta, p0, q0, 0.0)
    forward = integrate(model, x0, eps, window, "rk8", samples=samples)
    backward = integrate(model, x0, eps, -window, "rk8", samples=samples)
    I_plus, approach_plus = _asymptotic_action(model, forward, eps, tail)
    I_minus, approach_minus = _asymptotic_action(model, backward, eps, tail)
    result = ScatteringMeasurement(
        I, theta, eps, red.tau, I_plus - I_minus, predicted, max(approach_plus, approach_minus), window
    )
    logger.debug("Scattering measured", I=I.tolist(), eps=eps, discrepancy=result.discrepancy)
    return result


def fit_exponent(eps_values: Sequence[float], values: Sequence[float]) -> tuple:
    """Least-squares (slope, constant) of log values against log eps."""
    x = np.log(np.asarray(eps_values, dtype=float))
    y = np.log(np.maximum(np.asarray(values, dtype=float), 1e-300))
    if len(x) < 2:
        raise ValueError("fit_exponent needs at least two points")
    fit = linregress(x, y)
    return float(fit.slope), float(np.exp(fit.intercept))


def scattering_experiment(
    model: Model,
    eps_values: Sequence[float],
    points: Sequence[tuple],
    window: Optional[float] = None,
) -> Dict:
    """Discrepancy |dI_measured - eps dL*/dtheta| over eps for each (I, theta) and the fitted exponents.

    A point whose excursion does not come back near p = q = 0 at some eps is
    reported with its error and left out of the fit.
    """
    ev = MelnikovEval(model)

    def run(point):
        I, theta = point
        try:
            return [measure_scattering(model, eps, I, theta, window, ev) for eps in eps_values]
        except ExcursionError as exc:
            logger.warning("Scattering point skipped", I=list(I), theta=list(theta), error=exc.message)
            return exc

    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        results = list(pool.map(run, points))
    rows, exponents = [], []
    for (I, theta), per_eps in zip(points, results):
        if isinstance(per_eps, ExcursionError):
            rows.append({"I": list(I), "theta": list(theta), "error": per_eps.message})
            continue
        disc = [m.discrepancy for m in per_eps]
        slope, constant = fit_exponent(eps_values, disc)
        exponents.append(slope)
        rows.append({"I": list(I), "theta": list(theta), "discrepancy": disc, "exponent": slope, "constant": constant})
    summary = {
        "eps": list(eps_values),
        "points": rows,
        "fitted": len(exponents),
        "failed": len(rows) - len(exponents),
        "exponent": float(np.min(exponents)) if exponents else None,
    }
    logger.info("Scattering experiment", exponents=exponents, failed=summary["failed"])
    return summary


# First integrals


def first_integral_drift(
    traj: Trajectory,
    F: Callable,
    domain: Optional[ReducedDomain] = None,
    region: Optional[str] = None,
    L: Optional[float] = None,
) -> np.ndarray:
    """max_t |F(x(t)) - F(x(0))| per component.

    Raises:
        RegionError: the trajectory leaves the region tag (with the exit time as witness).
    """
    values = []
    for t, x in zip(traj.t, traj.states):
        I = x[: traj.model.d]
        if domain is not None and region is not None:
            tag, _, _ = classify(domain, I, L)
            if tag != region:
                raise RegionError(f"trajectory left the {region} region at t={t:.6g}", witness=[float(t)] + I.tolist())
        values.append(F(I, x[traj.model.d : 2 * traj.model.d], x[-1]))
    values = np.array(values)
    return np.max(np.abs(values - values[0]), axis=0)


def quasi_invariance_experiment(
    model: Model,
    eps_values: Sequence[float],
    I,
    phi,
    T: float,
    samples: int = 4001,
) -> Dict:
    """Drift of the order-one averaged F and of raw I along inner orbits.

    Reports C = drift / (eps^2 T) for the averaged integral and the ratio
    raw drift / averaged drift for every eps.
    """
    norm = normalize(model, 1)
    rows = []
    for eps in eps_values:
        traj = inner_flow(model, I, phi, 0.0, eps, T, samples=samples)
        averaged = first_integral_drift(traj, first_integral(model, 1, eps, norm=norm))
        raw = first_integral_drift(traj, first_integral(model, 0))
        a, r = float(np.max(averaged)), float(np.max(raw))
        rows.append({
            "eps": eps,
            "averaged": a,
            "raw": r,
            "constant": a / (eps**2 * T) if eps > 0 else 0.0,
            "ratio": r / a if a > 0 else float("inf"),
        })
    logger.info("Quasi-invariance experiment", rows=rows)
    return {"I": list(np.asarray(I, dtype=float)), "T": T, "rows": rows}


# Pseudo-orbits


@dataclass
class PseudoOrbit:
    """Inner flow segments joined by scattering jumps at chain links."""

    path: np.ndarray
    t: List[float] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    deviation: List[float] = field(default_factory=list)
    jumps: List[Dict] = field(default_factory=list)
    flagged: List[int] = field(default_factory=list)

    @property
    def max_deviation(self) -> float:
        return max(self.deviation, default=0.0)

    def record(self, t: float, I: np.ndarray, line: Polyline) -> None:
        self.t.append(float(t))
        self.actions.append(np.asarray(I, dtype=float).copy())
        self.deviation.append(line.distance(I))

    def rows(self) -> List[List[float]]:
        return [[t] + list(I) + [dev] for t, I, dev in zip(self.t, self.actions, self.deviation)]


def _steer(smap: ScatteringMap, I: np.ndarray, target: np.ndarray, eps: float, theta: np.ndarray,
           reverse: bool) -> Tuple[np.ndarray, bool]:
    """Link angle near ``theta`` whose jump from I lands on ``target``.

    Returns (angle, True) on success and (theta, False) when the target is
    out of reach of the map at I.
    """
    aim = 2.0 * I - target if reverse else target
    try:
        sols = heteroclinic_solve(smap, I, aim, eps, seeds=[theta])
    except NoSolutionError:
        return theta, False
    best = min(sols, key=lambda sol: np.max(np.abs(wrap(sol.theta - theta))))
    return best.theta, True


def drift_demo(
    model: Model,
    chain: Chain,
    eps: Optional[float] = None,
    reverse: bool = False,
    dwell: Optional[float] = None,
    direct: bool = False,
    direct_every: int = 0,
    strict: bool = False,
    samples: int = 33,
) -> PseudoOrbit:
    """Replay a chain as a pseudo-orbit.

    Between links the state follows the inner flow for ``dwell``, started
    with phi chosen so the segment runs through the next link's angle. At
    each link the angle is re-solved from the action the flow actually
    reached, so the jump lands on the next torus of the chain; when that
    torus is out of reach of the map the action is re-anchored to it and
    the jump is flagged unsteered. With ``reverse`` the chain is walked
    backwards through the inverse jumps. ``direct`` launches a full
    trajectory at every ``direct_every``-th link and compares the measured
    jump.

    Raises:
        LinkMismatchError: ``strict`` and a measured jump disagrees with its prediction.
    """
    eps = chain.eps if eps is None else eps
    dwell = settings.dwell_time if dwell is None else dwell
    smap = ScatteringMap(model)
    levels = chain.levels[::-1] if reverse else chain.levels
    path = chain.path[::-1] if reverse else chain.path
    line = Polyline(path)
    orbit = PseudoOrbit(path=np.asarray(path))
    link_angles = [np.asarray(lv.theta, dtype=float) for lv in chain.levels[1:]]
    if reverse:
        link_angles = link_angles[::-1]
    I = np.asarray(levels[0].action, dtype=float).copy()
    phi = link_angles[0].copy() if link_angles else np.zeros(model.d)
    t = 0.0
    orbit.record(t, I, line)
    unsteered = 0
    for i, stored in enumerate(link_angles):
        if dwell > 0:
            seg = inner_flow(model, I, phi, t, eps, dwell, samples=samples)
            for ts, x in zip(seg.t[1:], seg.states[1:]):
                orbit.record(t + ts, x[: model.d], line)
            I, t = seg.I[-1].copy(), t + dwell
        target = np.asarray(levels[i + 1].action, dtype=float)
        theta, steered = _steer(smap, I, target, eps, stored, reverse)
        red = smap.melnikov.reduced_poincare(I, theta)
        jump = eps * red.grad_theta
        new_I = I - jump if reverse else I + jump
        if not steered:
            new_I = target.copy()
            unsteered += 1
        entry = {"link": i, "I": I.tolist(), "theta": theta.tolist(), "jump": (new_I - I).tolist(), "steered": steered}
        if direct and (direct_every <= 1 or i % direct_every == 0):
            meas = measure_scattering(model, eps, I, theta, melnikov=smap.melnikov)
            tol = max(0.1 * float(np.linalg.norm(meas.predicted)), eps**1.5)
            entry["measured"] = meas.measured.tolist()
            entry["mismatch"] = meas.discrepancy
            if meas.discrepancy > tol:
                orbit.flagged.append(i)
                logger.warning("Link jump mismatch", link=i, mismatch=meas.discrepancy, tol=tol)
                if strict:
                    raise LinkMismatchError(f"link {i}: measured jump differs by {meas.discrepancy:.3g}", link=i)
        orbit.jumps.append(entry)
        I = new_I
        if i + 1 < len(link_angles):
            phi = link_angles[i + 1] + model.frequency(I) * np.mod(t, TWO_PI)
        else:
            theta_new = theta + eps * red.grad_I if reverse else theta - eps * red.grad_I
            phi = theta_new + model.frequency(I) * np.mod(t, TWO_PI)
        orbit.record(t, I, line)
    if dwell > 0:
        seg = inner_flow(model, I, phi, t, eps, dwell, samples=samples)
        for ts, x in zip(seg.t[1:], seg.states[1:]):
            orbit.record(t + ts, x[: model.d], line)
    logger.info("Pseudo-orbit replayed", links=len(link_angles), max_deviation=orbit.max_deviation,
                flagged=len(orbit.flagged), unsteered=unsteered)
    return orbit
