"""First-order scattering map, hypothesis verification and transition chains.

The scattering map of the reduced Poincare function L*(I, theta) is

    I' = I + eps dL*/dtheta,   theta' = theta - eps dL*/dI.

Heteroclinic links between tori are zeros of the leading-order
intersection equations; chains are sequences of tori along a path whose
consecutive members are joined by such links.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.config.settings import settings
from app.exceptions.custom_exceptions import (
    ChainError,
    ConvergenceError,
    HypothesisError,
    NoSolutionError,
    RegionError,
    TangencyError,
)
from app.models.reports import (
    ChainLevelModel,
    ChainReport,
    HypothesisEntry,
    HypothesisReport,
    HypothesisStatus,
)
from app.services.averaging import (
    NormalForm,
    Normalization,
    chart_coordinates,
    normalize,
    resonant_keep,
    resonant_normal_form,
)
from app.services.hamiltonian import Model, twist_determinants
from app.services.melnikov import MelnikovEval
from app.services.resonance import (
    ReducedDomain,
    Resonance,
    build_reduced_domain,
    build_web,
    classify,
    default_tube_radius,
)
from app.utils.logger import get_logger

logger = get_logger(__name__)

TWO_PI = 2.0 * np.pi
FD_ANGLE_STEP = 1e-6


def angle_grid(d: int, points: int) -> np.ndarray:
    """Regular grid of [0, 2 pi)^d with ``points`` per axis; shape (points^d, d) in C order."""
    axis = np.linspace(0.0, TWO_PI, points, endpoint=False)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, d)


def wrap(theta):
    """Angles to [-pi, pi)."""
    return np.mod(np.asarray(theta, dtype=float) + np.pi, TWO_PI) - np.pi


def periodic_local_minima(values: np.ndarray, d: int, points: int) -> np.ndarray:
    """Flat indices of grid points not larger than any axis neighbour (periodic grid)."""
    grid = values.reshape((points,) * d)
    local = np.isfinite(grid)
    for axis in range(d):
        for shift in (1, -1):
            neighbour = np.roll(grid, shift, axis=axis)
            local &= ~(np.isfinite(neighbour) & (neighbour < grid))
    return np.flatnonzero(local.ravel())


@dataclass
class ReducedFields:
    """L*, its theta-gradient and theta-Hessian over a set of angles at one action."""

    I: np.ndarray
    thetas: np.ndarray
    tau: np.ndarray
    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    ok: np.ndarray


@dataclass
class GradientRange:
    """Samples of dL*/dtheta over an angle grid."""

    I: np.ndarray
    samples: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    largest: float


class ScatteringMap:
    """First-order scattering map of a model with an invariant manifold p = q = 0."""

    def __init__(self, model: Model, branch: int = 1, melnikov: Optional[MelnikovEval] = None):
        model.require_lambda_invariant()
        self.model = model
        self.melnikov = melnikov or MelnikovEval(model, branch)

    def fields(self, I, thetas: np.ndarray) -> ReducedFields:
        """Vectorized L*, gradient and Hessian at the first-crest tau*."""
        ev = self.melnikov
        I = np.asarray(I, dtype=float)
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        m, d = thetas.shape
        if ev.trivial:
            zeros = np.zeros(m)
            return ReducedFields(I, thetas, zeros, zeros, np.zeros((m, d)), np.zeros((m, d, d)), np.ones(m, dtype=bool))
        if ev.harmonic:
            amp = ev.amplitudes(I)
            tau, ok = ev.first_crest(I, thetas)
            t = np.where(ok, tau, 0.0)
            value = amp.value(t, thetas)
            grad = amp.d_phi(t, thetas)
            mixed = amp.d_phi_tau(t, thetas)
            curvature = np.where(ok, amp.d2_tau(t, thetas), 1.0)
            hess = amp.d2_phi(t, thetas) - np.einsum("mi,mj->mij", mixed, mixed) / curvature[:, None, None]
            return ReducedFields(I, thetas, tau, value, grad, hess, ok)
        tau = np.full(m, np.nan)
        value = np.full(m, np.nan)
        grad = np.full((m, d), np.nan)
        hess = np.full((m, d, d), np.nan)
        ok = np.zeros(m, dtype=bool)
        for i, theta in enumerate(thetas):
            try:
                red = ev.reduced_poincare(I, theta)
            except RegionError:
                continue
            tau[i], value[i], grad[i], hess[i], ok[i] = red.tau[0], red.value, red.grad_theta, red.hessian_theta, True
        return ReducedFields(I, thetas, tau, value, grad, hess, ok)

    def __call__(self, eps: float, I, theta, tau_guess=None) -> Tuple[np.ndarray, np.ndarray]:
        """(I', theta') = (I + eps dL*/dtheta, theta - eps dL*/dI)."""
        I = np.asarray(I, dtype=float)
        theta = np.asarray(theta, dtype=float)
        if eps == 0.0:
            return I.copy(), theta.copy()
        red = self.melnikov.reduced_poincare(I, theta, tau_guess)
        return I + eps * red.grad_theta, theta - eps * red.grad_I

    def in_phi(self, eps: float, I, phi, s: float) -> Tuple[np.ndarray, np.ndarray]:
        """The map in (I, phi) at time s, using theta = phi - omega(I) s."""
        I = np.asarray(I, dtype=float)
        theta = np.asarray(phi, dtype=float) - self.model.frequency(I) * s
        I_new, theta_new = self(eps, I, theta)
        return I_new, theta_new + self.model.frequency(I_new) * s

    def jacobian(self, eps: float, I, theta, h: float = 1e-5) -> float:
        """Determinant of the numerical derivative of (I, theta) -> (I', theta')."""
        I = np.asarray(I, dtype=float)
        theta = np.asarray(theta, dtype=float)
        d = len(I)
        z = np.concatenate([I, theta])
        base_tau = self.melnikov.reduced_poincare(I, theta).tau
        jac = np.zeros((2 * d, 2 * d))
        for i in range(2 * d):
            e = np.zeros(2 * d)
            e[i] = h
            plus = np.concatenate(self(eps, (z + e)[:d], (z + e)[d:], base_tau))
            minus = np.concatenate(self(eps, (z - e)[:d], (z - e)[d:], base_tau))
            jac[:, i] = (plus - minus) / (2.0 * h)
        return float(np.linalg.det(jac))


def scattering_map(model: Model, eps: float, I, theta) -> Tuple[np.ndarray, np.ndarray]:
    return ScatteringMap(model)(eps, I, theta)


def scattering_jacobian(model: Model, eps: float, I, theta) -> float:
    return ScatteringMap(model).jacobian(eps, I, theta)


def gradient_range(smap: ScatteringMap, I, points: Optional[int] = None) -> GradientRange:
    """Range of dL*/dtheta over an angle grid at I."""
    points = points or settings.angle_grid
    fields = smap.fields(I, angle_grid(smap.model.d, points))
    samples = fields.grad[fields.ok]
    if not len(samples):
        zeros = np.zeros(smap.model.d)
        return GradientRange(np.asarray(I, dtype=float), samples, zeros, zeros, 0.0)
    return GradientRange(
        I=np.asarray(I, dtype=float),
        samples=samples,
        lower=samples.min(axis=0),
        upper=samples.max(axis=0),
        largest=float(np.max(np.linalg.norm(samples, axis=1))),
    )


# Heteroclinic intersection equations


@dataclass
class HeteroclinicSolution:
    theta: np.ndarray
    residual: float
    jacobian: float
    tau: Optional[np.ndarray] = None


class ResonantChart:
    """Level-set chart (E_hat, E_m) near a secular resonance R(k0|l0) of order j."""

    def __init__(self, model: Model, resonance: Resonance, eps: float, norm: Optional[Normalization] = None):
        self.model = model
        self.resonance = resonance
        self.eps = eps
        self.k0 = np.asarray(resonance.k, dtype=float)
        self.l0 = resonance.l
        self.order = resonance.order
        self.m = int(np.flatnonzero(self.k0)[0])
        self.norm = norm or normalize(model, self.order, keep=resonant_keep(resonance.index))
        self._forms: Dict[Tuple[float, ...], NormalForm] = {}

    @property
    def label(self) -> str:
        return self.resonance.label

    def normal_form(self, E_hat) -> NormalForm:
        key = tuple(np.round(np.asarray(E_hat, dtype=float), 12))
        if key not in self._forms:
            self._forms[key] = resonant_normal_form(
                self.model, self.resonance.k, self.l0, E_hat, order=self.order, norm=self.norm
            )
        return self._forms[key]

    def band(self) -> float:
        """Half width of the excluded separatrix band."""
        return settings.gap_floor * self.eps ** (0.5 * self.order + 1.5)

    def scale(self) -> float:
        """eps^(1 + j/2): size of E_m jumps."""
        return self.eps ** (1.0 + 0.5 * self.order)

    def zeta(self, nf: NormalForm, E_m: float) -> float:
        """Signed distance from the separatrix level; positive on primary tori."""
        return float(np.sign(nf.a) * (E_m - nf.critical_energy(self.eps)))

    def coordinates(self, I, theta) -> Tuple[np.ndarray, float, str]:
        """Chart values (E_hat, E_m) and branch of the torus through (I, theta)."""
        I = np.asarray(I, dtype=float)
        E_hat, ratio = chart_coordinates(I, self.resonance.k, self.m)
        nf = self.normal_form(E_hat)
        y = ratio - nf.t_star
        psi = float(self.k0 @ np.asarray(theta, dtype=float))
        h = self.model.h_value
        E_m = self.l0 * y + h(nf.B_star + y * self.k0) - h(nf.B_star) + self.eps**self.order * float(nf.U(psi))
        branch = "secondary" if self.zeta(nf, E_m) < 0 else ("+" if y >= 0 else "-")
        return E_hat, float(E_m), branch

    def action(self, E_hat, E_m: float, sign: int, psi: float) -> np.ndarray:
        """Representative action of the torus (E_hat, E_m) at the resonant angle psi."""
        nf = self.normal_form(E_hat)
        ell = nf.ell(psi, E_m, self.eps)
        y = sign * float(ell) if np.isfinite(ell) else 0.0
        return nf.B_star + y * self.k0

    def fields(self, smap: ScatteringMap, E_hat, E_m: float, sign: int, thetas: np.ndarray):
        """Left-hand sides (dL*/dtheta_hat, sign a ell dL*/dpsi) of the resonant equations.

        Returns (values of shape (m, d), valid mask). Angles within rho of
        the saddle and angles where ell is undefined are invalid.
        """
        nf = self.normal_form(E_hat)
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        red = smap.fields(nf.B_star, thetas)
        psi = thetas @ self.k0
        ell = nf.ell(psi, E_m, self.eps) / self.eps ** (0.5 * self.order)
        valid = red.ok & np.isfinite(ell) & (np.abs(wrap(psi - nf.saddle_theta)) >= settings.rho)
        g = red.grad
        k_hat = np.delete(self.k0, self.m)
        g_hat = np.delete(g, self.m, axis=1) - np.outer(g[:, self.m] / self.k0[self.m], k_hat)
        g_psi = g[:, self.m] / self.k0[self.m]
        last = sign * nf.a * np.where(np.isfinite(ell), ell, 0.0) * g_psi
        return np.column_stack([g_hat, last]), valid


def _newton(residual_fn, jacobian_fn, theta0: np.ndarray, tol: float) -> Tuple[np.ndarray, float, float]:
    theta = np.array(theta0, dtype=float)
    value = residual_fn(theta)
    for _ in range(settings.newton_max_iter):
        if not np.all(np.isfinite(value)):
            break
        res = float(np.max(np.abs(value)))
        if res <= tol:
            return theta, res, float(np.linalg.det(jacobian_fn(theta)))
        jac = jacobian_fn(theta)
        try:
            step = np.linalg.solve(jac, value)
        except np.linalg.LinAlgError:
            break
        theta = theta - step
        value = residual_fn(theta)
    raise ConvergenceError("heteroclinic Newton did not converge")


def _dedupe(solutions: List[HeteroclinicSolution]) -> List[HeteroclinicSolution]:
    out: List[HeteroclinicSolution] = []
    for sol in solutions:
        sol.theta = np.mod(sol.theta, TWO_PI)
        if any(np.max(np.abs(wrap(sol.theta - o.theta))) < 1e-7 for o in out):
            continue
        out.append(sol)
    return out


def heteroclinic_solve(
    smap: ScatteringMap,
    E,
    E_next,
    eps: float,
    chart: Optional[ResonantChart] = None,
    sign: int = 1,
    seeds: Optional[np.ndarray] = None,
    points: Optional[int] = None,
) -> List[HeteroclinicSolution]:
    """Angles joining the torus E to the torus E_next at leading order.

    Free chart: dL*/dtheta(E, theta) = (E_next - E)/eps. Resonant chart
    (E = (E_hat, E_m)): the E_hat rows equal (E_hat' - E_hat)/eps and the
    last row equals (E_m' - E_m)/eps^(1 + j/2). Without ``seeds`` every
    local minimum of the mismatch on the angle grid starts a Newton solve.

    Raises:
        NoSolutionError: no solution; the target lies outside the range of the left-hand side.
    """
    d = smap.model.d
    points = points or settings.angle_grid
    E = np.asarray(E, dtype=float)
    E_next = np.asarray(E_next, dtype=float)
    if eps == 0.0:
        if np.allclose(E, E_next):
            target = np.zeros(d)
        else:
            raise NoSolutionError("eps = 0 joins a torus only to itself")
    elif chart is None:
        target = (E_next - E) / eps
    else:
        target = np.concatenate([(E_next[:-1] - E[:-1]) / eps, [(E_next[-1] - E[-1]) / chart.scale()]])

    if chart is None:
        I = E

        def sample(thetas):
            f = smap.fields(I, thetas)
            return f.grad, f.ok

        def residual(theta):
            red = smap.melnikov.reduced_poincare(I, theta)
            return red.grad_theta - target

        def jacobian(theta):
            return smap.melnikov.reduced_poincare(I, theta).hessian_theta
    else:
        E_hat, E_m = E[:-1], float(E[-1])

        def sample(thetas):
            return chart.fields(smap, E_hat, E_m, sign, thetas)

        def residual(theta):
            values, valid = sample(theta[None, :])
            if not valid[0]:
                return np.full(d, np.nan)
            return values[0] - target

        def jacobian(theta):
            jac = np.zeros((d, d))
            for i in range(d):
                e = np.zeros(d)
                e[i] = FD_ANGLE_STEP
                jac[:, i] = (residual(theta + e) - residual(theta - e)) / (2.0 * FD_ANGLE_STEP)
            return jac

    if seeds is None:
        grid = angle_grid(d, points)
        values, ok = sample(grid)
        mismatch = np.where(ok, np.linalg.norm(values - target, axis=1), np.inf)
        if not np.any(ok):
            raise NoSolutionError("no admissible angle for the intersection equations")
        span = np.max(np.linalg.norm(values[ok], axis=1))
        if np.linalg.norm(target) > 1.05 * span + 1e-12:
            raise NoSolutionError(
                f"|target| = {np.linalg.norm(target):.3g} exceeds the range {span:.3g} of the intersection equations"
            )
        minima = periodic_local_minima(mismatch, d, points)
        minima = minima[np.argsort(mismatch[minima])][: settings.max_seeds]
        seeds = grid[minima]
    solutions = []
    for seed in np.atleast_2d(seeds):
        try:
            theta, res, det = _newton(residual, jacobian, seed, settings.link_tol)
        except (ConvergenceError, RegionError, TangencyError):
            continue
        solutions.append(HeteroclinicSolution(theta=theta, residual=res, jacobian=det))
    solutions = _dedupe(solutions)
    if not solutions:
        raise NoSolutionError("intersection equations have no solution from the available seeds")
    return solutions


# Hypotheses


def _entry(name, status, detail="", **kw) -> HypothesisEntry:
    return HypothesisEntry(name=name, status=status, detail=detail, **kw)


def check_twist(model: Model, action_grid: int) -> HypothesisEntry:
    """H3 on the action grid: |det D2h| stays above h3_det_floor."""
    grid, dets = twist_determinants(model, action_grid)
    dets = np.abs(dets)
    worst = int(np.argmin(dets))
    value = float(dets[worst])
    if value > settings.h3_det_floor:
        return _entry("H3", HypothesisStatus.PASS, "D2h non-degenerate on the box", value=value,
                      threshold=settings.h3_det_floor)
    return _entry("H3", HypothesisStatus.FAIL, "D2h is singular; I -> omega(I) is not a diffeomorphism",
                  value=value, threshold=settings.h3_det_floor, witness=grid[worst].tolist())


def verify_hypotheses(
    model: Model,
    action_grid: int = 17,
    points: Optional[int] = None,
    eps: float = 1e-3,
    delta: float = 0.05,
    resonance_samples: int = 3,
) -> HypothesisReport:
    """Check H1-H8 (and H8') over an action grid times an angle grid.

    Failures are report entries, each with a witness and the measured value.
    """
    points = points or settings.angle_grid
    d = model.d
    PASS, FAIL, NA = HypothesisStatus.PASS, HypothesisStatus.FAIL, HypothesisStatus.NOT_APPLICABLE
    entries: List[HypothesisEntry] = [
        _entry("H1", PASS, "analytic by construction of the expression grammar"),
        _entry("H2", PASS, "hyperbolic saddles", value=min(p.alpha for p in model.pendula)),
    ]
    entries.append(check_twist(model, action_grid))
    malformed = [list(t.k) for t in model.terms if len(t.k) != d]
    entries.append(_entry("H4", FAIL if malformed else PASS, "Fourier indices of length d",
                          value=float(len(model.terms)), witness=malformed[0] if malformed else None))
    if not model.lambda_invariant:
        entries.append(_entry("Lambda-invariance", FAIL, "p = q = 0 is not invariant under the perturbation"))
        return HypothesisReport(entries=entries, action_grid=action_grid, angle_grid=points, tolerances=_tolerances())

    web = build_web(model, 2)
    domain = build_reduced_domain(web, delta)
    secular = web.secular
    if not secular:
        entries.append(_entry("H5", NA, "no secular resonance"))
        entries.append(_entry("H6", NA, "no secular resonance"))
    h6_ok: Dict[str, bool] = {}
    for res in secular:
        pts = res.sample(model.box, 65)
        if not len(pts):
            entries.append(_entry("H5", NA, "resonance outside the box", resonance=res.label))
            continue
        a_values = np.array([res.a(p) for p in pts])
        worst = int(np.argmin(np.abs(a_values)))
        if abs(a_values[worst]) <= settings.h3_det_floor:
            entries.append(
                _entry("H5", FAIL, "a = k0^T D2h k0 vanishes", value=float(a_values[worst]),
                       threshold=settings.h3_det_floor, witness=pts[worst].tolist(), resonance=res.label)
            )
            h6_ok[res.label] = False
            entries.append(_entry("H6", NA, "H5 fails", resonance=res.label))
            continue
        entries.append(_entry("H5", PASS, "a bounded away from 0", value=float(np.min(np.abs(a_values))),
                              threshold=settings.h3_det_floor, resonance=res.label))
        entries.append(_check_h6(model, res, domain, pts, resonance_samples))
        h6_ok[res.label] = entries[-1].status == PASS

    smap = ScatteringMap(model)
    if smap.melnikov.trivial or _melnikov_vanishes(smap, model):
        entries.append(_entry("H7", NA, "Melnikov potential vanishes identically"))
        entries.append(_entry("H8", NA, "Melnikov potential vanishes identically"))
        entries.append(_entry("H8'", NA, "Melnikov potential vanishes identically"))
        return HypothesisReport(entries=entries, action_grid=action_grid, angle_grid=points, tolerances=_tolerances())

    axes = [np.linspace(lo, hi, action_grid) for lo, hi in model.box]
    actions = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    thetas = angle_grid(d, points)
    entries.extend(_check_h7_h8(smap, domain, actions, thetas, points))
    for res in secular:
        if h6_ok.get(res.label):
            entries.append(_check_h8_resonant(smap, res, domain, eps, resonance_samples, points))
    report = HypothesisReport(entries=entries, action_grid=action_grid, angle_grid=points, tolerances=_tolerances())
    logger.info("Hypotheses verified", passed=report.passed, failures=[e.name for e in entries if e.status == FAIL])
    return report


def _tolerances() -> Dict[str, float]:
    return {
        "h3_det_floor": settings.h3_det_floor,
        "beta_min": settings.beta_min,
        "tau_tol": settings.tau_tol,
        "link_tol": settings.link_tol,
        "rho": settings.rho,
    }


def _melnikov_vanishes(smap: ScatteringMap, model: Model) -> bool:
    if not smap.melnikov.harmonic:
        return False
    rng = np.random.default_rng(settings.seed)
    for _ in range(settings.sample_points):
        I = rng.uniform(model.box[:, 0], model.box[:, 1])
        if np.max(np.abs(smap.melnikov.amplitudes(I).Z), initial=0.0) > 1e-12:
            return False
    return True


def _resonance_points(res: Resonance, domain: ReducedDomain, pts: np.ndarray, count: int) -> np.ndarray:
    clear, _ = domain.clearances(pts)
    pts = pts[clear > domain.delta]
    if not len(pts):
        return pts
    idx = np.unique(np.linspace(0, len(pts) - 1, count + 2).round().astype(int)[1:-1])
    return pts[idx] if len(idx) else pts[:1]


def _check_h6(model: Model, res: Resonance, domain: ReducedDomain, pts: np.ndarray, count: int) -> HypothesisEntry:
    norm = normalize(model, res.order, keep=resonant_keep(res.index))
    m = int(np.flatnonzero(np.asarray(res.k))[0])
    worst = np.inf
    for I in _resonance_points(res, domain, pts, count):
        E_hat, _ = chart_coordinates(I, res.k, m)
        try:
            nf = resonant_normal_form(model, res.k, res.l, E_hat, order=res.order, norm=norm)
        except HypothesisError as exc:
            return _entry("H6", HypothesisStatus.FAIL, exc.message, value=exc.value, witness=I.tolist(),
                          resonance=res.label, threshold=settings.beta_min)
        worst = min(worst, abs(nf.saddle_curvature))
    if not np.isfinite(worst):
        return _entry("H6", HypothesisStatus.NOT_APPLICABLE, "no sample outside B_delta", resonance=res.label)
    return _entry("H6", HypothesisStatus.PASS, "unique non-degenerate saddle of U*", value=float(worst),
                  threshold=settings.beta_min, resonance=res.label)


def critical_points(smap: ScatteringMap, I, points: int) -> List[HeteroclinicSolution]:
    """Critical points of theta -> L*(I, theta) from a grid scan and Newton polish."""
    try:
        return heteroclinic_solve(smap, I, I, 1.0, points=points)
    except NoSolutionError:
        return []


def _check_h7_h8(smap, domain, actions, thetas, points) -> List[HypothesisEntry]:
    PASS, FAIL = HypothesisStatus.PASS, HypothesisStatus.FAIL
    d = smap.model.d
    h7_worst, h7_witness, h7_failures = np.inf, None, 0
    h8_worst, h8_witness = np.inf, None
    h8p_worst, h8p_witness = np.inf, None
    L = domain.L or default_tube_radius(domain)
    for I in actions:
        fields = smap.fields(I, thetas)
        scale = max(1.0, float(np.max(np.abs(smap.melnikov.amplitudes(I).Z)))) if smap.melnikov.harmonic else 1.0
        if smap.melnikov.harmonic:
            amp = smap.melnikov.amplitudes(I)
            curv = np.abs(amp.d2_tau(np.where(fields.ok, fields.tau, 0.0), thetas)) / scale
            curv = np.where(fields.ok, curv, 0.0)
        else:
            curv = np.where(fields.ok, 1.0, 0.0)
        i = int(np.argmin(curv))
        h7_failures += int(np.sum(~fields.ok))
        if curv[i] < h7_worst:
            h7_worst, h7_witness = float(curv[i]), list(I) + list(thetas[i])
        if not domain.contains(I) or classify(domain, I, L)[0] != "free":
            continue
        crit = critical_points(smap, I, points)
        dets = [abs(c.jacobian) for c in crit]
        best = max(dets, default=0.0)
        if best < h8_worst:
            h8_worst, h8_witness = best, list(I)
        least = min(dets, default=0.0)
        if least < h8p_worst:
            h8p_worst, h8p_witness = least, list(I)
    floor = settings.beta_min
    entries = [
        _entry("H7", PASS if h7_failures == 0 and h7_worst > floor else FAIL,
               f"non-degenerate tau* on the grid ({h7_failures} failures)",
               value=h7_worst, threshold=floor, witness=None if h7_failures == 0 and h7_worst > floor else h7_witness),
    ]
    if np.isfinite(h8_worst):
        entries.append(_entry("H8", PASS if h8_worst > floor else FAIL, "transversal homoclinic point at free actions",
                              value=h8_worst, threshold=floor, witness=None if h8_worst > floor else h8_witness))
        entries.append(_entry("H8'", PASS if h8p_worst > floor else FAIL, "critical points of L* are non-degenerate",
                              value=h8p_worst, threshold=floor, witness=None if h8p_worst > floor else h8p_witness))
    else:
        entries.append(_entry("H8", HypothesisStatus.NOT_APPLICABLE, "no free action on the grid"))
        entries.append(_entry("H8'", HypothesisStatus.NOT_APPLICABLE, "no free action on the grid"))
    return entries


def _check_h8_resonant(smap, res, domain, eps, count, points) -> HypothesisEntry:
    chart = ResonantChart(smap.model, res, eps)
    pts = res.sample(smap.model.box, 65)
    worst, witness = np.inf, None
    for I in _resonance_points(res, domain, pts, count):
        E_hat, _ = chart_coordinates(I, res.k, chart.m)
        nf = chart.normal_form(E_hat)
        spread = float(np.ptp(nf.U(np.linspace(0.0, TWO_PI, 64))))
        for factor in (0.5, 2.0):
            e_m = float(nf.U(nf.saddle_theta)) + np.sign(nf.a) * factor * max(spread, 1e-12)
            E = np.append(E_hat, e_m * eps**chart.order)
            try:
                sols = heteroclinic_solve(smap, E, E, eps, chart=chart, sign=1, points=points)
            except NoSolutionError:
                sols = []
            best = max((abs(s.jacobian) for s in sols), default=0.0)
            if best < worst:
                worst, witness = best, list(I) + [e_m]
    if not np.isfinite(worst):
        return _entry("H8", HypothesisStatus.NOT_APPLICABLE, "no sample outside B_delta", resonance=res.label)
    ok = worst > settings.beta_min
    return _entry("H8", HypothesisStatus.PASS if ok else HypothesisStatus.FAIL,
                  "transversal zeros of the resonant intersection equations", value=float(worst),
                  threshold=settings.beta_min, witness=None if ok else witness, resonance=res.label)


# Chains


class Polyline:
    """Arclength parameterization of a path in action space."""

    def __init__(self, path):
        self.points = np.atleast_2d(np.asarray(path, dtype=float))
        seg = np.diff(self.points, axis=0)
        self.lengths = np.linalg.norm(seg, axis=1)
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.lengths)])

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def at(self, s: float) -> np.ndarray:
        if len(self.points) == 1:
            return self.points[0].copy()
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.clip(np.searchsorted(self.cumulative, s, side="right") - 1, 0, len(self.lengths) - 1))
        frac = (s - self.cumulative[i]) / self.lengths[i] if self.lengths[i] > 0 else 0.0
        return self.points[i] + frac * (self.points[i + 1] - self.points[i])

    def project(self, I) -> float:
        """Arclength of the point of the path closest to I."""
        I = np.asarray(I, dtype=float)
        if len(self.points) == 1:
            return 0.0
        best, best_s = np.inf, 0.0
        for i, (a, b) in enumerate(zip(self.points[:-1], self.points[1:])):
            seg = b - a
            length2 = float(seg @ seg)
            t = 0.0 if length2 == 0 else float(np.clip((I - a) @ seg / length2, 0.0, 1.0))
            dist = float(np.linalg.norm(a + t * seg - I))
            if dist < best:
                best, best_s = dist, self.cumulative[i] + t * self.lengths[i]
        return float(best_s)

    def distance(self, I) -> float:
        return float(np.linalg.norm(self.at(self.project(I)) - np.asarray(I, dtype=float)))


@dataclass
class ChainLevel:
    chart: str
    branch: Optional[str]
    E: np.ndarray
    action: np.ndarray
    theta: Optional[np.ndarray] = None
    residual: Optional[float] = None
    margin: Optional[float] = None
    # equations certifying the link into this level, in the coordinates of link_chart
    link_chart: Optional[str] = None
    link_sign: int = 1
    link_from: Optional[np.ndarray] = None
    link_to: Optional[np.ndarray] = None


@dataclass
class Chain:
    """Ordered tori joined by heteroclinic links."""

    eps: float
    path: np.ndarray
    cap: float
    levels: List[ChainLevel] = field(default_factory=list)
    charts: Dict[str, ResonantChart] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def actions(self) -> np.ndarray:
        return np.array([lv.action for lv in self.levels])

    @property
    def max_residual(self) -> float:
        return max((lv.residual for lv in self.levels if lv.residual is not None), default=0.0)

    def arclengths(self) -> np.ndarray:
        line = Polyline(self.path)
        return np.array([line.project(lv.action) for lv in self.levels])

    @property
    def monotone(self) -> bool:
        s = self.arclengths()
        return bool(np.all(np.diff(s) >= -1e-9)) if len(s) > 1 else True

    def link_residuals(self, smap: ScatteringMap) -> np.ndarray:
        """max |lhs - target| of every link, recomputed from the stored tori and angles.

        Links between two levels of the same chart are checked against the
        levels themselves; links that enter or leave a resonant chart use the
        chart coordinates recorded on the level.
        """
        out = []
        for prev, lv in zip(self.levels[:-1], self.levels[1:]):
            if lv.theta is None:
                out.append(np.inf)
                continue
            label = lv.link_chart or lv.chart
            source = prev.E if prev.chart == label else lv.link_from
            dest = lv.E if lv.chart == label else lv.link_to
            if source is None or dest is None:
                out.append(np.inf)
                continue
            source, dest = np.asarray(source, dtype=float), np.asarray(dest, dtype=float)
            theta = np.asarray(lv.theta, dtype=float)
            if label == "free":
                value = smap.melnikov.reduced_poincare(source, theta).grad_theta
                target = (dest - source) / self.eps
            else:
                chart = self.charts[label]
                values, valid = chart.fields(smap, source[:-1], float(source[-1]), lv.link_sign, theta[None, :])
                if not valid[0]:
                    out.append(np.inf)
                    continue
                value = values[0]
                target = np.concatenate([(dest[:-1] - source[:-1]) / self.eps, [(dest[-1] - source[-1]) / chart.scale()]])
            out.append(float(np.max(np.abs(value - target))))
        return np.array(out)

    def free_jumps(self) -> np.ndarray:
        """|E_{i+1} - E_i| for consecutive free-chart levels."""
        out = []
        for a, b in zip(self.levels[:-1], self.levels[1:]):
            if a.chart == "free" and b.chart == "free":
                out.append(float(np.linalg.norm(b.E - a.E)))
        return np.array(out)

    def reversed(self) -> "Chain":
        return Chain(eps=self.eps, path=self.path[::-1].copy(), cap=self.cap, levels=list(reversed(self.levels)),
                     charts=self.charts)

    def to_report(self) -> ChainReport:
        return ChainReport(
            eps=self.eps,
            path=self.path.tolist(),
            cap=self.cap,
            levels=[
                ChainLevelModel(
                    chart=lv.chart,
                    branch=lv.branch,
                    E=np.asarray(lv.E).tolist(),
                    action=np.asarray(lv.action).tolist(),
                    theta=None if lv.theta is None else np.asarray(lv.theta).tolist(),
                    residual=lv.residual,
                    margin=lv.margin,
                    link_chart=lv.link_chart,
                    link_from=None if lv.link_from is None else np.asarray(lv.link_from).tolist(),
                    link_to=None if lv.link_to is None else np.asarray(lv.link_to).tolist(),
                )
                for lv in self.levels
            ],
            max_residual=self.max_residual,
            monotone=self.monotone,
        )


class ChainBuilder:
    """Steers a sequence of heteroclinic jumps along a path.

    In the free chart every link solves dL*/dtheta(E, theta) = (E' - E)/eps
    with E' - E pointing at a look-ahead point of the path. Inside the tube
    of a secular resonance the levels switch to (E_hat, E_m) and cross the
    resonance through the separatrix band on a secondary torus.
    """

    def __init__(self, model: Model, path, eps: float, domain: ReducedDomain, L: float, spacing: float = 1.0,
                 max_links: Optional[int] = None, points: Optional[int] = None):
        self.model = model
        self.line = Polyline(path)
        self.eps = eps
        self.domain = domain
        self.L = L
        self.spacing = spacing
        self.max_links = max_links or settings.max_links
        self.points = points or settings.angle_grid
        self.smap = ScatteringMap(model)
        self.charts: Dict[str, ResonantChart] = {}
        start = self.line.points[0]
        self.reach = gradient_range(self.smap, start, self.points).largest
        self.cap = settings.jump_cap * self.spacing * eps * self.reach

    def _chart(self, res: Resonance) -> ResonantChart:
        if res.label not in self.charts:
            self.charts[res.label] = ResonantChart(self.model, res, self.eps)
        return self.charts[res.label]

    def run(self) -> Chain:
        start = self.line.points[0]
        chain = Chain(eps=self.eps, path=self.line.points.copy(), cap=self.cap, charts=self.charts)
        chain.levels.append(ChainLevel(chart="free", branch=None, E=start.copy(), action=start.copy()))
        if self.line.length == 0.0:
            return chain
        if self.eps == 0.0 or self.reach == 0.0:
            raise ChainError("jumps vanish (eps = 0 or dL*/dtheta = 0); the path cannot be followed", segment=0)
        theta = np.zeros(self.model.d)
        while True:
            if len(chain.levels) > self.max_links:
                raise ChainError(f"chain exceeded {self.max_links} links", segment=self._segment(chain.levels[-1].action))
            current = chain.levels[-1]
            if np.linalg.norm(current.action - self.line.end) <= 1e-12:
                break
            region, res, _ = classify(self.domain, current.action, self.L)
            if region == "resonant":
                theta = self._cross(chain, self._chart(res), theta)
                continue
            level = self._free_link(current, theta)
            chain.levels.append(level)
            theta = level.theta
            if len(chain.levels) % 100 == 0:
                logger.info("Chain progress", links=len(chain.levels), arclength=self.line.project(level.action))
        logger.info("Chain built", links=len(chain.levels), max_residual=chain.max_residual, monotone=chain.monotone)
        return chain

    def _segment(self, I) -> int:
        s = self.line.project(I)
        return int(np.clip(np.searchsorted(self.line.cumulative, s, side="right") - 1, 0, max(0, len(self.line.points) - 2)))

    def _free_link(self, current: ChainLevel, theta_prev) -> ChainLevel:
        E = current.E
        s0 = self.line.project(E)
        remaining = np.linalg.norm(self.line.end - E)
        target_point = self.line.at(s0 + 3.0 * self.cap)
        final = remaining <= self.cap
        if final:
            target_point = self.line.end
        desired = target_point - E
        u = desired / np.linalg.norm(desired)
        fields = self.smap.fields(E, angle_grid(self.model.d, self.points))
        g = fields.grad[fields.ok]
        seeds_all = fields.thetas[fields.ok]
        proj = g @ u
        perp = np.linalg.norm(g - np.outer(proj, u), axis=1)
        score = proj - 2.0 * perp
        order = np.argsort(-score)
        if proj[order[0]] <= 0:
            raise ChainError(f"no jump makes progress along the path at I={E.tolist()}", segment=self._segment(E))
        magnitude = min(settings.jump_cap * self.spacing * float(proj[order[0]]), np.linalg.norm(desired) / self.eps)
        for _ in range(6):
            w = magnitude * u
            E_next = E + self.eps * w
            seeds = seeds_all[np.argsort(np.linalg.norm(g - w, axis=1))[:4]]
            try:
                sols = heteroclinic_solve(self.smap, E, E_next, self.eps, seeds=seeds)
            except NoSolutionError:
                magnitude *= 0.5
                continue
            best = min(sols, key=lambda sol: np.max(np.abs(wrap(sol.theta - np.asarray(theta_prev)))))
            if best.residual > settings.link_tol:
                magnitude *= 0.5
                continue
            if final and np.linalg.norm(E_next - self.line.end) <= 1e-14 * (1.0 + np.linalg.norm(self.line.end)):
                E_next = self.line.end.copy()
            return ChainLevel(chart="free", branch=None, E=E_next, action=E_next.copy(), theta=best.theta,
                              residual=best.residual, margin=abs(best.jacobian),
                              link_chart="free", link_from=E.copy(), link_to=E_next.copy())
        raise ChainError(f"link failure at I={E.tolist()}", segment=self._segment(E))

    def _cross(self, chain: Chain, chart: ResonantChart, theta) -> np.ndarray:
        """Links inside the tube of one secular resonance, ending back in the free chart."""
        level = chain.levels[-1]
        E_hat, E_m, branch = chart.coordinates(level.action, theta)
        sign = 1 if branch != "-" else -1
        psi = float(chart.k0 @ theta)
        steps = 0
        while True:
            steps += 1
            if steps > self.max_links:
                raise ChainError(f"no exit from the tube of {chart.label}", segment=self._segment(level.action))
            nf = chart.normal_form(E_hat)
            action = chart.action(E_hat, E_m, sign, psi)
            region, res, _ = classify(self.domain, action, self.L)
            if region != "resonant" and branch != "secondary":
                last = chain.levels[-1]
                chain.levels[-1] = ChainLevel(chart="free", branch=None, E=action.copy(), action=action.copy(),
                                              theta=last.theta, residual=last.residual, margin=last.margin,
                                              link_chart=last.link_chart, link_sign=last.link_sign,
                                              link_from=last.link_from, link_to=last.link_to)
                return theta
            s0 = self.line.project(action)
            target = self.line.at(s0 + 3.0 * self.cap)
            T_hat, T_ratio = chart_coordinates(target, chart.resonance.k, chart.m)
            y_target = T_ratio - chart.normal_form(T_hat).t_star
            target_sign = 1 if y_target >= 0 else -1
            band = chart.band()
            zeta = chart.zeta(nf, E_m)
            E_star = nf.critical_energy(self.eps)
            s_a = float(np.sign(nf.a))
            if branch == "secondary":
                goal_m, next_branch = E_star + s_a * band, ("+" if target_sign > 0 else "-")
                link_sign = target_sign
                exact = True
            elif target_sign != sign:
                if zeta > band * (1.0 + 1e-9):
                    goal_m, next_branch, exact = E_star + s_a * band, branch, False
                else:
                    goal_m, next_branch, exact = E_star - s_a * band, "secondary", True
                link_sign = sign
            else:
                h = self.model.h_value
                B = chart.normal_form(T_hat).B_star
                goal_m = chart.l0 * y_target + h(B + y_target * chart.k0) - h(B)
                goal_m = E_star + s_a * max(s_a * (goal_m - E_star), band)
                next_branch, link_sign, exact = branch, sign, False
            E = np.append(E_hat, E_m)
            goal = np.append(T_hat, goal_m)
            w_full = np.concatenate([(goal[:-1] - E[:-1]) / self.eps, [(goal[-1] - E[-1]) / chart.scale()]])
            new = self._resonant_link(chart, E, w_full, link_sign, exact, level.action)
            E_hat, E_m = new[0][:-1], float(new[0][-1])
            theta = new[1].theta
            psi = float(chart.k0 @ theta)
            branch, sign = next_branch, (link_sign if next_branch == "secondary" else (1 if next_branch == "+" else -1))
            action = chart.action(E_hat, E_m, sign, psi)
            level = ChainLevel(chart=chart.label, branch=branch, E=np.append(E_hat, E_m), action=action,
                               theta=theta, residual=new[1].residual, margin=abs(new[1].jacobian),
                               link_chart=chart.label, link_sign=link_sign, link_from=E.copy(), link_to=new[0].copy())
            chain.levels.append(level)

    def _resonant_link(self, chart: ResonantChart, E, w_full, sign, exact, action):
        """Solve one resonant link toward w_full, shrinking it when out of reach."""
        d = self.model.d
        grid = angle_grid(d, self.points)
        values, valid = chart.fields(self.smap, E[:-1], float(E[-1]), sign, grid)
        if not np.any(valid):
            raise ChainError(f"no admissible angle in {chart.label}", segment=self._segment(action))
        reach = np.max(np.linalg.norm(values[valid], axis=1))
        w = np.array(w_full, dtype=float)
        if exact:
            # band crossings keep their E_m jump; the E_hat drift is dropped when out of reach
            if np.linalg.norm(w) > settings.jump_cap * reach:
                w[:-1] = 0.0
            if abs(w[-1]) > settings.jump_cap * reach:
                raise ChainError(f"separatrix band of {chart.label} wider than one jump", segment=self._segment(action))
        else:
            norm = np.linalg.norm(w)
            if norm > settings.jump_cap * self.spacing * reach:
                w *= settings.jump_cap * self.spacing * reach / norm
        for _ in range(6):
            mismatch = np.where(valid, np.linalg.norm(values - w, axis=1), np.inf)
            seeds = grid[np.argsort(mismatch)[:4]]
            target = E + np.concatenate([self.eps * w[:-1], [chart.scale() * w[-1]]])
            try:
                sols = heteroclinic_solve(self.smap, E, target, self.eps, chart=chart, sign=sign, seeds=seeds)
                return target, min(sols, key=lambda s: s.residual)
            except NoSolutionError:
                if exact:
                    w[:-1] *= 0.5
                else:
                    w *= 0.5
        raise ChainError(f"resonant link failure in {chart.label}", segment=self._segment(action))


def build_chain(
    model: Model,
    path,
    eps: float,
    spacing: float = 1.0,
    delta: float = 0.05,
    L: Optional[float] = None,
    domain: Optional[ReducedDomain] = None,
    points: Optional[int] = None,
) -> Chain:
    """Transition chain along a polyline in I_delta.

    Raises:
        ClearanceError: the path comes within delta of B.
        ChainError: a link cannot be solved (carries the blocking segment).
    """
    model.require_lambda_invariant()
    path = np.atleast_2d(np.asarray(path, dtype=float))
    if domain is None:
        domain = build_reduced_domain(build_web(model, 2), delta)
    domain.check_path(path)
    L = L or domain.L or default_tube_radius(domain)
    if len(path) == 1 or np.allclose(path, path[0]):
        start = path[0]
        return Chain(eps=eps, path=path, cap=0.0, levels=[ChainLevel(chart="free", branch=None, E=start.copy(), action=start.copy())])
    return ChainBuilder(model, path, eps, domain, L, spacing=spacing, points=points).run()
