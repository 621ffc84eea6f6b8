"""Melnikov potential, critical fiber times and the reduced Poincare function.

L(tau, I, phi, s) = -int [Q(I, phi + omega u, p*(tau + u), q*(tau + u), s + u; 0)
                          - Q(I, phi + omega u, 0, 0, s + u; 0)] du

For a single pendulum the integral splits into one complex amplitude per
Fourier term,

    Z(I) = int (c(I, p*(u), q*(u)) - c(I, 0, 0)) e^{i nu u} du,   nu = omega.k + l,

and L with all its derivatives follows in closed form. With several
pendula the integral is evaluated directly and differentiated numerically.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from app.config.settings import settings
from app.exceptions.custom_exceptions import ConvergenceError, HypothesisError, RegionError
from app.services.hamiltonian import Model
from app.services.separatrix import common_cut, is_standard_pendulum, model_homoclinics
from app.utils.logger import get_logger

logger = get_logger(__name__)

# 15-point Kronrod rule with the embedded 7-point Gauss rule on [-1, 1]
_XK = np.array(
    [
        0.991455371120812639206854697526329,
        0.949107912342758524526189684047851,
        0.864864423359769072789712788640926,
        0.741531185599394439863864773280788,
        0.586087235467691130294144845693013,
        0.405845151377397166906606412076961,
        0.207784955007898467600689403773245,
        0.0,
    ]
)
_WK = np.array(
    [
        0.022935322010529224963732008058970,
        0.063092092629978553290700663189204,
        0.104790010322250183839876322541518,
        0.140653259715525918745189590510238,
        0.169004726639267902826583426598550,
        0.190350578064785409913256402421014,
        0.204432940075298892414161999234649,
        0.209482141084727828012999174891714,
    ]
)
_WG = np.array(
    [
        0.129484966168869693270611432679082,
        0.279705391489276667901467771423780,
        0.381830050505118944950369775488975,
        0.417959183673469387755102040816327,
    ]
)
KRONROD_NODES = np.concatenate([-_XK[:-1], _XK[::-1]])
KRONROD_WEIGHTS = np.concatenate([_WK[:-1], _WK[::-1]])
GAUSS_INDEX = np.array([1, 3, 5, 7, 9, 11, 13])
GAUSS_WEIGHTS = np.concatenate([_WG[:-1], _WG[::-1]])

FD_STEP = 1e-4


def gauss_kronrod(f, a: float, b: float, width: float, abs_tol: float, max_panels: Optional[int] = None):
    """Adaptive composite Gauss-Kronrod quadrature of a vector-valued integrand.

    ``f`` maps an array of abscissae of shape (m,) to values of shape (k, m).
    Panels start no wider than ``width`` and are bisected until the
    Kronrod-Gauss difference meets the share of ``abs_tol`` owed by each panel.

    Returns:
        (integral of shape (k,), error estimate)
    """
    max_panels = max_panels or settings.quad_max_panels
    count = max(1, int(np.ceil((b - a) / width)))
    edges = np.linspace(a, b, count + 1)
    left, right = edges[:-1], edges[1:]
    total = None
    error = 0.0
    used = 0
    while left.size:
        used += left.size
        if used > max_panels:
            raise ConvergenceError(
                f"quadrature on [{a:g}, {b:g}] exceeded {max_panels} panels (error {error:.3g} > {abs_tol:.3g})"
            )
        center = 0.5 * (left + right)
        half = 0.5 * (right - left)
        nodes = center[:, None] + half[:, None] * KRONROD_NODES[None, :]
        values = np.asarray(f(nodes.ravel()), dtype=float)
        values = values.reshape(values.shape[0], left.size, KRONROD_NODES.size)
        kronrod = (values @ KRONROD_WEIGHTS) * half
        gauss = (values[:, :, GAUSS_INDEX] @ GAUSS_WEIGHTS) * half
        panel_error = np.max(np.abs(kronrod - gauss), axis=0)
        share = abs_tol * (right - left) / (b - a)
        done = (panel_error <= share) | (half < 1e-12)
        part = kronrod[:, done].sum(axis=1)
        total = part if total is None else total + part
        error += float(panel_error[done].sum())
        refine = ~done
        mid = center[refine]
        left = np.concatenate([left[refine], mid])
        right = np.concatenate([mid, right[refine]])
    return total, error


@dataclass
class Amplitudes:
    """Fourier amplitudes of the Melnikov potential at one action point (single pendulum).

    ``Z``, ``ZI`` and ``UZ`` already include the basis factor (1 for cos, -i for sin).
    """

    I: np.ndarray
    k: np.ndarray
    l: np.ndarray
    nu: np.ndarray
    dnu: np.ndarray
    Z: np.ndarray
    ZI: np.ndarray
    UZ: np.ndarray
    error: float

    def _Y(self, tau, phi, s):
        tau = np.asarray(tau, dtype=float)
        phi = np.asarray(phi, dtype=float)
        psi = phi @ self.k.T + self.l * s - self.nu * tau[..., None]
        return self.Z * np.exp(1j * psi), psi

    def value(self, tau, phi, s=0.0):
        Y, _ = self._Y(tau, phi, s)
        return -np.sum(Y.real, axis=-1)

    def d_tau(self, tau, phi, s=0.0):
        Y, _ = self._Y(tau, phi, s)
        return np.sum(self.nu * (1j * Y).real, axis=-1)

    def d2_tau(self, tau, phi, s=0.0):
        Y, _ = self._Y(tau, phi, s)
        return np.sum(self.nu**2 * Y.real, axis=-1)

    def d_phi(self, tau, phi, s=0.0):
        Y, _ = self._Y(tau, phi, s)
        return -((1j * Y).real @ self.k)

    def d2_phi(self, tau, phi, s=0.0):
        Y, _ = self._Y(tau, phi, s)
        return np.einsum("...t,ti,tj->...ij", Y.real, self.k, self.k)

    def d_phi_tau(self, tau, phi, s=0.0):
        Y, _ = self._Y(tau, phi, s)
        return -((self.nu * Y.real) @ self.k)

    def d_s(self, tau, phi, s=0.0):
        Y, _ = self._Y(tau, phi, s)
        return -((1j * Y).real @ self.l)

    def d_I(self, tau, phi, s=0.0):
        tau = np.asarray(tau, dtype=float)
        _, psi = self._Y(tau, phi, s)
        rotation = np.exp(1j * psi)[..., None]
        inner = self.ZI + 1j * self.dnu * self.UZ[:, None] - 1j * tau[..., None, None] * self.dnu * self.Z[:, None]
        return -np.sum((rotation * inner).real, axis=-2)

    @property
    def periods(self) -> np.ndarray:
        active = np.abs(self.nu) > 1e-12
        return 2.0 * np.pi / np.abs(self.nu[active])


@dataclass
class MelnikovLocal:
    """Value and derivatives of L at one (tau, I, phi, s)."""

    value: float
    tau_grad: np.ndarray
    tau_hess: np.ndarray
    phi_grad: np.ndarray
    phi_hess: np.ndarray
    phi_tau: np.ndarray
    s_grad: float
    I_grad: np.ndarray


@dataclass
class CriticalTau:
    """Non-degenerate critical point of tau -> L(tau, I, phi, s)."""

    tau: np.ndarray
    hessian: np.ndarray
    residual: float
    condition: float
    iterations: int
    value: float


@dataclass
class ReducedPoincare:
    """L*(I, theta) with its gradients at the selected critical fiber time."""

    I: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    value: float
    grad_theta: np.ndarray
    grad_I: np.ndarray
    hessian_theta: np.ndarray
    tau_hessian: np.ndarray


@dataclass
class TauStarGrid:
    """Critical fiber times over an angle grid at fixed I."""

    I: np.ndarray
    thetas: np.ndarray
    tau: np.ndarray
    value: np.ndarray
    grad_theta: np.ndarray
    hessian_theta: np.ndarray
    flags: np.ndarray
    switches: List[int] = field(default_factory=list)

    @property
    def ok(self) -> np.ndarray:
        return self.flags == "ok"


@dataclass
class CrestPoint:
    I: np.ndarray
    phi: np.ndarray
    kind: str
    residual: float


class MelnikovEval:
    """Melnikov potential of a model's order-one perturbation along its separatrices."""

    def __init__(self, model: Model, branch: int = 1, abs_tol: Optional[float] = None, tail: Optional[float] = None):
        self.model = model
        self.branch = branch
        self.abs_tol = abs_tol or settings.quad_abs_tol
        self.tail = tail or settings.tail_threshold
        self.homoclinics = model_homoclinics(model, branch)
        self.cut = common_cut(model, self.tail, branch)
        self.mask = model.term_order == 1
        self.k = model.term_k[self.mask]
        self.l = model.term_l[self.mask]
        self.is_sin = model.term_is_sin[self.mask]
        self.basis_factor = np.where(self.is_sin, -1j, 1.0 + 0j)
        self.harmonic = model.n == 1
        self._cache: Dict[Tuple[float, ...], Amplitudes] = {}

    @property
    def trivial(self) -> bool:
        return not np.any(self.mask)

    # Separatrix samples

    def _coefficient_difference(self, I, u: np.ndarray) -> np.ndarray:
        """c(I, p*, q*) - c(I, 0, 0) and its I-gradient along u; shape (terms, 1 + d, m)."""
        model = self.model
        p, q = np.empty((model.n, u.size)), np.empty((model.n, u.size))
        for j, hom in enumerate(self.homoclinics):
            p[j], q[j] = hom(u)
        along = model.term_values(I, p, q)[self.mask][:, : 1 + model.d]
        rest = model.term_values(I, np.zeros((model.n, 1)), np.zeros((model.n, 1)))[self.mask][:, : 1 + model.d]
        return along - rest

    def amplitudes(self, I) -> Amplitudes:
        """Z(I), dZ/dI and the u-weighted amplitudes of every order-one term (single pendulum)."""
        if not self.harmonic:
            raise ValueError("Fourier amplitudes are defined for a single pendulum")
        I = np.asarray(I, dtype=float)
        key = tuple(np.round(I, 15))
        if key in self._cache:
            return self._cache[key]
        d = self.model.d
        omega = self.model.frequency(I)
        nu = self.k @ omega + self.l
        dnu = self.k @ self.model.hessian_h(I)
        t = len(nu)
        if t == 0:
            amp = Amplitudes(I, self.k, self.l, nu, dnu, np.zeros(0, complex), np.zeros((0, d), complex), np.zeros(0, complex), 0.0)
            self._cache[key] = amp
            return amp
        width = min(1.0, np.pi / (4.0 * max(float(np.max(np.abs(nu))), 1e-12)))

        def integrand(u):
            diff = self._coefficient_difference(I, u)
            phase = nu[:, None] * u[None, :]
            cos, sin = np.cos(phase), np.sin(phase)
            rows = [
                diff[:, 0] * cos,
                diff[:, 0] * sin,
                u * diff[:, 0] * cos,
                u * diff[:, 0] * sin,
                (diff[:, 1:] * cos[:, None, :]).reshape(t * d, -1),
                (diff[:, 1:] * sin[:, None, :]).reshape(t * d, -1),
            ]
            return np.concatenate(rows, axis=0)

        values, error = gauss_kronrod(integrand, -self.cut, self.cut, width, self.abs_tol)
        Z = values[:t] + 1j * values[t:2 * t]
        UZ = values[2 * t:3 * t] + 1j * values[3 * t:4 * t]
        ZI = values[4 * t:4 * t + t * d].reshape(t, d) + 1j * values[4 * t + t * d:].reshape(t, d)
        beta = self.basis_factor
        amp = Amplitudes(I, self.k, self.l, nu, dnu, beta * Z, beta[:, None] * ZI, beta * UZ, error)
        self._cache[key] = amp
        return amp

    def window_check(self, I) -> float:
        """Change of the amplitudes when the truncation window doubles."""
        base = self.amplitudes(I)
        doubled = MelnikovEval(self.model, self.branch, self.abs_tol, self.tail)
        doubled.cut = 2.0 * self.cut
        other = doubled.amplitudes(I)
        return float(np.max(np.abs(other.Z - base.Z), initial=0.0))

    # Direct evaluation (several pendula)

    def _direct(self, tau, I, phi, s: float) -> Tuple[float, float]:
        model = self.model
        tau = np.asarray(tau, dtype=float).reshape(model.n)
        I = np.asarray(I, dtype=float)
        phi = np.asarray(phi, dtype=float)
        if self.trivial:
            return 0.0, 0.0
        nu = self.k @ model.frequency(I) + self.l
        theta0 = self.k @ phi + self.l * s
        lo = -self.cut - float(np.max(tau)) - 1.0
        hi = self.cut - float(np.min(tau)) + 1.0
        width = min(0.25, np.pi / (4.0 * max(float(np.max(np.abs(nu))), 1e-12)))
        rest = model.term_values(I, np.zeros((model.n, 1)), np.zeros((model.n, 1)))[self.mask][:, 0]

        def integrand(u):
            p, q = np.empty((model.n, u.size)), np.empty((model.n, u.size))
            for j, hom in enumerate(self.homoclinics):
                p[j], q[j] = hom(tau[j] + u)
            coeff = model.term_values(I, p, q)[self.mask][:, 0] - rest
            angle = theta0[:, None] + nu[:, None] * u[None, :]
            basis = np.where(self.is_sin[:, None], np.sin(angle), np.cos(angle))
            return np.sum(coeff * basis, axis=0)[None, :]

        value, error = gauss_kronrod(integrand, lo, hi, width, self.abs_tol)
        return -float(value[0]), error

    # Public evaluation

    def L(self, tau, I, phi, s: float = 0.0) -> float:
        """Melnikov potential L(tau, I, phi, s)."""
        if self.trivial:
            return 0.0
        if self.harmonic:
            tau = float(np.asarray(tau, dtype=float).reshape(-1)[0])
            return float(self.amplitudes(I).value(tau, phi, s))
        return self._direct(tau, I, phi, s)[0]

    def local(self, tau, I, phi, s: float = 0.0) -> MelnikovLocal:
        """L and its derivatives; closed form for one pendulum, Richardson differences otherwise."""
        d, n = self.model.d, self.model.n
        phi = np.asarray(phi, dtype=float)
        if self.trivial:
            return MelnikovLocal(0.0, np.zeros(n), np.zeros((n, n)), np.zeros(d), np.zeros((d, d)), np.zeros((d, n)), 0.0, np.zeros(d))
        if self.harmonic:
            amp = self.amplitudes(I)
            t = float(np.asarray(tau, dtype=float).reshape(-1)[0])
            return MelnikovLocal(
                value=float(amp.value(t, phi, s)),
                tau_grad=np.array([amp.d_tau(t, phi, s)]),
                tau_hess=np.array([[amp.d2_tau(t, phi, s)]]),
                phi_grad=amp.d_phi(t, phi, s),
                phi_hess=amp.d2_phi(t, phi, s),
                phi_tau=amp.d_phi_tau(t, phi, s)[:, None],
                s_grad=float(amp.d_s(t, phi, s)),
                I_grad=amp.d_I(t, phi, s),
            )
        return self._finite_difference_local(np.asarray(tau, dtype=float), np.asarray(I, dtype=float), phi, s)

    def _finite_difference_local(self, tau, I, phi, s) -> MelnikovLocal:
        d, n = self.model.d, self.model.n

        def f(z):
            return self._direct(z[:n], I, z[n:], s)[0]

        z = np.concatenate([tau, phi])
        grad = richardson_gradient(f, z)
        hess = finite_hessian(f, z)
        I_grad = richardson_gradient(lambda J: self._direct(tau, J, phi, s)[0], I)
        s_grad = richardson_gradient(lambda v: self._direct(tau, I, phi, float(v[0]))[0], np.array([s]))[0]
        return MelnikovLocal(
            value=f(z),
            tau_grad=grad[:n],
            tau_hess=hess[:n, :n],
            phi_grad=grad[n:],
            phi_hess=hess[n:, n:],
            phi_tau=hess[n:, :n],
            s_grad=float(s_grad),
            I_grad=I_grad,
        )

    # Critical fiber time

    def first_crest(self, I, thetas: np.ndarray, s: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        """Smallest |tau| non-degenerate local maximum of tau -> L for each row of ``thetas``.

        Returns (tau, found) arrays; single pendulum only.
        """
        amp = self.amplitudes(I)
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        m = len(thetas)
        periods = amp.periods
        if periods.size == 0:
            return np.full(m, np.nan), np.zeros(m, dtype=bool)
        window = min(settings.tau_window, float(np.max(periods)) + float(np.min(periods)))
        step = float(np.min(periods)) / 16.0
        grid = np.arange(-window, window + step, step)
        tau = np.full(m, np.nan)
        for start in range(0, m, 256):
            block = thetas[start:start + 256]
            slope = amp.d_tau(grid[None, :], block[:, None, :], s)
            rising = (slope[:, :-1] > 0) & (slope[:, 1:] <= 0)
            distance = np.where(rising, np.abs(0.5 * (grid[:-1] + grid[1:]))[None, :], np.inf)
            best = np.argmin(distance, axis=1)
            has = np.isfinite(distance[np.arange(len(block)), best])
            a, b = slope[np.arange(len(block)), best], slope[np.arange(len(block)), best + 1]
            guess = grid[best] + step * a / np.where(a - b == 0, 1.0, a - b)
            tau[start:start + 256] = np.where(has, guess, np.nan)
        tau = self._newton_many(amp, tau, thetas, s)
        curvature = amp.d2_tau(tau, thetas, s)
        residual = np.abs(amp.d_tau(tau, thetas, s))
        found = np.isfinite(tau) & (residual <= settings.tau_tol * max(1.0, float(np.max(np.abs(amp.Z)))))
        found &= curvature < -settings.beta_min
        return tau, found

    def _newton_many(self, amp: Amplitudes, tau, thetas, s):
        tau = np.array(tau, dtype=float)
        for _ in range(settings.newton_max_iter):
            g = amp.d_tau(tau, thetas, s)
            h = amp.d2_tau(tau, thetas, s)
            step = np.where(np.abs(h) > 0, g / np.where(h == 0, 1.0, h), 0.0)
            tau = tau - np.where(np.isfinite(step), step, 0.0)
            if np.all(~np.isfinite(tau) | (np.abs(step) <= 1e-14 * (1.0 + np.abs(tau)))):
                break
        return tau

    def critical_tau(self, I, phi, s: float = 0.0, guess=None) -> CriticalTau:
        """Newton solve of dL/dtau = 0.

        Without ``guess`` a single pendulum starts from the first crest
        (the smallest |tau| local maximum); several pendula start from 0.

        Raises:
            ConvergenceError: Newton diverged or did not reach the residual.
            HypothesisError: the tau-Hessian is singular (H7 fails here).
        """
        n = self.model.n
        phi = np.asarray(phi, dtype=float)
        if self.trivial:
            raise HypothesisError("H7", "Melnikov potential vanishes identically", witness=list(np.asarray(I)) + list(phi), value=0.0)
        if guess is None:
            if self.harmonic:
                taus, found = self.first_crest(I, phi[None, :], s)
                if not found[0]:
                    raise RegionError(f"no non-degenerate crest for I={np.asarray(I).tolist()}, phi={phi.tolist()}", witness=phi.tolist())
                guess = taus[:1]
            else:
                guess = np.zeros(n)
        tau = np.asarray(guess, dtype=float).reshape(n).copy()
        residual = np.inf
        loc = None
        for iteration in range(1, settings.newton_max_iter + 1):
            loc = self.local(tau, I, phi, s)
            residual = float(np.max(np.abs(loc.tau_grad)))
            if residual <= settings.tau_tol:
                break
            try:
                step = np.linalg.solve(loc.tau_hess, loc.tau_grad)
            except np.linalg.LinAlgError as exc:
                logger.debug("Singular tau-Hessian during Newton", I=np.asarray(I).tolist(), phi=phi.tolist())
                raise HypothesisError("H7", "tau-Hessian of L is singular", witness=list(np.asarray(I)) + list(phi), value=0.0) from exc
            tau = tau - step
            if not np.all(np.isfinite(tau)) or np.max(np.abs(tau)) > 10.0 * settings.tau_window:
                raise ConvergenceError(f"critical tau Newton diverged at I={np.asarray(I).tolist()}, phi={phi.tolist()}")
        else:
            raise ConvergenceError(f"critical tau Newton stalled with residual {residual:.3g}")
        hessian = loc.tau_hess
        singular = np.linalg.svd(hessian, compute_uv=False)
        scale = max(1.0, float(np.max(np.abs(self.amplitudes(I).Z)))) if self.harmonic else 1.0
        if singular[-1] <= settings.beta_min * scale:
            raise HypothesisError(
                "H7", "critical fiber time is degenerate", witness=list(np.asarray(I)) + list(phi), value=float(singular[-1])
            )
        return CriticalTau(
            tau=tau,
            hessian=hessian,
            residual=residual,
            condition=float(singular[0] / singular[-1]),
            iterations=iteration,
            value=loc.value,
        )

    # Reduced Poincare function

    def reduced_poincare(self, I, theta, tau_guess=None) -> ReducedPoincare:
        """L*(I, theta) = L(tau*(I, theta, 0), I, theta, 0) with envelope gradients.

        Raises:
            RegionError: tau* cannot be found (outside the scattering domain).
        """
        I = np.asarray(I, dtype=float)
        theta = np.asarray(theta, dtype=float)
        try:
            crit = self.critical_tau(I, theta, 0.0, tau_guess)
        except (ConvergenceError, HypothesisError) as exc:
            raise RegionError(f"tau* lost at I={I.tolist()}, theta={theta.tolist()}: {exc.message}", witness=theta.tolist()) from exc
        loc = self.local(crit.tau, I, theta, 0.0)
        return ReducedPoincare(
            I=I,
            theta=theta,
            tau=crit.tau,
            value=loc.value,
            grad_theta=loc.phi_grad,
            grad_I=loc.I_grad,
            hessian_theta=_schur(loc),
            tau_hessian=loc.tau_hess,
        )

    def reduced_hessian(self, I, theta, tau_guess=None) -> np.ndarray:
        """d2 L*/d theta2 = L_phiphi - L_phitau L_tautau^-1 L_tauphi."""
        return self.reduced_poincare(I, theta, tau_guess).hessian_theta

    def tau_star_grid(self, I, thetas: np.ndarray) -> TauStarGrid:
        """tau* over rows of angles with neighbour-seeded continuation.

        ``thetas`` has shape (rows, cols, d) or (m, d) (a single row). Jumps
        of tau* larger than half the smallest period between the continued
        value and the per-point first crest are reported as branch switches.
        """
        I = np.asarray(I, dtype=float)
        thetas = np.asarray(thetas, dtype=float)
        d = self.model.d
        rows = thetas[None] if thetas.ndim == 2 else thetas.reshape(-1, thetas.shape[-2], d)
        flat = rows.reshape(-1, d)
        m = len(flat)
        n = self.model.n
        tau = np.full((m, n), np.nan)
        flags = np.full(m, "lost", dtype=object)
        switches: List[int] = []
        if self.trivial:
            flags[:] = "degenerate"
            zeros = np.zeros((m, self.model.d))
            return TauStarGrid(I, flat, tau, np.zeros(m), zeros, np.zeros((m, self.model.d, self.model.d)), flags)
        if self.harmonic:
            crest, found = self.first_crest(I, flat)
            half_period = 0.5 * float(np.min(self.amplitudes(I).periods))
            amp = self.amplitudes(I)
            width = rows.shape[1]
            for r in range(rows.shape[0]):
                previous = np.nan
                for c in range(width):
                    idx = r * width + c
                    value = np.nan
                    if np.isfinite(previous):
                        cont = self._newton_many(amp, np.array([previous]), flat[idx:idx + 1], 0.0)[0]
                        ok = abs(amp.d_tau(cont, flat[idx], 0.0)) <= settings.tau_tol * max(1.0, float(np.max(np.abs(amp.Z))))
                        if ok and amp.d2_tau(cont, flat[idx], 0.0) < -settings.beta_min:
                            value = cont
                    if np.isfinite(value):
                        if found[idx] and abs(value - crest[idx]) > half_period:
                            switches.append(idx)
                    elif found[idx]:
                        if np.isfinite(previous):
                            switches.append(idx)
                        value = crest[idx]
                    if np.isfinite(value):
                        tau[idx, 0] = value
                        flags[idx] = "ok"
                    previous = value
            ok = flags == "ok"
            t = np.where(ok, tau[:, 0], 0.0)
            values = np.where(ok, amp.value(t, flat), np.nan)
            grads = np.where(ok[:, None], amp.d_phi(t, flat), np.nan)
            lphiphi = amp.d2_phi(t, flat)
            lphitau = amp.d_phi_tau(t, flat)
            ltt = amp.d2_tau(t, flat)
            safe = np.where(ok, ltt, 1.0)
            hess = lphiphi - np.einsum("mi,mj->mij", lphitau, lphitau) / safe[:, None, None]
            hess = np.where(ok[:, None, None], hess, np.nan)
        else:
            values = np.full(m, np.nan)
            grads = np.full((m, self.model.d), np.nan)
            hess = np.full((m, self.model.d, self.model.d), np.nan)
            previous = None
            for idx in range(m):
                try:
                    red = self.reduced_poincare(I, flat[idx], previous)
                except RegionError:
                    previous = None
                    continue
                tau[idx], values[idx], grads[idx], hess[idx] = red.tau, red.value, red.grad_theta, red.hessian_theta
                flags[idx] = "ok"
                previous = red.tau
        if switches:
            logger.info("Branch switches in tau* continuation", I=I.tolist(), count=len(switches))
        return TauStarGrid(I, flat, tau, values, grads, hess, flags, switches)

    # Crests

    def crest(self, I, kind: str = "max", s: float = 0.0, grid: int = 64) -> List[CrestPoint]:
        """Crest {phi : dL/dtau(0, I, phi, s) = 0} of a two-rotator, single-pendulum model.

        Roots are bracketed along phi2 for every phi1 slice and along phi1
        for every phi2 slice; ``kind`` selects max-crest points (tau = 0 a
        local maximum), min-crest points or both ("all").
        """
        if self.model.d != 2 or not self.harmonic:
            raise ValueError("crests are computed for two rotators and one pendulum")
        amp = self.amplitudes(np.asarray(I, dtype=float))
        axis = np.linspace(0.0, 2.0 * np.pi, grid, endpoint=False)
        fine = np.linspace(0.0, 2.0 * np.pi, 8 * grid + 1)
        scale = max(1.0, float(np.sum(np.abs(amp.nu * amp.Z))))

        def g(phi):
            return float(amp.d_tau(0.0, phi, s))

        points: List[np.ndarray] = []
        for slot in (1, 0):
            other = 1 - slot
            for fixed in axis:
                phis = np.zeros((fine.size, 2))
                phis[:, other] = fixed
                phis[:, slot] = fine
                values = amp.d_tau(0.0, phis, s)
                if np.max(np.abs(values)) <= 1e-13 * scale:
                    points.extend(phis[:-1])
                    continue
                for i in np.nonzero(np.sign(values[:-1]) * np.sign(values[1:]) <= 0)[0]:
                    if values[i] == 0.0:
                        root = fine[i]
                    elif values[i + 1] == 0.0:
                        continue
                    else:
                        def along(x, fixed=fixed, slot=slot, other=other):
                            phi = np.zeros(2)
                            phi[slot], phi[other] = x, fixed
                            return g(phi)

                        root = brentq(along, fine[i], fine[i + 1], xtol=1e-15)
                    phi = np.zeros(2)
                    phi[slot], phi[other] = root, fixed
                    points.append(phi)
        out: List[CrestPoint] = []
        seen = set()
        for phi in points:
            phi = np.mod(phi, 2.0 * np.pi)
            key = tuple(np.round(phi, 9))
            if key in seen:
                continue
            seen.add(key)
            curvature = float(amp.d2_tau(0.0, phi, s))
            residual = abs(g(phi))
            if abs(curvature) <= 1e-10 * scale:
                label = "tangential"
                logger.debug("Tangential crest crossing", I=np.asarray(I).tolist(), phi=phi.tolist())
            else:
                label = "max" if curvature < 0 else "min"
            if kind == "all" or label == kind:
                out.append(CrestPoint(I=np.asarray(I, dtype=float), phi=phi, kind=label, residual=residual))
        return out


def _schur(loc: MelnikovLocal) -> np.ndarray:
    correction = loc.phi_tau @ np.linalg.solve(loc.tau_hess, loc.phi_tau.T)
    return loc.phi_hess - correction


def richardson_gradient(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences with one Richardson extrapolation."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = 1.0
        coarse = (f(x + h * e) - f(x - h * e)) / (2.0 * h)
        fine = (f(x + 0.5 * h * e) - f(x - 0.5 * h * e)) / h
        grad[i] = (4.0 * fine - coarse) / 3.0
    return grad


def finite_hessian(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    size = x.size
    out = np.zeros((size, size))
    for i in range(size):
        ei = np.zeros(size)
        ei[i] = h
        for j in range(i, size):
            ej = np.zeros(size)
            ej[j] = h
            value = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4.0 * h * h)
            out[i, j] = out[j, i] = value
    return out


# Closed form for cos(q) couplings to the standard pendulum


def is_residue_family(model: Model, samples: int = 5) -> bool:
    """Single standard pendulum and every order-one coefficient of the form c(I) cos(q1)."""
    if model.n != 1 or not is_standard_pendulum(model.pendula[0]):
        return False
    rng = np.random.default_rng(settings.seed)
    mask = model.term_order == 1
    for _ in range(samples):
        I = rng.uniform(model.box[:, 0], model.box[:, 1])
        p = rng.uniform(-2.0, 2.0, size=(1, 3))
        q = rng.uniform(0.0, 2.0 * np.pi, size=(1, 3))
        along = model.term_values(I, p, q)[mask][:, 0]
        base = model.term_values(I, np.zeros((1, 1)), np.zeros((1, 1)))[mask][:, 0]
        if not np.allclose(along, base * np.cos(q[0])[None, :], atol=1e-12, rtol=1e-12):
            return False
    return True


def residue_amplitudes(model: Model, I) -> Tuple[np.ndarray, np.ndarray]:
    """A = 2 pi nu c / sinh(pi nu / 2) per order-one term (4c when nu = 0), with nu.

    Raises:
        ValueError: the model is not a cos(q) coupling to the standard pendulum.
    """
    if not is_residue_family(model):
        raise ValueError("residue closed form needs order-one coefficients c(I) cos(q1) and V = cos(q1) - 1")
    I = np.asarray(I, dtype=float)
    mask = model.term_order == 1
    nu = model.term_k[mask] @ model.frequency(I) + model.term_l[mask]
    c = model.term_values(I, np.zeros((1, 1)), np.zeros((1, 1)))[mask][:, 0, 0]
    x = 0.5 * np.pi * nu
    ratio = np.where(np.abs(x) < 1e-8, 1.0, x / np.where(np.abs(x) < 1e-8, 1.0, np.sinh(x)))
    return 4.0 * c * ratio, nu


def residue_L(model: Model, tau, I, phi, s: float = 0.0) -> np.ndarray:
    """Closed-form L = sum A cos(theta - nu tau) (sin for sine terms)."""
    A, nu = residue_amplitudes(model, I)
    mask = model.term_order == 1
    phi = np.asarray(phi, dtype=float)
    tau = np.asarray(tau, dtype=float)
    psi = phi @ model.term_k[mask].T + model.term_l[mask] * s - nu * tau[..., None]
    basis = np.where(model.term_is_sin[mask], np.sin(psi), np.cos(psi))
    return np.sum(A * basis, axis=-1)


def melnikov_L(model: Model, tau, I, phi, s: float = 0.0) -> float:
    return MelnikovEval(model).L(tau, I, phi, s)
