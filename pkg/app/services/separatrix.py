"""Separatrices of the pendula.

A homoclinic orbit is parameterized by its natural time tau with tau = 0 at
the time-reversal symmetry point: the maximum of |p| on a connection
0 -> q+ between two saddles at the same height, or the turning point on a
loop that returns to q = 0. Evaluators are vectorized over tau.
"""

from typing import List, Optional, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from app.config.settings import settings
from app.exceptions.custom_exceptions import HomoclinicError
from app.services import expr as ex
from app.services.hamiltonian import Model, Pendulum
from app.utils.logger import get_logger

logger = get_logger(__name__)

SEARCH_WINDOW = 50.0


def standard_separatrix(tau, branch: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Upper (branch=+1) or lower (branch=-1) separatrix of p^2/2 + cos q - 1.

    q0(tau) = 4 atan(e^tau), p0(tau) = 2/cosh(tau).
    """
    tau = np.asarray(tau, dtype=float)
    # 2*atan(e^tau) = pi/2 + gd(tau) avoids overflow of e^tau
    q = np.pi + 2.0 * np.arctan(np.sinh(tau))
    p = 2.0 / np.cosh(tau)
    return branch * p, branch * q


class Homoclinic:
    """Homoclinic orbit (p*(tau), q*(tau)) of one pendulum.

    Attributes:
        branch: +1 for the orbit leaving 0 with p > 0, -1 otherwise.
        sign: Pendulum sign; sign = -1 runs the natural time backwards.
        alpha: Lyapunov exponent at the saddle q = 0.
        alpha_plus: Lyapunov exponent at the end saddle.
        q_plus: End saddle (0 for a loop).
    """

    def __init__(self, branch: int, sign: int, alpha: float, alpha_plus: float, q_plus: float):
        self.branch = branch
        self.sign = sign
        self.alpha = alpha
        self.alpha_plus = alpha_plus
        self.q_minus = 0.0
        self.q_plus = q_plus

    def _natural(self, tau: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def __call__(self, tau) -> Tuple[np.ndarray, np.ndarray]:
        tau = np.asarray(tau, dtype=float)
        if self.sign < 0:
            return self._natural(-tau)
        return self._natural(tau)

    def t_cut(self, tol: Optional[float] = None) -> float:
        """Half width beyond which |p*(tau)| <= tol on both sides."""
        raise NotImplementedError

    def energy_defect(self, V: ex.CompiledExpr, tau) -> np.ndarray:
        p, q = self(tau)
        return 0.5 * p**2 + V(q) - V(0.0)


class StandardHomoclinic(Homoclinic):
    """Closed-form separatrix of V = cos q - 1."""

    def __init__(self, branch: int = 1, sign: int = 1):
        super().__init__(branch, sign, 1.0, 1.0, branch * 2.0 * np.pi)

    def _natural(self, tau):
        return standard_separatrix(tau, self.branch)

    def t_cut(self, tol: Optional[float] = None) -> float:
        tol = tol or settings.tail_threshold
        return float(np.arccosh(2.0 / tol)) if tol < 2.0 else 0.0


class NumericHomoclinic(Homoclinic):
    """Separatrix obtained by shooting along the saddle eigenvectors.

    The stored solutions cover [tau_minus, tau_plus]; beyond them the orbit
    follows the linearized exponential approach to the saddles.
    """

    def __init__(
        self,
        branch: int,
        sign: int,
        alpha: float,
        alpha_plus: float,
        q_plus: float,
        left,
        right,
        tau_minus: float,
        tau_plus: float,
        loop: bool,
    ):
        super().__init__(branch, sign, alpha, alpha_plus, q_plus)
        self._left = left
        self._right = right
        self.tau_minus = tau_minus
        self.tau_plus = tau_plus
        self.loop = loop
        self._q_left_edge = float(left(tau_minus)[0])
        self._q_right_edge = float(right(tau_plus)[0]) if not loop else self._q_left_edge

    def _natural(self, tau):
        shape = np.shape(tau)
        tau = np.atleast_1d(tau).astype(float).ravel()
        p = np.empty_like(tau)
        q = np.empty_like(tau)
        if self.loop:
            # reversible: q(tau) = q(-tau), p(tau) = -p(-tau)
            s = -np.abs(tau)
            flip = np.where(tau > 0, -1.0, 1.0)
            qs, ps = self._left_side(s)
            q[...] = qs
            p[...] = flip * ps
        else:
            neg = tau <= 0
            qs, ps = self._left_side(tau[neg])
            q[neg], p[neg] = qs, ps
            qs, ps = self._right_side(tau[~neg])
            q[~neg], p[~neg] = qs, ps
        return p.reshape(shape), q.reshape(shape)

    def _left_side(self, tau):
        q = np.empty_like(tau)
        p = np.empty_like(tau)
        inside = tau >= self.tau_minus
        if np.any(inside):
            y = self._left(tau[inside])
            q[inside], p[inside] = y[0], y[1]
        tail = ~inside
        q[tail] = self._q_left_edge * np.exp(self.alpha * (tau[tail] - self.tau_minus))
        p[tail] = self.alpha * q[tail]
        return q, p

    def _right_side(self, tau):
        q = np.empty_like(tau)
        p = np.empty_like(tau)
        inside = tau <= self.tau_plus
        if np.any(inside):
            y = self._right(tau[inside])
            q[inside], p[inside] = y[0], y[1]
        tail = ~inside
        offset = (self._q_right_edge - self.q_plus) * np.exp(-self.alpha_plus * (tau[tail] - self.tau_plus))
        q[tail] = self.q_plus + offset
        p[tail] = -self.alpha_plus * offset
        return q, p

    def t_cut(self, tol: Optional[float] = None) -> float:
        tol = tol or settings.tail_threshold
        cuts = []
        for edge, rate, q_edge, saddle in (
            (self.tau_minus, self.alpha, self._q_left_edge, 0.0),
            (self.tau_plus if not self.loop else -self.tau_minus, self.alpha_plus, self._q_right_edge, self.q_plus),
        ):
            p_edge = rate * abs(q_edge - saddle)
            cuts.append(abs(edge) + max(0.0, np.log(p_edge / tol)) / rate)
        return float(max(cuts))


def _level_end(pendulum: Pendulum, branch: int, window: float) -> Tuple[float, bool]:
    """First point q != 0 (in the branch direction) on the level V(q) = V(0).

    Returns (q_end, is_saddle).
    """
    V0 = float(pendulum.potential(0.0))
    grid = branch * np.linspace(1e-6, window, int(window * 2000))
    g = np.asarray(pendulum.potential(grid), dtype=float) - V0
    scale = max(1.0, np.max(np.abs(g)))
    # turning point: g changes sign from negative to non-negative
    crossing = np.nonzero(g >= 0.0)[0]
    # saddle: local maximum of g touching 0
    interior = (g[1:-1] >= g[:-2]) & (g[1:-1] >= g[2:]) & (np.abs(g[1:-1]) <= 1e-6 * scale)
    touching = np.nonzero(interior)[0] + 1
    first_cross = crossing[0] if crossing.size else None
    first_touch = touching[0] if touching.size else None
    if first_touch is not None and (first_cross is None or first_touch <= first_cross + 1):
        lo, hi = sorted((grid[first_touch - 1], grid[first_touch + 1]))
        try:
            q_end = brentq(lambda x: float(pendulum.force(x)), lo, hi, xtol=1e-15)
        except ValueError:
            q_end = float(grid[first_touch])
        return q_end, True
    if first_cross is not None:
        lo, hi = sorted((grid[first_cross - 1], grid[first_cross]))
        return brentq(lambda x: float(pendulum.potential(x)) - V0, lo, hi, xtol=1e-15), False
    raise HomoclinicError(f"no return to p=0 within the search window |q| <= {window}")


def numeric_homoclinic(
    pendulum: Pendulum,
    branch: int = 1,
    tol: Optional[float] = None,
    delta0: Optional[float] = None,
) -> NumericHomoclinic:
    """Shoot the homoclinic orbit of sign*(p^2/2 + V(q)) from the saddle q = 0.

    Args:
        pendulum: Validated pendulum (V'(0) = 0, V''(0) < 0).
        branch: +1 leaves the saddle with p > 0, -1 with p < 0.
        tol: Relative tolerance of the integration.
        delta0: Offset along the unstable eigenvector.

    Raises:
        HomoclinicError: Degenerate saddle or no return to the level within the window.
    """
    rtol = tol or settings.homoclinic_rtol
    delta0 = delta0 or settings.homoclinic_delta0
    curvature = float(pendulum.curvature(0.0))
    if abs(float(pendulum.force(0.0))) > settings.h2_tol or curvature >= -settings.h2_tol:
        raise HomoclinicError("saddle degenerate at q = 0")
    alpha = float(np.sqrt(-curvature))

    q_end, is_saddle = _level_end(pendulum, branch, SEARCH_WINDOW)
    if is_saddle:
        end_curvature = float(pendulum.curvature(q_end))
        if end_curvature >= -settings.h2_tol:
            raise HomoclinicError(f"saddle degenerate at q+ = {q_end:.6g}")
        alpha_plus = float(np.sqrt(-end_curvature))
        # anchor: point of maximal |p|, i.e. minimum of V between the saddles
        inner = np.linspace(0.0, q_end, 4001)[1:-1]
        idx = int(np.argmin(pendulum.potential(inner)))
        q_mid = float(inner[idx])
        if 0 < idx < len(inner) - 1:
            lo, hi = sorted((inner[idx - 1], inner[idx + 1]))
            try:
                q_mid = brentq(lambda x: float(pendulum.force(x)), lo, hi, xtol=1e-15)
            except ValueError:
                pass
    else:
        alpha_plus = alpha
        q_mid = q_end

    def field(_t, y):
        return [y[1], -float(pendulum.force(y[0]))]

    atol = rtol * 1e-2
    horizon = (np.log(1.0 / delta0) + SEARCH_WINDOW) / alpha
    unit = 1.0 / np.sqrt(1.0 + alpha**2)
    start = [branch * delta0 * unit, branch * alpha * delta0 * unit]

    def reach_mid(_t, y):
        return y[0] - q_mid if is_saddle else y[1]

    reach_mid.terminal = True
    left = solve_ivp(field, (0.0, horizon), start, method="DOP853", rtol=rtol, atol=atol,
                     events=reach_mid, dense_output=True)
    if not left.t_events[0].size:
        raise HomoclinicError("unstable branch did not reach the symmetry point within the search window")
    t_mid = float(left.t_events[0][0])
    left_sol = left.sol

    def left_eval(tau):
        return left_sol(np.asarray(tau) + t_mid)

    right_eval = None
    tau_plus = 0.0
    if is_saddle:
        start_plus = [q_end - branch * delta0 * unit, branch * alpha_plus * delta0 * unit]
        right = solve_ivp(field, (0.0, -(np.log(1.0 / delta0) + SEARCH_WINDOW) / alpha_plus), start_plus,
                          method="DOP853", rtol=rtol, atol=atol, events=reach_mid, dense_output=True)
        if not right.t_events[0].size:
            raise HomoclinicError("stable branch of q+ did not reach the symmetry point")
        t_back = float(right.t_events[0][0])
        right_sol = right.sol

        def right_eval(tau):
            return right_sol(np.asarray(tau) + t_back)

        tau_plus = -t_back

    logger.debug("Homoclinic shot", branch=branch, alpha=alpha, q_plus=q_end, loop=not is_saddle)
    return NumericHomoclinic(
        branch=branch,
        sign=pendulum.sign,
        alpha=alpha,
        alpha_plus=alpha_plus,
        q_plus=q_end if is_saddle else 0.0,
        left=left_eval,
        right=right_eval,
        tau_minus=-t_mid,
        tau_plus=tau_plus,
        loop=not is_saddle,
    )


def is_standard_pendulum(pendulum: Pendulum) -> bool:
    return pendulum.V == ex.sub(ex.cos(ex.var(pendulum.variable)), 1.0)


def homoclinic_for(pendulum: Pendulum, branch: int = 1) -> Homoclinic:
    if is_standard_pendulum(pendulum):
        return StandardHomoclinic(branch, pendulum.sign)
    return numeric_homoclinic(pendulum, branch)


def model_homoclinics(model: Model, branch: int = 1) -> List[Homoclinic]:
    """Homoclinics of every pendulum of ``model``, built once and cached on it."""
    cache = model.__dict__.setdefault("_homoclinics", {})
    if branch not in cache:
        cache[branch] = [homoclinic_for(pendulum, branch) for pendulum in model.pendula]
    return cache[branch]


def product_separatrix(model: Model, tau, branch: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Componentwise (p*_j(tau_j), q*_j(tau_j)) with independent time origins.

    ``tau`` has length n, or shape (n, m) for m samples per pendulum.
    """
    tau = np.asarray(tau, dtype=float)
    homoclinics = model_homoclinics(model, branch)
    values = [hom(tau[j]) for j, hom in enumerate(homoclinics)]
    p = np.array([v[0] for v in values])
    q = np.array([v[1] for v in values])
    return p, q


def common_cut(model: Model, tol: Optional[float] = None, branch: int = 1) -> float:
    return max(hom.t_cut(tol) for hom in model_homoclinics(model, branch))
