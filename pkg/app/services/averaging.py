"""Lie-transform averaging of the inner Hamiltonian and resonant normal forms.

Trigonometric polynomials are kept in real form: a mode (k, l) carries
C cos(k.phi + l s) + S sin(k.phi + l s) with coefficients that are
expressions in the actions. ``clock`` is the coefficient of I0, the action
conjugate to s, so that h~ = h + I0 is representable. Brackets use
{F, G} = dF/dphi . dG/dI - dF/dI . dG/dphi (+ the (s, I0) pair).
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from app.config.settings import settings
from app.exceptions.custom_exceptions import (
    ConvergenceError,
    HypothesisError,
    RegionError,
    TangencyError,
)
from app.services import expr as ex
from app.services.hamiltonian import FourierTerm, Model, canonical_index, primitive_index
from app.services.resonance import (
    ReducedDomain,
    Resonance,
    ResonanceWeb,
    build_reduced_domain,
    build_web,
    classify,
    default_tube_radius,
    label,
)
from app.utils.logger import get_logger

logger = get_logger(__name__)

Mode = Tuple[Tuple[int, ...], int]

SUPPORT_FLOOR = 1e-9


def zero_mode(d: int) -> Mode:
    return (tuple([0] * d), 0)


class _Accumulator:
    """Collects cos/sin contributions per mode and sums them as balanced trees."""

    def __init__(self, d: int):
        self.d = d
        self.cos: Dict[Mode, List[ex.Expr]] = {}
        self.sin: Dict[Mode, List[ex.Expr]] = {}
        self.clock: List[ex.Expr] = []

    def put(self, k: Sequence[int], l: int, c: ex.ExprLike, s: ex.ExprLike) -> None:
        kk, ll, sign = canonical_index(k, l)
        mode = (kk, ll)
        c, s = ex.as_expr(c), ex.as_expr(s)
        if not ex.is_const(c, 0.0):
            self.cos.setdefault(mode, []).append(c)
        if sign < 0:
            s = ex.neg(s)
        if any(kk) or ll:
            if not ex.is_const(s, 0.0):
                self.sin.setdefault(mode, []).append(s)

    def field(self) -> "TrigPolyField":
        modes = {}
        for mode in set(self.cos) | set(self.sin):
            c = ex.total(self.cos.get(mode, []))
            s = ex.total(self.sin.get(mode, []))
            if not (ex.is_const(c, 0.0) and ex.is_const(s, 0.0)):
                modes[mode] = (c, s)
        return TrigPolyField(self.d, modes, ex.total(self.clock))


class TrigPolyField:
    """Finite real trigonometric polynomial in (phi, s) with coefficients in I."""

    def __init__(self, d: int, modes: Optional[Dict[Mode, Tuple[ex.Expr, ex.Expr]]] = None, clock: ex.ExprLike = 0.0):
        self.d = d
        self.modes: Dict[Mode, Tuple[ex.Expr, ex.Expr]] = dict(modes or {})
        self.clock = ex.as_expr(clock)
        self.actions = [f"I{i + 1}" for i in range(d)]
        self._derivatives: Dict[Tuple[Mode, int], Tuple[ex.Expr, ex.Expr]] = {}
        self._compiled: Optional[ex.CompiledExpr] = None
        self._gradient_compiled: Optional[ex.CompiledExpr] = None

    # Construction

    @classmethod
    def zero(cls, d: int) -> "TrigPolyField":
        return cls(d)

    @classmethod
    def constant(cls, d: int, value: ex.ExprLike, clock: ex.ExprLike = 0.0) -> "TrigPolyField":
        value = ex.as_expr(value)
        modes = {} if ex.is_const(value, 0.0) else {zero_mode(d): (value, ex.ZERO)}
        return cls(d, modes, clock)

    @classmethod
    def from_terms(cls, terms: Iterable[FourierTerm], d: int) -> "TrigPolyField":
        acc = _Accumulator(d)
        for t in terms:
            if t.basis == "cos":
                acc.put(t.k, t.l, t.coeff, 0.0)
            else:
                acc.put(t.k, t.l, 0.0, t.coeff)
        return acc.field()

    # Algebra

    def items(self):
        return sorted(self.modes.items(), key=lambda item: item[0])

    def support(self) -> Set[Mode]:
        return set(self.modes)

    def __add__(self, other: "TrigPolyField") -> "TrigPolyField":
        acc = _Accumulator(self.d)
        for f in (self, other):
            for (k, l), (c, s) in f.modes.items():
                acc.put(k, l, c, s)
        acc.clock = [self.clock, other.clock]
        return acc.field()

    def __sub__(self, other: "TrigPolyField") -> "TrigPolyField":
        return self + other.scale(-1.0)

    def scale(self, factor: ex.ExprLike) -> "TrigPolyField":
        factor = ex.as_expr(factor)
        modes = {m: (ex.mul(factor, c), ex.mul(factor, s)) for m, (c, s) in self.modes.items()}
        return TrigPolyField(self.d, modes, ex.mul(factor, self.clock)).pruned()

    def pruned(self) -> "TrigPolyField":
        modes = {m: cs for m, cs in self.modes.items() if not (ex.is_const(cs[0], 0.0) and ex.is_const(cs[1], 0.0))}
        return TrigPolyField(self.d, modes, self.clock)

    def restrict(self, keep: Callable[[Mode], bool]) -> "TrigPolyField":
        return TrigPolyField(self.d, {m: cs for m, cs in self.modes.items() if keep(m)}, self.clock)

    def derivative(self, mode: Mode, i: int) -> Tuple[ex.Expr, ex.Expr]:
        """d/dI_i of the (cos, sin) coefficients of ``mode``."""
        key = (mode, i)
        if key not in self._derivatives:
            c, s = self.modes[mode]
            name = self.actions[i]
            self._derivatives[key] = (ex.diff(c, name), ex.diff(s, name))
        return self._derivatives[key]

    def is_zero(self) -> bool:
        return not self.modes and ex.is_const(self.clock, 0.0)

    # Numerics

    def _coefficient_exprs(self) -> List[ex.Expr]:
        out: List[ex.Expr] = []
        for _, (c, s) in self.items():
            out.extend((c, s))
        return out

    def coefficients_at(self, points: np.ndarray) -> Dict[Mode, np.ndarray]:
        """(cos, sin) coefficient values at the rows of ``points``; each entry has shape (2, m)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if not self.modes:
            return {}
        if self._compiled is None:
            self._compiled = ex.compile_many(self._coefficient_exprs(), self.actions)
        values = self._compiled.at_points(points)
        return {mode: values[2 * i:2 * i + 2] for i, (mode, _) in enumerate(self.items())}

    def coefficient_gradients_at(self, I) -> Dict[Mode, np.ndarray]:
        """d/dI of (cos, sin) at one point; each entry has shape (2, d)."""
        if not self.modes:
            return {}
        if self._gradient_compiled is None:
            exprs = []
            for mode, _ in self.items():
                for i in range(self.d):
                    exprs.extend(self.derivative(mode, i))
            self._gradient_compiled = ex.compile_many(exprs, self.actions)
        values = self._gradient_compiled.at_points(np.asarray(I, dtype=float)[None, :])[:, 0]
        out = {}
        for j, (mode, _) in enumerate(self.items()):
            block = values[2 * self.d * j:2 * self.d * (j + 1)].reshape(self.d, 2)
            out[mode] = block.T
        return out

    def evaluate(self, I, phi, s: float = 0.0) -> float:
        """Value at one point (I, phi, s); the clock part is excluded."""
        coeffs = self.coefficients_at(np.asarray(I, dtype=float)[None, :])
        total = 0.0
        for (k, l), cs in coeffs.items():
            theta = float(np.dot(k, phi)) + l * s
            total += cs[0, 0] * np.cos(theta) + cs[1, 0] * np.sin(theta)
        return float(total)

    def numeric_support(self, points: np.ndarray, floor: float = SUPPORT_FLOOR) -> Set[Mode]:
        """Modes whose coefficients are nonzero at some sample point (relative to the field's scale)."""
        coeffs = self.coefficients_at(points)
        if not coeffs:
            return set()
        scale = max(1.0, max(float(np.max(np.abs(v))) for v in coeffs.values()))
        return {m for m, v in coeffs.items() if np.max(np.abs(v)) > floor * scale}

    def to_expr(self) -> ex.Expr:
        """Plain expression in I<j>, phi<j>, t and I0."""
        terms = []
        for (k, l), (c, s) in self.items():
            theta = ex.total([ex.mul(kj, ex.var(f"phi{j + 1}")) for j, kj in enumerate(k) if kj] + [ex.mul(l, ex.var("t"))])
            terms.append(ex.mul(c, ex.cos(theta)))
            terms.append(ex.mul(s, ex.sin(theta)))
        terms.append(ex.mul(self.clock, ex.var("I0")))
        return ex.total(terms)


GradedField = Dict[int, TrigPolyField]


def _product(acc: _Accumulator, ka, la, x: Tuple[ex.Expr, ex.Expr], kb, lb, y: Tuple[ex.Expr, ex.Expr], weight: float):
    """Add weight * (x_c cos a + x_s sin a)(y_c cos b + y_s sin b) to the accumulator."""
    xc, xs = x
    yc, ys = y
    half = 0.5 * weight
    ksum = tuple(a + b for a, b in zip(ka, kb))
    kdif = tuple(a - b for a, b in zip(ka, kb))
    acc.put(
        ksum, la + lb,
        ex.mul(half, ex.sub(ex.mul(xc, yc), ex.mul(xs, ys))),
        ex.mul(half, ex.add(ex.mul(xc, ys), ex.mul(xs, yc))),
    )
    acc.put(
        kdif, la - lb,
        ex.mul(half, ex.add(ex.mul(xc, yc), ex.mul(xs, ys))),
        ex.mul(half, ex.sub(ex.mul(xs, yc), ex.mul(xc, ys))),
    )


def poisson_bracket(A: TrigPolyField, B: TrigPolyField) -> TrigPolyField:
    """{A, B} expanded as a trigonometric polynomial."""
    d = A.d
    acc = _Accumulator(d)
    for (ka, la), (ca, sa) in A.modes.items():
        for (kb, lb), (cb, sb) in B.modes.items():
            for i in range(d):
                if ka[i]:
                    dcb, dsb = B.derivative((kb, lb), i)
                    if not (ex.is_const(dcb, 0.0) and ex.is_const(dsb, 0.0)):
                        _product(acc, ka, la, (sa, ex.neg(ca)), kb, lb, (dcb, dsb), float(ka[i]))
                if kb[i]:
                    dca, dsa = A.derivative((ka, la), i)
                    if not (ex.is_const(dca, 0.0) and ex.is_const(dsa, 0.0)):
                        _product(acc, ka, la, (dca, dsa), kb, lb, (sb, ex.neg(cb)), -float(kb[i]))
    # (s, I0) pair: {A, c I0} = l_A c dA/ds-part, {c I0, B} = -c dB/ds
    if not ex.is_const(B.clock, 0.0):
        for (ka, la), (ca, sa) in A.modes.items():
            if la:
                acc.put(ka, la, ex.mul(ex.mul(la, B.clock), sa), ex.neg(ex.mul(ex.mul(la, B.clock), ca)))
    if not ex.is_const(A.clock, 0.0):
        for (kb, lb), (cb, sb) in B.modes.items():
            if lb:
                acc.put(kb, lb, ex.neg(ex.mul(ex.mul(lb, A.clock), sb)), ex.mul(ex.mul(lb, A.clock), cb))
    return acc.field()


def expr_bracket(F: ex.Expr, G: ex.Expr, d: int) -> ex.Expr:
    """Poisson bracket of plain expressions in (phi_i, I_i) and (t, I0); {phi1, I1} = 1."""
    pairs = [(f"phi{i + 1}", f"I{i + 1}") for i in range(d)] + [("t", "I0")]
    terms = []
    for angle, action in pairs:
        terms.append(ex.mul(ex.diff(F, angle), ex.diff(G, action)))
        terms.append(ex.neg(ex.mul(ex.diff(F, action), ex.diff(G, angle))))
    return ex.total(terms)


# Homological equation


def nu_expr(model: Model, k: Sequence[int], l: int) -> ex.Expr:
    """omega(I).k + l as an expression."""
    return ex.total([ex.mul(kj, w) for kj, w in zip(k, model.omega_exprs) if kj] + [ex.const(l)])


def _is_multiple(mode: Mode, index: Mode) -> bool:
    k, l = mode
    if not any(k) and l == 0:
        return False
    return primitive_index(k, l) == index


def resonant_keep(index: Mode) -> Callable[[Mode], bool]:
    """Predicate keeping the modes that are multiples of a resonance index."""
    return lambda mode: _is_multiple(mode, index)


def symbolic_generator(
    K: TrigPolyField, model: Model, keep: Optional[Callable[[Mode], bool]] = None
) -> Tuple[TrigPolyField, TrigPolyField]:
    """Solve K_bar = K + {h~, G} keeping the (0,0) mode and the modes selected by ``keep``.

    Returns (K_bar, G) with G_C = -(K - K_bar)_S / nu and G_S = (K - K_bar)_C / nu.
    """
    d = K.d
    keep = keep or (lambda mode: False)
    kept: Dict[Mode, Tuple[ex.Expr, ex.Expr]] = {}
    gen: Dict[Mode, Tuple[ex.Expr, ex.Expr]] = {}
    for mode, (c, s) in K.modes.items():
        k, l = mode
        if (not any(k) and l == 0) or keep(mode):
            kept[mode] = (c, s)
            continue
        nu = nu_expr(model, k, l)
        if ex.is_const(nu, 0.0):
            kept[mode] = (c, s)
            continue
        gen[mode] = (ex.neg(ex.div(s, nu)), ex.div(c, nu))
    return TrigPolyField(d, kept, K.clock), TrigPolyField(d, gen)


def lie_step(
    K: GradedField, G: TrigPolyField, N: int, max_order: int, K_bar: Optional[TrigPolyField] = None
) -> GradedField:
    """K o exp(eps^N L_G) with L_G F = {F, G}, truncated above ``max_order``.

    With ``K_bar`` the homological identity {h~, G} = K_bar - K_N replaces
    the bracket of the order-0 term, so the order-N part becomes K_bar exactly.
    """
    if G.is_zero():
        return dict(K)
    d = G.d
    parts: Dict[int, List[TrigPolyField]] = {o: [f] for o, f in K.items()}
    for o, f in sorted(K.items()):
        term = f
        m = 1
        while o + N * m <= max_order:
            if o == 0 and m == 1 and K_bar is not None:
                term = K_bar - K.get(N, TrigPolyField.zero(d))
            else:
                term = poisson_bracket(term, G).scale(1.0 / m)
            if term.is_zero():
                break
            parts.setdefault(o + N * m, []).append(term)
            m += 1
    out: GradedField = {}
    for o, fields in parts.items():
        acc = _Accumulator(d)
        for f in fields:
            for (k, l), (c, s) in f.modes.items():
                acc.put(k, l, c, s)
            acc.clock.append(f.clock)
        out[o] = acc.field()
    return out


def inner_graded(model: Model, max_order: int) -> GradedField:
    """h~ = h + I0 at order 0 and the eps^j parts of Q at p = q = 0."""
    d = model.d
    graded: GradedField = {0: TrigPolyField.constant(d, model.h, clock=1.0)}
    for j in range(1, max_order + 1):
        graded[j] = TrigPolyField.from_terms(model.inner_terms(j), d)
    return graded


@dataclass
class Normalization:
    """Result of successive averaging steps."""

    graded: GradedField
    averaged: Dict[int, TrigPolyField]
    generators: Dict[int, TrigPolyField]
    steps: int
    max_order: int

    def remainder(self) -> Optional[TrigPolyField]:
        return self.graded.get(self.steps + 1)


def normalize(
    model: Model, steps: int, max_order: Optional[int] = None, keep: Optional[Callable[[Mode], bool]] = None
) -> Normalization:
    """Average orders 1..steps of the inner Hamiltonian, keeping the modes selected by ``keep``."""
    max_order = max_order or steps + 1
    graded = inner_graded(model, max_order)
    averaged: Dict[int, TrigPolyField] = {}
    generators: Dict[int, TrigPolyField] = {}
    for j in range(1, steps + 1):
        K_bar, G = symbolic_generator(graded.get(j, TrigPolyField.zero(model.d)), model, keep)
        graded = lie_step(graded, G, j, max_order, K_bar)
        averaged[j] = K_bar
        generators[j] = G
    return Normalization(graded=graded, averaged=averaged, generators=generators, steps=steps, max_order=max_order)


def sample_actions(model: Model, count: Optional[int] = None, seed: Optional[int] = None) -> np.ndarray:
    rng = np.random.default_rng(settings.seed if seed is None else seed)
    return rng.uniform(model.box[:, 0], model.box[:, 1], size=(count or settings.sample_points, model.d))


def activation_supports(model: Model, order: int) -> Dict[int, Set[Mode]]:
    """N_j for j <= order: support of the order-j term after j-1 non-resonant steps."""
    cache = model.__dict__.setdefault("_activation", {})
    if order in cache:
        return cache[order]
    points = sample_actions(model)
    graded = inner_graded(model, order)
    supports: Dict[int, Set[Mode]] = {}
    for j in range(1, order + 1):
        current = graded.get(j, TrigPolyField.zero(model.d))
        supports[j] = {m for m in current.numeric_support(points) if any(m[0]) or m[1]}
        if j < order:
            K_bar, G = symbolic_generator(current, model)
            graded = lie_step(graded, G, j, order, K_bar)
    cache[order] = supports
    logger.debug("Activation supports", order=order, sizes={j: len(s) for j, s in supports.items()})
    return supports


# Pointwise homological solver


def bump(x):
    """C-infinity plateau function: 1 on |x| <= 1, 0 on |x| >= 2."""
    x = np.abs(np.asarray(x, dtype=float))
    u = np.clip(2.0 - x, 0.0, 1.0)

    def f(v):
        with np.errstate(divide="ignore"):
            return np.where(v > 0, np.exp(-1.0 / np.where(v > 0, v, 1.0)), 0.0)

    a, b = f(u), f(1.0 - u)
    return a / (a + b)


@dataclass
class HomologicalSolution:
    """K_bar and G at one action point; entries map a mode to (cos, sin)."""

    I: np.ndarray
    averaged: Dict[Mode, np.ndarray]
    generator: Dict[Mode, np.ndarray]
    original: Dict[Mode, np.ndarray]
    nu: Dict[Mode, float]
    cases: Dict[Mode, str]

    def residual_coefficients(self) -> Dict[Mode, np.ndarray]:
        """K_bar - K - {h~, G} per mode."""
        out = {}
        for mode, kc in self.original.items():
            kb = self.averaged.get(mode, np.zeros(2))
            g = self.generator.get(mode, np.zeros(2))
            nu = self.nu.get(mode, 0.0)
            out[mode] = np.array([kb[0] - kc[0] + nu * g[1], kb[1] - kc[1] - nu * g[0]])
        return out

    def residual(self, phi=None, s: float = 0.0) -> float:
        coeffs = self.residual_coefficients()
        if phi is None:
            return max((float(np.max(np.abs(v))) for v in coeffs.values()), default=0.0)
        total = 0.0
        for (k, l), v in coeffs.items():
            theta = float(np.dot(k, phi)) + l * s
            total += v[0] * np.cos(theta) + v[1] * np.sin(theta)
        return abs(total)


class HomologicalSolver:
    """Pointwise solution of K_bar = K + {h~, G} with the plateau cut-off near resonances.

    For a mode (k, l) with k != 0 the averaged part is K(Gamma(I)) psi(dist/L)
    where Gamma is the projection along k for secular resonances and the
    orthogonal one otherwise.
    """

    def __init__(self, K: TrigPolyField, model: Model, L: float, web: Optional[ResonanceWeb] = None):
        self.K = K
        self.model = model
        self.L = L
        self.web = web
        secular = {r.index for r in web.secular} if web is not None else set()
        self._resonances: Dict[Mode, Tuple[Resonance, bool]] = {}
        for mode in K.modes:
            k, l = mode
            if any(k):
                index = primitive_index(k, l)
                self._resonances[mode] = (
                    Resonance(k=index[0], l=index[1], order=0, model=model),
                    index in secular,
                )

    def at(self, I) -> HomologicalSolution:
        I = np.asarray(I, dtype=float)
        omega = self.model.frequency(I)
        here = self.K.coefficients_at(I[None, :])
        averaged, generator, nu_map, cases = {}, {}, {}, {}
        original = {m: v[:, 0] for m, v in here.items()}
        for mode, value in original.items():
            k, l = mode
            nu = float(np.dot(omega, k) + l)
            nu_map[mode] = nu
            if not any(k) and l == 0:
                averaged[mode] = value.copy()
                cases[mode] = "mean"
                continue
            if not any(k):
                generator[mode] = np.array([-value[1] / l, value[0] / l])
                cases[mode] = "time"
                continue
            res, secular = self._resonances[mode]
            kbar, gamma = self._averaged_part(mode, res, secular, I)
            averaged[mode] = kbar
            if abs(nu) > settings.tol_res:
                diff = value - kbar
                generator[mode] = np.array([-diff[1] / nu, diff[0] / nu])
                cases[mode] = "off"
            else:
                generator[mode] = self._on_resonance(mode, res, secular, I)
                cases[mode] = "on-k" if secular else "on-normal"
        return HomologicalSolution(I, averaged, generator, original, nu_map, cases)

    def _averaged_part(self, mode, res: Resonance, secular: bool, I) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        try:
            if secular:
                gamma, _ = res.project_k(I)
            else:
                gamma = res.project_orthogonal(I)
        except (ConvergenceError, TangencyError):
            return np.zeros(2), None
        dist = res.distance(I)
        psi = float(bump(dist / self.L))
        if psi == 0.0:
            return np.zeros(2), gamma
        value = self.K.coefficients_at(gamma[None, :])[mode][:, 0]
        return psi * value, gamma

    def _on_resonance(self, mode, res: Resonance, secular: bool, I) -> np.ndarray:
        grads = self.K.coefficient_gradients_at(I)[mode]
        k = res.kvec * (np.asarray(mode[0], dtype=float) @ res.kvec) / float(res.kvec @ res.kvec)
        hess = self.model.hessian_h(I)
        if secular:
            a = float(k @ hess @ k)
            if abs(a) <= 1e-12 * float(k @ k):
                raise TangencyError(f"k^T D2h k vanishes on {res.label} at I={I.tolist()}")
            directional = grads @ k / a
        else:
            normal = hess @ k
            directional = grads @ normal / float(normal @ normal)
        # (K - K_bar)/(i nu) with (K - K_bar) ~ nu * directional
        return np.array([-directional[1], directional[0]])


def solve_homological(K: TrigPolyField, model: Model, L: float, web: Optional[ResonanceWeb] = None) -> HomologicalSolver:
    return HomologicalSolver(K, model, L, web)


# Averaged Hamiltonian


@dataclass
class AveragedPoint:
    """Averaged Hamiltonian at an action point.

    ``resonant`` holds (order, p, cos, sin) harmonics of the resonant
    potential in theta = k0.phi + l0 s; ``mean`` holds the (0,0) part by order.
    """

    I: np.ndarray
    region: str
    resonance: Optional[str]
    index: Optional[Mode]
    h: float
    mean: Dict[int, float]
    resonant: List[Tuple[int, int, float, float]]

    def potential(self, theta, order: Optional[int] = None) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        total = np.zeros_like(theta)
        for j, p, c, s in self.resonant:
            if order is None or j == order:
                total = total + c * np.cos(p * theta) + s * np.sin(p * theta)
        return total

    def value(self, phi, s: float, eps: float) -> float:
        total = self.h + sum(eps**j * v for j, v in self.mean.items())
        if self.index is not None:
            theta = float(np.dot(self.index[0], phi)) + self.index[1] * s
            total += sum(eps**j * (c * np.cos(p * theta) + sn * np.sin(p * theta)) for j, p, c, sn in self.resonant)
        return float(total)


class AveragedHamiltonian:
    """h + eps K00 (+ eps^j U near a secular resonance) on the reduced domain."""

    def __init__(self, model: Model, order: int, L: float, domain: ReducedDomain):
        self.model = model
        self.order = order
        self.L = L
        self.domain = domain
        self.free = normalize(model, order)
        self._resonant: Dict[Mode, Normalization] = {}

    def _normalization(self, res: Resonance) -> Normalization:
        if res.index not in self._resonant:
            self._resonant[res.index] = normalize(self.model, self.order, keep=resonant_keep(res.index))
        return self._resonant[res.index]

    def at(self, I) -> AveragedPoint:
        """Classify I and evaluate the averaged Hamiltonian there.

        Raises:
            RegionError: I within delta of B, or in the L-2L annulus of a secular resonance.
        """
        I = np.asarray(I, dtype=float)
        clearance, witness = self.domain.clearance(I)
        if clearance <= self.domain.delta:
            raise RegionError(
                f"I={I.tolist()} lies within delta={self.domain.delta:g} of B",
                witness=None if witness is None else witness.tolist(),
            )
        region, res, dist = classify(self.domain, I, self.L)
        if region == "annulus":
            raise RegionError(
                f"I={I.tolist()} lies in the L-2L annulus of {res.label} (distance {dist:.3g}); shrink L",
                witness=I.tolist(),
            )
        mean = {}
        zero = zero_mode(self.model.d)
        norm = self.free if region == "free" else self._normalization(res)
        for j, field_j in norm.averaged.items():
            coeffs = field_j.coefficients_at(I[None, :])
            mean[j] = float(coeffs[zero][0, 0]) if zero in coeffs else 0.0
        resonant: List[Tuple[int, int, float, float]] = []
        if region == "resonant":
            gamma, _ = res.project_k(I)
            resonant = resonant_harmonics(norm, res.index, gamma)
        return AveragedPoint(
            I=I,
            region=region,
            resonance=None if res is None or region == "free" else res.label,
            index=None if region == "free" else res.index,
            h=self.model.h_value(I),
            mean=mean,
            resonant=resonant,
        )


def resonant_harmonics(norm: Normalization, index: Mode, at: np.ndarray) -> List[Tuple[int, int, float, float]]:
    """(order, p, cos, sin) of the modes p*(k0, l0) of the averaged terms, evaluated at ``at``."""
    out = []
    k0 = np.array(index[0])
    for j, field_j in sorted(norm.averaged.items()):
        coeffs = field_j.coefficients_at(np.asarray(at, dtype=float)[None, :])
        for (k, l), v in sorted(coeffs.items()):
            if not _is_multiple((k, l), index):
                continue
            nz = int(np.flatnonzero(k0)[0])
            p = int(round(k[nz] / k0[nz]))
            out.append((j, p, float(v[0, 0]), float(v[1, 0])))
    return out


def average_to_order(
    model: Model,
    m_avg: int,
    L: Optional[float] = None,
    delta: float = 0.05,
    web: Optional[ResonanceWeb] = None,
    domain: Optional[ReducedDomain] = None,
) -> AveragedHamiltonian:
    """Averaged Hamiltonian to order ``m_avg`` on I_delta with tube radius L."""
    if domain is None:
        web = web or build_web(model, 2)
        domain = build_reduced_domain(web, delta, max_order=max(2, web.order))
    L = L or domain.L or default_tube_radius(domain)
    return AveragedHamiltonian(model, m_avg, L, domain)


# Resonant normal form


@dataclass
class NormalForm:
    """Pendulum-like normal form a y^2/2 + eps^j U*(theta) at a secular resonance."""

    k0: Tuple[int, ...]
    l0: int
    order: int
    m: int
    E_hat: np.ndarray
    B_star: np.ndarray
    t_star: float
    a: float
    harmonics: List[Tuple[int, float, float]]
    saddle_theta: float
    saddle_curvature: float
    saddle_action: float
    scan_maxima: int

    @property
    def label(self) -> str:
        return label(self.k0, self.l0)

    def U(self, theta):
        theta = np.asarray(theta, dtype=float)
        total = np.zeros_like(theta)
        for p, c, s in self.harmonics:
            total = total + c * np.cos(p * theta) + s * np.sin(p * theta)
        return total

    def dU(self, theta):
        theta = np.asarray(theta, dtype=float)
        total = np.zeros_like(theta)
        for p, c, s in self.harmonics:
            total = total - p * c * np.sin(p * theta) + p * s * np.cos(p * theta)
        return total

    def d2U(self, theta):
        theta = np.asarray(theta, dtype=float)
        total = np.zeros_like(theta)
        for p, c, s in self.harmonics:
            total = total - p * p * (c * np.cos(p * theta) + s * np.sin(p * theta))
        return total

    def critical_energy(self, eps: float) -> float:
        """E*_m = eps^j U*(theta~)."""
        return float(eps**self.order * self.U(self.saddle_theta))

    def ell(self, theta, E_m: float, eps: float):
        """sqrt((2/a)(E_m - eps^j U*(theta))); nan where the argument is negative."""
        arg = (2.0 / self.a) * (E_m - eps**self.order * self.U(theta))
        with np.errstate(invalid="ignore"):
            return np.where(arg >= 0, np.sqrt(np.maximum(arg, 0.0)), np.nan)

    def energy_defect(self, theta, E_m: float, eps: float, branch: int = 1):
        y = torus_graph(self, E_m, theta, branch, eps)
        return 0.5 * self.a * y**2 + eps**self.order * self.U(theta) - E_m

    def to_dict(self, samples: int = 64) -> Dict:
        theta = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False)
        return {
            "resonance": self.label,
            "k0": list(self.k0),
            "l0": self.l0,
            "order": self.order,
            "m": self.m + 1,
            "E_hat": self.E_hat.tolist(),
            "B_star": self.B_star.tolist(),
            "a": self.a,
            "harmonics": [{"p": p, "cos": c, "sin": s} for p, c, s in self.harmonics],
            "saddle": {
                "theta": self.saddle_theta,
                "action": self.saddle_action,
                "U_second_derivative": self.saddle_curvature,
                "U_value": float(self.U(self.saddle_theta)),
            },
            "U_samples": {"theta": theta.tolist(), "U": self.U(theta).tolist()},
        }


def torus_graph(nf: NormalForm, E_m: float, theta, branch: int, eps: float):
    """Leading-order graph y = branch * ell(theta; E_m) of the torus F_m = E_m (nan off its domain)."""
    return branch * nf.ell(theta, E_m, eps)


def resonance_point(res: Resonance, E_hat: Sequence[float], m: int) -> Tuple[np.ndarray, float]:
    """B*(E_hat) = (E_hat, 0) + t* k0 on the resonance (E_hat inserted around slot m)."""
    base = np.insert(np.asarray(E_hat, dtype=float), m, 0.0)
    point, t = res.project_k(base)
    return point, t


def chart_coordinates(I, k0: Sequence[int], m: int) -> Tuple[np.ndarray, float]:
    """(E_hat, I_m / k0^m) with E_hat = I_hat - (I_m / k0^m) k0_hat."""
    I = np.asarray(I, dtype=float)
    k0 = np.asarray(k0, dtype=float)
    ratio = I[m] / k0[m]
    return np.delete(I - ratio * k0, m), float(ratio)


def resonant_normal_form(
    model: Model,
    k0: Sequence[int],
    l0: int,
    E_hat: Sequence[float],
    order: Optional[int] = None,
    web: Optional[ResonanceWeb] = None,
    norm: Optional[Normalization] = None,
) -> NormalForm:
    """Normal form at the point B*(E_hat) of the secular resonance R(k0|l0).

    Raises:
        HypothesisError: H5 (a vanishes) or H6 (no unique non-degenerate extremum of U*).
    """
    k0, l0 = primitive_index(k0, l0)
    res = Resonance(k=k0, l=l0, order=order or 1, model=model)
    if order is None:
        web = web or build_web(model, 2)
        found = web.find(k0, l0)
        if found is None:
            raise HypothesisError("H5", f"{label(k0, l0)} is not a secular resonance of this model")
        order = found.order
    m = int(np.flatnonzero(np.asarray(k0))[0])
    try:
        B_star, t_star = resonance_point(res, E_hat, m)
    except TangencyError as exc:
        base = np.insert(np.asarray(E_hat, dtype=float), m, 0.0)
        raise HypothesisError(
            "H5", f"a = k0^T D2h k0 vanishes on {res.label}", witness=base.tolist(), value=res.a(base)
        ) from exc
    a = res.a(B_star)
    if abs(a) <= settings.h3_det_floor:
        raise HypothesisError("H5", f"a = k0^T D2h k0 vanishes on {res.label}", witness=B_star.tolist(), value=a)
    norm = norm or normalize(model, order, keep=resonant_keep((k0, l0)))
    harmonics = [(p, c, s) for j, p, c, s in resonant_harmonics(norm, (k0, l0), B_star) if j == order]
    theta, curvature, maxima = locate_saddle(harmonics, np.sign(a), res.label, B_star)
    return NormalForm(
        k0=k0,
        l0=l0,
        order=order,
        m=m,
        E_hat=np.asarray(E_hat, dtype=float),
        B_star=B_star,
        t_star=t_star,
        a=a,
        harmonics=harmonics,
        saddle_theta=theta,
        saddle_curvature=curvature,
        saddle_action=float(B_star[m]),
        scan_maxima=maxima,
    )


def locate_saddle(harmonics, sign: float, name: str, witness) -> Tuple[float, float, int]:
    """Global maximizer of sign*U* by scan and Newton polish; H6 when not unique or degenerate."""
    points = settings.saddle_scan
    theta = np.linspace(0.0, 2.0 * np.pi, points, endpoint=False)

    def U(t, der=0):
        t = np.asarray(t, dtype=float)
        total = np.zeros_like(t)
        for p, c, s in harmonics:
            if der == 0:
                total = total + c * np.cos(p * t) + s * np.sin(p * t)
            elif der == 1:
                total = total - p * c * np.sin(p * t) + p * s * np.cos(p * t)
            else:
                total = total - p * p * (c * np.cos(p * t) + s * np.sin(p * t))
        return sign * total

    values = U(theta)
    scale = max(float(np.max(np.abs(values))), 0.0)
    if scale <= 1e-14:
        raise HypothesisError("H6", f"resonant potential of {name} vanishes identically", witness=list(witness), value=0.0)
    slope = U(theta, 1)
    # strict local maxima: derivative changes sign from + to -
    changes = np.nonzero((slope > 0) & (np.roll(slope, -1) <= 0))[0]
    if changes.size != 1:
        raise HypothesisError(
            "H6",
            f"resonant potential of {name} has {changes.size} local maxima on a {points}-point scan",
            witness=list(witness),
            value=float(changes.size),
        )
    t = theta[changes[0]] + 0.5 * (theta[1] - theta[0])
    for _ in range(settings.newton_max_iter):
        second = float(U(t, 2))
        if second == 0.0:
            break
        step = float(U(t, 1)) / second
        t -= step
        if abs(step) <= 1e-14:
            break
    t = float(np.mod(t, 2.0 * np.pi))
    curvature = float(U(t, 2))
    if curvature > -settings.beta_min:
        raise HypothesisError(
            "H6", f"saddle of {name} is degenerate (U* second derivative {curvature:.3g})", witness=list(witness), value=curvature
        )
    return t, sign * curvature, int(changes.size)


# Level-set functions


def first_integral(
    model: Model,
    order: int = 1,
    eps: float = 0.0,
    nf: Optional[NormalForm] = None,
    norm: Optional[Normalization] = None,
) -> Callable[[np.ndarray, np.ndarray, float], np.ndarray]:
    """Level-set function of the tori.

    Non-resonant: F = I (order 0) or F = I + eps dG1/dphi (order 1).
    Resonant (``nf`` given): F = (E_hat, F_m) with
    F_m = l0 y + h(B* + y k0) - h(B*) + eps^j U*(k0.phi + l0 s).
    """
    if nf is not None:
        return _resonant_integral(model, nf, eps)
    if order == 0:
        return lambda I, phi, s: np.asarray(I, dtype=float).copy()
    norm = norm or normalize(model, 1)
    G1 = norm.generators.get(1, TrigPolyField.zero(model.d))

    def F(I, phi, s):
        I = np.asarray(I, dtype=float)
        out = I.copy()
        coeffs = G1.coefficients_at(I[None, :])
        for (k, l), v in coeffs.items():
            theta = float(np.dot(k, phi)) + l * s
            # d/dphi (C cos + S sin) = k (S cos - C sin)
            out += eps * np.asarray(k, dtype=float) * (v[1, 0] * np.cos(theta) - v[0, 0] * np.sin(theta))
        return out

    return F


def _resonant_integral(model: Model, nf: NormalForm, eps: float):
    k0 = np.asarray(nf.k0, dtype=float)
    res = Resonance(k=nf.k0, l=nf.l0, order=nf.order, model=model)

    def F(I, phi, s):
        I = np.asarray(I, dtype=float)
        E_hat, ratio = chart_coordinates(I, nf.k0, nf.m)
        B, t_star = resonance_point(res, E_hat, nf.m)
        y = ratio - t_star
        theta = float(k0 @ np.asarray(phi, dtype=float)) + nf.l0 * s
        F_m = nf.l0 * y + model.h_value(B + y * k0) - model.h_value(B) + eps**nf.order * float(nf.U(theta))
        return np.append(E_hat, F_m)

    return F


def averaged_coefficients_grid(norm: Normalization, points: np.ndarray) -> List[Dict]:
    """Rows (order, mode, I, cos, sin) of the averaged terms over an action grid."""
    rows = []
    for j, field_j in sorted(norm.averaged.items()):
        coeffs = field_j.coefficients_at(points)
        for (k, l), v in sorted(coeffs.items()):
            for i, I in enumerate(points):
                rows.append({"order": j, "k": list(k), "l": l, "I": I.tolist(), "cos": float(v[0, i]), "sin": float(v[1, i])})
    return rows
