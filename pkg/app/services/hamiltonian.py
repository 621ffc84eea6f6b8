"""Rotator x pendulum Hamiltonian: assembly, validation and evaluation.

H(I, phi, p, q, s; eps) = h(I) + sum_j sigma_j (p_j^2/2 + V_j(q_j))
                          + sum_terms eps^order c(I, p, q) basis(k.phi + l s)

States are flat arrays laid out as [I (d), phi (d), p (n), q (n), s], with an
optional trailing entry A, the action conjugate to s, used to monitor the
energy of the autonomous extension.
"""

import itertools
from dataclasses import dataclass, field
from math import gcd
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config.settings import settings
from app.exceptions.custom_exceptions import HypothesisError
from app.models.model_file import ModelConfig, parse_model_data
from app.services import expr as ex
from app.utils.logger import get_logger

logger = get_logger(__name__)

TWO_PI = 2.0 * np.pi


def canonical_index(k: Sequence[int], l: int) -> Tuple[Tuple[int, ...], int, int]:
    """Return (k, l, sign) with the first nonzero entry of (k, l) positive."""
    entries = list(k) + [l]
    for value in entries:
        if value != 0:
            sign = 1 if value > 0 else -1
            return tuple(sign * x for x in k), sign * l, sign
    return tuple(k), l, 1


def primitive_index(k: Sequence[int], l: int) -> Tuple[Tuple[int, ...], int]:
    """Canonical representative with gcd 1 (R_{mk,ml} = R_{k,l})."""
    entries = [int(x) for x in k] + [int(l)]
    g = 0
    for value in entries:
        g = gcd(g, abs(value))
    if g == 0:
        return tuple(entries[:-1]), 0
    kk, ll, _ = canonical_index([x // g for x in entries[:-1]], entries[-1] // g)
    return kk, ll


@dataclass(frozen=True)
class FourierTerm:
    """coeff(I, p, q) * basis(k.phi + l s), carried at eps^order."""

    k: Tuple[int, ...]
    l: int
    basis: str
    coeff: ex.Expr
    order: int = 1

    @property
    def index(self) -> Tuple[int, ...]:
        return tuple(self.k) + (self.l,)

    def key(self) -> Tuple:
        return (self.order, self.basis, self.k, self.l)


def canonicalize_terms(terms: Sequence[FourierTerm]) -> List[FourierTerm]:
    """Put every term in canonical sign, drop sin terms of index 0 and merge like terms."""
    merged: Dict[Tuple, ex.Expr] = {}
    for term in terms:
        k, l, sign = canonical_index(term.k, term.l)
        coeff = term.coeff
        if term.basis == "sin":
            if sign < 0:
                coeff = ex.neg(coeff)
            if all(x == 0 for x in k) and l == 0:
                continue
        key = (term.order, term.basis, k, l)
        merged[key] = ex.add(merged[key], coeff) if key in merged else coeff
    result = [
        FourierTerm(k=key[2], l=key[3], basis=key[1], coeff=coeff, order=key[0])
        for key, coeff in sorted(merged.items(), key=lambda item: item[0])
        if not ex.is_const(coeff, 0.0)
    ]
    return result


@dataclass
class ExtendedState:
    """Point (I, phi, p, q, s) of the extended phase space."""

    I: np.ndarray
    phi: np.ndarray
    p: np.ndarray
    q: np.ndarray
    s: float = 0.0

    def __post_init__(self):
        self.I = np.atleast_1d(np.asarray(self.I, dtype=float))
        self.phi = np.mod(np.atleast_1d(np.asarray(self.phi, dtype=float)), TWO_PI)
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        self.s = float(np.mod(self.s, TWO_PI))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.I, self.phi, self.p, self.q, [self.s]])

    @classmethod
    def from_vector(cls, x: np.ndarray, d: int, n: int) -> "ExtendedState":
        x = np.asarray(x, dtype=float)
        return cls(
            I=x[:d],
            phi=x[d:2 * d],
            p=x[2 * d:2 * d + n],
            q=x[2 * d + n:2 * d + 2 * n],
            s=x[2 * d + 2 * n],
        )


@dataclass
class Pendulum:
    V: ex.Expr
    sign: int
    alpha: float
    variable: str
    _V: ex.CompiledExpr = field(repr=False, default=None)
    _dV: ex.CompiledExpr = field(repr=False, default=None)
    _d2V: ex.CompiledExpr = field(repr=False, default=None)

    def __post_init__(self):
        dV = ex.diff(self.V, self.variable)
        self._V = ex.compile_expr(self.V, [self.variable])
        self._dV = ex.compile_expr(dV, [self.variable])
        self._d2V = ex.compile_expr(ex.diff(dV, self.variable), [self.variable])

    def potential(self, q):
        return self._V(q)

    def force(self, q):
        """V'(q)."""
        return self._dV(q)

    def curvature(self, q):
        """V''(q)."""
        return self._d2V(q)


class Model:
    """Validated Hamiltonian; immutable after construction."""

    def __init__(
        self,
        h: ex.Expr,
        pendula: List[Pendulum],
        terms: List[FourierTerm],
        parameters: Dict[str, float],
        box: np.ndarray,
        grid: int = 33,
        source: Optional[ModelConfig] = None,
    ):
        self.h = h
        self.pendula = pendula
        self.terms = canonicalize_terms(terms)
        self.parameters = dict(parameters)
        self.box = np.asarray(box, dtype=float)
        self.grid = grid
        self.source = source
        self.d = self.box.shape[0]
        self.n = len(pendula)
        self.action_names, self.angle_names, self.momentum_names, self.position_names = ex.variable_names(
            self.d, self.n
        )
        self.omega_exprs = ex.gradient(h, self.action_names)
        self.hessian_exprs = [[ex.diff(w, v) for v in self.action_names] for w in self.omega_exprs]
        self._h = ex.compile_expr(h, self.action_names)
        self._omega = ex.compile_many(self.omega_exprs, self.action_names)
        self._hessian = ex.compile_many([e for row in self.hessian_exprs for e in row], self.action_names)
        self.hessian_constant = all(ex.is_const(e) for row in self.hessian_exprs for e in row)
        self._compile_terms()
        self.lambda_invariant = self._check_lambda_invariance()

    # Fourier data

    def _compile_terms(self) -> None:
        coeff_vars = self.action_names + self.momentum_names + self.position_names
        self._coeff_vars = coeff_vars
        self.term_k = np.array([t.k for t in self.terms], dtype=float).reshape(len(self.terms), self.d)
        self.term_l = np.array([t.l for t in self.terms], dtype=float)
        self.term_order = np.array([t.order for t in self.terms], dtype=float)
        self.term_is_sin = np.array([t.basis == "sin" for t in self.terms], dtype=bool)
        exprs = []
        for term in self.terms:
            exprs.append(term.coeff)
            exprs.extend(ex.diff(term.coeff, v) for v in coeff_vars)
        self._term_block = 1 + len(coeff_vars)
        self._term_fn = ex.compile_many(exprs, coeff_vars) if exprs else None
        self.coefficients_depend_on = set()
        for term in self.terms:
            self.coefficients_depend_on |= ex.free_variables(term.coeff)

    def _term_values(self, I, p, q) -> np.ndarray:
        """Coefficient values and gradients, shape (terms, 1 + d + 2n)."""
        if self._term_fn is None:
            return np.zeros((0, self._term_block))
        values = self._term_fn(*I, *p, *q)
        return np.asarray(values, dtype=float).reshape(len(self.terms), self._term_block)

    def term_values(self, I, p, q) -> np.ndarray:
        """Coefficients and their (I, p, q) gradients along samples of shape (n, m).

        Returns an array of shape (terms, 1 + d + 2n, m).
        """
        p = np.atleast_2d(np.asarray(p, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        m = p.shape[1]
        if self._term_fn is None:
            return np.zeros((0, self._term_block, m))
        size = len(self.terms) * self._term_block
        values = np.asarray(self._term_fn(*np.asarray(I, dtype=float), *p, *q), dtype=float)
        values = np.broadcast_to(values.reshape(size, -1), (size, m))
        return values.reshape(len(self.terms), self._term_block, m)

    def _check_lambda_invariance(self) -> bool:
        if not self.terms:
            return True
        rng = np.random.default_rng(settings.seed)
        zeros = np.zeros(self.n)
        for _ in range(settings.sample_points):
            I = rng.uniform(self.box[:, 0], self.box[:, 1])
            block = self._term_values(I, zeros, zeros)
            if np.max(np.abs(block[:, 1 + self.d:])) > 1e-12:
                logger.warning(
                    "Lambda={p=q=0} is not exactly invariant; scattering layers will refuse this model",
                    witness=I.tolist(),
                )
                return False
        return True

    def require_lambda_invariant(self) -> None:
        if not self.lambda_invariant:
            raise HypothesisError("Lambda-invariance", "the manifold p=q=0 is not invariant under the perturbation")

    # Rotator

    def h_value(self, I) -> float:
        return float(self._h(*np.asarray(I, dtype=float)))

    def frequency(self, I) -> np.ndarray:
        """omega(I) = grad h(I)."""
        return np.asarray(self._omega(*np.asarray(I, dtype=float)), dtype=float).reshape(self.d)

    def hessian_h(self, I) -> np.ndarray:
        """D^2 h(I), a symmetric d x d matrix."""
        values = np.asarray(self._hessian(*np.asarray(I, dtype=float)), dtype=float)
        return values.reshape(self.d, self.d)

    def frequency_grid(self, points: np.ndarray) -> np.ndarray:
        """omega at an array of actions of shape (m, d); returns (m, d)."""
        values = self._omega(*points.T)
        return np.broadcast_to(np.asarray(values, dtype=float).reshape(self.d, -1), (self.d, len(points))).T

    def hessian_grid(self, points: np.ndarray) -> np.ndarray:
        values = np.asarray(self._hessian(*points.T), dtype=float).reshape(self.d * self.d, -1)
        values = np.broadcast_to(values, (self.d * self.d, len(points)))
        return values.T.reshape(len(points), self.d, self.d)

    # Full Hamiltonian

    def perturbation(self, I, phi, p, q, s, order: Optional[int] = None, eps: float = 1.0) -> float:
        """Q(I, phi, p, q, s; eps) summed over terms (only `order` when given, without eps factors)."""
        block = self._term_values(I, p, q)
        theta = self.term_k @ np.asarray(phi, dtype=float) + self.term_l * s
        basis = np.where(self.term_is_sin, np.sin(theta), np.cos(theta))
        if order is not None:
            mask = self.term_order == order
            return float(np.sum(block[mask, 0] * basis[mask]))
        weights = eps ** (self.term_order - 1.0)
        return float(np.sum(weights * block[:, 0] * basis))

    def energy(self, x: np.ndarray, eps: float) -> float:
        """H at a flat state."""
        d, n = self.d, self.n
        I, phi = x[:d], x[d:2 * d]
        p, q, s = x[2 * d:2 * d + n], x[2 * d + n:2 * d + 2 * n], x[2 * d + 2 * n]
        value = self.h_value(I)
        for j, pendulum in enumerate(self.pendula):
            value += pendulum.sign * (0.5 * p[j] ** 2 + float(pendulum.potential(q[j])))
        if eps != 0.0 and self.terms:
            value += eps * self.perturbation(I, phi, p, q, s, eps=eps)
        return value

    def pendulum_energy(self, j: int, p: float, q: float) -> float:
        return float(0.5 * p**2 + self.pendula[j].potential(q))

    def vector_field(self, x: np.ndarray, eps: float, with_energy: bool = False) -> np.ndarray:
        """Extended Hamiltonian vector field at a flat state.

        Returns the derivatives (dI, dphi, dp, dq, ds=1) and, with
        ``with_energy``, dA = -dH/ds for the trailing energy variable.
        """
        d, n = self.d, self.n
        I, phi = x[:d], x[d:2 * d]
        p, q, s = x[2 * d:2 * d + n], x[2 * d + n:2 * d + 2 * n], x[2 * d + 2 * n]
        dI = np.zeros(d)
        dphi = self.frequency(I)
        dp = np.array([-pend.sign * float(pend.force(q[j])) for j, pend in enumerate(self.pendula)])
        dq = np.array([pend.sign * p[j] for j, pend in enumerate(self.pendula)])
        dA = 0.0
        if eps != 0.0 and self.terms:
            block = self._term_values(I, p, q)
            theta = self.term_k @ phi + self.term_l * s
            c, s_ = np.cos(theta), np.sin(theta)
            basis = np.where(self.term_is_sin, s_, c)
            # derivative of the basis with respect to its argument
            dbasis = np.where(self.term_is_sin, c, -s_)
            weight = eps ** self.term_order
            amp = weight * block[:, 0] * dbasis
            dI = -self.term_k.T @ amp
            grads = weight[:, None] * block[:, 1:] * basis[:, None]
            dphi = dphi + grads[:, :d].sum(axis=0)
            dq = dq + grads[:, d:d + n].sum(axis=0)
            dp = dp - grads[:, d + n:d + 2 * n].sum(axis=0)
            dA = -float(self.term_l @ amp)
        parts = [dI, dphi, dp, dq, [1.0]]
        if with_energy:
            parts.append([dA])
        return np.concatenate(parts)

    # Restricted (inner) Hamiltonian

    def inner_terms(self, order: int = 1) -> List[FourierTerm]:
        """FourierTerms of the eps^order part of Q at p=q=0, coefficients as expressions in I."""
        rest = {name: 0.0 for name in self.momentum_names + self.position_names}
        terms = [
            FourierTerm(k=t.k, l=t.l, basis=t.basis, coeff=ex.substitute(t.coeff, rest), order=t.order)
            for t in self.terms
            if t.order == order
        ]
        return canonicalize_terms(terms)

    def inner_hamiltonian_k1(self, I, phi, s) -> float:
        """K^1(I, phi, s) = Q(I, phi, 0, 0, s; 0)."""
        zeros = np.zeros(self.n)
        return self.perturbation(np.asarray(I, dtype=float), phi, zeros, zeros, s, order=1)

    def max_order(self) -> int:
        return int(self.term_order.max()) if len(self.terms) else 0

    def box_grid(self, points: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, points) for lo, hi in self.box]
        return np.array(list(itertools.product(*axes)))

    def describe(self) -> Dict:
        return {
            "d": self.d,
            "n": self.n,
            "h": ex.to_text(self.h),
            "pendula": [{"V": ex.to_text(pd.V), "sign": pd.sign, "alpha": pd.alpha} for pd in self.pendula],
            "terms": [
                {"k": list(t.k), "l": t.l, "basis": t.basis, "coeff": ex.to_text(t.coeff), "order": t.order}
                for t in self.terms
            ],
            "box": self.box.tolist(),
            "lambda_invariant": self.lambda_invariant,
        }


def _check_pendulum(V: ex.Expr, variable: str, j: int) -> float:
    dV = ex.diff(V, variable)
    slope = ex.evaluate(dV, {variable: 0.0})
    curvature = ex.evaluate(ex.diff(dV, variable), {variable: 0.0})
    if abs(slope) > settings.h2_tol:
        raise HypothesisError("H2", f"pendulum {j}: V'(0) = {slope:.3g} is not zero", witness=[0.0], value=slope)
    if curvature >= -settings.h2_tol:
        raise HypothesisError(
            "H2",
            f"pendulum {j}: V''(0) = {curvature:.3g} is not negative (no hyperbolic maximum)",
            witness=[0.0],
            value=curvature,
        )
    return float(np.sqrt(-curvature))


def twist_determinants(model: Model, points: int) -> Tuple[np.ndarray, np.ndarray]:
    """det D2h on the regular box grid with ``points`` per axis; returns (grid, dets)."""
    grid = model.box_grid(points)
    return grid, np.linalg.det(model.hessian_grid(grid))


def _check_nondegenerate_twist(model: Model, points: int) -> None:
    grid, dets = twist_determinants(model, points)
    worst = int(np.argmin(np.abs(dets)))
    if abs(dets[worst]) <= settings.h3_det_floor:
        raise HypothesisError(
            "H3",
            "D2h is singular; I -> omega(I) is not a diffeomorphism on the box",
            witness=grid[worst],
            value=float(dets[worst]),
        )


def build_model(config) -> Model:
    """Assemble and validate a model.

    Args:
        config: A parsed ModelConfig or the equivalent dict.

    Returns:
        Validated Model.

    Raises:
        HypothesisError: H2, H3 or H4 violation, citing the hypothesis.
        ExpressionSyntaxError / UnknownIdentifierError: Malformed expressions.
    """
    config = parse_model_data(config)
    d = config.dimension
    n = len(config.pendulum)
    if len(config.domain.box) != d:
        raise HypothesisError("H4", f"box has {len(config.domain.box)} intervals for d={d}")
    params = dict(config.params)
    names = list(params)
    actions, _, momenta, positions = ex.variable_names(d, n)

    h = ex.substitute(ex.parse(config.rotator.h, names), params)
    stray = ex.free_variables(h) - set(actions)
    if stray:
        raise HypothesisError("H3", f"h depends on {sorted(stray)}; only I1..I{d} are allowed")

    pendula = []
    for j, section in enumerate(config.pendulum):
        V = ex.substitute(ex.parse(section.V, names), params)
        variable = positions[j]
        stray = ex.free_variables(V) - {variable}
        if stray:
            raise HypothesisError("H2", f"V{j + 1} depends on {sorted(stray)}; only {variable} is allowed")
        alpha = _check_pendulum(V, variable, j + 1)
        pendula.append(Pendulum(V=V, sign=1 if section.sign == "+" else -1, alpha=alpha, variable=variable))

    terms = []
    allowed = set(actions + momenta + positions)
    for index, section in enumerate(config.perturbation.term):
        if len(section.k) != d:
            raise HypothesisError("H4", f"term {index}: malformed Fourier index k={section.k} for d={d}")
        coeff = ex.substitute(ex.parse(section.coeff, names), params)
        stray = ex.free_variables(coeff) - allowed
        if stray:
            raise HypothesisError("H4", f"term {index}: coefficient depends on {sorted(stray)}")
        terms.append(
            FourierTerm(k=tuple(section.k), l=section.l, basis=section.basis.value, coeff=coeff, order=section.order)
        )

    model = Model(h, pendula, terms, params, np.array(config.domain.box), config.domain.grid, source=config)
    _check_nondegenerate_twist(model, config.domain.grid)
    logger.info("Model built", d=d, n=n, terms=len(model.terms), lambda_invariant=model.lambda_invariant)
    return model
