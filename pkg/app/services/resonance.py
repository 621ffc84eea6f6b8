"""Resonance web of the rotator Hamiltonian h.

A resonance R(k|l) = {I : omega(I).k + l = 0} is stored through its
primitive canonical index. The web groups resonances by activation order,
and the reduced domain removes the codimension-2 set B where a secular
resonance meets another resonance of order <= m0 or degenerates.
"""

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from app.config.settings import settings
from app.exceptions.custom_exceptions import ClearanceError, ConvergenceError, TangencyError
from app.services.hamiltonian import Model, canonical_index, primitive_index
from app.utils.logger import get_logger

logger = get_logger(__name__)

Index = Tuple[Tuple[int, ...], int]

TANGENCY_FLOOR = 1e-12


def label(k: Sequence[int], l: int) -> str:
    return "R(" + ",".join(str(int(x)) for x in k) + f"|{int(l)})"


def _fraction(x: float) -> Fraction:
    return Fraction(float(x)).limit_denominator(10**9)


@dataclass
class Resonance:
    """Resonance surface R(k|l) of a model."""

    k: Tuple[int, ...]
    l: int
    order: int
    model: Model = field(repr=False, compare=False)

    @property
    def label(self) -> str:
        return label(self.k, self.l)

    @property
    def index(self) -> Index:
        return (self.k, self.l)

    @property
    def kvec(self) -> np.ndarray:
        return np.array(self.k, dtype=float)

    def value(self, I) -> float:
        """omega(I).k + l."""
        return float(self.model.frequency(I) @ self.kvec + self.l)

    def values(self, points: np.ndarray) -> np.ndarray:
        return self.model.frequency_grid(points) @ self.kvec + self.l

    def gradient(self, I) -> np.ndarray:
        """D2h(I) k, the normal of the surface."""
        return self.model.hessian_h(I) @ self.kvec

    def a(self, I) -> float:
        """k^T D2h(I) k."""
        k = self.kvec
        return float(k @ self.model.hessian_h(I) @ k)

    def hyperplane(self) -> Optional[Tuple[Tuple[Fraction, ...], Fraction]]:
        """Exact (n, c) with omega(I).k + l = n.I + c, for quadratic h."""
        if not self.model.hessian_constant:
            return None
        d = self.model.d
        c = self.value(np.zeros(d))
        normal = self.gradient(np.zeros(d))
        return tuple(_fraction(x) for x in normal), _fraction(c)

    def linear_distance(self, points: np.ndarray) -> np.ndarray:
        """|g|/|grad g| at each point; exact for hyperplanes."""
        values = self.values(points)
        grads = self.model.hessian_grid(points) @ self.kvec
        return np.abs(values) / np.maximum(np.linalg.norm(grads, axis=1), 1e-300)

    def project_k(self, I, max_iter: Optional[int] = None, tol: Optional[float] = None) -> Tuple[np.ndarray, float]:
        """Projection I* = I + t k onto the resonance along k.

        Raises:
            TangencyError: k^T D2h k vanishes along the search.
            ConvergenceError: Newton did not converge.
        """
        max_iter = max_iter or settings.newton_max_iter
        tol = tol or settings.newton_tol
        I = np.asarray(I, dtype=float)
        k = self.kvec
        t = 0.0
        for _ in range(max_iter):
            J = I + t * k
            f = self.value(J)
            if abs(f) <= tol:
                return J, t
            slope = self.a(J)
            if abs(slope) <= TANGENCY_FLOOR * float(k @ k):
                raise TangencyError(f"k^T D2h k = {slope:.3g} vanishes on {self.label} near I={J.tolist()}")
            t -= f / slope
        J = I + t * k
        if abs(self.value(J)) <= 10 * tol:
            return J, t
        raise ConvergenceError(f"k-projection onto {self.label} did not converge from I={I.tolist()}")

    def project_orthogonal(self, I, max_iter: Optional[int] = None, tol: Optional[float] = None) -> np.ndarray:
        """Foot of the perpendicular from I on the resonance (normal-foot Newton iteration)."""
        max_iter = max_iter or settings.newton_max_iter
        tol = tol or settings.newton_tol
        I = np.asarray(I, dtype=float)
        x = I.copy()
        for _ in range(max_iter):
            grad = self.gradient(x)
            norm2 = float(grad @ grad)
            if norm2 <= TANGENCY_FLOOR:
                raise TangencyError(f"gradient of {self.label} vanishes near I={x.tolist()}")
            f = self.value(x)
            step = I - grad * (f + grad @ (I - x)) / norm2
            if np.linalg.norm(step - x) <= tol * max(1.0, np.linalg.norm(x)) and abs(f) <= 1e3 * tol:
                return step
            x = step
        if abs(self.value(x)) <= 1e3 * tol:
            return x
        raise ConvergenceError(f"orthogonal projection onto {self.label} did not converge from I={I.tolist()}")

    def distance(self, I) -> float:
        try:
            return float(np.linalg.norm(np.asarray(I, dtype=float) - self.project_orthogonal(I)))
        except (ConvergenceError, TangencyError):
            return float("inf")

    def projection_comparability(self, I) -> float:
        """C >= 1 with |I - I*_k| <= C dist(I, R)."""
        I = np.asarray(I, dtype=float)
        J, _ = self.project_k(I)
        dist = self.distance(I)
        if dist == 0.0:
            return 1.0
        return float(np.linalg.norm(I - J) / dist)

    def sample(self, box: np.ndarray, points: int = 201) -> np.ndarray:
        """Points of the resonance inside ``box``, ordered along the surface for d = 2."""
        hyper = self.hyperplane()
        if hyper is not None and self.model.d == 2:
            return _clip_line(np.array([float(x) for x in hyper[0]]), float(hyper[1]), box, points)
        return _edge_crossings(self, box, points if self.model.d <= 2 else 41)


def _clip_line(normal: np.ndarray, offset: float, box: np.ndarray, points: int) -> np.ndarray:
    """Segment of {normal.I + offset = 0} inside a 2-d box."""
    (x0, x1), (y0, y1) = box
    ends = []
    nx, ny = normal
    if abs(ny) > 0:
        for x in (x0, x1):
            y = -(offset + nx * x) / ny
            if y0 - 1e-12 <= y <= y1 + 1e-12:
                ends.append((x, y))
    if abs(nx) > 0:
        for y in (y0, y1):
            x = -(offset + ny * y) / nx
            if x0 - 1e-12 <= x <= x1 + 1e-12:
                ends.append((x, y))
    unique = []
    for e in ends:
        if all(np.hypot(e[0] - u[0], e[1] - u[1]) > 1e-12 for u in unique):
            unique.append(e)
    if len(unique) < 2:
        return np.array(unique).reshape(-1, 2)
    a, b = np.array(unique[0]), np.array(unique[1])
    t = np.linspace(0.0, 1.0, points)[:, None]
    return a + t * (b - a)


def _edge_crossings(res: Resonance, box: np.ndarray, points: int) -> np.ndarray:
    """Sign changes of omega.k + l along the edges of a regular grid (marching edges)."""
    axes = [np.linspace(lo, hi, points) for lo, hi in box]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    flat = mesh.reshape(-1, len(axes))
    values = res.values(flat).reshape(mesh.shape[:-1])
    found = [flat[np.abs(values.ravel()) == 0.0]]
    for axis in range(len(axes)):
        lo_sl = [slice(None)] * len(axes)
        hi_sl = [slice(None)] * len(axes)
        lo_sl[axis] = slice(None, -1)
        hi_sl[axis] = slice(1, None)
        v0, v1 = values[tuple(lo_sl)], values[tuple(hi_sl)]
        mask = (v0 * v1) < 0
        if not np.any(mask):
            continue
        p0, p1 = mesh[tuple(lo_sl)][mask], mesh[tuple(hi_sl)][mask]
        w = (v0[mask] / (v0[mask] - v1[mask]))[:, None]
        found.append(p0 + w * (p1 - p0))
    pts = np.concatenate(found) if found else np.zeros((0, len(axes)))
    if len(pts) and len(axes) == 2:
        order = np.lexsort((pts[:, 1], pts[:, 0]))
        pts = pts[order]
    return pts


@dataclass
class ResonanceWeb:
    """Resonances grouped by activation order.

    Attributes:
        indices: Activated Fourier index sets N_j (canonical, (0,0) dropped).
        closure: N1 u (N1 + N1) u Nbar, the combinatorial secular candidate set.
        resonances: One entry per primitive index with k != 0, lowest activation order first.
    """

    model: Model
    order: int
    indices: Dict[int, Set[Index]]
    closure: Set[Index]
    resonances: List[Resonance]

    def by_order(self, j: int) -> List[Resonance]:
        return [r for r in self.resonances if r.order == j]

    @property
    def secular(self) -> List[Resonance]:
        return [r for r in self.resonances if r.order <= 2]

    def up_to(self, j: int) -> List[Resonance]:
        return [r for r in self.resonances if r.order <= j]

    def find(self, k: Sequence[int], l: int) -> Optional[Resonance]:
        key = primitive_index(k, l)
        for r in self.resonances:
            if r.index == key:
                return r
        return None

    def summary(self) -> Dict:
        return {
            "order": self.order,
            "lines_per_order": {j: len(self.by_order(j)) for j in range(1, self.order + 1)},
            "resonances": [
                {
                    "label": r.label,
                    "k": list(r.k),
                    "l": r.l,
                    "order": r.order,
                    "hyperplane": _hyperplane_text(r),
                }
                for r in self.resonances
            ],
        }


def _hyperplane_text(r: Resonance) -> Optional[Dict]:
    hyper = r.hyperplane()
    if hyper is None:
        return None
    return {"normal": [str(x) for x in hyper[0]], "offset": str(hyper[1])}


def sumset(indices: Set[Index]) -> Set[Index]:
    """Canonical (a + b) and (a - b) for a, b in the set, without (0, 0)."""
    out: Set[Index] = set()
    for (ka, la), (kb, lb) in itertools.product(indices, repeat=2):
        for sgn in (1, -1):
            k = tuple(x + sgn * y for x, y in zip(ka, kb))
            l = la + sgn * lb
            if any(k) or l:
                kk, ll, _ = canonical_index(k, l)
                out.add((kk, ll))
    return out


def activated_indices(model: Model, order: int) -> Set[Index]:
    """Fourier support N_order of the averaged Hamiltonian at its activation order.

    N1 is the support of K1; N_j is the support of the order-j term after
    j-1 non-resonant averaging steps.
    """
    from app.services.averaging import activation_supports

    return activation_supports(model, order)[order]


def build_web(model: Model, order: Optional[int] = None) -> ResonanceWeb:
    """Resonance web to activation order ``order`` (default 2)."""
    from app.services.averaging import activation_supports

    order = order or 2
    supports = activation_supports(model, order)
    n1 = supports.get(1, set())
    nbar = {(t.k, t.l) for t in model.inner_terms(2)}
    closure = n1 | sumset(n1) | nbar

    seen: Dict[Index, int] = {}
    for j in range(1, order + 1):
        for k, l in sorted(supports.get(j, set())):
            if not any(k):
                continue
            key = primitive_index(k, l)
            seen.setdefault(key, j)
    resonances = [
        Resonance(k=key[0], l=key[1], order=j, model=model)
        for key, j in sorted(seen.items(), key=lambda item: (item[1], item[0]))
    ]
    web = ResonanceWeb(model=model, order=order, indices=supports, closure=closure, resonances=resonances)
    logger.info("Resonance web built", order=order, lines_per_order=web.summary()["lines_per_order"])
    return web


# Multiplicity


def integer_rank(rows: Sequence[Sequence[int]]) -> int:
    """Rank over Z (equal to the rank over Q) by fraction-free row reduction."""
    matrix = [list(int(x) for x in row) for row in rows if any(row)]
    if not matrix:
        return 0
    ncols = len(matrix[0])
    rank = 0
    for col in range(ncols):
        pivot = next((r for r in range(rank, len(matrix)) if matrix[r][col] != 0), None)
        if pivot is None:
            continue
        matrix[rank], matrix[pivot] = matrix[pivot], matrix[rank]
        prow = matrix[rank]
        for r in range(rank + 1, len(matrix)):
            if matrix[r][col] != 0:
                factor, base = matrix[r][col], prow[col]
                matrix[r] = [base * a - factor * b for a, b in zip(matrix[r], prow)]
        rank += 1
        if rank == len(matrix):
            break
    return rank


def active_indices(omega_ext: Sequence[float], indices: Set[Index], tol: Optional[float] = None) -> List[Index]:
    tol = tol or settings.tol_res
    w = np.asarray(omega_ext, dtype=float)
    return [
        (k, l)
        for k, l in sorted(indices)
        if abs(float(np.dot(w[:-1], k)) + l * w[-1]) <= tol
    ]


def multiplicity(omega_ext: Sequence[float], order: int, web: ResonanceWeb, tol: Optional[float] = None) -> int:
    """Rank of the module spanned by the indices of order <= ``order`` active at (omega, 1)."""
    indices: Set[Index] = set()
    for j in range(1, order + 1):
        indices |= web.indices.get(j, set())
    rows = [list(k) + [l] for k, l in active_indices(omega_ext, indices, tol)]
    return integer_rank(rows)


def multiplicity_at(web: ResonanceWeb, I, order: Optional[int] = None) -> int:
    omega = web.model.frequency(I)
    return multiplicity(np.append(omega, 1.0), order or web.order, web)


# Reduced domain


class Component:
    """Codimension-2 piece of B (or a degenerate locus)."""

    kind: str = "intersection"
    labels: Tuple[str, ...] = ()

    def distance(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Distance and nearest point for each row of ``points``."""
        raise NotImplementedError

    def describe(self) -> Dict:
        raise NotImplementedError


class PointComponent(Component):
    def __init__(self, point: np.ndarray, labels: Tuple[str, ...], kind: str = "intersection"):
        self.point = np.asarray(point, dtype=float)
        self.labels = labels
        self.kind = kind

    def distance(self, points):
        points = np.atleast_2d(points)
        dist = np.linalg.norm(points - self.point, axis=1)
        return dist, np.broadcast_to(self.point, points.shape)

    def describe(self):
        return {"kind": self.kind, "resonances": list(self.labels), "point": self.point.tolist()}


class ImplicitComponent(Component):
    """{f_1 = ... = f_r = 0} handled by the min-norm Gauss-Newton foot iteration."""

    def __init__(self, constraints, jacobian, labels: Tuple[str, ...], kind: str = "intersection"):
        self.constraints = constraints
        self.jacobian = jacobian
        self.labels = labels
        self.kind = kind

    def foot(self, I: np.ndarray) -> Optional[np.ndarray]:
        x = I.copy()
        for _ in range(settings.newton_max_iter):
            f = np.atleast_1d(self.constraints(x))
            J = np.atleast_2d(self.jacobian(x))
            try:
                correction = J.T @ np.linalg.solve(J @ J.T, f + J @ (I - x))
            except np.linalg.LinAlgError:
                return None
            new = I - correction
            if np.linalg.norm(new - x) <= 1e-13 * max(1.0, np.linalg.norm(x)):
                return new
            x = new
        return x if np.max(np.abs(self.constraints(x))) <= 1e-9 else None

    def distance(self, points):
        points = np.atleast_2d(points)
        dist = np.full(len(points), np.inf)
        near = np.full(points.shape, np.nan)
        for i, I in enumerate(points):
            foot = self.foot(I)
            if foot is not None:
                dist[i] = np.linalg.norm(I - foot)
                near[i] = foot
        return dist, near

    def describe(self):
        return {"kind": self.kind, "resonances": list(self.labels), "point": None}


@dataclass
class PathClearance:
    min_clearance: float
    witness: Optional[List[float]]
    sample: Optional[List[float]]
    samples: int
    accepted: bool


@dataclass
class TubeCheck:
    L: float
    l1: bool
    l2: bool
    witnesses: List[Dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.l1 and self.l2


@dataclass
class ReducedDomain:
    """I_delta: the action box minus the delta-neighbourhood of B."""

    web: ResonanceWeb
    delta: float
    max_order: int
    components: List[Component]
    L: Optional[float] = None

    def clearance(self, I) -> Tuple[float, Optional[np.ndarray]]:
        """Distance from I to B and the nearest point of B."""
        dist, near = self.clearances(np.atleast_2d(np.asarray(I, dtype=float)))
        return float(dist[0]), (None if near[0] is None else near[0])

    def clearances(self, points: np.ndarray) -> Tuple[np.ndarray, List[Optional[np.ndarray]]]:
        points = np.atleast_2d(points)
        best = np.full(len(points), np.inf)
        nearest: List[Optional[np.ndarray]] = [None] * len(points)
        for component in self.components:
            dist, near = component.distance(points)
            better = dist < best
            for i in np.nonzero(better)[0]:
                best[i] = dist[i]
                nearest[i] = np.array(near[i], dtype=float)
        return best, nearest

    def contains(self, I) -> bool:
        return self.clearance(I)[0] > self.delta

    def check_path(self, path: np.ndarray, raise_on_failure: bool = True) -> PathClearance:
        """Clearance along a polyline sampled at resolution delta/4.

        Raises:
            ClearanceError: Some sample lies within delta of B (witness = nearest point of B).
        """
        samples = sample_polyline(path, self.delta / 4.0)
        dist, nearest = self.clearances(samples)
        worst = int(np.argmin(dist)) if len(dist) else 0
        min_clear = float(dist[worst]) if len(dist) else float("inf")
        witness = nearest[worst] if len(dist) else None
        accepted = min_clear > self.delta
        result = PathClearance(
            min_clearance=min_clear,
            witness=None if witness is None else witness.tolist(),
            sample=samples[worst].tolist() if len(samples) else None,
            samples=len(samples),
            accepted=accepted,
        )
        if not accepted and raise_on_failure:
            raise ClearanceError(
                f"path passes within {min_clear:.3g} <= delta={self.delta:g} of B",
                witness=result.witness,
                sample=result.sample,
            )
        return result

    def describe(self) -> Dict:
        return {
            "delta": self.delta,
            "max_order": self.max_order,
            "L": self.L,
            "components": [c.describe() for c in self.components],
        }


def sample_polyline(path: np.ndarray, spacing: float) -> np.ndarray:
    path = np.atleast_2d(np.asarray(path, dtype=float))
    if len(path) == 1:
        return path.copy()
    pieces = []
    for a, b in zip(path[:-1], path[1:]):
        count = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
        t = np.linspace(0.0, 1.0, count + 1)[:-1, None]
        pieces.append(a + t * (b - a))
    pieces.append(path[-1:])
    return np.concatenate(pieces)


def _pair_component(r1: Resonance, r2: Resonance, box: np.ndarray, margin: float) -> List[Component]:
    model = r1.model
    labels = (r1.label, r2.label)
    h1, h2 = r1.hyperplane(), r2.hyperplane()
    if model.d == 2 and h1 is not None and h2 is not None:
        (a, b), c = h1
        (p, q), s = h2
        det = a * q - b * p
        if det == 0:
            return []
        x = (-c * q + b * s) / det
        y = (-a * s + c * p) / det
        point = np.array([float(x), float(y)])
        if _in_box(point, box, margin):
            return [PointComponent(point, labels)]
        return []

    def constraints(I):
        return np.array([r1.value(I), r2.value(I)])

    def jacobian(I):
        return np.array([r1.gradient(I), r2.gradient(I)])

    if model.d == 2:
        return _seeded_points(constraints, jacobian, box, margin, labels, "intersection")
    return [ImplicitComponent(constraints, jacobian, labels)]


def _degenerate_component(r: Resonance, box: np.ndarray, margin: float) -> List[Component]:
    """{omega.k + l = 0, k^T D2h k = 0} on the box."""
    model = r.model
    k = r.kvec
    if model.hessian_constant:
        if abs(r.a(np.zeros(model.d))) > settings.h3_det_floor:
            return []

        def constraints(I):
            return np.array([r.value(I)])

        def jacobian(I):
            return np.array([r.gradient(I)])

        return [ImplicitComponent(constraints, jacobian, (r.label,), kind="degenerate")]

    grid = model.box_grid(17)
    a_vals = np.einsum("i,nij,j->n", k, model.hessian_grid(grid), k)
    if np.all(a_vals > settings.h3_det_floor) or np.all(a_vals < -settings.h3_det_floor):
        return []
    step = 1e-6

    def constraints(I):
        return np.array([r.value(I), r.a(I)])

    def jacobian(I):
        rows = [r.gradient(I)]
        grad_a = np.array([(r.a(I + step * e) - r.a(I - step * e)) / (2 * step) for e in np.eye(model.d)])
        rows.append(grad_a)
        return np.array(rows)

    if model.d == 2:
        return _seeded_points(constraints, jacobian, box, margin, (r.label,), "degenerate")
    return [ImplicitComponent(constraints, jacobian, (r.label,), kind="degenerate")]


def _seeded_points(constraints, jacobian, box, margin, labels, kind) -> List[Component]:
    found: List[np.ndarray] = []
    axes = [np.linspace(lo, hi, 9) for lo, hi in box]
    for seed in itertools.product(*axes):
        x = np.array(seed, dtype=float)
        for _ in range(settings.newton_max_iter):
            try:
                dx = np.linalg.solve(jacobian(x), constraints(x))
            except np.linalg.LinAlgError:
                break
            x = x - dx
            if np.linalg.norm(dx) <= 1e-13:
                break
        if np.max(np.abs(constraints(x))) <= 1e-10 and _in_box(x, box, margin):
            if all(np.linalg.norm(x - y) > 1e-8 for y in found):
                found.append(x)
    return [PointComponent(p, labels, kind) for p in found]


def _in_box(point: np.ndarray, box: np.ndarray, margin: float) -> bool:
    return bool(np.all(point >= box[:, 0] - margin) and np.all(point <= box[:, 1] + margin))


def build_reduced_domain(web: ResonanceWeb, delta: float, max_order: Optional[int] = None) -> ReducedDomain:
    """Codimension-2 set B of secular resonances and the reduced domain I_delta.

    B consists of pairwise intersections of a secular resonance (order <= 2)
    with any other resonance of order <= m0, plus the degenerate loci
    {omega.k + l = 0, k^T D2h k = 0} of secular resonances.
    """
    max_order = max_order or settings.max_order
    if web.order < max_order:
        web = build_web(web.model, max_order)
    box = web.model.box
    secular = web.secular
    others = web.up_to(max_order)
    components: List[Component] = []
    seen = set()
    for r1 in secular:
        for r2 in others:
            if r1.index == r2.index:
                continue
            key = tuple(sorted((r1.index, r2.index)))
            if key in seen:
                continue
            seen.add(key)
            components.extend(_pair_component(r1, r2, box, delta))
        components.extend(_degenerate_component(r1, box, delta))
    components = _merge_points(components)
    domain = ReducedDomain(web=web, delta=delta, max_order=max_order, components=components)
    logger.info("Reduced domain built", delta=delta, max_order=max_order, components=len(components))
    return domain


def _merge_points(components: List[Component]) -> List[Component]:
    merged: List[Component] = []
    for c in components:
        if isinstance(c, PointComponent):
            match = next(
                (m for m in merged if isinstance(m, PointComponent) and np.linalg.norm(m.point - c.point) <= 1e-10),
                None,
            )
            if match is not None:
                match.labels = tuple(sorted(set(match.labels) | set(c.labels)))
                continue
        merged.append(c)
    return merged


# Tube radius


def _secular_samples(domain: ReducedDomain, points: int = 401) -> Dict[str, np.ndarray]:
    """Sample points of each secular resonance outside the delta-balls of B."""
    out = {}
    for r in domain.web.secular:
        pts = r.sample(domain.web.model.box, points)
        if len(pts):
            clear, _ = domain.clearances(pts)
            pts = pts[clear > domain.delta]
        out[r.label] = pts
    return out


def default_tube_radius(domain: ReducedDomain, grid: int = 161) -> float:
    """Half the minimal distance between secular resonances outside B_delta, halved until L1/L2 hold."""
    secular = domain.web.secular
    samples = _secular_samples(domain)
    best = np.inf
    for r in secular:
        pts = samples[r.label]
        if not len(pts):
            continue
        for other in secular:
            if other.index == r.index:
                continue
            best = min(best, float(np.min(other.linear_distance(pts))))
    box = domain.web.model.box
    if not np.isfinite(best):
        best = float(np.min(box[:, 1] - box[:, 0]))
    L = 0.5 * best
    if any(c.kind == "degenerate" for c in domain.components):
        L *= 0.5
    for _ in range(20):
        if check_tube(domain, L, grid).ok:
            break
        L *= 0.5
    domain.L = L
    logger.info("Tube radius chosen", L=L, delta=domain.delta)
    return L


def check_tube(domain: ReducedDomain, L: float, grid: int = 161) -> TubeCheck:
    """L1: tubes of radius L around distinct secular resonances are disjoint outside B_delta.
    L2: every point of I_delta is within 2L of at most one secular resonance."""
    secular = domain.web.secular
    witnesses: List[Dict] = []
    samples = _secular_samples(domain)
    l1 = True
    for r in secular:
        pts = samples[r.label]
        if not len(pts):
            continue
        for other in secular:
            if other.index == r.index:
                continue
            dist = other.linear_distance(pts)
            bad = dist < 2.0 * L
            if np.any(bad):
                l1 = False
                i = int(np.argmin(dist))
                witnesses.append({"condition": "L1", "point": pts[i].tolist(), "resonances": [r.label, other.label]})
                break
    l2 = True
    if secular:
        model = domain.web.model
        axes = [np.linspace(lo, hi, grid) for lo, hi in model.box]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.d)
        clear, _ = domain.clearances(pts)
        pts = pts[clear > domain.delta]
        if len(pts):
            close = np.stack([r.linear_distance(pts) < 2.0 * L for r in secular])
            counts = close.sum(axis=0)
            if np.any(counts > 1):
                l2 = False
                i = int(np.argmax(counts))
                witnesses.append({"condition": "L2", "point": pts[i].tolist(), "count": int(counts[i])})
    return TubeCheck(L=L, l1=l1, l2=l2, witnesses=witnesses)


def classify(domain: ReducedDomain, I, L: Optional[float] = None) -> Tuple[str, Optional[Resonance], float]:
    """Region of I: ('free', None, d) beyond 2L of every secular resonance,
    ('resonant', R, d) within L of exactly one, ('annulus', R, d) otherwise."""
    L = L or domain.L or default_tube_radius(domain)
    I = np.asarray(I, dtype=float)
    dists = [(r.distance(I), r) for r in domain.web.secular]
    near = [(d, r) for d, r in dists if d < 2.0 * L]
    if not near:
        closest = min((d for d, _ in dists), default=float("inf"))
        return "free", None, closest
    if len(near) == 1 and near[0][0] <= L:
        return "resonant", near[0][1], near[0][0]
    d, r = min(near, key=lambda item: item[0])
    return "annulus", r, d
