"""Built-in example models.

The standard family couples two rotators to one pendulum:

    h = Omega1 I1^2/2 + Omega2 I2^2/2,   V = cos(q) - 1,
    Q = cos(q) (a1 cos(phi1) + a2 cos(phi2) + a3 cos(phi1 + phi2 - t)).
"""

from typing import Dict, List, Optional, Sequence, Tuple

from app.services.hamiltonian import Model, build_model

STANDARD_BOX: List[Tuple[float, float]] = [(-0.5, 2.0), (-0.5, 2.0)]


def standard_config(
    omega: Sequence[float] = (1.0, 1.0),
    a: Sequence[float] = (1.0, 1.0, 1.0),
    sign: str = "+",
    box: Optional[Sequence[Tuple[float, float]]] = None,
    grid: int = 33,
) -> Dict:
    """Model-file data of the standard two-rotator family."""
    return {
        "rotator": {"h": "0.5*Omega1*I1^2 + 0.5*Omega2*I2^2"},
        "pendulum": [{"V": "cos(q1) - 1", "sign": sign}],
        "perturbation": {
            "term": [
                {"k": [1, 0], "l": 0, "basis": "cos", "coeff": "a1*cos(q1)"},
                {"k": [0, 1], "l": 0, "basis": "cos", "coeff": "a2*cos(q1)"},
                {"k": [1, 1], "l": -1, "basis": "cos", "coeff": "a3*cos(q1)"},
            ]
        },
        "params": {
            "Omega1": float(omega[0]),
            "Omega2": float(omega[1]),
            "a1": float(a[0]),
            "a2": float(a[1]),
            "a3": float(a[2]),
        },
        "domain": {"box": [list(b) for b in (box or STANDARD_BOX)], "grid": grid},
    }


def standard_model(
    omega: Sequence[float] = (1.0, 1.0),
    a: Sequence[float] = (1.0, 1.0, 1.0),
    sign: str = "+",
    box: Optional[Sequence[Tuple[float, float]]] = None,
    grid: int = 33,
) -> Model:
    return build_model(standard_config(omega, a, sign, box, grid))


def single_rotator_config(coeff: str = "cos(q1)", box: Tuple[float, float] = (0.5, 3.0)) -> Dict:
    """One rotator h = I^2/2, one pendulum, perturbation coeff * cos(phi1)."""
    return {
        "rotator": {"h": "0.5*I1^2"},
        "pendulum": [{"V": "cos(q1) - 1"}],
        "perturbation": {"term": [{"k": [1], "l": 0, "basis": "cos", "coeff": coeff}]},
        "params": {},
        "domain": {"box": [list(box)], "grid": 33},
    }
