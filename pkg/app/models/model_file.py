"""Schema of the model file (TOML) describing a rotator x pendulum Hamiltonian."""

import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.exceptions.custom_exceptions import ModelFileError


class Basis(str, Enum):
    """Trigonometric basis of a Fourier term."""
    COS = "cos"
    SIN = "sin"


class RotatorSection(BaseModel):
    """Integrable part h(I) of the rotators."""

    h: str = Field(..., min_length=1, description="Expression in I1..Id and parameters")
    d: Optional[int] = Field(None, ge=1, description="Number of rotators (defaults to the box dimension)")


class PendulumSection(BaseModel):
    """One pendulum sign*(p^2/2 + V(q))."""

    V: str = Field(..., min_length=1, description="Potential in q_j with a hyperbolic maximum at 0")
    sign: str = Field("+", description="Sign in front of the pendulum energy")

    @field_validator("sign")
    @classmethod
    def validate_sign(cls, v: str) -> str:
        """Validate the pendulum sign."""
        if v not in ("+", "-"):
            raise ValueError("sign must be '+' or '-'")
        return v


class TermSection(BaseModel):
    """Fourier term coeff(I,p,q) * basis(k.phi + l t) carried at order eps^order."""

    k: List[int] = Field(..., description="Integer angle index, length d")
    l: int = Field(0, description="Integer time index")
    basis: Basis = Field(Basis.COS, description="cos or sin")
    coeff: str = Field("1", min_length=1, description="Coefficient expression in I, p, q and parameters")
    order: int = Field(1, ge=1, description="Power of epsilon carried by the term")


class PerturbationSection(BaseModel):
    """Explicit Fourier-term list of Q."""

    term: List[TermSection] = Field(default_factory=list, description="Fourier terms")


class DomainSection(BaseModel):
    """Action box and verification grid."""

    box: List[Tuple[float, float]] = Field(..., min_length=1, description="[lo, hi] per action")
    grid: int = Field(33, ge=2, description="Points per axis of the verification grid")

    @field_validator("box")
    @classmethod
    def validate_box(cls, v: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        """Validate that every interval is non-empty."""
        for lo, hi in v:
            if not hi > lo:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        return v


class ModelConfig(BaseModel):
    """Parsed model file."""

    rotator: RotatorSection
    pendulum: List[PendulumSection] = Field(..., min_length=1, description="Pendula in order")
    perturbation: PerturbationSection = Field(default_factory=PerturbationSection)
    params: Dict[str, float] = Field(default_factory=dict, description="Parameter values")
    domain: DomainSection

    @model_validator(mode="before")
    @classmethod
    def accept_numbered_pendula(cls, data: Any) -> Any:
        """Accept [pendulum.1], [pendulum.2] tables as well as [[pendulum]] arrays."""
        if isinstance(data, dict) and isinstance(data.get("pendulum"), dict):
            tables = data["pendulum"]
            try:
                ordered = sorted(tables.items(), key=lambda item: int(item[0]))
            except ValueError as exc:
                raise ValueError("pendulum tables must be numbered [pendulum.1], [pendulum.2], ...") from exc
            data = {**data, "pendulum": [table for _, table in ordered]}
        return data

    @property
    def dimension(self) -> int:
        return self.rotator.d or len(self.domain.box)

    class Config:
        """Pydantic configuration."""
        json_schema_extra = {
            "example": {
                "rotator": {"h": "0.5*Omega1*I1^2 + 0.5*Omega2*I2^2"},
                "pendulum": [{"V": "cos(q1) - 1", "sign": "+"}],
                "perturbation": {
                    "term": [
                        {"k": [1, 0], "l": 0, "basis": "cos", "coeff": "a1*cos(q1)"},
                        {"k": [0, 1], "l": 0, "basis": "cos", "coeff": "a2*cos(q1)"},
                        {"k": [1, 1], "l": -1, "basis": "cos", "coeff": "a3*cos(q1)"},
                    ]
                },
                "params": {"Omega1": 1.0, "Omega2": 1.0, "a1": 1.0, "a2": 1.0, "a3": 1.0},
                "domain": {"box": [[-0.5, 2.0], [-0.5, 2.0]], "grid": 33},
            }
        }


_LINE = re.compile(r"line (\d+)")


def parse_model_text(text: str) -> ModelConfig:
    """Parse model file text.

    Raises:
        ModelFileError: TOML syntax error (with line number) or schema violation.
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        match = _LINE.search(str(exc))
        raise ModelFileError(f"Malformed model file: {exc}", int(match.group(1)) if match else None) from exc
    return parse_model_data(raw)


def parse_model_data(raw: Union[Dict[str, Any], ModelConfig]) -> ModelConfig:
    if isinstance(raw, ModelConfig):
        return raw
    try:
        return ModelConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ModelFileError(f"Invalid model file field '{where}': {first['msg']}") from exc


def load_model_file(path: Union[str, Path]) -> ModelConfig:
    """Read and parse a model file from disk (FileNotFoundError propagates)."""
    return parse_model_text(Path(path).read_text(encoding="utf-8"))
