"""Report models shared by the CLI and the HTTP surface."""

from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class HypothesisStatus(str, Enum):
    """Outcome of one hypothesis check."""
    PASS = "pass"
    FAIL = "fail"
    NOT_APPLICABLE = "not-applicable"


class HypothesisEntry(BaseModel):
    """One checked hypothesis with its measured value."""

    name: str = Field(..., description="Hypothesis name (H1..H8, H8')")
    status: HypothesisStatus = Field(..., description="pass, fail or not-applicable")
    value: Optional[float] = Field(None, description="Measured value of the checked quantity")
    threshold: Optional[float] = Field(None, description="Threshold the value is compared with")
    witness: Optional[List[float]] = Field(None, description="Point (I or I, theta) where a failure occurs")
    resonance: Optional[str] = Field(None, description="Resonance label when the check is per resonance")
    detail: str = Field("", description="Human readable description")

    class Config:
        """Pydantic configuration."""
        json_schema_extra = {
            "example": {
                "name": "H5",
                "status": "fail",
                "value": 0.0,
                "threshold": 1e-12,
                "witness": [0.5, 0.5],
                "resonance": "R(1,1|-1)",
                "detail": "a = k0^T D2h k0 vanishes",
            }
        }


class HypothesisReport(BaseModel):
    """Verification of the standing hypotheses over action and angle grids."""

    entries: List[HypothesisEntry] = Field(default_factory=list, description="Per-hypothesis outcomes")
    action_grid: int = Field(..., description="Points per action axis")
    angle_grid: int = Field(..., description="Points per angle axis")
    tolerances: Dict[str, float] = Field(default_factory=dict, description="Tolerances used")

    @property
    def passed(self) -> bool:
        return all(e.status != HypothesisStatus.FAIL for e in self.entries)

    def entry(self, name: str) -> List[HypothesisEntry]:
        return [e for e in self.entries if e.name == name]

    def status_of(self, name: str) -> HypothesisStatus:
        """Worst status among the entries named ``name``."""
        found = self.entry(name)
        if any(e.status == HypothesisStatus.FAIL for e in found):
            return HypothesisStatus.FAIL
        if found and all(e.status == HypothesisStatus.NOT_APPLICABLE for e in found):
            return HypothesisStatus.NOT_APPLICABLE
        return HypothesisStatus.PASS


class ResonanceLine(BaseModel):
    """One resonance of the web."""

    label: str = Field(..., description="R(k|l)")
    k: List[int] = Field(..., description="Angle index")
    l: int = Field(..., description="Time index")
    order: int = Field(..., description="Activation order")
    hyperplane: Optional[Dict[str, Any]] = Field(None, description="Exact rational coefficients when h is quadratic")


class WebReport(BaseModel):
    """Resonance web and the removed set B."""

    order: int = Field(..., description="Highest activation order")
    lines: List[ResonanceLine] = Field(default_factory=list, description="Resonances ordered by activation")
    lines_per_order: Dict[str, int] = Field(default_factory=dict, description="Count of lines per order")
    delta: float = Field(..., description="Radius of the removed neighbourhood of B")
    tube_radius: Optional[float] = Field(None, description="Tube radius L")
    components: List[Dict[str, Any]] = Field(default_factory=list, description="Components of B")

    class Config:
        """Pydantic configuration."""
        json_schema_extra = {
            "example": {
                "order": 2,
                "lines": [{"label": "R(1,0|0)", "k": [1, 0], "l": 0, "order": 1, "hyperplane": None}],
                "lines_per_order": {"1": 3, "2": 4},
                "delta": 0.05,
                "tube_radius": 0.05,
                "components": [],
            }
        }


class ChainLevelModel(BaseModel):
    """One torus of a transition chain."""

    chart: str = Field(..., description="'free' or the resonance label")
    branch: Optional[str] = Field(None, description="'+', '-' or 'secondary' in a resonant chart")
    E: List[float] = Field(..., description="Level values of the chart's first integral")
    action: List[float] = Field(..., description="Representative action")
    theta: Optional[List[float]] = Field(None, description="Angle solving the link into this torus")
    residual: Optional[float] = Field(None, description="Residual of that link")
    margin: Optional[float] = Field(None, description="Transversality margin |det J| of that link")
    link_chart: Optional[str] = Field(None, description="Chart whose equations certify the link")
    link_from: Optional[List[float]] = Field(None, description="Source torus in link_chart coordinates")
    link_to: Optional[List[float]] = Field(None, description="Target torus in link_chart coordinates")


class ChainReport(BaseModel):
    """Transition chain along a path."""

    eps: float = Field(..., description="Perturbation size")
    path: List[List[float]] = Field(..., description="Polyline in action space")
    cap: float = Field(..., description="Largest admissible free jump")
    levels: List[ChainLevelModel] = Field(default_factory=list, description="Tori in order")
    max_residual: float = Field(0.0, description="Largest link residual")
    monotone: bool = Field(True, description="Arclength projection never decreases")


class SimulationSummary(BaseModel):
    """Summary of a simulation experiment."""

    kind: str = Field(..., description="Experiment name")
    eps: List[float] = Field(default_factory=list, description="Perturbation sizes")
    values: Dict[str, Any] = Field(default_factory=dict, description="Measured quantities")
    exponent: Optional[float] = Field(None, description="Fitted log-log exponent")
    constant: Optional[float] = Field(None, description="Fitted constant")


class AnalysisRequest(BaseModel):
    """Model file given inline, as TOML text or its JSON equivalent."""

    model_toml: Optional[str] = Field(None, description="Model file text")
    model_data: Optional[Dict[str, Any]] = Field(None, description="Model file as a JSON object")
    order: int = Field(2, ge=1, le=3, description="Highest activation order of the web")
    delta: float = Field(0.05, gt=0, description="Radius of the removed neighbourhood of B")
    action_grid: int = Field(17, ge=2, le=65, description="Points per action axis")
    angle_grid: int = Field(32, ge=4, le=128, description="Points per angle axis")
    eps: float = Field(1e-3, ge=0, description="Perturbation size")
    I: Optional[List[float]] = Field(None, description="Action point")
    theta: Optional[List[float]] = Field(None, description="Angle point")

    class Config:
        """Pydantic configuration."""
        json_schema_extra = {
            "example": {
                "model_toml": "[rotator]\nh = \"0.5*I1^2\"\n[[pendulum]]\nV = \"cos(q1) - 1\"\n[domain]\nbox = [[0.5, 3.0]]\n",
                "order": 2,
                "delta": 0.05,
            }
        }


class MelnikovReport(BaseModel):
    """Reduced Poincare function at one point."""

    I: List[float] = Field(..., description="Action")
    theta: List[float] = Field(..., description="Angle")
    tau: List[float] = Field(..., description="Critical fiber time")
    value: float = Field(..., description="L*(I, theta)")
    grad_theta: List[float] = Field(..., description="dL*/dtheta")
    grad_I: List[float] = Field(..., description="dL*/dI")
    scattered_I: Optional[List[float]] = Field(None, description="I + eps dL*/dtheta")


class HealthCheckResponse(BaseModel):
    """Response model for health check endpoint."""

    status: str = Field(..., description="Service status")
    timestamp: datetime = Field(default_factory=datetime.utcnow)
    version: str = Field(..., description="API version")
    components: dict = Field(default_factory=dict, description="Numerical component status")

    class Config:
        """Pydantic configuration."""
        json_schema_extra = {
            "example": {
                "status": "healthy",
                "timestamp": "2026-01-15T10:30:00Z",
                "version": "1.0.0",
                "components": {"numpy": "1.26.4", "scipy": "1.11.4"},
            }
        }


class ErrorResponse(BaseModel):
    """Error response model."""

    error: str = Field(..., description="Error message")
    error_code: Optional[str] = Field(None, description="Domain error code")
    detail: Optional[Any] = Field(None, description="Error details such as a witness point")
    timestamp: datetime = Field(default_factory=datetime.utcnow)
