"""Models module."""

from .model_file import ModelConfig, load_model_file, parse_model_data, parse_model_text
from .reports import (
    AnalysisRequest,
    ChainLevelModel,
    ChainReport,
    ErrorResponse,
    HealthCheckResponse,
    HypothesisEntry,
    HypothesisReport,
    HypothesisStatus,
    MelnikovReport,
    ResonanceLine,
    SimulationSummary,
    WebReport,
)

__all__ = [
    "ModelConfig",
    "load_model_file",
    "parse_model_data",
    "parse_model_text",
    "AnalysisRequest",
    "ChainLevelModel",
    "ChainReport",
    "ErrorResponse",
    "HealthCheckResponse",
    "HypothesisEntry",
    "HypothesisReport",
    "HypothesisStatus",
    "MelnikovReport",
    "ResonanceLine",
    "SimulationSummary",
    "WebReport",
]
