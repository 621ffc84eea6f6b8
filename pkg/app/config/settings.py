"""Application configuration settings."""

import os
from typing import List

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Toolkit settings, overridable through RESONET_* environment variables."""

    # Application Configuration
    app_name: str = Field(default="resonet", description="Application name")
    app_version: str = Field(default="1.0.0", description="Application version")
    app_description: str = Field(
        default="Resonance web, scattering map and transition chain toolkit",
        description="App description",
    )
    debug: bool = Field(default=False, description="Debug mode")
    log_level: str = Field(default="INFO", description="Logging level")
    log_format: str = Field(default="json", description="Log renderer: json or console")
    environment: str = Field(default="development", description="Environment")

    # Service Configuration
    api_prefix: str = Field(default="/api/v1", description="API prefix")
    host: str = Field(default="127.0.0.1", description="Host to bind")
    port: int = Field(default=8000, ge=1, le=65535, description="Port to bind")
    workers: int = Field(default=1, ge=1, le=32, description="Number of workers")
    cors_origins: str = Field(default="http://localhost:3000", description="Comma-separated CORS origins")

    # Parallelism
    threads: int = Field(default=os.cpu_count() or 1, ge=1, description="Worker threads for grid evaluations")

    # Resonance geometry
    tol_res: float = Field(default=1e-9, gt=0, description="Tolerance deciding omega.k + l = 0")
    max_order: int = Field(default=3, ge=1, le=6, description="Averaging order m0")
    sample_points: int = Field(default=7, ge=1, description="Random action samples used to test activation")
    seed: int = Field(default=0, description="Default RNG seed")

    # Newton solvers
    newton_tol: float = Field(default=1e-12, gt=0, description="Newton residual tolerance")
    newton_max_iter: int = Field(default=50, ge=1, description="Newton iteration cap")

    # Model validation
    h3_grid: int = Field(default=33, ge=2, description="Points per axis for the D2h determinant check")
    h3_det_floor: float = Field(default=1e-12, gt=0, description="Smallest admissible |det D2h|")
    h2_tol: float = Field(default=1e-12, gt=0, description="Tolerance for V'(0)=0 and V''(0)<0")

    # Separatrix
    homoclinic_delta0: float = Field(default=1e-8, gt=0, description="Offset along the unstable eigenvector")
    homoclinic_rtol: float = Field(default=1e-12, gt=0, description="Relative tolerance of the shooting integration")
    tail_threshold: float = Field(default=1e-12, gt=0, description="|p*| below which the separatrix is treated as at rest")

    # Melnikov quadrature
    quad_abs_tol: float = Field(default=1e-10, gt=0, description="Absolute tolerance of the Melnikov quadrature")
    quad_max_panels: int = Field(default=20000, ge=16, description="Panel budget of the adaptive quadrature")
    tau_tol: float = Field(default=1e-9, gt=0, description="Residual of the critical fiber time equation")
    tau_window: float = Field(default=60.0, gt=0, description="Largest |tau| searched for a crest")

    # Normal forms
    saddle_scan: int = Field(default=1024, ge=16, description="Points of the global saddle scan")
    beta_min: float = Field(default=1e-8, gt=0, description="Smallest admissible |U*''| at the saddle")

    # Scattering and chains
    jump_cap: float = Field(default=0.8, gt=0, le=1, description="Fraction of the measured gradient range used per jump")
    gap_floor: float = Field(default=2.0, gt=0, description="Separatrix band multiplier")
    rho: float = Field(default=0.2, gt=0, description="Half width excluded around the resonant saddle angle")
    link_tol: float = Field(default=1e-8, gt=0, description="Largest admissible link residual")
    angle_grid: int = Field(default=32, ge=4, description="Angle grid points per axis")
    max_links: int = Field(default=20000, ge=1, description="Chain length cap")
    max_seeds: int = Field(default=64, ge=1, description="Newton seeds taken from the angle grid scan")

    # Integrators
    rk_tol: float = Field(default=1e-12, gt=0, description="Tolerance of the adaptive Runge-Kutta integrator")
    split_step: float = Field(default=1e-3, gt=0, description="Default step of the splitting integrator")
    excursion_window: float = Field(default=25.0, gt=0, description="Forward and backward time of a homoclinic excursion")
    excursion_approach: float = Field(
        default=1.0, gt=0, description="C in the closest-approach bound C sqrt(eps) of a homoclinic excursion"
    )
    dwell_time: float = Field(default=1.0, ge=0, description="Inner flow time between pseudo-orbit jumps")

    model_config = SettingsConfigDict(
        env_prefix="RESONET_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("log_format")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        """Validate the log renderer name."""
        if v not in ("json", "console"):
            raise ValueError("log_format must be 'json' or 'console'")
        return v

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate logging level."""
        if v.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown log level {v}")
        return v.upper()

    @property
    def cors_origins_list(self) -> List[str]:
        """Get CORS origins as a list."""
        return [origin.strip() for origin in self.cors_origins.split(",") if origin.strip()]


# Global settings instance
settings = Settings()
