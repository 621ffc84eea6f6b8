"""Health check router for service monitoring."""

import numpy as np
import scipy
from fastapi import APIRouter, status

from app.config.settings import settings
from app.models.reports import HealthCheckResponse
from app.services.melnikov import residue_amplitudes
from app.services.fixtures import standard_model
from app.utils.logger import get_logger

logger = get_logger(__name__)

router = APIRouter(prefix="/health", tags=["health"])


def _numerics_check() -> str:
    """Closed-form amplitude of the standard model at the resonant limit nu = 0 is 4c."""
    model = standard_model(omega=(1.0, 1.0))
    A, nu = residue_amplitudes(model, np.array([0.0, 0.0]))
    ok = bool(np.isclose(A[nu == 0.0], 4.0).all())
    return "healthy" if ok else "unhealthy"


@router.get(
    "/",
    response_model=HealthCheckResponse,
    status_code=status.HTTP_200_OK,
    summary="Health check",
    description="Check the numerical stack of the service",
)
async def health_check() -> HealthCheckResponse:
    """
    Check the health of the service.

    Returns:
        Health check response with library versions and a numerics self-test
    """
    components = {"numpy": np.__version__, "scipy": scipy.__version__}
    try:
        components["numerics"] = _numerics_check()
    except Exception as e:
        logger.error("Numerics self-test failed", error=str(e))
        components["numerics"] = "unhealthy"
    overall = "healthy" if components["numerics"] == "healthy" else "degraded"
    logger.info("Health check completed", status=overall)
    return HealthCheckResponse(status=overall, version=settings.app_version, components=components)


@router.get(
    "/live",
    status_code=status.HTTP_200_OK,
    summary="Liveness probe",
    description="Simple liveness probe",
)
async def liveness_probe() -> dict:
    return {"status": "alive"}
