"""Analysis router: resonance web, hypothesis verification and Melnikov evaluation."""

import numpy as np
from fastapi import APIRouter, status
from fastapi.concurrency import run_in_threadpool

from app.exceptions.custom_exceptions import ModelFileError
from app.models.model_file import parse_model_data, parse_model_text
from app.models.reports import (
    AnalysisRequest,
    ErrorResponse,
    HypothesisReport,
    MelnikovReport,
    ResonanceLine,
    WebReport,
)
from app.services.hamiltonian import Model, build_model
from app.services.melnikov import MelnikovEval
from app.services.resonance import build_reduced_domain, build_web, default_tube_radius
from app.services.scattering import verify_hypotheses
from app.utils.logger import get_logger

logger = get_logger(__name__)

router = APIRouter(prefix="/analysis", tags=["analysis"])

ERROR_RESPONSES = {
    409: {"description": "Path clearance failure", "model": ErrorResponse},
    422: {"description": "Invalid model file or hypothesis violation", "model": ErrorResponse},
    503: {"description": "Numerical failure", "model": ErrorResponse},
}


def model_from_request(request: AnalysisRequest) -> Model:
    if request.model_toml is not None:
        config = parse_model_text(request.model_toml)
    elif request.model_data is not None:
        config = parse_model_data(request.model_data)
    else:
        raise ModelFileError("request carries neither model_toml nor model_data")
    return build_model(config)


def web_report(request: AnalysisRequest) -> WebReport:
    model = model_from_request(request)
    web = build_web(model, request.order)
    domain = build_reduced_domain(web, request.delta)
    L = default_tube_radius(domain) if web.secular else None
    summary = web.summary()
    return WebReport(
        order=web.order,
        lines=[ResonanceLine(**r) for r in summary["resonances"]],
        lines_per_order={str(j): n for j, n in summary["lines_per_order"].items()},
        delta=domain.delta,
        tube_radius=L,
        components=domain.describe()["components"],
    )


def hypothesis_report(request: AnalysisRequest) -> HypothesisReport:
    model = model_from_request(request)
    return verify_hypotheses(
        model, action_grid=request.action_grid, points=request.angle_grid, eps=request.eps, delta=request.delta
    )


def melnikov_report(request: AnalysisRequest) -> MelnikovReport:
    model = model_from_request(request)
    model.require_lambda_invariant()
    I = np.asarray(request.I if request.I is not None else model.box.mean(axis=1), dtype=float)
    theta = np.asarray(request.theta if request.theta is not None else np.zeros(model.d), dtype=float)
    red = MelnikovEval(model).reduced_poincare(I, theta)
    return MelnikovReport(
        I=I.tolist(),
        theta=theta.tolist(),
        tau=np.atleast_1d(red.tau).tolist(),
        value=float(red.value),
        grad_theta=red.grad_theta.tolist(),
        grad_I=red.grad_I.tolist(),
        scattered_I=(I + request.eps * red.grad_theta).tolist(),
    )


@router.post(
    "/web",
    response_model=WebReport,
    status_code=status.HTTP_200_OK,
    summary="Resonance web",
    description="Resonances up to the activation order and the removed set B of a model file",
    responses=ERROR_RESPONSES,
)
async def analyze_web(request: AnalysisRequest) -> WebReport:
    """Resonance web of the posted model."""
    report = await run_in_threadpool(web_report, request)
    logger.info("Web report served", lines=len(report.lines))
    return report


@router.post(
    "/verify",
    response_model=HypothesisReport,
    status_code=status.HTTP_200_OK,
    summary="Verify hypotheses",
    description="Check the standing hypotheses over action and angle grids",
    responses=ERROR_RESPONSES,
)
async def analyze_verify(request: AnalysisRequest) -> HypothesisReport:
    report = await run_in_threadpool(hypothesis_report, request)
    logger.info("Hypothesis report served", passed=report.passed)
    return report


@router.post(
    "/melnikov",
    response_model=MelnikovReport,
    status_code=status.HTTP_200_OK,
    summary="Reduced Poincare function",
    description="L*(I, theta), its gradients and the scattered action at one point",
    responses=ERROR_RESPONSES,
)
async def analyze_melnikov(request: AnalysisRequest) -> MelnikovReport:
    return await run_in_threadpool(melnikov_report, request)
