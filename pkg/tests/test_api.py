"""Tests for the HTTP surface."""

from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.services.fixtures import standard_config

client = TestClient(app)

STANDARD_TOML = (Path(__file__).resolve().parents[1] / "configs" / "standard.toml").read_text()


def test_root_endpoint():
    """Test the root endpoint."""
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_liveness_endpoint():
    response = client.get("/api/v1/health/live")
    assert response.status_code == 200
    assert response.json()["status"] == "alive"


def test_health_endpoint():
    """The numerics self-test passes on a working install."""
    response = client.get("/api/v1/health/")
    assert response.status_code == 200
    data = response.json()
    assert data["status"] == "healthy"
    assert data["components"]["numerics"] == "healthy"
    assert "numpy" in data["components"]


def test_web_from_toml():
    response = client.post("/api/v1/analysis/web", json={"model_toml": STANDARD_TOML, "order": 2})
    assert response.status_code == 200
    data = response.json()
    assert len(data["lines"]) == 7
    assert data["lines_per_order"] == {"1": 3, "2": 4}
    assert data["delta"] == pytest.approx(0.05)


def test_web_from_json_data():
    """The JSON form of the model file gives the same web."""
    response = client.post("/api/v1/analysis/web", json={"model_data": standard_config(), "order": 1})
    assert response.status_code == 200
    assert len(response.json()["lines"]) == 3


def test_missing_model():
    response = client.post("/api/v1/analysis/web", json={"order": 2})
    assert response.status_code == 422
    assert response.json()["error_code"] == "MODEL_FILE_ERROR"


def test_hypothesis_violation():
    """A potential with a minimum at the origin is rejected with the hypothesis name."""
    bad = STANDARD_TOML.replace('V = "cos(q1) - 1"', 'V = "1 - cos(q1)"')
    response = client.post("/api/v1/analysis/web", json={"model_toml": bad})
    assert response.status_code == 422
    data = response.json()
    assert data["error_code"] == "HYPOTHESIS_VIOLATION"
    assert data["error"].startswith("H2")


def test_request_validation():
    response = client.post("/api/v1/analysis/web", json={"model_toml": STANDARD_TOML, "order": 9})
    assert response.status_code == 422
    assert response.json()["error_code"] == "REQUEST_VALIDATION"


def test_melnikov_single_mode():
    """One Fourier mode: L* is the amplitude 2 pi / sinh(pi/2) and actions do not move."""
    response = client.post(
        "/api/v1/analysis/melnikov",
        json={"model_data": standard_config(a=(1.0, 0.0, 0.0)), "I": [1.0, 0.7], "theta": [0.0, 0.0]},
    )
    assert response.status_code == 200
    data = response.json()
    assert data["value"] == pytest.approx(2 * np.pi / np.sinh(np.pi / 2), abs=1e-8)
    assert data["scattered_I"] == pytest.approx([1.0, 0.7], abs=1e-9)


def test_verify_endpoint():
    response = client.post(
        "/api/v1/analysis/verify",
        json={"model_toml": STANDARD_TOML, "action_grid": 3, "angle_grid": 16},
    )
    assert response.status_code == 200
    entries = response.json()["entries"]
    statuses = {e["name"]: e["status"] for e in entries if e["resonance"] is None}
    assert statuses["H1"] == "pass"
    assert all(e["status"] == "pass" for e in entries if e["name"] == "H5")
