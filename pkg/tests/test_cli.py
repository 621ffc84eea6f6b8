"""Tests for the command-line frontend: artifacts, headers and exit codes."""

import json
from pathlib import Path

import pytest

from app import cli
from app import main as http_app
from app.cli import EXIT_CLEARANCE, EXIT_INPUT, EXIT_OK, EXIT_VALIDATION, main, parse_grid, parse_resonance
from app.exceptions import NUMERICAL_ERRORS, VALIDATION_ERRORS, ClearanceError, HypothesisError, NoSolutionError

STANDARD = str(Path(__file__).resolve().parents[1] / "configs" / "standard.toml")


def read_json(path: Path):
    return json.loads(path.read_text())


def test_web_command(tmp_path):
    """web writes the resonance table, the report and the run sidecars."""
    code = main(["web", "--model", STANDARD, "--out", str(tmp_path)])
    assert code == EXIT_OK
    report = read_json(tmp_path / "web.json")
    assert set(report["header"]) == {"version", "config_hash", "seed"}
    assert len(report["data"]["lines"]) == 7
    assert report["data"]["lines_per_order"] == {"1": 3, "2": 4}
    lines = (tmp_path / "resonances.csv").read_text().splitlines()
    assert lines[0].startswith("# version: ")
    assert lines[1].startswith("# config_hash: ")
    assert lines[2] == "# seed: 0"
    assert lines[3] == "label,k,l,order,normal,offset"
    assert (tmp_path / "resonances.gp").exists()
    meta = read_json(tmp_path / "run.meta.json")
    assert meta["status"] == "ok"
    assert "web.json" in meta["files"]
    config = read_json(tmp_path / "run.config.json")
    assert config["data"]["command"] == "web"


def test_outputs_are_deterministic(tmp_path):
    """Two runs with the same inputs write identical artifacts."""
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["web", "--model", STANDARD, "--out", str(first), "--seed", "7"]) == EXIT_OK
    assert main(["web", "--model", STANDARD, "--out", str(second), "--seed", "7"]) == EXIT_OK
    for name in ("web.json", "resonances.csv"):
        assert (first / name).read_text() == (second / name).read_text()
    assert read_json(first / "web.json")["header"]["seed"] == 7


def test_missing_model_file(tmp_path, capsys):
    code = main(["web", "--model", str(tmp_path / "missing.toml"), "--out", str(tmp_path)])
    assert code == EXIT_INPUT
    assert "error" in json.loads(capsys.readouterr().err)


def test_hypothesis_failure_exit_code(tmp_path, capsys):
    """A potential with a minimum at the origin is a validation failure."""
    text = Path(STANDARD).read_text().replace('V = "cos(q1) - 1"', 'V = "1 - cos(q1)"')
    model = tmp_path / "bad.toml"
    model.write_text(text)
    code = main(["web", "--model", str(model), "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    payload = json.loads(capsys.readouterr().err)
    assert payload["error_code"] == "HYPOTHESIS_VIOLATION"
    assert payload["error"].startswith("H2")


def test_malformed_toml_exit_code(tmp_path):
    model = tmp_path / "broken.toml"
    model.write_text('[rotator]\nh = "I1^2"\n[domain\n')
    assert main(["web", "--model", str(model), "--out", str(tmp_path / "out")]) == EXIT_VALIDATION


def test_chain_clearance_exit_code(tmp_path, capsys):
    """A path through the double resonance (0, 0.5) exits with the clearance code."""
    path = tmp_path / "path.csv"
    path.write_text("I1,I2\n-0.4,0.5\n1.8,0.5\n")
    code = main(["chain", "--model", STANDARD, "--path", str(path), "--eps", "1e-2", "--out", str(tmp_path / "out")])
    assert code == EXIT_CLEARANCE
    payload = json.loads(capsys.readouterr().err)
    assert payload["witness"][1] == pytest.approx(0.5, abs=0.05)


def test_chain_without_path(tmp_path):
    assert main(["chain", "--model", STANDARD, "--out", str(tmp_path)]) == EXIT_INPUT


def test_normal_form_command(tmp_path):
    code = main(["normal-form", "--model", STANDARD, "--resonance", "1,1|-1", "--E-hat", "0.2", "--out", str(tmp_path)])
    assert code == EXIT_OK
    data = read_json(tmp_path / "normal_form.json")["data"]
    assert data["a"] == pytest.approx(2.0)
    assert data["B_star"] == pytest.approx([0.4, 0.6])
    assert (tmp_path / "averaged_coefficients.csv").exists()


def test_trajectory_command(tmp_path):
    code = main(["sim", "--model", STANDARD, "--I", "0.6,0.9", "--T", "1", "--samples", "11", "--eps", "1e-3",
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    lines = (tmp_path / "trajectory_eps0.001.csv").read_text().splitlines()
    assert lines[3].split(",")[:3] == ["t", "I1", "I2"]
    assert len(lines) == 4 + 11


def test_melnikov_oracle_command(tmp_path):
    code = main(["melnikov", "--model", STANDARD, "--oracle", "--samples", "10", "--out", str(tmp_path)])
    assert code == EXIT_OK
    data = read_json(tmp_path / "melnikov_oracle.json")["data"]
    assert data["max_abs_diff"] <= 1e-8


def test_argument_parsers():
    assert parse_resonance("1,1|-1") == ((1, 1), -1)
    assert parse_resonance("2,0") == ((2, 0), 0)
    grid = parse_grid("0:1:3,0:2:2")
    assert grid.shape == (6, 2)
    assert grid[-1].tolist() == [1.0, 2.0]


def test_exit_codes_and_http_status_share_error_classes():
    """The CLI and the HTTP surface classify domain errors from the same tuples."""
    assert cli.VALIDATION_ERRORS is VALIDATION_ERRORS is http_app.VALIDATION_ERRORS
    assert cli.NUMERICAL_ERRORS is NUMERICAL_ERRORS
    assert not set(VALIDATION_ERRORS) & set(NUMERICAL_ERRORS)
    assert ClearanceError not in VALIDATION_ERRORS + NUMERICAL_ERRORS
    assert http_app.status_for(HypothesisError("H3", "singular")) == 422
    assert http_app.status_for(NoSolutionError("out of range")) == 503
