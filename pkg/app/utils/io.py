"""Artifact writers: CSV, JSON and gnuplot scripts with a reproducibility header."""

import csv
import hashlib
import io
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from app import __version__
from app.utils.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


def config_hash(model_text: str, params: Dict[str, Any]) -> str:
    """SHA-256 of the canonical model text plus the command parameters."""
    digest = hashlib.sha256()
    digest.update(model_text.encode("utf-8"))
    digest.update(json.dumps(params, sort_keys=True, default=_default).encode("utf-8"))
    return digest.hexdigest()


def header(config: str, seed: int) -> Dict[str, Any]:
    return {"version": __version__, "config_hash": config, "seed": seed}


def _default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "model_dump"):
        return value.model_dump(mode="json")
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def atomic_write(path: PathLike, text: str) -> Path:
    """Write ``text`` through a temporary file in the target directory and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def csv_text(columns: Sequence[str], rows: Iterable[Sequence[Any]], head: Dict[str, Any]) -> str:
    buffer = io.StringIO()
    for key in ("version", "config_hash", "seed"):
        buffer.write(f"# {key}: {head[key]}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buffer.getvalue()


def write_csv(path: PathLike, columns: Sequence[str], rows: Iterable[Sequence[Any]], head: Dict[str, Any],
              plot: Optional[Dict[str, Any]] = None) -> Path:
    """CSV with a '#' header block, a column row and '%.17g' numbers, plus a gnuplot script."""
    path = atomic_write(path, csv_text(columns, rows, head))
    write_gnuplot(path, columns, **(plot or {}))
    logger.debug("CSV written", path=str(path))
    return path


def json_text(payload: Any, head: Dict[str, Any]) -> str:
    if hasattr(payload, "model_dump"):
        payload = payload.model_dump(mode="json")
    return json.dumps({"header": head, "data": payload}, sort_keys=True, indent=2, default=_default) + "\n"


def write_json(path: PathLike, payload: Any, head: Dict[str, Any]) -> Path:
    path = atomic_write(path, json_text(payload, head))
    logger.debug("JSON written", path=str(path))
    return path


def write_gnuplot(csv_path: Path, columns: Sequence[str], x: Optional[str] = None,
                  y: Optional[List[str]] = None, logscale: bool = False) -> Path:
    """Gnuplot script next to ``csv_path`` plotting ``y`` columns against ``x``."""
    x = x or columns[0]
    y = y or [c for c in columns if c != x][:4]
    xi = list(columns).index(x) + 1
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set xlabel '{x}'",
    ]
    if logscale:
        lines.append("set logscale xy")
    plots = [f"'{csv_path.name}' using {xi}:{list(columns).index(c) + 1} with linespoints title '{c}'" for c in y]
    lines.append("plot " + ", \\\n     ".join(plots) if plots else "# nothing to plot")
    return atomic_write(csv_path.with_suffix(".gp"), "\n".join(lines) + "\n")


def read_path_csv(path: PathLike) -> np.ndarray:
    """Polyline from a CSV with columns I1..Id (header and '#' lines skipped)."""
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            cells = [c.strip() for c in text.split(",")]
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                if rows:
                    raise
    if not rows:
        raise ValueError(f"no path vertices in {path}")
    return np.array(rows)


class RunMeta:
    """Sidecar ``run.meta.json`` with wall times; the only non-deterministic output."""

    def __init__(self, out: PathLike, command: str):
        self.path = Path(out) / "run.meta.json"
        self.command = command
        self.started = datetime.now(timezone.utc)
        self.files: List[str] = []

    def add(self, path: Path) -> Path:
        self.files.append(path.name)
        return path

    def close(self, status: str = "ok") -> Path:
        finished = datetime.now(timezone.utc)
        payload = {
            "command": self.command,
            "started": self.started.isoformat(),
            "finished": finished.isoformat(),
            "wall_seconds": (finished - self.started).total_seconds(),
            "files": sorted(self.files),
            "status": status,
        }
        return atomic_write(self.path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
