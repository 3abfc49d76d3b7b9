"""
Run artifacts: raw field files with key=value sidecars, the diagnostics CSV,
the summary text and the failure list.

A field is stored as `<stem>.f64` (little-endian float64, row-major) next to
`<stem>.hdr`; reading the pair back reproduces the field bit for bit.
"""

import csv
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from src.core.errors import ConfigError
from src.core.logging_setup import get_logger
from src.grid.grid import GridSpec, ScalarField

logger = get_logger(__name__)

DIAGNOSTIC_COLUMNS = (
    "solver",
    "epsilon",
    "lambda",
    "lambda_rescaled",
    "energy_total",
    "energy_kinetic",
    "energy_potential",
    "energy_interaction",
    "concentration_x",
    "concentration_y",
    "mass_in_ball",
    "y_eps_scaled",
    "sup_m_rescaled",
    "tail_slope",
    "tail_r_squared",
    "outer_iterations",
)

FIELD_SUFFIX = ".f64"
HEADER_SUFFIX = ".hdr"


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_field(directory: Path, stem: str, field: ScalarField, quantity: str | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_path = directory / f"{stem}{FIELD_SUFFIX}"
    np.ascontiguousarray(field.values, dtype="<f8").tofile(data_path)
    header = {
        "dim": field.grid.dim,
        "n": field.grid.points_per_axis,
        "half_width": repr(float(field.grid.half_width)),
        "quantity": quantity or field.name,
        "dtype": "float64-le",
    }
    (directory / f"{stem}{HEADER_SUFFIX}").write_text(
        "".join(f"{k}={v}\n" for k, v in header.items()), encoding="utf-8"
    )
    logger.debug("field_written", path=str(data_path), quantity=header["quantity"])
    return data_path


def read_header(path: Path) -> dict[str, str]:
    header: dict[str, str] = {}
    for line_number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed sidecar entry {line!r}", line_number)
        header[key.strip()] = value.strip()
    return header


def read_field(path: Path) -> ScalarField:
    """Read `<stem>.f64` (or the stem itself) with its sidecar."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (FIELD_SUFFIX, HEADER_SUFFIX) else path
    header = read_header(stem.with_suffix(HEADER_SUFFIX))
    grid = GridSpec(dim=int(header["dim"]), half_width=float(header["half_width"]), points_per_axis=int(header["n"]))
    values = np.fromfile(stem.with_suffix(FIELD_SUFFIX), dtype="<f8")
    return ScalarField(grid, values.reshape(grid.shape), name=header.get("quantity", stem.name))


def diagnostic_row(solver: str, record: Any) -> dict[str, Any]:
    """Flatten a sweep record (or any object with the same attributes) into CSV columns."""
    point = tuple(getattr(record, "concentration_point", ()) or ())
    parts = record.energy_parts
    return {
        "solver": solver,
        "epsilon": record.epsilon,
        "lambda": record.lambda_,
        "lambda_rescaled": record.lambda_rescaled,
        "energy_total": record.energy_total,
        "energy_kinetic": parts.kinetic,
        "energy_potential": parts.potential,
        "energy_interaction": parts.interaction,
        "concentration_x": point[0] if len(point) > 0 else None,
        "concentration_y": point[1] if len(point) > 1 else None,
        "mass_in_ball": record.mass_in_ball,
        "y_eps_scaled": record.y_eps_scaled,
        "sup_m_rescaled": record.sup_m_rescaled,
        "tail_slope": record.tail_slope,
        "tail_r_squared": record.tail_r_squared,
        "outer_iterations": record.outer_iterations,
    }


def append_diagnostics(path: Path, rows: Iterable[Mapping[str, Any]]) -> int:
    """Append rows in the fixed column order, writing the header for a new file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists() or path.stat().st_size == 0
    count = 0
    with path.open("a", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if new_file:
            writer.writerow(DIAGNOSTIC_COLUMNS)
        for row in rows:
            unknown = set(row) - set(DIAGNOSTIC_COLUMNS)
            if unknown:
                raise ValueError(f"unknown diagnostic columns: {sorted(unknown)}")
            writer.writerow([format_value(row.get(col)) for col in DIAGNOSTIC_COLUMNS])
            count += 1
    return count


def read_diagnostics(path: Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def write_summary(path: Path, sections: Mapping[str, Mapping[str, Any]]) -> Path:
    """Plain-text blocks `[section]` followed by `key: value` lines."""
    lines: list[str] = []
    for title, entries in sections.items():
        lines.append(f"[{title}]")
        lines.extend(f"{key}: {format_value(value)}" for key, value in entries.items())
        lines.append("")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def write_failures(path: Path, failures: Sequence[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(list(failures), indent=2, default=str) + "\n", encoding="utf-8")
    return path
