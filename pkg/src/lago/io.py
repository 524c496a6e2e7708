"""Reading trial CSVs and config files; writing reports and grids."""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from lago.errors import ConfigError, EmptyDataset, ParseError, SchemaError
from lago.model import TrialDataset

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "dataset_to_csv",
    "dumps_json",
    "load_config",
    "read_dataset",
    "write_band_csv",
    "write_dataset",
    "write_json",
    "write_replicates_csv",
    "write_set_csv",
]

_LEADING = ("stage", "centre", "arm")


def fmt_float(value: float) -> str:
    """Seventeen significant digits; round-trips every double exactly."""
    return format(float(value), ".17g")


# ----------------------------------------------------------------- datasets

def _parse_header(header: list[str]) -> int:
    names = [h.strip() for h in header]
    if len(names) < 5 or tuple(names[:3]) != _LEADING or names[-1] != "y":
        raise ParseError("header must be stage,centre,arm,a1,...,aP,y", line=1)
    comps = names[3:-1]
    expected = [f"a{p}" for p in range(1, len(comps) + 1)]
    if comps != expected:
        raise ParseError(f"component columns must be {','.join(expected)}", line=1)
    return len(comps)


def _int_field(text: str, name: str, line: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{name} {text!r} is not a number", line=line) from None
    if not value.is_integer():
        raise ParseError(f"{name} {text!r} is not an integer", line=line)
    return int(value)


def _float_field(text: str, name: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{name} {text!r} is not a number", line=line) from None


def parse_dataset(text: str) -> TrialDataset:
    """Parse CSV text into a dataset.

    Malformed lines raise ``ParseError`` with the 1-based line number.
    Content rules are checked afterwards and reported together in one
    ``SchemaError``.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file, header required", line=1) from None
    P = _parse_header(header)
    width = P + 4
    names = list(_LEADING) + [f"a{p}" for p in range(1, P + 1)] + ["y"]

    rows, lines = [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", line=line)
        cells = [c.strip() for c in row]
        stage = _int_field(cells[0], "stage", line)
        centre = _int_field(cells[1], "centre", line)
        arm = _int_field(cells[2], "arm", line)
        values = [_float_field(c, names[3 + i], line) for i, c in enumerate(cells[3:])]
        rows.append((stage, centre, arm, values[:-1], values[-1]))
        lines.append(line)
    if not rows:
        raise EmptyDataset("no data rows after the header")

    problems = []
    for line, (stage, centre, arm, a, y) in zip(lines, rows):
        if stage < 1:
            problems.append(f"line {line}: stage must be >= 1, got {stage}")
        if centre < 1:
            problems.append(f"line {line}: centre must be >= 1, got {centre}")
        if arm not in (0, 1):
            problems.append(f"line {line}: arm must be 0 or 1, got {arm}")
        if not all(math.isfinite(v) for v in a) or not math.isfinite(y):
            problems.append(f"line {line}: non-finite value")
        if arm == 0 and any(v != 0.0 for v in a):
            problems.append(f"line {line}: control row (arm=0) has nonzero intervention columns")
    present = {r[1] for r in rows if r[1] >= 1}
    if present:
        missing = sorted(set(range(1, max(present) + 1)) - present)
        if missing:
            problems.append(f"centre indices not contiguous: missing {missing}")
    if problems:
        raise SchemaError(problems)

    return TrialDataset(
        stage=[r[0] for r in rows],
        centre=[r[1] for r in rows],
        arm=[r[2] for r in rows],
        actual=np.array([r[3] for r in rows], dtype=float).reshape(-1, P),
        outcome=[r[4] for r in rows],
        P=P,
    )


def read_dataset(path: str | Path) -> TrialDataset:
    return parse_dataset(Path(path).read_text(encoding="utf-8"))


def dataset_to_csv(data: TrialDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(_LEADING) + [f"a{p}" for p in range(1, data.P + 1)] + ["y"])
    for i in range(data.n):
        w.writerow(
            [int(data.stage[i]), int(data.centre[i]), int(data.arm[i])]
            + [fmt_float(v) for v in data.actual[i]]
            + [fmt_float(data.outcome[i])]
        )
    return buf.getvalue()


def write_dataset(data: TrialDataset, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dataset_to_csv(data), encoding="utf-8")
    return path


# ------------------------------------------------------------------- config

def load_config(path: str | Path) -> dict[str, Any]:
    """Read a TOML document; dotted keys become nested tables."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ParseError(f"{path.name}: {exc}", line=line) from exc


_PROBLEM_KEYS = {
    "cost", "goal", "direction", "bounds", "weights", "lower_bound_policy",
    "include_eta", "level", "grid_resolution", "variance", "model",
}


def check_keys(config: Mapping[str, Any], allowed: Iterable[str]) -> None:
    unknown = sorted(set(config) - set(allowed))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")


def analysis_options(config: Mapping[str, Any]) -> dict[str, Any]:
    """Validated analysis settings with defaults filled in."""
    check_keys(config, _PROBLEM_KEYS)
    out = {
        "level": float(config.get("level", 0.95)),
        "grid_resolution": float(config.get("grid_resolution", 0.05)),
        "variance": str(config.get("variance", "hc0")),
        "weights": config.get("weights", "from_data"),
        "include_eta": bool(config.get("include_eta", True)),
    }
    if not 0.0 < out["level"] < 1.0:
        raise ConfigError("level", "must lie in (0, 1)")
    if out["grid_resolution"] <= 0:
        raise ConfigError("grid_resolution", "must be positive")
    if out["variance"] not in ("hc0", "centre_pooled"):
        raise ConfigError("variance", "must be hc0 or centre_pooled")
    if isinstance(out["weights"], str) and out["weights"] not in ("from_data", "equal"):
        raise ConfigError("weights", "must be from_data, equal or a list of J weights")
    return out


def has_problem(config: Mapping[str, Any]) -> bool:
    return "cost" in config or "goal" in config


def problem_fields(config: Mapping[str, Any]) -> dict[str, Any]:
    """Cost, goal, direction, bounds and lower-bound policy from a config."""
    from lago.simulation import cost_from_mapping

    for key in ("cost", "goal", "bounds"):
        if key not in config:
            raise ConfigError(key, "missing required key")
    try:
        goal = float(config["goal"])
    except (TypeError, ValueError):
        raise ConfigError("goal", "must be a number") from None
    direction = config.get("direction", "at_least")
    if direction not in ("at_least", "at_most"):
        raise ConfigError("direction", "must be at_least or at_most")
    policy = config.get("lower_bound_policy", "none")
    if policy not in ("none", "previous_recommendation"):
        raise ConfigError("lower_bound_policy", "must be none or previous_recommendation")
    try:
        bounds = np.asarray(config["bounds"], dtype=float).reshape(-1, 2)
    except (TypeError, ValueError):
        raise ConfigError("bounds", "must be a list of [lower, upper] pairs") from None
    return dict(
        cost=cost_from_mapping(config["cost"]), goal=goal, direction=direction,
        bounds=bounds, lower_bound_policy=policy,
    )


# ------------------------------------------------------------------ reports

def _encode(value: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, (np.integer,)):
        value = int(value)
    if isinstance(value, (np.floating,)):
        value = float(value)
    if isinstance(value, np.bool_):
        value = bool(value)
    if value is None or isinstance(value, bool):
        return json.dumps(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            return "null"
        text = fmt_float(value)
        return text if any(c in text for c in ".e") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, Mapping):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        if all(not isinstance(v, (Mapping, list, tuple, np.ndarray)) for v in value):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in value) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in value]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(value).__name__}")


def dumps_json(value: Any, indent: int = 2) -> str:
    """JSON with floats at 17 significant digits; NaN and infinities become null."""
    return _encode(value, indent, 0) + "\n"


def write_json(value: Any, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps_json(value), encoding="utf-8")
    return path


def read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path.name}: {exc.msg}", line=exc.lineno) from exc


def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v) if math.isfinite(v) else "nan"
    return str(v)


def write_rows_csv(rows: list[Mapping[str, Any]], path: str | Path) -> Path:
    """CSV with the union of keys as columns, in first-seen order."""
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) if c in row else "" for c in columns])
    return path


def write_replicates_csv(metrics, path: str | Path) -> Path:
    return write_rows_csv([m.flat() for m in metrics], path)


def write_set_csv(conf_set, path: str | Path) -> Path:
    P = conf_set.grid.shape[1]
    rows = [
        {**{f"x{p + 1}": x[p] for p in range(P)}, "in_set": int(flag)}
        for x, flag in zip(conf_set.grid, conf_set.mask)
    ]
    return write_rows_csv(rows, path)


def write_band_csv(band, path: str | Path) -> Path:
    P = band.grid.shape[1]
    rows = [
        {**{f"x{p + 1}": x[p] for p in range(P)}, "estimate": e, "lower": lo, "upper": hi}
        for x, e, lo, hi in zip(band.grid, band.estimate, band.lower, band.upper)
    ]
    return write_rows_csv(rows, path)


def write_metadata(path: str | Path, **info: Any) -> Path:
    """Sidecar with run-specific details such as timestamps."""
    from datetime import datetime, timezone

    from lago import __version__

    payload = {"created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
               "version": __version__, **info}
    return write_json(payload, path)
