import csv
import decimal
import json
from collections.abc import Iterable, Mapping, Sequence
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np

from . import exceptions
from .model import LinearProblem, make_synthetic_problem
from .solver import TrialRecord

PROBLEM_FORMAT = "modekaczmarz.problem/1"

CHECKPOINT_FIELDS = (
    "iteration",
    "sq_error",
    "residual_norm",
    "no_mode_count",
    "blocked_count",
    "wall_time",
    "objective",
    "ref_distance",
)


def fraction_to_decimal(value: Fraction, digits: int = 12) -> str:
    """Render an exact rational with ``digits`` significant digits."""

    try:
        ctx = decimal.Context(prec=digits)
        return str(ctx.divide(decimal.Decimal(value.numerator), decimal.Decimal(value.denominator)))
    except (decimal.InvalidOperation, AttributeError, TypeError) as e:
        raise exceptions.SerializationError(f"Cannot render {value!r} as a decimal: {e}") from e


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Fraction):
        return fraction_to_decimal(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: str | Path, fieldnames: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(fieldnames), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({key: format_cell(row.get(key)) for key in fieldnames})
    except (OSError, ValueError) as e:
        raise exceptions.SerializationError(f"Failed to write {path}: {e}") from e
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    try:
        with path.open(newline="") as handle:
            return list(csv.DictReader(handle))
    except (OSError, csv.Error) as e:
        raise exceptions.SerializationError(f"Failed to read {path}: {e}") from e


def _json_default(value: Any) -> Any:
    if isinstance(value, Fraction):
        return fraction_to_decimal(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def dumps(payload: Any) -> str:
    try:
        return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"
    except (TypeError, ValueError) as e:
        raise exceptions.SerializationError(f"Failed to encode JSON: {e}") from e


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    text = dumps(payload)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise exceptions.SerializationError(f"Failed to write {path}: {e}") from e
    return path


def read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise exceptions.SerializationError(f"Failed to read {path}: {e}") from e


def problem_to_dict(problem: LinearProblem, config: Mapping[str, Any] | None = None, include_data: bool = False) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "format": PROBLEM_FORMAT,
        "d1": problem.d1,
        "d2": problem.d2,
        "seed": problem.seed,
        "source": problem.source,
        "frob_sq": problem.frob_sq,
        "sigma_min_tilde": problem.sigma_min_tilde,
        "config": dict(config or {}),
    }
    if include_data:
        payload["A"] = problem.A.tolist()
        payload["b"] = problem.b.tolist()
        payload["x_star"] = problem.x_star.tolist() if problem.x_star is not None else None
    return payload


def problem_from_dict(payload: Mapping[str, Any]) -> LinearProblem:
    if payload.get("format") != PROBLEM_FORMAT:
        raise exceptions.SerializationError(f"Unsupported problem format {payload.get('format')!r}")
    try:
        if "A" in payload:
            return LinearProblem.from_arrays(
                payload["A"], payload["b"], payload.get("x_star"), seed=payload.get("seed"), source=payload.get("source", "json")
            )
        if str(payload.get("source", "")).startswith("synthetic:"):
            return make_synthetic_problem(int(payload["d1"]), int(payload["d2"]), int(payload["seed"]))
    except (KeyError, TypeError, ValueError) as e:
        raise exceptions.SerializationError(f"Malformed problem snapshot: {e}") from e
    raise exceptions.SerializationError("Snapshot holds no matrix and does not describe a synthetic problem")


def checkpoint_rows(record: TrialRecord, extra: Mapping[str, Any] | None = None) -> list[dict[str, Any]]:
    base = dict(extra or {})
    base.setdefault("seed", record.seed)
    base.setdefault("status", record.status)
    rows = []
    for cp in record.checkpoints:
        row = dict(base)
        row.update({name: getattr(cp, name) for name in CHECKPOINT_FIELDS})
        rows.append(row)
    return rows


def trial_summary(record: TrialRecord, extra: Mapping[str, Any] | None = None) -> dict[str, Any]:
    final = record.final
    return {
        **dict(extra or {}),
        "method": record.method,
        "seed": record.seed,
        "status": record.status,
        "iterations": record.iterations,
        "final_sq_error": final.sq_error,
        "final_residual_norm": final.residual_norm,
        "no_mode_total": record.no_mode_total,
        "blocklist_accuracy": record.blocklist_accuracy,
        "block_list": [{"worker": w, "category": c} for w, c in record.block_audit],
    }
