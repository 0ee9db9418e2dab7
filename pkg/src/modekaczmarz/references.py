"""Stored reference tables and cell-by-cell comparison against computed results."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass
from functools import cache
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from . import exceptions, serialization

logger = logging.getLogger(__name__)

CELL_FIELDS = ("row", "column", "value")


@dataclass(frozen=True)
class CellResult:
    row: str
    column: str
    expected: float
    actual: float | None
    delta: float | None
    tolerance: float
    relative: bool
    passed: bool
    reproducible: bool = True
    note: str = ""


@dataclass(frozen=True)
class ComparisonReport:
    table: str
    cells: tuple[CellResult, ...]

    @property
    def passed(self) -> bool:
        return bool(self.cells) and all(cell.passed for cell in self.cells)

    @property
    def failures(self) -> list[CellResult]:
        return [cell for cell in self.cells if not cell.passed]

    def as_dict(self) -> dict[str, Any]:
        return {
            "table": self.table,
            "passed": self.passed,
            "cells": [asdict(cell) for cell in self.cells],
        }


@cache
def load_references() -> dict[str, Any]:
    try:
        text = resources.files(__package__).joinpath("data/references.yml").read_text()
        return yaml.safe_load(text)
    except (OSError, yaml.YAMLError) as e:
        raise exceptions.SerializationError(f"Reference data unreadable: {e}") from e


def table_ids() -> list[str]:
    return sorted(key for key in load_references() if key.startswith("table"))


def reference_table(table_id: str) -> Mapping[str, Any]:
    tables = load_references()
    if table_id not in tables or not table_id.startswith("table"):
        raise exceptions.UnknownReferenceTableError(f"Unknown reference table {table_id!r}; known: {', '.join(table_ids())}")
    return tables[table_id]


def _collect(results: str | Path | Iterable[Mapping[str, Any]] | Mapping[tuple[str, str], float]) -> dict[tuple[str, str], float]:
    if isinstance(results, Mapping):
        return {(str(r), str(c)): float(v) for (r, c), v in results.items()}
    rows = serialization.read_csv(results) if isinstance(results, (str, Path)) else list(results)
    cells: dict[tuple[str, str], float] = {}
    for i, row in enumerate(rows):
        try:
            value = row["value"]
            if value in ("", None):
                continue
            cells[(str(row["row"]), str(row["column"]))] = float(value)
        except (KeyError, ValueError) as e:
            raise exceptions.SerializationError(f"Result row {i + 1} is not a (row, column, value) cell: {e}") from e
    return cells


def compare_to_reference(
    results: str | Path | Iterable[Mapping[str, Any]] | Mapping[tuple[str, str], float],
    table_id: str,
    rows: Sequence[str] | None = None,
) -> ComparisonReport:
    """Per-cell verdicts; a cell with no computed value fails with ``no data``."""

    table = reference_table(table_id)
    actual = _collect(results)
    selected = rows if rows is not None else list(table["rows"])
    cells = []
    for row_key in selected:
        if row_key not in table["rows"]:
            raise exceptions.UnknownReferenceTableError(f"{table_id} has no row {row_key!r}")
        for column, spec in table["rows"][row_key].items():
            expected = float(spec.get("erratum", spec["value"]))
            relative = "rel" in spec
            tolerance = float(spec["rel"] if relative else spec["tol"])
            note = spec.get("note", "")
            value = actual.get((row_key, column))
            if value is None or math.isnan(value):
                cells.append(CellResult(row_key, column, expected, None, None, tolerance, relative, False, spec.get("reproducible", True), "no data"))
                continue
            delta = value - expected
            scale = abs(expected) if relative else 1.0
            passed = abs(delta) <= tolerance * scale
            cells.append(
                CellResult(row_key, column, expected, value, delta, tolerance, relative, passed, spec.get("reproducible", True), note)
            )
    report = ComparisonReport(table=table_id, cells=tuple(cells))
    logger.info("%s: %d/%d cells within tolerance", table_id, len(cells) - len(report.failures), len(cells))
    return report
