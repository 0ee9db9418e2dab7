"""Residual grouping, mode selection and row selection for one iteration of the central worker."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np

from . import exceptions
from .model import RELIABLE, LinearProblem, WorkerPopulation

DEFAULT_GROUP_TOL = 1e-9


class RowStrategy(str, Enum):
    MAX_RESIDUAL = "max_residual"
    MAX_MODE_SIZE = "max_mode_size"


@dataclass(frozen=True, slots=True)
class ReturnedResidual:
    worker_id: int
    row: int
    value: float
    # Only evaluation code may look at this.
    true_category: int = RELIABLE


@dataclass(frozen=True, slots=True)
class Group:
    representative: float
    members: tuple[int, ...]
    values: tuple[float, ...]
    categories: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def dominant_category(self) -> int:
        return max(set(self.categories), key=self.categories.count)


@dataclass(frozen=True, slots=True)
class ModeOutcome:
    groups: tuple[Group, ...]
    chosen: int | None
    threshold: int
    row: int | None = None

    @property
    def has_mode(self) -> bool:
        return self.chosen is not None

    @property
    def chosen_group(self) -> Group | None:
        return None if self.chosen is None else self.groups[self.chosen]

    @property
    def mode_size(self) -> int | None:
        group = self.chosen_group
        return None if group is None else group.size

    @property
    def value(self) -> float | None:
        group = self.chosen_group
        return None if group is None else group.representative


@dataclass(frozen=True, slots=True)
class RowSelection:
    row: int
    step: float
    mode_size: int


def collect_returns(
    problem: LinearProblem,
    population: WorkerPopulation,
    e_table: np.ndarray,
    row: int,
    workers: Sequence[int] | np.ndarray,
    x: np.ndarray,
) -> list[ReturnedResidual]:
    """Normalized residuals ``(b_r + e - <A_r, x>) / |A_r|^2`` as each sampled worker would send them."""

    workers = np.asarray(workers)
    base = problem.b[row] - problem.A[row] @ x
    cats = population.categories[workers]
    errors = np.where(cats > RELIABLE, e_table[row, np.maximum(cats - 1, 0)] if e_table.shape[1] else 0.0, 0.0)
    values = (base + errors) / problem.row_norms_sq[row]
    return [
        ReturnedResidual(worker_id=int(w), row=row, value=float(v), true_category=int(c))
        for w, v, c in zip(workers, values, cats, strict=True)
    ]


def group_residuals(returns: Sequence[ReturnedResidual], group_tol: float = DEFAULT_GROUP_TOL) -> list[Group]:
    """Sort-and-scan clustering.

    A group is anchored at its smallest value and absorbs the following values
    while they stay within ``group_tol * max(1, |anchor|)`` of the anchor, so
    every pair inside a group respects that tolerance. The representative is
    the lower median member value.
    """

    if not returns:
        raise exceptions.InvalidOptionsError("Cannot group an empty set of returns")
    if len({r.row for r in returns}) != 1:
        raise exceptions.InvalidOptionsError("All returns of a group call must come from the same row")

    ordered = sorted(returns, key=lambda r: (r.value, r.worker_id))
    buckets: list[list[ReturnedResidual]] = [[ordered[0]]]
    anchor = ordered[0].value
    for item in ordered[1:]:
        if item.value - anchor > group_tol * max(1.0, abs(anchor)):
            buckets.append([item])
            anchor = item.value
        else:
            buckets[-1].append(item)

    groups = []
    for bucket in buckets:
        values = tuple(r.value for r in bucket)
        groups.append(
            Group(
                representative=values[(len(values) - 1) // 2],
                members=tuple(r.worker_id for r in bucket),
                values=values,
                categories=tuple(r.true_category for r in bucket),
            )
        )
    return groups


def mode_threshold(n_r: int, p_r0: Fraction) -> int:
    return math.ceil(n_r * Fraction(p_r0))


def select_mode(
    groups: Sequence[Group],
    n_r: int,
    p_r0: Fraction,
    rng: np.random.Generator,
    row: int | None = None,
) -> ModeOutcome:
    if sum(g.size for g in groups) != n_r:
        raise exceptions.InvalidOptionsError(f"Groups hold {sum(g.size for g in groups)} returns, expected {n_r}")

    threshold = mode_threshold(n_r, p_r0)
    qualifying = [i for i, g in enumerate(groups) if g.size >= threshold]
    chosen: int | None = None
    if qualifying:
        best = max(groups[i].size for i in qualifying)
        ties = [i for i in qualifying if groups[i].size == best]
        chosen = ties[0] if len(ties) == 1 else ties[int(rng.integers(len(ties)))]
    return ModeOutcome(groups=tuple(groups), chosen=chosen, threshold=threshold, row=row)


def aggregate(
    returns: Sequence[ReturnedResidual],
    n_r: int,
    p_r0: Fraction,
    rng: np.random.Generator,
    group_tol: float = DEFAULT_GROUP_TOL,
) -> ModeOutcome:
    return select_mode(group_residuals(returns, group_tol), n_r, p_r0, rng, row=returns[0].row)


def select_row(
    outcomes: Mapping[int, ModeOutcome],
    strategy: RowStrategy = RowStrategy.MAX_RESIDUAL,
    rng: np.random.Generator | None = None,
) -> RowSelection | None:
    """Pick the row to project on among rows with a mode; ``None`` when no row has one."""

    candidates = [(row, out) for row, out in outcomes.items() if out.has_mode]
    if not candidates:
        return None

    strategy = RowStrategy(strategy)
    if strategy is RowStrategy.MAX_RESIDUAL:
        keys = [abs(out.value) for _, out in candidates]
    else:
        keys = [(out.mode_size, abs(out.value)) for _, out in candidates]
    best = max(keys)
    ties = [i for i, key in enumerate(keys) if key == best]
    if len(ties) > 1 and rng is not None:
        pick = ties[int(rng.integers(len(ties)))]
    else:
        pick = ties[0]
    row, out = candidates[pick]
    return RowSelection(row=int(row), step=float(out.value), mode_size=int(out.mode_size))
