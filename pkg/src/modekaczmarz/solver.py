"""Iterative engines: classical RK, mode-aggregated multi-row RK, single-row variant and l1 extension."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Literal

import numpy as np

from . import exceptions
from .aggregation import DEFAULT_GROUP_TOL, RowStrategy, aggregate, collect_returns, select_row
from .model import (
    RELIABLE,
    AdversaryConfig,
    LinearProblem,
    WorkerPopulation,
    sample_norm_weighted_row,
    sample_rows,
    sample_workers,
    spawn_streams,
)

logger = logging.getLogger(__name__)

Status = Literal["converged", "max_iter", "diverged"]


class Variant(str, Enum):
    MULTI_ROW_UNIFORM = "multi_row"
    SINGLE_ROW_NORM_WEIGHTED = "single_row"


@dataclass(frozen=True)
class SolveOptions:
    d0: int = 1
    max_iter: int = 30_000
    tol: float = 1e-12
    blocklist_enabled: bool = False
    update_cycle: int | None = None
    strategy: RowStrategy = RowStrategy.MAX_RESIDUAL
    group_tol: float = DEFAULT_GROUP_TOL
    variant: Variant = Variant.MULTI_ROW_UNIFORM
    l1_gamma: float | None = None
    l1_step: float = 1.0
    x0: tuple[float, ...] | None = None
    checkpoints: tuple[int, ...] | None = None
    instrument: bool = False

    def validate(self, d1: int) -> SolveOptions:
        if not 1 <= self.d0 <= d1:
            raise exceptions.InvalidOptionsError(f"d0 must lie in [1, {d1}], got {self.d0}")
        if self.max_iter < 0:
            raise exceptions.InvalidOptionsError(f"max_iter must be >= 0, got {self.max_iter}")
        if not self.tol > 0:
            raise exceptions.InvalidOptionsError(f"tol must be > 0, got {self.tol}")
        if self.blocklist_enabled and (self.update_cycle is None or self.update_cycle < 1):
            raise exceptions.InvalidOptionsError("A block-list needs an update cycle S >= 1")
        if self.update_cycle is not None and self.update_cycle < 1:
            raise exceptions.InvalidOptionsError(f"update_cycle must be >= 1, got {self.update_cycle}")
        if not self.group_tol > 0:
            raise exceptions.InvalidOptionsError(f"group_tol must be > 0, got {self.group_tol}")
        if self.l1_gamma is not None and self.l1_gamma < 0:
            raise exceptions.InvalidOptionsError(f"l1_gamma must be >= 0, got {self.l1_gamma}")
        if not self.l1_step > 0:
            raise exceptions.InvalidOptionsError(f"l1_step must be > 0, got {self.l1_step}")
        return replace(self, strategy=RowStrategy(self.strategy), variant=Variant(self.variant))


@dataclass(frozen=True, slots=True)
class Checkpoint:
    iteration: int
    sq_error: float
    residual_norm: float
    no_mode_count: int
    blocked_count: int
    wall_time: float
    objective: float | None = None
    ref_distance: float | None = None


@dataclass(frozen=True, slots=True)
class StepTrace:
    iteration: int
    row: int
    step: float
    category: int
    true_error: float
    projection: float
    before_sq: float
    after_sq: float


@dataclass
class TrialRecord:
    method: str
    seed: int
    status: Status
    iterations: int
    checkpoints: list[Checkpoint]
    x: np.ndarray = field(repr=False)
    no_mode_total: int = 0
    block_audit: list[tuple[int, int]] = field(default_factory=list)
    blocklist_accuracy: float | None = None
    traces: list[StepTrace] = field(default_factory=list, repr=False)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    @property
    def final_sq_error(self) -> float:
        return self.final.sq_error

    def checkpoint_at(self, iteration: int) -> Checkpoint:
        """Last checkpoint not after ``iteration``; a run that stopped early keeps its final state."""

        best = self.checkpoints[0]
        for cp in self.checkpoints:
            if cp.iteration > iteration:
                break
            best = cp
        return best

    def error_at(self, iteration: int) -> float:
        return self.checkpoint_at(iteration).sq_error


@dataclass(frozen=True, slots=True)
class _Proposal:
    row: int
    step: float
    category: int


def geometric_checkpoints(max_iter: int, dense_until: int = 100, growth: float = 1.2) -> tuple[int, ...]:
    """Every iteration up to ``dense_until`` then geometric spacing; always ends at ``max_iter``."""

    points = list(range(min(dense_until, max_iter) + 1))
    current = points[-1]
    while current < max_iter:
        current = min(max_iter, max(current + 1, int(current * growth)))
        points.append(current)
    return tuple(points)


def soft_threshold(x: np.ndarray, threshold: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def l1_objective(problem: LinearProblem, x: np.ndarray, gamma: float) -> float:
    r = problem.A @ x - problem.b
    return float(0.5 * (r @ r) + gamma * np.abs(x).sum())


def _initial_iterate(problem: LinearProblem, opts: SolveOptions) -> np.ndarray:
    if opts.x0 is None:
        return np.zeros(problem.d2)
    x0 = np.array(opts.x0, dtype=float)
    if x0.shape != (problem.d2,):
        raise exceptions.InvalidOptionsError(f"x0 must have {problem.d2} entries, got {x0.shape}")
    return x0


def _run(
    problem: LinearProblem,
    method: str,
    seed: int,
    opts: SolveOptions,
    propose: Callable[[int, np.ndarray], _Proposal | None],
    population: WorkerPopulation | None = None,
    e_table: np.ndarray | None = None,
    reference: np.ndarray | None = None,
) -> TrialRecord:
    x = _initial_iterate(problem, opts)
    wanted = set(opts.checkpoints if opts.checkpoints is not None else geometric_checkpoints(opts.max_iter))
    gamma = opts.l1_gamma
    eta = opts.l1_step if gamma is not None else 1.0
    shrink = eta * gamma / problem.d1 if gamma else 0.0
    ref_norm = float(np.linalg.norm(reference)) if reference is not None else None

    checkpoints: list[Checkpoint] = []
    traces: list[StepTrace] = []
    no_mode = 0
    last_row: int | None = None
    started = time.perf_counter()

    def snapshot(iteration: int) -> None:
        objective = l1_objective(problem, x, gamma) if gamma is not None else None
        ref_distance = None
        if reference is not None:
            ref_distance = float(np.linalg.norm(x - reference) / (ref_norm or 1.0))
        checkpoints.append(
            Checkpoint(
                iteration=iteration,
                sq_error=problem.squared_error(x) if problem.x_star is not None else float("nan"),
                residual_norm=problem.residual_norm(x),
                no_mode_count=no_mode,
                blocked_count=len(population.block_order) if population is not None else 0,
                wall_time=time.perf_counter() - started,
                objective=objective,
                ref_distance=ref_distance,
            )
        )

    snapshot(0)
    status: Status = "max_iter"
    j = 0
    while j < opts.max_iter:
        proposal = propose(j, x)
        j += 1
        if proposal is None:
            no_mode += 1
        else:
            row = proposal.row
            # the row projected last has a zero residual, its step says nothing about convergence
            fresh = row != last_row
            if opts.instrument:
                y = x - problem.x_star
                norm = float(np.sqrt(problem.row_norms_sq[row]))
                projection = float(problem.A[row] @ y) / norm
                before = float(y @ y)
            x = x + (eta * proposal.step) * problem.A[row]
            if shrink:
                x = soft_threshold(x, shrink)
            if opts.instrument:
                err = 0.0
                if proposal.category != RELIABLE and e_table is not None:
                    err = float(e_table[row, proposal.category - 1]) / norm
                y = x - problem.x_star
                traces.append(StepTrace(j, row, proposal.step, proposal.category, err, projection, before, float(y @ y)))
            if not np.all(np.isfinite(x)):
                status = "diverged"
                logger.warning("%s seed=%d diverged at iteration %d", method, seed, j)
                break
            last_row = row
            if fresh and abs(proposal.step) <= opts.tol:
                status = "converged"
                break
        if j in wanted:
            snapshot(j)

    if not checkpoints or checkpoints[-1].iteration != j:
        snapshot(j)

    record = TrialRecord(
        method=method,
        seed=seed,
        status=status,
        iterations=j,
        checkpoints=checkpoints,
        x=x,
        no_mode_total=no_mode,
        traces=traces,
    )
    if population is not None:
        record.block_audit = population.blocked_audit()
        record.blocklist_accuracy = population.blocklist_accuracy()
    logger.debug("%s seed=%d finished: %s after %d iterations", method, seed, status, j)
    return record


def rk_baseline(
    problem: LinearProblem,
    seed: int,
    max_iter: int = 30_000,
    tol: float = 1e-12,
    x0: Sequence[float] | None = None,
    checkpoints: Sequence[int] | None = None,
    instrument: bool = False,
) -> TrialRecord:
    """Classical randomized Kaczmarz with norm-weighted rows and exact residuals."""

    opts = SolveOptions(
        max_iter=max_iter,
        tol=tol,
        x0=tuple(x0) if x0 is not None else None,
        checkpoints=tuple(checkpoints) if checkpoints is not None else None,
        instrument=instrument,
    ).validate(problem.d1)
    streams = spawn_streams(seed)

    def propose(_: int, x: np.ndarray) -> _Proposal:
        row = sample_norm_weighted_row(problem, streams.rows)
        return _Proposal(row, float((problem.b[row] - problem.A[row] @ x) / problem.row_norms_sq[row]), RELIABLE)

    return _run(problem, "baseline", seed, opts, propose)


def _check_adversary(problem: LinearProblem, adversary: AdversaryConfig) -> None:
    if adversary.d1 != problem.d1:
        raise exceptions.InvalidAdversaryError(f"Adversary covers {adversary.d1} rows, problem has {problem.d1}")


def _mode_engine(
    problem: LinearProblem,
    adversary: AdversaryConfig,
    opts: SolveOptions,
    seed: int,
) -> tuple[Callable[[int, np.ndarray], _Proposal | None], WorkerPopulation]:
    _check_adversary(problem, adversary)
    streams = spawn_streams(seed)
    population = WorkerPopulation.build(adversary)
    p0: list[Fraction] = [adversary.p0(r) for r in range(adversary.d1)]
    n = adversary.n.tolist()
    e_table = adversary.e_table

    def propose(j: int, x: np.ndarray) -> _Proposal | None:
        tau = sample_rows(problem.d1, opts.d0, streams.rows)
        outcomes = {}
        for r in tau.tolist():
            workers = sample_workers(population, r, n[r], streams.workers)
            returns = collect_returns(problem, population, e_table, r, workers, x)
            outcome = aggregate(returns, n[r], p0[r], streams.ties, opts.group_tol)
            population.record_outcome(outcome)
            outcomes[r] = outcome
        selection = select_row(outcomes, opts.strategy, streams.ties)
        if opts.blocklist_enabled and (j + 1) % opts.update_cycle == 0:
            for r in tau.tolist():
                population.block_worst(r, streams.ties)
        if selection is None:
            return None
        return _Proposal(selection.row, selection.step, outcomes[selection.row].chosen_group.dominant_category)

    return propose, population


def solve_mode_kaczmarz(
    problem: LinearProblem,
    adversary: AdversaryConfig,
    opts: SolveOptions,
    seed: int,
) -> TrialRecord:
    opts = opts.validate(problem.d1)
    if opts.variant is Variant.SINGLE_ROW_NORM_WEIGHTED:
        return solve_single_row(problem, adversary, opts, seed)
    propose, population = _mode_engine(problem, adversary, replace(opts, l1_gamma=None), seed)
    return _run(problem, "mode", seed, replace(opts, l1_gamma=None), propose, population, adversary.e_table)


def solve_single_row(
    problem: LinearProblem,
    adversary: AdversaryConfig,
    opts: SolveOptions,
    seed: int,
) -> TrialRecord:
    """One norm-weighted row per iteration, all rows served by the same pool of ``N`` workers."""

    opts = replace(opts.validate(problem.d1), d0=1)
    _check_adversary(problem, adversary)
    streams = spawn_streams(seed)
    population = WorkerPopulation.build(adversary, shared=True)
    p0 = adversary.p0(0)
    n = int(adversary.n[0])
    e_table = adversary.e_table

    def propose(j: int, x: np.ndarray) -> _Proposal | None:
        row = sample_norm_weighted_row(problem, streams.rows)
        workers = sample_workers(population, row, n, streams.workers)
        outcome = aggregate(collect_returns(problem, population, e_table, row, workers, x), n, p0, streams.ties, opts.group_tol)
        population.record_outcome(outcome)
        if opts.blocklist_enabled and (j + 1) % opts.update_cycle == 0:
            population.block_worst(row, streams.ties)
        if not outcome.has_mode:
            return None
        return _Proposal(row, outcome.value, outcome.chosen_group.dominant_category)

    return _run(problem, "single_row", seed, replace(opts, l1_gamma=None), propose, population, e_table)


def solve_l1(
    problem: LinearProblem,
    adversary: AdversaryConfig,
    opts: SolveOptions,
    seed: int,
    reference: np.ndarray | None = None,
) -> TrialRecord:
    """Mode-aggregated step followed by soft-thresholding at ``l1_step * l1_gamma / d1``.

    Tracks ``0.5 |Ax - b|^2 + gamma |x|_1`` and, when given, the relative
    distance to ``reference``.
    """

    if opts.l1_gamma is None:
        raise exceptions.InvalidOptionsError("solve_l1 needs l1_gamma")
    opts = opts.validate(problem.d1)
    propose, population = _mode_engine(problem, adversary, opts, seed)
    return _run(problem, "l1", seed, opts, propose, population, adversary.e_table, reference)


def lasso_reference(
    problem: LinearProblem,
    gamma: float,
    max_iter: int = 20_000,
    tol: float = 1e-13,
) -> np.ndarray:
    """Full-gradient FISTA minimizer of ``0.5 |Ax - b|^2 + gamma |x|_1``."""

    if gamma < 0:
        raise exceptions.InvalidOptionsError(f"gamma must be >= 0, got {gamma}")
    A, b = problem.A, problem.b
    lipschitz = float(np.linalg.norm(A, 2) ** 2)
    step = 1.0 / lipschitz
    x = np.zeros(problem.d2)
    z = x.copy()
    t = 1.0
    for _ in range(max_iter):
        x_next = soft_threshold(z - step * (A.T @ (A @ z - b)), step * gamma)
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        z = x_next + ((t - 1.0) / t_next) * (x_next - x)
        if np.linalg.norm(x_next - x) <= tol * max(1.0, float(np.linalg.norm(x))):
            return x_next
        x, t = x_next, t_next
    logger.warning("lasso_reference stopped after %d iterations without reaching tol", max_iter)
    return x
