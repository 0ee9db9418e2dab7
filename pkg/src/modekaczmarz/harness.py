"""Experiment orchestration: sweeps, seeded trials, aggregation and artifacts."""

from __future__ import annotations

import logging
import platform
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np
from joblib import Parallel, delayed

from . import __version__, exceptions, serialization
from .analysis import CategoryCounts, G0Rule, mode_distribution, scan_d0, theorem_constants
from .blocklist import BlocklistExperiment, estimate_blocklist_probs
from .config import ExperimentConfig, ProblemSource, SweepPoint, load_config
from .model import AdversaryConfig, LinearProblem, derive_seed, load_csv_problem, make_synthetic_problem
from .references import CELL_FIELDS, ComparisonReport, compare_to_reference, reference_table
from .solver import SolveOptions, TrialRecord, geometric_checkpoints, lasso_reference, rk_baseline, solve_l1, solve_mode_kaczmarz, solve_single_row

logger = logging.getLogger(__name__)

MAX_RESAMPLES = 1_000

POINT_FIELDS = ("d0", "n", "p", "k", "S")
TRIAL_FIELDS = (*POINT_FIELDS, "trial", "seed", "status", "iteration", "sq_error", "residual_norm",
                "no_mode_count", "blocked_count", "objective", "ref_distance")
AGGREGATE_FIELDS = (*POINT_FIELDS, "iteration", "mean", "p05", "p95", "count")


class ErrorRule(str, Enum):
    FIXED_MAGNITUDE = "fixed_magnitude"
    UNIFORM_SCALED = "uniform_scaled"


def error_model(
    rule: ErrorRule | str,
    e_inf: float,
    k: int,
    seed: int,
    d1: int = 1,
    group_tol: float = 1e-9,
) -> np.ndarray:
    """Category error table of shape ``(d1, k)`` with ``max |e| = e_inf``.

    ``fixed_magnitude`` uses ``e_inf * l / k`` with alternating signs on every
    row; ``uniform_scaled`` draws i.i.d. values in ``[-e_inf, e_inf]`` per row
    and redraws a row until its values are apart from each other and from 0 by
    more than ``10 * group_tol * max(1, e_inf)``.
    """

    if not e_inf > 0:
        raise exceptions.InvalidAdversaryError(f"e_inf must be > 0, got {e_inf}; a zero error collides with reliable workers")
    if k < 1:
        raise exceptions.InvalidAdversaryError(f"An error table needs k >= 1, got {k}")
    rule = ErrorRule(rule)
    if rule is ErrorRule.FIXED_MAGNITUDE:
        row = np.array([e_inf * ell / k * (1 if ell % 2 else -1) for ell in range(1, k + 1)])
        return np.tile(row, (d1, 1))

    rng = np.random.default_rng(seed)
    gap = 10 * group_tol * max(1.0, e_inf)
    table = np.empty((d1, k))
    for r in range(d1):
        for _ in range(MAX_RESAMPLES):
            draw = rng.uniform(-e_inf, e_inf, size=k)
            values = np.sort(np.append(draw, 0.0))
            if np.all(np.diff(values) > gap):
                table[r] = draw
                break
        else:
            raise exceptions.InvalidAdversaryError(f"Could not separate {k} categories within e_inf={e_inf}")
    return table


def build_problem(source: ProblemSource) -> LinearProblem:
    if source.kind == "synthetic":
        return make_synthetic_problem(source.d1, source.d2, source.seed)
    return load_csv_problem(source.path, normalize=source.normalize, seed=source.seed, usecols=source.usecols)


def build_adversary(config: ExperimentConfig, point: SweepPoint, d1: int) -> AdversaryConfig:
    spec = config.adversary
    e_table = None
    if point.k > 0:
        e_table = error_model(spec.error.rule, spec.error.e_inf, point.k, derive_seed(config.seed, 0xE), d1, config.solver.group_tol)
    return AdversaryConfig.homogeneous(d1, spec.N, point.n, point.k, point.p, e_table, split=spec.split)


def solve_options(config: ExperimentConfig, point: SweepPoint) -> SolveOptions:
    sol = config.solver
    return SolveOptions(
        d0=point.d0,
        max_iter=sol.max_iter,
        tol=sol.tol,
        blocklist_enabled=sol.blocklist,
        update_cycle=point.S,
        strategy=sol.strategy,
        group_tol=sol.group_tol,
        l1_gamma=sol.l1_gamma,
        l1_step=sol.l1_step,
        checkpoints=config.checkpoints,
    )


@dataclass
class TrialOutcome:
    point: SweepPoint
    trial: int
    seed: int
    record: TrialRecord | None
    error: str | None = None

    @property
    def status(self) -> str:
        return self.record.status if self.record is not None else "failed"

    @property
    def failed(self) -> bool:
        """No record, or a diverged one whose errors are not finite."""

        return self.record is None or self.record.status == "diverged"


def run_trial(
    method: str,
    problem: LinearProblem,
    adversary: AdversaryConfig,
    opts: SolveOptions,
    point: SweepPoint,
    trial: int,
    seed: int,
    reference: np.ndarray | None = None,
) -> TrialOutcome:
    try:
        if method == "baseline":
            record = rk_baseline(problem, seed, opts.max_iter, opts.tol, checkpoints=opts.checkpoints)
        elif method == "single_row":
            record = solve_single_row(problem, adversary, opts, seed)
        elif method == "l1":
            record = solve_l1(problem, adversary, opts, seed, reference)
        else:
            record = solve_mode_kaczmarz(problem, adversary, opts, seed)
    except exceptions.ModeKaczmarzError as e:
        logger.warning("%s trial %d failed: %s", point.key, trial, e)
        return TrialOutcome(point, trial, seed, None, str(e))
    if record.status == "diverged":
        logger.warning("%s trial %d diverged", point.key, trial)
    return TrialOutcome(point, trial, seed, record)


@dataclass(frozen=True)
class AggregateRow:
    point: SweepPoint
    iteration: int
    mean: float
    p05: float
    p95: float
    count: int

    def as_dict(self) -> dict[str, Any]:
        return {**self.point.as_dict(), "iteration": self.iteration, "mean": self.mean, "p05": self.p05, "p95": self.p95, "count": self.count}


def aggregate_trials(outcomes: Sequence[TrialOutcome], grid: Sequence[int]) -> list[AggregateRow]:
    """Mean and 5th/95th percentiles of the squared error per sweep point and grid iteration.

    Failed and diverged trials are left out; ``count`` says how many records remain.
    """

    by_point: dict[SweepPoint, list[TrialRecord]] = {}
    for outcome in outcomes:
        by_point.setdefault(outcome.point, [])
        if not outcome.failed:
            by_point[outcome.point].append(outcome.record)

    rows = []
    for point, records in by_point.items():
        for iteration in grid:
            values = np.array([r.checkpoint_at(iteration).sq_error for r in records])
            if values.size == 0:
                rows.append(AggregateRow(point, iteration, float("nan"), float("nan"), float("nan"), 0))
                continue
            p05, p95 = np.percentile(values, [5, 95])
            rows.append(AggregateRow(point, iteration, float(values.mean()), float(p05), float(p95), int(values.size)))
    return rows


def _trial_rows(outcome: TrialOutcome, grid: Sequence[int]) -> list[dict[str, Any]]:
    base = {**outcome.point.as_dict(), "trial": outcome.trial, "seed": outcome.seed, "status": outcome.status}
    if outcome.record is None:
        return [base]
    rows = []
    for iteration in grid:
        cp = outcome.record.checkpoint_at(iteration)
        rows.append(
            {
                **base,
                "iteration": iteration,
                "sq_error": cp.sq_error,
                "residual_norm": cp.residual_norm,
                "no_mode_count": cp.no_mode_count,
                "blocked_count": cp.blocked_count,
                "objective": cp.objective,
                "ref_distance": cp.ref_distance,
            }
        )
    return rows


def _versions() -> dict[str, str]:
    versions = {"modekaczmarz": __version__, "python": platform.python_version()}
    for package in ("numpy", "joblib", "PyYAML", "click", "matplotlib"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "absent"
    return versions


def table6_cells(outcomes: Sequence[TrialOutcome]) -> list[dict[str, Any]]:
    accuracies: dict[tuple[str, str], list[float]] = {}
    for outcome in outcomes:
        if outcome.record is None or outcome.record.blocklist_accuracy is None:
            continue
        key = (f"p={outcome.point.p:g},d0={outcome.point.d0}", f"S={outcome.point.S}")
        accuracies.setdefault(key, []).append(outcome.record.blocklist_accuracy)
    return [{"row": r, "column": c, "value": float(np.mean(v))} for (r, c), v in sorted(accuracies.items())]


@dataclass
class ExperimentResult:
    output: Path
    outcomes: list[TrialOutcome]
    aggregates: list[AggregateRow]
    comparison: ComparisonReport | None = None

    @property
    def failed(self) -> int:
        return sum(1 for o in self.outcomes if o.failed)


def run_experiment(config: ExperimentConfig | str | Path) -> ExperimentResult:
    """Run every sweep point ``trials`` times and write the artifacts under ``config.output``."""

    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    output = Path(config.output)
    problem = build_problem(config.problem)
    points = config.sweep()
    grid = config.checkpoints or geometric_checkpoints(config.solver.max_iter)
    logger.info("Experiment %s: %d sweep point(s) x %d trial(s) on %s", config.name, len(points), config.trials, problem.source)

    reference = None
    if config.method == "l1":
        reference = lasso_reference(problem, config.solver.l1_gamma)

    jobs = []
    seeds: dict[str, list[int]] = {}
    for index, point in enumerate(points):
        opts = solve_options(config, point).validate(problem.d1)
        adversary = build_adversary(config, point, problem.d1)
        point_seeds = [derive_seed(config.seed, index, trial) for trial in range(config.trials)]
        seeds[point.key] = point_seeds
        jobs.extend(
            delayed(run_trial)(config.method, problem, adversary, opts, point, trial, seed, reference)
            for trial, seed in enumerate(point_seeds)
        )
    outcomes: list[TrialOutcome] = Parallel(n_jobs=config.n_jobs)(jobs)

    aggregates = aggregate_trials(outcomes, grid)
    serialization.write_csv(output / "trials.csv", TRIAL_FIELDS, (row for o in outcomes for row in _trial_rows(o, grid)))
    serialization.write_csv(output / "aggregate.csv", AGGREGATE_FIELDS, (row.as_dict() for row in aggregates))
    serialization.write_json(
        output / "summary.json",
        [
            serialization.trial_summary(o.record, {**o.point.as_dict(), "trial": o.trial, "wall_time": o.record.final.wall_time})
            if o.record is not None
            else {**o.point.as_dict(), "trial": o.trial, "seed": o.seed, "status": "failed", "error": o.error}
            for o in outcomes
        ],
    )
    serialization.write_json(
        output / "manifest.json",
        {
            "name": config.name,
            "config_hash": config.config_hash,
            "config": config.raw,
            "seed": config.seed,
            "trial_seeds": seeds,
            "error_rule": {"rule": config.adversary.error.rule, "e_inf": config.adversary.error.e_inf},
            "problem": serialization.problem_to_dict(problem),
            "versions": _versions(),
        },
    )

    if config.plots:
        from .plotting import plot_error_curves

        plot_error_curves(aggregates, output / "plots" / f"{config.name}.svg", title=config.name)

    comparison = None
    if config.compare:
        cells = table6_cells(outcomes) if config.compare == "table6" else []
        serialization.write_csv(output / "cells.csv", CELL_FIELDS, cells)
        comparison = compare_to_reference(cells, config.compare)
        serialization.write_json(output / "comparison.json", comparison.as_dict())

    result = ExperimentResult(output=output, outcomes=outcomes, aggregates=aggregates, comparison=comparison)
    if result.failed:
        logger.warning("%d trial(s) failed; see %s", result.failed, output / "summary.json")
    logger.info("Wrote artifacts to %s", output)
    return result


# --------------------------------------------------------------------------- #
# Table producers
# --------------------------------------------------------------------------- #


def _parse_row_key(key: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in key.split(","))


def _exact_cell(row: str, column: str, value: Fraction | float, digits: int) -> dict[str, Any]:
    exact = serialization.fraction_to_decimal(value, digits) if isinstance(value, Fraction) else ""
    return {"row": row, "column": column, "value": float(value), "exact": exact}


def analyze_table(table_id: str, digits: int = 12, rule: G0Rule = G0Rule.LEMMA) -> list[dict[str, Any]]:
    """Long-format cells for the closed-form tables (``table1``, ``table4``, ``table5``)."""

    table = reference_table(table_id)
    setup = table.get("setup", {})
    cells = []
    if table_id == "table1":
        counts = CategoryCounts.homogeneous(setup["N"], setup["n"], setup["k"], setup["p"])
        for key in table["rows"]:
            d0 = int(_parse_row_key(key)["d0"])
            constants = theorem_constants(setup["d1"], d0, counts, sigma_min_tilde=1.0, rule=rule)
            cells.append(_exact_cell(key, "Q", constants.homogeneous_q, digits))
            cells.append(_exact_cell(key, "beta", constants.homogeneous_beta, digits))
    elif table_id in ("table4", "table5"):
        for key in table["rows"]:
            params = {**{k: str(v) for k, v in setup.items()}, **_parse_row_key(key)}
            counts = CategoryCounts.homogeneous(int(params["N"]), int(params["n"]), int(params["k"]), params["p"], split="balanced")
            dist = mode_distribution(counts, rule)
            cells.append(_exact_cell(key, "q_hat_l", dist.q_hat_adversarial, digits))
            cells.append(_exact_cell(key, "q_hat_0", dist.q_hat[0], digits))
            cells.append(_exact_cell(key, "q", dist.q, digits))
            cells.append({"row": key, "column": "q0", "value": dist.q0 if dist.q0 is not None else float("nan"), "exact": ""})
    else:
        raise exceptions.UnknownReferenceTableError(f"{table_id} is not a closed-form table; use blocklist-mc or solve")
    return cells


def blocklist_table(
    sizes: Sequence[int],
    n: int,
    S_values: Sequence[int],
    trials: int,
    seed: int = 0,
    n_jobs: int = 1,
) -> tuple[list[dict[str, Any]], list[dict[str, Any]]]:
    """Per-(S, category) estimate rows and ``table3`` comparison cells."""

    estimate_rows, cells = [], []
    for S in S_values:
        estimate = estimate_blocklist_probs(BlocklistExperiment(tuple(sizes), n, int(S), trials, seed), n_jobs=n_jobs)
        estimate_rows.extend(estimate.rows())
        for category, value in enumerate(estimate.p_bl):
            if value is not None and category <= 1:
                cells.append({"row": f"S={S}", "column": f"p_bl_{category}", "value": value})
    return estimate_rows, cells


def scan_rows(counts: CategoryCounts, d1: int, sigma_min_tilde: float, d0_range: Sequence[int], digits: int = 12) -> list[dict[str, Any]]:
    scan = scan_d0(counts, d1, sigma_min_tilde, d0_range)
    rows = [
        {
            "d0": p.d0,
            "Q": serialization.fraction_to_decimal(p.q, digits),
            "alpha": p.alpha,
            "slope": p.slope,
            "slope_sign": p.slope_sign,
            "best": p.d0 == scan.best_d0,
            "continuous_minimizer": scan.continuous_minimizer,
        }
        for p in scan.points
    ]
    return rows
