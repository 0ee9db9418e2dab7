"""Monte Carlo estimates of who ends up on the block-list."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from . import exceptions
from .aggregation import ReturnedResidual, aggregate
from .model import AdversaryConfig, LinearProblem, WorkerPopulation, derive_seed, sample_workers
from .solver import SolveOptions, solve_mode_kaczmarz

logger = logging.getLogger(__name__)

DEFAULT_TRIALS = 10_000


@dataclass(frozen=True)
class BlocklistExperiment:
    """``sizes[0]`` reliable workers and ``sizes[l]`` workers of category ``l``; ``n`` sampled per iteration."""

    sizes: tuple[int, ...]
    n: int
    S: int
    trials: int = DEFAULT_TRIALS
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "sizes", tuple(int(m) for m in self.sizes))
        if self.S < 1 or self.trials < 1:
            raise exceptions.InvalidOptionsError(f"Need S >= 1 and trials >= 1, got S={self.S}, trials={self.trials}")
        if not 1 <= self.n <= self.N:
            raise exceptions.InvalidOptionsError(f"Need 1 <= n <= N, got n={self.n}, N={self.N}")

    @property
    def N(self) -> int:
        return sum(self.sizes)

    @property
    def k(self) -> int:
        return len(self.sizes) - 1

    def adversary(self) -> AdversaryConfig:
        # Category l returns the value l, so categories never merge.
        return AdversaryConfig.from_counts(self.sizes, self.n, [float(c) for c in range(1, self.k + 1)], d1=1)


@dataclass(frozen=True)
class BlocklistEstimate:
    experiment: BlocklistExperiment
    p_bl: tuple[float | None, ...]
    std_err: tuple[float | None, ...]
    conditional: tuple[float | None, ...]
    per_worker: np.ndarray = field(repr=False)
    nothing_blocked: int = 0

    def rows(self) -> list[dict[str, object]]:
        return [
            {
                "S": self.experiment.S,
                "category": c,
                "estimate": self.p_bl[c],
                "std_err": self.std_err[c],
                "conditional": self.conditional[c],
                "trials": self.experiment.trials,
            }
            for c in range(len(self.p_bl))
        ]


def simulate_counters(exp: BlocklistExperiment, seed: int) -> WorkerPopulation:
    """One run of ``S`` sampling rounds followed by a single block-list update."""

    adversary = exp.adversary()
    population = WorkerPopulation.build(adversary)
    rng = np.random.default_rng(seed)
    p0 = adversary.p0(0)
    for _ in range(exp.S):
        workers = sample_workers(population, 0, exp.n, rng)
        returns = [
            ReturnedResidual(worker_id=int(w), row=0, value=float(c), true_category=int(c))
            for w, c in zip(workers, population.categories[workers], strict=True)
        ]
        population.record_outcome(aggregate(returns, exp.n, p0, rng))
    population.block_worst(0, rng)
    return population


def _run_chunk(exp: BlocklistExperiment, start: int, stop: int) -> np.ndarray:
    hits = np.zeros(exp.N, dtype=np.int64)
    for trial in range(start, stop):
        population = simulate_counters(exp, derive_seed(exp.seed, trial))
        hits[population.block_order] += 1
    return hits


def estimate_blocklist_probs(exp: BlocklistExperiment, n_jobs: int = 1) -> BlocklistEstimate:
    chunks = max(1, min(exp.trials, 4 * max(1, n_jobs)))
    bounds = np.linspace(0, exp.trials, chunks + 1).astype(int)
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_run_chunk)(exp, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:], strict=True) if hi > lo
    )
    per_worker_hits = np.sum(parts, axis=0)

    categories = np.repeat(np.arange(exp.k + 1), exp.sizes)
    p_bl: list[float | None] = []
    std_err: list[float | None] = []
    for c, m in enumerate(exp.sizes):
        if m == 0:
            p_bl.append(None)
            std_err.append(None)
            continue
        share = per_worker_hits[categories == c].sum() / exp.trials
        p_bl.append(float(share / m))
        std_err.append(float(math.sqrt(share * (1 - share) / exp.trials) / m))

    weights = [m / exp.N * p if p is not None else 0.0 for m, p in zip(exp.sizes, p_bl, strict=True)]
    norm = sum(weights)
    conditional = tuple(w / norm if norm > 0 else None for w in weights)
    nothing = exp.trials - int(per_worker_hits.sum())
    logger.info("Block-list Monte Carlo S=%d over %d trials: %s", exp.S, exp.trials, p_bl)
    return BlocklistEstimate(
        experiment=exp,
        p_bl=tuple(p_bl),
        std_err=tuple(std_err),
        conditional=conditional,
        per_worker=per_worker_hits / exp.trials,
        nothing_blocked=nothing,
    )


@dataclass(frozen=True)
class AccuracyPoint:
    S: int
    accuracy: float | None
    trials_with_blocks: int
    accuracies: tuple[float | None, ...]


def blocklist_accuracy_vs_S(
    problem: LinearProblem,
    adversary: AdversaryConfig,
    opts: SolveOptions,
    S_values: Sequence[int],
    trials: int,
    seed: int = 0,
    n_jobs: int = 1,
) -> list[AccuracyPoint]:
    """Mean fraction of truly adversarial workers among the blocked ones, per update cycle."""

    table = []
    for S in S_values:
        run_opts = replace(opts, blocklist_enabled=True, update_cycle=int(S))
        records = Parallel(n_jobs=n_jobs)(
            delayed(solve_mode_kaczmarz)(problem, adversary, run_opts, derive_seed(seed, int(S), t)) for t in range(trials)
        )
        accuracies = tuple(r.blocklist_accuracy for r in records)
        observed = [a for a in accuracies if a is not None]
        mean = float(np.mean(observed)) if observed else None
        logger.info("S=%d: block-list accuracy %s over %d/%d trials", S, mean, len(observed), trials)
        table.append(AccuracyPoint(S=int(S), accuracy=mean, trials_with_blocks=len(observed), accuracies=accuracies))
    return table
