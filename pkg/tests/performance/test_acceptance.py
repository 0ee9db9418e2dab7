"""Long running acceptance checks: Monte Carlo against exact laws and bounds, plus timing guardrails."""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from joblib import Parallel, delayed

from src.modekaczmarz.aggregation import RowStrategy, aggregate, collect_returns
from src.modekaczmarz.analysis import CategoryCounts, bound_curve, error_norms, mode_distribution, single_row_bound, theorem_constants
from src.modekaczmarz.blocklist import blocklist_accuracy_vs_S
from src.modekaczmarz.harness import blocklist_table
from src.modekaczmarz.model import AdversaryConfig, WorkerPopulation, make_synthetic_problem, sample_workers
from src.modekaczmarz.references import compare_to_reference
from src.modekaczmarz.solver import SolveOptions, rk_baseline, solve_mode_kaczmarz, solve_single_row


@pytest.fixture(scope="module")
def large_problem():
    """2400 x 100 Gaussian system, the size used for the error curves."""

    return make_synthetic_problem(2400, 100, seed=2024)


def _fixed_errors(d1: int, e_inf: float, k: int = 3) -> np.ndarray:
    row = np.array([e_inf * ell / k * (1 if ell % 2 else -1) for ell in range(1, k + 1)])
    return np.tile(row, (d1, 1))


def _median_error(problem, adversary, opts, iteration, seeds=range(10)) -> float:
    return float(np.median([solve_mode_kaczmarz(problem, adversary, opts, s).error_at(iteration) for s in seeds]))


@pytest.mark.performance
@pytest.mark.parametrize(
    "counts",
    [
        CategoryCounts((4, 2, 2, 2), 5),
        CategoryCounts((8, 4, 4, 4), 4),
        CategoryCounts((6, 3, 1), 3),
        CategoryCounts((5, 2, 2, 1), 5),
        CategoryCounts((12, 4, 4), 6),
    ],
)
def test_empirical_mode_law_matches_exact_probabilities(counts) -> None:
    """
    SCÉNARIO : 10^5 tirages de n travailleurs sur une ligne, agrégés par le mode.
    POURQUOI : La fréquence « catégorie c gagne avec exactement g membres » suit P(g, c) à 4 erreurs types près.
    """
    rounds = 100_000
    d1 = 1
    adversary = AdversaryConfig.from_counts(counts.counts, counts.n, e_table=[0.25 * (c + 1) for c in range(counts.k)], d1=d1)
    problem = make_synthetic_problem(3, 2, seed=0)
    population = WorkerPopulation.build(adversary)
    rng = np.random.default_rng(17)
    dist = mode_distribution(counts)
    x = problem.x_star.copy()
    hits: dict[tuple[int, int], int] = {}

    for _ in range(rounds):
        workers = sample_workers(population, 0, counts.n, rng)
        outcome = aggregate(collect_returns(problem, population, adversary.e_table, 0, workers, x), counts.n, counts.p0, rng)
        if not outcome.has_mode:
            continue
        sizes = sorted((g.size for g in outcome.groups), reverse=True)
        if len(sizes) > 1 and sizes[0] == sizes[1]:
            continue
        key = (outcome.mode_size, outcome.chosen_group.dominant_category)
        hits[key] = hits.get(key, 0) + 1

    for (g, category), prob in dist.probs.items():
        observed = hits.get((g, category), 0) / rounds
        se = math.sqrt(max(float(prob) * (1 - float(prob)), 1 / rounds) / rounds)
        assert abs(observed - float(prob)) <= 4 * se, (g, category, observed, float(prob))
    assert sum(hits.values()) / rounds == pytest.approx(float(dist.q), abs=4 * math.sqrt(0.25 / rounds))


@pytest.mark.performance
def test_mean_error_stays_under_the_theorem_bound() -> None:
    """
    SCÉNARIO : 500 graines, système 50 x 10, N = 20, n = 4, k = 3, p = 0.6, d0 = 2, sélection MaxModeSize.
    POURQUOI : L'erreur quadratique moyenne reste sous α^i |x0 - x*|² + (1 - α^(i+1)) / (1 - α) Σ β_t |e_t|²,
    et son plateau sous Σ β_t |e_t|² / (1 - α).
    """
    problem = make_synthetic_problem(50, 10, seed=11)
    adversary = AdversaryConfig.homogeneous(problem.d1, 20, 4, 3, "0.6", _fixed_errors(problem.d1, 1e-3), split="balanced")
    checkpoints = (10, 100, 1_000, 10_000)
    plateau_points = (5_000, 7_500, 10_000)
    opts = SolveOptions(
        d0=2, max_iter=10_000, tol=1e-300, strategy=RowStrategy.MAX_MODE_SIZE, checkpoints=(0, *checkpoints, *plateau_points)
    )

    records = Parallel(n_jobs=-1)(delayed(solve_mode_kaczmarz)(problem, adversary, opts, seed) for seed in range(500))

    constants = theorem_constants(problem.d1, 2, CategoryCounts.from_adversary(adversary, 0), problem.sigma_min_tilde)
    curve = bound_curve(constants, problem.squared_error(np.zeros(problem.d2)), error_norms(problem, adversary), checkpoints)
    assert all(r.iterations == 10_000 for r in records)
    for iteration, bound in zip(curve.iterations, curve.values):
        mean = float(np.mean([r.error_at(iteration) for r in records]))
        assert mean <= bound, (iteration, mean, bound)
    plateau = float(np.mean([r.error_at(i) for r in records for i in plateau_points]))
    assert plateau <= curve.asymptote, (plateau, curve.asymptote)


@pytest.mark.performance
def test_single_row_mean_error_stays_under_its_bound(medium_problem) -> None:
    """
    SCÉNARIO : Variante une ligne, pool partagé N = 100, n = 5, k = 5, p = 0.2, 200 graines.
    POURQUOI : Après i pas appliqués, l'erreur moyenne reste sous α^(i+1) |x0 - x*|² + (1 - α^(i+1)) / (1 - α) Σ q_ℓ |e_ℓ|² / |A|_F².
    """
    e_table = _fixed_errors(medium_problem.d1, 1e-3, k=5)
    adversary = AdversaryConfig.homogeneous(medium_problem.d1, 100, 5, 5, "0.2", e_table)
    steps = (100, 500, 2_000)
    # iterations without a mode leave x alone, so the bound is read per applied step
    opts = SolveOptions(max_iter=4_000, tol=1e-300, instrument=True, checkpoints=(0, 4_000))

    records = Parallel(n_jobs=-1)(delayed(solve_single_row)(medium_problem, adversary, opts, seed) for seed in range(200))

    curve = single_row_bound(
        medium_problem, CategoryCounts.from_adversary(adversary, 0), e_table, medium_problem.squared_error(np.zeros(medium_problem.d2)), steps
    )
    assert all(len(r.traces) >= steps[-1] for r in records)
    for step, bound in zip(curve.iterations, curve.values):
        mean = float(np.mean([r.traces[step - 1].after_sq for r in records]))
        assert mean <= bound, (step, mean, bound)


@pytest.mark.performance
def test_block_list_run_reaches_high_accuracy_with_few_adversaries(large_problem) -> None:
    """
    SCÉNARIO : 2400 x 100, p = 0.2, e∞ = 500, d0 = 6, liste de blocage active, 10 graines.
    POURQUOI : Avec N = 20 et n = 4 seul le groupe fiable atteint le seuil ; l'erreur finale médiane passe sous 1e-10.
    """
    adversary = AdversaryConfig.homogeneous(large_problem.d1, 20, 4, 3, "0.2", _fixed_errors(large_problem.d1, 500.0), split="balanced")
    opts = SolveOptions(d0=6, max_iter=20_000, blocklist_enabled=True, update_cycle=500, checkpoints=(0, 20_000))

    assert _median_error(large_problem, adversary, opts, 20_000) <= 1e-10


@pytest.mark.performance
def test_large_errors_break_convergence_without_block_list(large_problem) -> None:
    """
    SCÉNARIO : p = 0.6, e∞ = 500, sans liste de blocage.
    POURQUOI : Des groupes adverses de taille 2 franchissent le seuil ; l'erreur reste au-dessus de 1e-2.
    """
    adversary = AdversaryConfig.homogeneous(large_problem.d1, 20, 4, 3, "0.6", _fixed_errors(large_problem.d1, 500.0), split="balanced")
    opts = SolveOptions(d0=2, max_iter=10_000, checkpoints=(0, 10_000))

    assert _median_error(large_problem, adversary, opts, 10_000) >= 1e-2


@pytest.mark.performance
def test_more_rows_per_iteration_converge_faster(large_problem) -> None:
    """
    SCÉNARIO : p = 0.6, e∞ = 1e-3, liste de blocage active, d0 = 8 contre d0 = 2, erreur médiane à 10^4 itérations.
    POURQUOI : Plus de lignes candidates par itération accélèrent la convergence.
    """
    adversary = AdversaryConfig.homogeneous(large_problem.d1, 20, 4, 3, "0.6", _fixed_errors(large_problem.d1, 1e-3), split="balanced")
    opts = SolveOptions(max_iter=10_000, blocklist_enabled=True, update_cycle=500, checkpoints=(0, 10_000))

    medians = {d0: _median_error(large_problem, adversary, replace(opts, d0=d0), 10_000) for d0 in (2, 8)}

    assert medians[8] <= medians[2]


@pytest.mark.performance
@pytest.mark.parametrize(("p", "d0"), [("0.4", 6), ("0.6", 8)])
def test_block_list_accuracy_follows_the_reference_trend(large_problem, p, d0) -> None:
    """
    SCÉNARIO : 20 graines par cycle S ∈ {200, 500, 1000, 2000}, 2 x 10^4 itérations, e∞ = 1e-3.
    POURQUOI : La part de vrais adversaires parmi les bloqués croît avec S et reste à 0.1 des valeurs de référence.
    """
    trials = 20
    adversary = AdversaryConfig.homogeneous(large_problem.d1, 20, 4, 3, p, _fixed_errors(large_problem.d1, 1e-3), split="balanced")
    opts = SolveOptions(d0=d0, max_iter=20_000, checkpoints=(0, 20_000))

    points = blocklist_accuracy_vs_S(large_problem, adversary, opts, [200, 500, 1_000, 2_000], trials=trials, seed=3, n_jobs=-1)

    assert all(point.trials_with_blocks == trials for point in points)
    row = f"p={float(p):g},d0={d0}"
    report = compare_to_reference({(row, f"S={point.S}"): point.accuracy for point in points}, "table6", rows=[row])
    assert report.passed, [(c.column, c.actual, c.expected) for c in report.failures]
    # non-decreasing up to two standard errors of the difference
    for earlier, later in zip(points, points[1:]):
        se = math.hypot(np.std(earlier.accuracies, ddof=1), np.std(later.accuracies, ddof=1)) / math.sqrt(trials)
        assert later.accuracy + 2 * se >= earlier.accuracy, (earlier.S, earlier.accuracy, later.S, later.accuracy)


@pytest.mark.performance
def test_blocklist_monte_carlo_reproduces_the_membership_table() -> None:
    _, cells = blocklist_table((3, 2), 3, [5, 10, 50, 100], trials=10_000, seed=0, n_jobs=2)

    report = compare_to_reference(cells, "table3")

    assert report.passed, [(c.row, c.column, c.actual, c.expected) for c in report.failures]
    colluders = [c["value"] for c in cells if c["column"] == "p_bl_1"]
    assert all(later + 0.02 >= earlier for earlier, later in zip(colluders, colluders[1:]))


@pytest.mark.performance
@pytest.mark.parametrize("d1", [100, 1_000])
def test_baseline_iteration_cost(d1) -> None:
    """
    SCÉNARIO : 10^4 itérations de Kaczmarz aléatoire sans adversaire.
    POURQUOI : Garde-fou : le coût d'une itération ne doit pas dépendre de d1 (pas de copie de A).
    """
    problem = make_synthetic_problem(d1, 20, seed=1)

    start = time.perf_counter()
    rk_baseline(problem, seed=0, max_iter=10_000, tol=1e-300, checkpoints=(0, 10_000))
    duration = time.perf_counter() - start

    # Lenient: 10k iterations well under two seconds on a laptop.
    assert duration < 2.0


@pytest.mark.performance
@pytest.mark.parametrize("d0", [1, 8])
def test_mode_iteration_cost(medium_problem, adversary_factory, d0) -> None:
    adversary = adversary_factory(medium_problem.d1, 20, 4, 3, "0.6")
    opts = SolveOptions(d0=d0, max_iter=2_000, tol=1e-300, checkpoints=(0, 2_000))

    start = time.perf_counter()
    solve_mode_kaczmarz(medium_problem, adversary, opts, seed=0)
    duration = time.perf_counter() - start

    # Roughly linear in d0; one millisecond per sampled row is very generous.
    assert duration < 2_000 * d0 * 1e-3
