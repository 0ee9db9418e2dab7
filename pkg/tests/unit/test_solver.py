"""Unit tests for the iterative engines."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from src.modekaczmarz import exceptions, solver
from src.modekaczmarz.aggregation import ReturnedResidual, aggregate, collect_returns
from src.modekaczmarz.model import AdversaryConfig, LinearProblem, WorkerPopulation, sample_workers, spawn_streams
from src.modekaczmarz.solver import (
    SolveOptions,
    Variant,
    geometric_checkpoints,
    lasso_reference,
    rk_baseline,
    soft_threshold,
    solve_l1,
    solve_mode_kaczmarz,
    solve_single_row,
)


@pytest.mark.solver
def test_one_by_one_system_is_solved_in_one_step() -> None:
    problem = LinearProblem.from_arrays([[2.0]], [4.0], x_star=[2.0])

    record = rk_baseline(problem, seed=0, max_iter=1)

    assert record.x.tolist() == [2.0]
    assert record.final_sq_error == 0.0


@pytest.mark.solver
def test_baseline_is_reproducible(small_problem) -> None:
    first = rk_baseline(small_problem, seed=3, max_iter=200)
    second = rk_baseline(small_problem, seed=3, max_iter=200)

    assert np.array_equal(first.x, second.x)
    assert [cp.sq_error for cp in first.checkpoints] == [cp.sq_error for cp in second.checkpoints]


@pytest.mark.solver
def test_baseline_meets_expected_contraction(medium_problem) -> None:
    """
    SCÉNARIO : 50 x 10, moyenne sur 20 graines, erreur comparée à (1 - σ²/||A||_F²)^i ||x0 - x*||².
    POURQUOI : Taux de convergence classique du Kaczmarz randomisé (marge 1.5).
    """
    iterations = (10, 50, 100, 200, 500)
    records = [rk_baseline(medium_problem, seed=s, max_iter=500, checkpoints=iterations) for s in range(20)]
    rate = 1.0 - medium_problem.sigma_min_tilde**2 / medium_problem.frob_sq
    start = float(medium_problem.x_star @ medium_problem.x_star)

    for i in iterations:
        mean = np.mean([r.error_at(i) for r in records])
        assert mean <= 1.5 * rate**i * start


@pytest.mark.solver
def test_zero_adversary_matches_baseline_step_for_step(small_problem) -> None:
    """
    SCÉNARIO : k = 0, d0 = 1, mêmes graines que le Kaczmarz classique.
    POURQUOI : Sans adversaire la méthode doit se réduire exactement à l'algorithme de base.
    """
    adversary = AdversaryConfig.from_counts((5,), 3, d1=small_problem.d1)
    opts = SolveOptions(d0=1, max_iter=300, instrument=True)

    baseline = rk_baseline(small_problem, seed=21, max_iter=300, instrument=True)
    mode = solve_mode_kaczmarz(small_problem, adversary, opts, seed=21)
    single = solve_single_row(small_problem, adversary, opts, seed=21)

    assert [t.step for t in mode.traces] == [t.step for t in baseline.traces]
    assert [t.row for t in single.traces] == [t.row for t in baseline.traces]
    assert np.array_equal(mode.x, baseline.x)
    assert np.array_equal(single.x, baseline.x)
    assert mode.no_mode_total == 0


@pytest.mark.solver
def test_more_rows_without_adversaries_never_hurt(small_problem) -> None:
    adversary = AdversaryConfig.from_counts((5,), 3, d1=small_problem.d1)
    checkpoints = (0, 100)
    base = [rk_baseline(small_problem, seed=s, max_iter=100, checkpoints=checkpoints).error_at(100) for s in range(15)]
    multi = [
        solve_mode_kaczmarz(small_problem, adversary, SolveOptions(d0=4, max_iter=100, checkpoints=checkpoints), seed=s).error_at(100)
        for s in range(15)
    ]

    assert np.median(multi) <= np.median(base)


@pytest.mark.solver
def test_reliable_step_projects_exactly(small_problem, adversary_factory) -> None:
    """
    SCÉNARIO : Un pas accepté depuis un mode fiable.
    POURQUOI : Après le pas, l'itéré doit satisfaire l'équation de la ligne à 1e-10.
    """
    adversary = adversary_factory(small_problem.d1, 10, 5, 2, "0.2", e_inf=0.5)
    pop = WorkerPopulation.build(adversary)
    streams = spawn_streams(2)
    x = np.random.default_rng(0).standard_normal(small_problem.d2)

    row = 4
    # both adversaries in the sample leave three reliable answers, below the threshold of four
    for _ in range(50):
        workers = sample_workers(pop, row, 5, streams.workers)
        outcome = aggregate(collect_returns(small_problem, pop, adversary.e_table, row, workers, x), 5, adversary.p0(row), streams.ties)
        if outcome.has_mode:
            break
    assert outcome.chosen_group.dominant_category == 0

    x = x + outcome.value * small_problem.A[row]
    assert abs(small_problem.A[row] @ x - small_problem.b[row]) <= 1e-10


@pytest.mark.solver
def test_error_decomposition_holds_on_every_step(small_problem, adversary_factory) -> None:
    """
    SCÉNARIO : 1000 itérations instrumentées avec des adversaires qui gagnent parfois.
    POURQUOI : ||y'||² = ||y||² - <Ã_t, y>² + ||ẽ||² doit tenir à chaque pas (projection orthogonale).
    """
    adversary = adversary_factory(small_problem.d1, 20, 4, 3, "0.6", e_inf=500.0)
    record = solve_mode_kaczmarz(small_problem, adversary, SolveOptions(d0=2, max_iter=1000, instrument=True), seed=4)

    assert any(t.category != 0 for t in record.traces)
    for t in record.traces:
        expected = t.before_sq - t.projection**2 + t.true_error**2
        assert abs(t.after_sq - expected) <= 1e-8 * max(1.0, t.before_sq, t.after_sq)


@pytest.mark.solver
def test_iterations_without_a_mode_leave_the_iterate_alone(small_problem) -> None:
    """
    SCÉNARIO : n = 2 sur (3, 2) : seuil 2, souvent aucun mode.
    POURQUOI : Une itération sans mode ne modifie pas l'itéré (bit à bit).
    """
    adversary = AdversaryConfig.from_counts((3, 2), 2, e_table=[1e-3], d1=small_problem.d1)
    opts = SolveOptions(d0=1, max_iter=60, checkpoints=tuple(range(61)))
    record = solve_mode_kaczmarz(small_problem, adversary, opts, seed=6)

    skipped = 0
    for before, after in zip(record.checkpoints, record.checkpoints[1:]):
        if after.no_mode_count > before.no_mode_count:
            skipped += 1
            assert after.sq_error == before.sq_error
            assert after.residual_norm == before.residual_norm
    assert skipped > 0
    assert record.no_mode_total == record.final.no_mode_count


@pytest.mark.solver
def test_block_list_only_grows(small_problem, adversary_factory) -> None:
    adversary = adversary_factory(small_problem.d1, 20, 4, 3, "0.6")
    opts = SolveOptions(d0=3, max_iter=400, blocklist_enabled=True, update_cycle=20, checkpoints=tuple(range(0, 401, 10)))
    record = solve_mode_kaczmarz(small_problem, adversary, opts, seed=8)

    blocked = [cp.blocked_count for cp in record.checkpoints]
    assert blocked == sorted(blocked)
    assert blocked[-1] == len(record.block_audit) > 0


@pytest.mark.solver
def test_disabled_block_list_blocks_nobody(small_problem, adversary_factory) -> None:
    adversary = adversary_factory(small_problem.d1, 20, 4, 3, "0.6")
    record = solve_mode_kaczmarz(small_problem, adversary, SolveOptions(d0=3, max_iter=200), seed=8)

    assert all(cp.blocked_count == 0 for cp in record.checkpoints)
    assert record.blocklist_accuracy is None


@pytest.mark.solver
def test_converged_status_matches_step_tolerance(small_problem) -> None:
    record = rk_baseline(small_problem, seed=1, max_iter=30_000, tol=1e-8)

    assert record.status == "converged"
    assert record.iterations < 30_000
    assert record.final.iteration == record.iterations
    assert record.final_sq_error <= 1e-10


@pytest.mark.solver
def test_resampling_the_last_row_does_not_stop_the_run(small_problem, monkeypatch) -> None:
    """
    SCÉNARIO : Le tirage renvoie toujours la ligne 0 ; après le premier pas son résidu vaut exactement 0.
    POURQUOI : Un pas nul sur la ligne qu'on vient de projeter ne prouve pas la convergence.
    """
    monkeypatch.setattr(solver, "sample_norm_weighted_row", lambda problem, rng: 0)

    record = rk_baseline(small_problem, seed=0, max_iter=20, tol=1e-300, checkpoints=(0, 1, 20))

    assert record.status == "max_iter"
    assert record.iterations == 20
    assert record.error_at(20) == pytest.approx(record.error_at(1), rel=1e-12)


@pytest.mark.solver
def test_tiny_tolerance_runs_the_full_budget(medium_problem, adversary_factory) -> None:
    """
    SCÉNARIO : tol = 1e-300, 500 itérations, 20 graines, Kaczmarz classique et mode (MaxModeSize, d0 = 2).
    POURQUOI : Les lignes normalisées redonnent souvent la ligne projetée juste avant ; aucun arrêt anticipé.
    """
    adversary = adversary_factory(medium_problem.d1, 20, 4, 3, "0.6")
    opts = SolveOptions(d0=2, max_iter=500, tol=1e-300, strategy="max_mode_size", checkpoints=(0, 500))

    for seed in range(20):
        baseline = rk_baseline(medium_problem, seed=seed, max_iter=500, tol=1e-300, checkpoints=(0, 500))
        mode = solve_mode_kaczmarz(medium_problem, adversary, opts, seed=seed)
        assert (baseline.status, baseline.iterations) == ("max_iter", 500)
        assert (mode.status, mode.iterations) == ("max_iter", 500)


@pytest.mark.solver
def test_non_finite_step_marks_divergence(small_problem, monkeypatch) -> None:
    """
    SCÉNARIO : Tous les travailleurs renvoient +inf.
    POURQUOI : Le solveur doit s'arrêter avec le statut "diverged" au lieu de propager des NaN.
    """

    def broken(problem, population, e_table, row, workers, x):
        return [ReturnedResidual(int(w), row, float("inf")) for w in workers]

    monkeypatch.setattr(solver, "collect_returns", broken)
    adversary = AdversaryConfig.from_counts((4,), 2, d1=small_problem.d1)

    record = solve_mode_kaczmarz(small_problem, adversary, SolveOptions(max_iter=50), seed=0)

    assert record.status == "diverged"
    assert record.iterations == 1


@pytest.mark.solver
@pytest.mark.parametrize(
    "opts",
    [
        SolveOptions(d0=31),
        SolveOptions(d0=0),
        SolveOptions(tol=0.0),
        SolveOptions(blocklist_enabled=True),
        SolveOptions(update_cycle=0),
        SolveOptions(l1_gamma=-1.0),
        SolveOptions(group_tol=0.0),
    ],
)
def test_invalid_options_are_rejected(small_problem, opts) -> None:
    adversary = AdversaryConfig.from_counts((5,), 3, d1=small_problem.d1)

    with pytest.raises(exceptions.InvalidOptionsError):
        solve_mode_kaczmarz(small_problem, adversary, opts, seed=0)


@pytest.mark.solver
def test_adversary_must_cover_every_row(small_problem) -> None:
    adversary = AdversaryConfig.from_counts((5,), 3, d1=small_problem.d1 - 1)

    with pytest.raises(exceptions.InvalidAdversaryError):
        solve_mode_kaczmarz(small_problem, adversary, SolveOptions(), seed=0)


@pytest.mark.solver
def test_single_row_variant_is_dispatched(small_problem, adversary_factory) -> None:
    adversary = adversary_factory(small_problem.d1, 10, 4, 2, "0.2")
    opts = SolveOptions(max_iter=100, variant=Variant.SINGLE_ROW_NORM_WEIGHTED)

    record = solve_mode_kaczmarz(small_problem, adversary, opts, seed=3)

    assert record.method == "single_row"


@pytest.mark.solver
def test_x0_is_used_as_starting_point(small_problem) -> None:
    x0 = tuple(float(v) for v in small_problem.x_star)

    record = rk_baseline(small_problem, seed=0, max_iter=5, x0=x0)

    assert record.checkpoints[0].sq_error == 0.0
    assert record.status == "converged"


@pytest.mark.solver
def test_geometric_checkpoints_cover_the_run() -> None:
    points = geometric_checkpoints(30_000)

    assert points[:101] == tuple(range(101))
    assert points[-1] == 30_000
    assert all(a < b for a, b in zip(points, points[1:]))
    assert len(points) < 200
    assert geometric_checkpoints(50) == tuple(range(51))


@pytest.mark.solver
def test_soft_threshold() -> None:
    out = soft_threshold(np.array([-3.0, -0.5, 0.0, 0.2, 2.0]), 1.0)

    assert out.tolist() == [-2.0, 0.0, 0.0, 0.0, 1.0]


@pytest.mark.solver
def test_l1_with_zero_penalty_matches_plain_solver(small_problem, adversary_factory) -> None:
    adversary = adversary_factory(small_problem.d1, 10, 4, 2, "0.2")
    opts = SolveOptions(d0=2, max_iter=300)

    plain = solve_mode_kaczmarz(small_problem, adversary, opts, seed=5)
    lasso = solve_l1(small_problem, adversary, replace(opts, l1_gamma=0.0), seed=5)

    assert np.array_equal(plain.x, lasso.x)
    assert lasso.final.objective == pytest.approx(0.5 * lasso.final.residual_norm**2)


@pytest.mark.solver
def test_l1_large_penalty_drives_scalar_to_zero() -> None:
    problem = LinearProblem.from_arrays([[1.0]], [0.0], x_star=[0.0])
    adversary = AdversaryConfig.from_counts((3,), 1, d1=1)
    opts = SolveOptions(max_iter=3, x0=(5.0,), l1_gamma=10.0)

    record = solve_l1(problem, adversary, opts, seed=0)

    assert record.x.tolist() == [0.0]
    assert record.final.objective == 0.0


@pytest.mark.solver
def test_l1_requires_a_penalty(small_problem) -> None:
    adversary = AdversaryConfig.from_counts((5,), 3, d1=small_problem.d1)

    with pytest.raises(exceptions.InvalidOptionsError, match="l1_gamma"):
        solve_l1(small_problem, adversary, SolveOptions(), seed=0)


@pytest.mark.solver
def test_lasso_reference_closed_forms(small_problem) -> None:
    """
    SCÉNARIO : γ = 0 sur un système cohérent, puis problème scalaire min ½(x-2)² + ½|x|.
    POURQUOI : Les deux solutions sont connues exactement (x* et 1.5).
    """
    assert np.allclose(lasso_reference(small_problem, 0.0), small_problem.x_star, atol=1e-6)

    scalar = LinearProblem.from_arrays([[1.0]], [2.0], x_star=[2.0])
    assert lasso_reference(scalar, 0.5)[0] == pytest.approx(1.5)


@pytest.mark.solver
def test_checkpoint_lookup_carries_final_state_forward(small_problem) -> None:
    record = rk_baseline(small_problem, seed=1, max_iter=30_000, tol=1e-8)

    assert record.checkpoint_at(10**9) is record.final
    assert record.error_at(0) == record.checkpoints[0].sq_error
    assert record.checkpoint_at(record.iterations - 1).iteration < record.iterations

