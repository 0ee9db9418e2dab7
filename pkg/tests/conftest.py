"""Shared pytest fixtures for the modekaczmarz test suite."""

from __future__ import annotations

import sys
from collections.abc import Callable, Mapping
from pathlib import Path
from typing import Any

import numpy as np
import pytest
import yaml

ROOT = Path(__file__).resolve().parents[1]


if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.modekaczmarz.analysis import CategoryCounts  # noqa: E402
from src.modekaczmarz.blocklist import BlocklistExperiment  # noqa: E402
from src.modekaczmarz.model import AdversaryConfig, LinearProblem, make_synthetic_problem  # noqa: E402


@pytest.fixture(scope="session")
def small_problem() -> LinearProblem:
    """30 x 5 row-normalized Gaussian system, cheap enough for every unit test."""

    return make_synthetic_problem(30, 5, seed=3)


@pytest.fixture(scope="session")
def medium_problem() -> LinearProblem:
    """50 x 10 system used by convergence checks."""

    return make_synthetic_problem(50, 10, seed=11)


@pytest.fixture(scope="session")
def problem_factory() -> Callable[[int, int, int], LinearProblem]:
    """Factory returning deterministic synthetic problems of the requested shape."""

    def _factory(d1: int, d2: int, seed: int = 0) -> LinearProblem:
        return make_synthetic_problem(d1, d2, seed)

    return _factory


@pytest.fixture(scope="session")
def adversary_factory() -> Callable[..., AdversaryConfig]:
    """Homogeneous adversary with alternating-sign errors ``e_inf * l / k``."""

    def _factory(d1: int, N: int, n: int, k: int, p: float | str, e_inf: float = 1e-3) -> AdversaryConfig:
        e_row = np.array([e_inf * ell / k * (1 if ell % 2 else -1) for ell in range(1, k + 1)]) if k else np.zeros(0)
        return AdversaryConfig.homogeneous(d1, N, n, k, p, np.tile(e_row, (d1, 1)), split="balanced")

    return _factory


@pytest.fixture(scope="session")
def table1_counts() -> CategoryCounts:
    """N = 10 split as (4, 2, 2, 2), five workers sampled per row."""

    return CategoryCounts((4, 2, 2, 2), 5)


@pytest.fixture
def three_vs_two() -> BlocklistExperiment:
    """Three reliable workers, two colluding ones, three sampled per iteration."""

    return BlocklistExperiment(sizes=(3, 2), n=3, S=50, trials=2_000, seed=7)


@pytest.fixture
def config_writer(tmp_path: Path) -> Callable[[Mapping[str, Any]], Path]:
    """Write a mapping as ``experiment.yml`` under a temporary directory and return its path."""

    def _write(mapping: Mapping[str, Any], name: str = "experiment.yml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(dict(mapping), sort_keys=False))
        return path

    return _write


@pytest.fixture
def experiment_mapping(tmp_path: Path) -> dict[str, Any]:
    """Smallest meaningful experiment: one sweep point, three trials, 200 iterations."""

    return {
        "name": "smoke",
        "seed": 5,
        "trials": 3,
        "method": "mode",
        "problem": {"synthetic": {"d1": 40, "d2": 5, "seed": 2}},
        "adversary": {"N": 10, "n": 4, "k": 2, "p": 0.2, "error": {"rule": "fixed_magnitude", "e_inf": "1e-3"}},
        "solver": {"d0": 2, "max_iter": 200, "tol": 1.0e-12},
        "checkpoints": [0, 10, 50, 100, 200],
        "output": str(tmp_path / "run"),
    }
