"""YAML experiment descriptions, validated into frozen dataclasses."""

from __future__ import annotations

import hashlib
import itertools
import json
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from . import exceptions
from .aggregation import DEFAULT_GROUP_TOL, RowStrategy

METHODS = ("mode", "baseline", "single_row", "l1")
ERROR_RULES = ("fixed_magnitude", "uniform_scaled")
SPLITS = ("exact", "balanced")


@dataclass(frozen=True)
class ProblemSource:
    kind: str
    d1: int | None = None
    d2: int | None = None
    seed: int = 0
    path: Path | None = None
    normalize: bool = True
    usecols: tuple[int | str, ...] | None = None


@dataclass(frozen=True)
class ErrorSpec:
    rule: str = "fixed_magnitude"
    e_inf: float = 1e-3


@dataclass(frozen=True)
class AdversarySpec:
    N: int
    n: tuple[int, ...]
    k: tuple[int, ...]
    p: tuple[float, ...]
    split: str = "balanced"
    error: ErrorSpec = field(default_factory=ErrorSpec)


@dataclass(frozen=True)
class SolverSpec:
    d0: tuple[int, ...] = (1,)
    max_iter: int = 30_000
    tol: float = 1e-12
    blocklist: bool = False
    S: tuple[int | None, ...] = (None,)
    strategy: RowStrategy = RowStrategy.MAX_RESIDUAL
    group_tol: float = DEFAULT_GROUP_TOL
    l1_gamma: float | None = None
    l1_step: float = 1.0


@dataclass(frozen=True)
class SweepPoint:
    d0: int
    n: int
    p: float
    k: int
    S: int | None

    @property
    def key(self) -> str:
        return f"d0={self.d0},n={self.n},p={self.p},k={self.k},S={self.S if self.S is not None else '-'}"

    def as_dict(self) -> dict[str, Any]:
        return {"d0": self.d0, "n": self.n, "p": self.p, "k": self.k, "S": self.S}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    trials: int
    method: str
    problem: ProblemSource
    adversary: AdversarySpec
    solver: SolverSpec
    output: Path
    checkpoints: tuple[int, ...] | None = None
    plots: bool = False
    compare: str | None = None
    n_jobs: int = 1
    raw: Mapping[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def sweep(self) -> list[SweepPoint]:
        adv, sol = self.adversary, self.solver
        return [SweepPoint(*values) for values in itertools.product(sol.d0, adv.n, adv.p, adv.k, sol.S)]

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, default=str, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_overrides(
        self,
        seed: int | None = None,
        trials: int | None = None,
        output: str | Path | None = None,
        n_jobs: int | None = None,
    ) -> ExperimentConfig:
        if trials is not None and trials < 1:
            raise exceptions.ConfigError("trials", f"must be >= 1, got {trials}")
        if n_jobs is not None and n_jobs == 0:
            raise exceptions.ConfigError("n_jobs", "must be non-zero")
        raw = dict(self.raw)
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = raw["seed"] = int(seed)
        if trials is not None:
            changes["trials"] = raw["trials"] = int(trials)
        if output is not None:
            changes["output"] = Path(output)
        if n_jobs is not None:
            changes["n_jobs"] = int(n_jobs)
        return replace(self, raw=raw, **changes)


# --------------------------------------------------------------------------- #
# Parsing helpers
# --------------------------------------------------------------------------- #


def _section(mapping: Mapping[str, Any], key: str, path: str, required: bool = True) -> Mapping[str, Any]:
    value = mapping.get(key)
    if value is None:
        if required:
            raise exceptions.ConfigError(_join(path, key), "missing section")
        return {}
    if not isinstance(value, Mapping):
        raise exceptions.ConfigError(_join(path, key), "must be a mapping")
    return value


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _int(value: Any, path: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise exceptions.ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise exceptions.ConfigError(path, f"must be >= {minimum}, got {value}")
    return value


def _float(value: Any, path: str, positive: bool = False) -> float:
    # YAML 1.1 reads "1e-3" (no dot) as a string.
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise exceptions.ConfigError(path, f"expected a number, got {value!r}")
    if positive and not value > 0:
        raise exceptions.ConfigError(path, f"must be > 0, got {value}")
    return float(value)


def _bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise exceptions.ConfigError(path, f"expected true/false, got {value!r}")
    return value


def _choice(value: Any, path: str, allowed: tuple[str, ...]) -> str:
    if value not in allowed:
        raise exceptions.ConfigError(path, f"expected one of {', '.join(allowed)}, got {value!r}")
    return value


def _sweep(mapping: Mapping[str, Any], key: str, path: str, convert, default: Any = None) -> tuple:
    """Scalar or non-empty list, converted element-wise with indexed field paths."""

    where = _join(path, key)
    value = mapping.get(key, default)
    if value is None:
        raise exceptions.ConfigError(where, "missing value")
    if isinstance(value, list):
        if not value:
            raise exceptions.ConfigError(where, "sweep list must not be empty")
        return tuple(convert(v, f"{where}[{i}]") for i, v in enumerate(value))
    return (convert(value, where),)


def _parse_problem(section: Mapping[str, Any], base_dir: Path) -> ProblemSource:
    sources = [key for key in ("synthetic", "csv") if key in section]
    if len(sources) != 1:
        raise exceptions.ConfigError("problem", "exactly one of 'synthetic' or 'csv' is required")
    if sources[0] == "synthetic":
        spec = _section(section, "synthetic", "problem")
        d1 = _int(spec.get("d1"), "problem.synthetic.d1", 1)
        d2 = _int(spec.get("d2"), "problem.synthetic.d2", 1)
        if d1 < d2:
            raise exceptions.ConfigError("problem.synthetic.d1", f"must be >= d2 ({d2}), got {d1}")
        return ProblemSource(kind="synthetic", d1=d1, d2=d2, seed=_int(spec.get("seed", 0), "problem.synthetic.seed", 0))

    spec = _section(section, "csv", "problem")
    raw_path = spec.get("path")
    if not isinstance(raw_path, str) or not raw_path:
        raise exceptions.ConfigError("problem.csv.path", "expected a file path")
    path = Path(raw_path)
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise exceptions.ConfigError("problem.csv.path", f"file not found: {path}")
    usecols = spec.get("usecols")
    if usecols is not None:
        if not isinstance(usecols, list) or not usecols:
            raise exceptions.ConfigError("problem.csv.usecols", "expected a non-empty list")
        usecols = tuple(usecols)
    return ProblemSource(
        kind="csv",
        path=path,
        seed=_int(spec.get("seed", 0), "problem.csv.seed", 0),
        normalize=_bool(spec.get("normalize", True), "problem.csv.normalize"),
        usecols=usecols,
    )


def _parse_adversary(section: Mapping[str, Any]) -> AdversarySpec:
    path = "adversary"
    N = _int(section.get("N"), "adversary.N", 1)
    n = _sweep(section, "n", path, lambda v, p: _int(v, p, 1))
    for i, value in enumerate(n):
        if value > N:
            raise exceptions.ConfigError(f"adversary.n[{i}]", f"cannot exceed N = {N}")

    def rate(v: Any, p: str) -> float:
        value = _float(v, p)
        if not 0 <= value < 1:
            raise exceptions.ConfigError(p, f"must lie in [0, 1), got {value}")
        return value

    error = _section(section, "error", path, required=False)
    rule = _choice(error.get("rule", "fixed_magnitude"), "adversary.error.rule", ERROR_RULES)
    e_inf = _float(error.get("e_inf", 1e-3), "adversary.error.e_inf", positive=True)
    return AdversarySpec(
        N=N,
        n=n,
        k=_sweep(section, "k", path, lambda v, p: _int(v, p, 0)),
        p=_sweep(section, "p", path, rate),
        split=_choice(section.get("split", "balanced"), "adversary.split", SPLITS),
        error=ErrorSpec(rule=rule, e_inf=e_inf),
    )


def _parse_solver(section: Mapping[str, Any]) -> SolverSpec:
    path = "solver"
    blocklist = _bool(section.get("blocklist", False), "solver.blocklist")
    if blocklist:
        cycles: tuple[int | None, ...] = _sweep(section, "S", path, lambda v, p: _int(v, p, 1))
    elif "S" in section:
        cycles = _sweep(section, "S", path, lambda v, p: _int(v, p, 1))
    else:
        cycles = (None,)
    strategy = section.get("strategy", RowStrategy.MAX_RESIDUAL.value)
    _choice(strategy, "solver.strategy", tuple(s.value for s in RowStrategy))
    gamma = section.get("l1_gamma")
    if gamma is not None:
        gamma = _float(gamma, "solver.l1_gamma")
        if gamma < 0:
            raise exceptions.ConfigError("solver.l1_gamma", f"must be >= 0, got {gamma}")
    return SolverSpec(
        d0=_sweep(section, "d0", path, lambda v, p: _int(v, p, 1), default=1),
        max_iter=_int(section.get("max_iter", 30_000), "solver.max_iter", 0),
        tol=_float(section.get("tol", 1e-12), "solver.tol", positive=True),
        blocklist=blocklist,
        S=cycles,
        strategy=RowStrategy(strategy),
        group_tol=_float(section.get("group_tol", DEFAULT_GROUP_TOL), "solver.group_tol", positive=True),
        l1_gamma=gamma,
        l1_step=_float(section.get("l1_step", 1.0), "solver.l1_step", positive=True),
    )


def parse_config(mapping: Mapping[str, Any], base_dir: str | Path = ".") -> ExperimentConfig:
    if not isinstance(mapping, Mapping):
        raise exceptions.ConfigError("", "configuration must be a mapping at the top level")
    base_dir = Path(base_dir)
    method = _choice(mapping.get("method", "mode"), "method", METHODS)
    solver = _parse_solver(_section(mapping, "solver", "", required=False))
    if method == "l1" and solver.l1_gamma is None:
        raise exceptions.ConfigError("solver.l1_gamma", "required when method is l1")

    checkpoints = mapping.get("checkpoints")
    if checkpoints is not None:
        if not isinstance(checkpoints, list) or not checkpoints:
            raise exceptions.ConfigError("checkpoints", "expected a non-empty list of iterations")
        checkpoints = tuple(sorted({_int(v, f"checkpoints[{i}]", 0) for i, v in enumerate(checkpoints)}))

    output = mapping.get("output", f"runs/{mapping.get('name', 'experiment')}")
    if not isinstance(output, str):
        raise exceptions.ConfigError("output", "expected a directory path")

    compare = mapping.get("compare")
    if compare is not None and not isinstance(compare, str):
        raise exceptions.ConfigError("compare", "expected a reference table id")

    name = mapping.get("name", "experiment")
    if not isinstance(name, str):
        raise exceptions.ConfigError("name", "expected a string")

    return ExperimentConfig(
        name=name,
        seed=_int(mapping.get("seed", 0), "seed", 0),
        trials=_int(mapping.get("trials", 1), "trials", 1),
        method=method,
        problem=_parse_problem(_section(mapping, "problem", ""), base_dir),
        adversary=_parse_adversary(_section(mapping, "adversary", "")),
        solver=solver,
        output=Path(output),
        checkpoints=checkpoints,
        plots=_bool(mapping.get("plots", False), "plots"),
        compare=compare,
        n_jobs=_int(mapping.get("n_jobs", 1), "n_jobs"),
        raw=dict(mapping),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        mapping = yaml.safe_load(path.read_text())
    except OSError as e:
        raise exceptions.ConfigError("", f"cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise exceptions.ConfigError("", f"invalid YAML in {path}: {e}") from e
    return parse_config(mapping, base_dir=path.parent)
