"""Problem instances, adversary configuration, worker populations and seeded randomness."""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np

from . import exceptions

if TYPE_CHECKING:
    from .aggregation import ModeOutcome

logger = logging.getLogger(__name__)

CONSISTENCY_TOL = 1e-10
RELIABLE = 0

SplitPolicy = Literal["exact", "balanced"]


# --------------------------------------------------------------------------- #
# Randomness
# --------------------------------------------------------------------------- #


def derive_seed(master: int, *keys: int) -> int:
    """Child seed for ``(master, *keys)``; stable across platforms and runs."""

    state = np.random.SeedSequence([int(master), *(int(k) for k in keys)]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


@dataclass
class Streams:
    """Independent generators for the three random choices a solver makes."""

    rows: np.random.Generator
    workers: np.random.Generator
    ties: np.random.Generator


def spawn_streams(seed: int) -> Streams:
    rows, workers, ties = np.random.SeedSequence(int(seed)).spawn(3)
    return Streams(
        rows=np.random.default_rng(rows),
        workers=np.random.default_rng(workers),
        ties=np.random.default_rng(ties),
    )


# --------------------------------------------------------------------------- #
# Linear problem
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class LinearProblem:
    A: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    x_star: np.ndarray | None = field(repr=False)
    row_norms_sq: np.ndarray = field(repr=False)
    sigma_min_tilde: float
    frob_sq: float
    seed: int | None = None
    source: str = "arrays"

    @classmethod
    def from_arrays(
        cls,
        A: np.ndarray | Sequence[Sequence[float]],
        b: np.ndarray | Sequence[float],
        x_star: np.ndarray | Sequence[float] | None = None,
        seed: int | None = None,
        source: str = "arrays",
    ) -> LinearProblem:
        A = np.array(A, dtype=float, copy=True)
        b = np.array(b, dtype=float, copy=True)
        if A.ndim != 2:
            raise exceptions.InvalidProblemError(f"A must be a matrix, got {A.ndim} dimension(s)")
        d1, d2 = A.shape
        if d2 < 1 or d1 < d2:
            raise exceptions.InvalidProblemError(f"Need d1 >= d2 >= 1, got {d1}x{d2}")
        if b.shape != (d1,):
            raise exceptions.InvalidProblemError(f"b must have shape ({d1},), got {b.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise exceptions.InvalidProblemError("A and b must be finite")

        row_norms_sq = np.einsum("ij,ij->i", A, A)
        zero_rows = np.flatnonzero(row_norms_sq <= 0.0)
        if zero_rows.size:
            raise exceptions.InvalidProblemError(f"Zero row(s) at index {zero_rows.tolist()[:5]}")

        if x_star is not None:
            x_star = np.array(x_star, dtype=float, copy=True)
            if x_star.shape != (d2,):
                raise exceptions.InvalidProblemError(f"x_star must have shape ({d2},), got {x_star.shape}")
            residual = np.max(np.abs(A @ x_star - b))
            if residual > CONSISTENCY_TOL * max(1.0, float(np.max(np.abs(b)))):
                raise exceptions.InvalidProblemError(f"Inconsistent system: |Ax* - b|_inf = {residual:.3e}")

        normalized = A / np.sqrt(row_norms_sq)[:, None]
        sigma_min_tilde = float(np.linalg.svd(normalized, compute_uv=False)[-1])

        for arr in (A, b, row_norms_sq) + ((x_star,) if x_star is not None else ()):
            arr.setflags(write=False)
        return cls(
            A=A,
            b=b,
            x_star=x_star,
            row_norms_sq=row_norms_sq,
            sigma_min_tilde=sigma_min_tilde,
            frob_sq=float(row_norms_sq.sum()),
            seed=seed,
            source=source,
        )

    @property
    def d1(self) -> int:
        return int(self.A.shape[0])

    @property
    def d2(self) -> int:
        return int(self.A.shape[1])

    @property
    def normalized(self) -> np.ndarray:
        return self.A / np.sqrt(self.row_norms_sq)[:, None]

    @cached_property
    def uniform_norms(self) -> bool:
        return bool(np.allclose(self.row_norms_sq, self.row_norms_sq[0], rtol=1e-12, atol=0.0))

    @cached_property
    def row_probs(self) -> np.ndarray:
        probs = self.row_norms_sq / self.frob_sq
        probs.setflags(write=False)
        return probs

    def squared_error(self, x: np.ndarray) -> float:
        if self.x_star is None:
            raise exceptions.InvalidProblemError("Problem has no ground truth x_star")
        diff = x - self.x_star
        return float(diff @ diff)

    def residual_norm(self, x: np.ndarray) -> float:
        return float(np.linalg.norm(self.A @ x - self.b))


def _normalize_rows(A: np.ndarray, source: str) -> np.ndarray:
    norms = np.linalg.norm(A, axis=1)
    zero_rows = np.flatnonzero(norms == 0.0)
    if zero_rows.size:
        raise exceptions.InvalidProblemError(f"{source}: zero row at index {int(zero_rows[0])} cannot be normalized")
    return A / norms[:, None]


def make_synthetic_problem(d1: int, d2: int, seed: int) -> LinearProblem:
    """Row-normalized Gaussian matrix, standard normal ``x_star`` and ``b = A x_star``."""

    if d2 < 1 or d1 < d2:
        raise exceptions.InvalidProblemError(f"Need d1 >= d2 >= 1, got {d1}x{d2}")
    rng = np.random.default_rng(seed)
    A = _normalize_rows(rng.standard_normal((d1, d2)), "synthetic")
    x_star = rng.standard_normal(d2)
    return LinearProblem.from_arrays(A, A @ x_star, x_star, seed=seed, source=f"synthetic:{d1}x{d2}")


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv_problem(
    path: str | Path,
    normalize: bool = True,
    seed: int = 0,
    usecols: Sequence[int | str] | None = None,
) -> LinearProblem:
    """Read a numeric CSV as ``A`` and build a consistent system around it.

    A header is detected when the first row is not fully numeric. ``usecols``
    selects columns by index, or by name when a header is present. Row numbers
    in errors are 1-based file lines.
    """

    path = Path(path)
    try:
        with path.open(newline="") as handle:
            rows = [row for row in csv.reader(handle) if row and any(cell.strip() for cell in row)]
    except OSError as e:
        raise exceptions.DataFormatError(f"Cannot read {path}: {e}") from e
    except csv.Error as e:
        raise exceptions.DataFormatError(f"Malformed CSV {path}: {e}") from e

    if not rows:
        raise exceptions.DataFormatError(f"{path} contains no data")

    header: list[str] | None = None
    first_line = 1
    header_cells = rows[0]
    if usecols is not None and all(isinstance(col, int) for col in usecols):
        # label or id columns outside the selection do not make a header
        header_cells = [rows[0][col] for col in usecols if 0 <= col < len(rows[0])]
    if not all(_is_number(cell) for cell in header_cells):
        header = [cell.strip() for cell in rows[0]]
        rows = rows[1:]
        first_line = 2
    if not rows:
        raise exceptions.DataFormatError(f"{path} has a header but no data rows")

    width = len(header) if header is not None else len(rows[0])
    columns = _resolve_columns(usecols, header, width)

    data = np.empty((len(rows), len(columns)))
    for i, row in enumerate(rows):
        line = first_line + i
        if len(row) != width:
            raise exceptions.DataFormatError(f"Expected {width} columns, found {len(row)}", row=line)
        for j, col in enumerate(columns):
            try:
                data[i, j] = float(row[col])
            except ValueError as e:
                raise exceptions.DataFormatError(f"Non-numeric value {row[col]!r}", row=line, column=col + 1) from e

    A = _normalize_rows(data, str(path)) if normalize else data
    d2 = A.shape[1]
    x_star = np.random.default_rng(seed).standard_normal(d2)
    logger.info("Loaded %s: %d rows x %d columns (normalize=%s)", path, A.shape[0], d2, normalize)
    return LinearProblem.from_arrays(A, A @ x_star, x_star, seed=seed, source=f"csv:{path.name}")


def _resolve_columns(usecols: Sequence[int | str] | None, header: list[str] | None, width: int) -> list[int]:
    if usecols is None:
        return list(range(width))
    columns = []
    for col in usecols:
        if isinstance(col, str):
            if header is None or col not in header:
                raise exceptions.DataFormatError(f"Unknown column name {col!r}")
            columns.append(header.index(col))
        elif 0 <= col < width:
            columns.append(int(col))
        else:
            raise exceptions.DataFormatError(f"Column index {col} out of range", column=col + 1)
    return columns


# --------------------------------------------------------------------------- #
# Adversary configuration
# --------------------------------------------------------------------------- #


def as_fraction(value: float | int | str | Fraction) -> Fraction:
    if isinstance(value, Fraction):
        return value
    try:
        if isinstance(value, float):
            return Fraction(repr(value))
        return Fraction(value)
    except (ValueError, ZeroDivisionError) as e:
        raise exceptions.InvalidAdversaryError(f"Not a rate: {value!r}") from e


@dataclass(frozen=True, eq=False)
class AdversaryConfig:
    """Per-row worker counts by category (column 0 reliable), sample sizes and category errors."""

    counts: np.ndarray
    n: np.ndarray
    e_table: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts)
        n = np.asarray(self.n)
        e_table = np.asarray(self.e_table, dtype=float)
        if e_table.ndim == 1 and e_table.size == 0:
            e_table = e_table.reshape(counts.shape[0] if counts.ndim == 2 else 0, 0)
        if counts.ndim != 2 or counts.shape[0] < 1 or counts.shape[1] < 1:
            raise exceptions.InvalidAdversaryError(f"counts must be a (d1, k+1) matrix, got shape {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer):
            raise exceptions.InvalidAdversaryError("Category counts must be integers")
        d1, width = counts.shape
        if np.any(counts < 0):
            raise exceptions.InvalidAdversaryError("Category counts must be non-negative")
        if width > 1 and np.any(counts[:, 1:] >= counts[:, :1]):
            bad = int(np.flatnonzero(np.any(counts[:, 1:] >= counts[:, :1], axis=1))[0])
            raise exceptions.InvalidAdversaryError(
                f"Row {bad}: every adversarial category must be smaller than the reliable one, got {counts[bad].tolist()}"
            )
        if n.shape != (d1,):
            raise exceptions.InvalidAdversaryError(f"n must have shape ({d1},), got {n.shape}")
        totals = counts.sum(axis=1)
        if np.any(n < 1) or np.any(n > totals):
            raise exceptions.InvalidAdversaryError("Need 1 <= n_r <= N_r on every row")
        if e_table.shape != (d1, width - 1):
            raise exceptions.InvalidAdversaryError(f"e_table must have shape ({d1}, {width - 1}), got {e_table.shape}")
        if not np.all(np.isfinite(e_table)):
            raise exceptions.InvalidAdversaryError("Category errors must be finite")
        counts = counts.astype(np.int64)
        n = n.astype(np.int64)
        for arr in (counts, n, e_table):
            arr.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "e_table", e_table)

    @classmethod
    def from_counts(
        cls,
        counts: Sequence[int] | Sequence[Sequence[int]] | np.ndarray,
        n: int | Sequence[int],
        e_table: np.ndarray | Sequence[float] | Sequence[Sequence[float]] | None = None,
        d1: int | None = None,
    ) -> AdversaryConfig:
        """Explicit counts; a single ``(m0, ..., mk)`` vector is repeated on ``d1`` rows."""

        counts = np.asarray(counts)
        if counts.ndim == 1:
            if d1 is None:
                d1 = np.asarray(e_table).shape[0] if e_table is not None and np.ndim(e_table) == 2 else 1
            counts = np.tile(counts, (d1, 1))
        rows, width = counts.shape
        if e_table is None:
            e_table = np.zeros((rows, width - 1))
        e_table = np.asarray(e_table, dtype=float)
        if e_table.ndim == 1:
            e_table = np.tile(e_table, (rows, 1))
        n_arr = np.full(rows, n, dtype=np.int64) if np.isscalar(n) else np.asarray(n, dtype=np.int64)
        return cls(counts=counts, n=n_arr, e_table=e_table)

    @classmethod
    def homogeneous(
        cls,
        d1: int,
        N: int,
        n: int,
        k: int,
        p: float | Fraction | str,
        e_table: np.ndarray | None = None,
        split: SplitPolicy = "exact",
    ) -> AdversaryConfig:
        """Same split on every row: ``N p`` adversaries spread over ``k`` categories.

        ``split="exact"`` rejects non-integral ``N p / k``. ``split="balanced"``
        keeps ``N p`` (rounded) adversaries and hands the remainder of the
        division to the first categories.
        """

        m = homogeneous_counts(N, k, p, split)
        if e_table is None:
            e_table = np.zeros((d1, k))
        e_table = np.asarray(e_table, dtype=float)
        if e_table.ndim == 1:
            e_table = np.tile(e_table, (d1, 1))
        return cls(counts=np.tile(np.asarray(m, dtype=np.int64), (d1, 1)), n=np.full(d1, n, dtype=np.int64), e_table=e_table)

    @property
    def d1(self) -> int:
        return int(self.counts.shape[0])

    @property
    def k(self) -> int:
        return int(self.counts.shape[1] - 1)

    @property
    def N(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def is_homogeneous(self) -> bool:
        return bool(np.all(self.counts == self.counts[0]) and np.all(self.n == self.n[0]))

    def fractions(self, row: int) -> list[Fraction]:
        total = int(self.counts[row].sum())
        return [Fraction(int(m), total) for m in self.counts[row]]

    def p0(self, row: int) -> Fraction:
        return Fraction(int(self.counts[row, RELIABLE]), int(self.counts[row].sum()))

    def with_errors(self, e_table: np.ndarray) -> AdversaryConfig:
        return AdversaryConfig(counts=self.counts, n=self.n, e_table=e_table)


def homogeneous_counts(N: int, k: int, p: float | Fraction | str, split: SplitPolicy = "exact") -> tuple[int, ...]:
    p = as_fraction(p)
    if not 0 <= p < 1:
        raise exceptions.InvalidAdversaryError(f"Adversarial rate must lie in [0, 1), got {p}")
    if k < 0 or N < 1:
        raise exceptions.InvalidAdversaryError(f"Need N >= 1 and k >= 0, got N={N}, k={k}")
    if k == 0:
        if p != 0:
            raise exceptions.InvalidAdversaryError("k = 0 leaves no category for a non-zero adversarial rate")
        return (N,)

    total = N * p
    if split == "exact":
        per_category = total / k
        if per_category.denominator != 1:
            raise exceptions.InvalidAdversaryError(f"N*p/k = {N}*{p}/{k} is not an integer worker count")
        adversarial = [int(per_category)] * k
    elif split == "balanced":
        rounded = round(total)
        if total.denominator != 1:
            logger.warning("N*p = %s is not integral; rounding to %d adversarial workers", total, rounded)
        base, extra = divmod(rounded, k)
        adversarial = [base + (1 if i < extra else 0) for i in range(k)]
        if extra:
            logger.warning("Uneven split of %d adversarial workers over %d categories: %s", rounded, k, adversarial)
    else:
        raise exceptions.InvalidAdversaryError(f"Unknown split policy {split!r}")
    return (N - sum(adversarial), *adversarial)


# --------------------------------------------------------------------------- #
# Worker population
# --------------------------------------------------------------------------- #


@dataclass
class WorkerPopulation:
    """Mutable per-trial worker state.

    Workers carry global ids. With disjoint pools (one per row) the counter
    slice of a row's ids is that row's ``E_r``; with a shared pool there is one
    global counter vector.
    """

    pools: list[np.ndarray]
    categories: np.ndarray
    counters: np.ndarray
    blocked: np.ndarray
    shared: bool = False
    block_order: list[int] = field(default_factory=list)

    @classmethod
    def build(cls, adversary: AdversaryConfig, shared: bool = False) -> WorkerPopulation:
        if shared:
            if not np.all(adversary.counts == adversary.counts[0]):
                raise exceptions.InvalidAdversaryError("A shared worker pool needs the same category counts on every row")
            categories = np.repeat(np.arange(adversary.k + 1), adversary.counts[0])
            pool = np.arange(categories.size)
            pools = [pool] * adversary.d1
        else:
            categories = np.concatenate([np.repeat(np.arange(adversary.k + 1), row) for row in adversary.counts])
            offsets = np.concatenate([[0], np.cumsum(adversary.N)])
            pools = [np.arange(offsets[r], offsets[r + 1]) for r in range(adversary.d1)]
        size = categories.size
        return cls(
            pools=pools,
            categories=categories,
            counters=np.zeros(size, dtype=np.int64),
            blocked=np.zeros(size, dtype=bool),
            shared=shared,
        )

    @property
    def size(self) -> int:
        return int(self.categories.size)

    @property
    def block_list(self) -> frozenset[int]:
        return frozenset(self.block_order)

    def available(self, row: int) -> np.ndarray:
        pool = self.pools[row]
        return pool[~self.blocked[pool]]

    def category_counts(self, row: int) -> np.ndarray:
        return np.bincount(self.categories[self.pools[row]], minlength=int(self.categories.max()) + 1)

    def record_outcome(self, outcome: ModeOutcome) -> int:
        """Increment counters of sampled workers outside the chosen group; returns the number incremented."""

        if outcome.chosen is None:
            return 0
        incremented = 0
        for index, group in enumerate(outcome.groups):
            if index == outcome.chosen:
                continue
            self.counters[list(group.members)] += 1
            incremented += len(group.members)
        return incremented

    def block_worst(self, row: int, rng: np.random.Generator) -> int | None:
        """Block the unblocked worker of ``row`` with the largest positive counter, ties uniform."""

        pool = self.available(row)
        if pool.size == 0:
            return None
        scores = self.counters[pool]
        top = scores.max()
        if top <= 0:
            return None
        candidates = pool[scores == top]
        worker = int(candidates[0] if candidates.size == 1 else rng.choice(candidates))
        self.blocked[worker] = True
        self.block_order.append(worker)
        logger.debug("Blocked worker %d (row %d, counter %d)", worker, row, int(top))
        return worker

    def blocked_audit(self) -> list[tuple[int, int]]:
        return [(w, int(self.categories[w])) for w in self.block_order]

    def blocklist_accuracy(self) -> float | None:
        """Fraction of blocked workers that are truly adversarial; ``None`` when nothing is blocked."""

        if not self.block_order:
            return None
        cats = self.categories[self.block_order]
        return float(np.count_nonzero(cats != RELIABLE) / cats.size)


def sample_rows(d1: int, d0: int, rng: np.random.Generator) -> np.ndarray:
    if not 1 <= d0 <= d1:
        raise exceptions.InvalidOptionsError(f"Need 1 <= d0 <= d1, got d0={d0}, d1={d1}")
    return rng.choice(d1, size=d0, replace=False)


def sample_norm_weighted_row(problem: LinearProblem, rng: np.random.Generator) -> int:
    """Row drawn with probability ``|A_r|^2 / |A|_F^2``; equal norms use the uniform path."""

    if problem.uniform_norms:
        return int(sample_rows(problem.d1, 1, rng)[0])
    return int(rng.choice(problem.d1, p=problem.row_probs))


def sample_workers(pop: WorkerPopulation, row: int, n_r: int, rng: np.random.Generator) -> np.ndarray:
    pool = pop.available(row)
    if pool.size < n_r:
        raise exceptions.WorkerPoolExhaustedError(row, int(pool.size), n_r)
    return rng.choice(pool, size=n_r, replace=False)
