"""Exact mode-distribution probabilities and convergence constants.

Every probability is a :class:`fractions.Fraction` built from Python integers;
floats appear only in the contraction factor, the bound curves and the derived
``q0``/``q_l`` ratios.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import cache

import numpy as np

from . import exceptions
from .model import RELIABLE, AdversaryConfig, LinearProblem, SplitPolicy, homogeneous_counts

logger = logging.getLogger(__name__)

MAX_MULTISETS = 1_000_000


class G0Rule(str, Enum):
    LEMMA = "lemma"
    CATEGORIES = "categories"


@dataclass(frozen=True)
class CategoryCounts:
    """Worker counts of one row: ``counts[0]`` reliable, ``counts[l]`` category ``l``."""

    counts: tuple[int, ...]
    n: int

    def __post_init__(self) -> None:
        counts = tuple(int(m) for m in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts or any(m < 0 for m in counts):
            raise exceptions.InvalidAdversaryError(f"Invalid category counts {counts}")
        if any(m >= counts[RELIABLE] for m in counts[1:]):
            raise exceptions.InvalidAdversaryError(f"Reliable count must exceed every category, got {counts}")
        if not 1 <= self.n <= sum(counts):
            raise exceptions.InvalidAdversaryError(f"Need 1 <= n <= N, got n={self.n}, N={sum(counts)}")

    @classmethod
    def homogeneous(cls, N: int, n: int, k: int, p: float | Fraction | str, split: SplitPolicy = "exact") -> CategoryCounts:
        return cls(homogeneous_counts(N, k, p, split), n)

    @classmethod
    def from_adversary(cls, adversary: AdversaryConfig, row: int) -> CategoryCounts:
        return cls(tuple(int(m) for m in adversary.counts[row]), int(adversary.n[row]))

    @property
    def N(self) -> int:
        return sum(self.counts)

    @property
    def k(self) -> int:
        return len(self.counts) - 1

    @property
    def p0(self) -> Fraction:
        return Fraction(self.counts[RELIABLE], self.N)

    @property
    def total(self) -> int:
        return math.comb(self.N, self.n)

    def g0(self, rule: G0Rule = G0Rule.LEMMA) -> int:
        by_categories = -(-self.n // (self.k + 1))
        if G0Rule(rule) is G0Rule.CATEGORIES:
            return by_categories
        return max(by_categories, math.ceil(self.n * self.p0))


def counts_per_row(adversary: AdversaryConfig) -> list[CategoryCounts]:
    return [CategoryCounts.from_adversary(adversary, r) for r in range(adversary.d1)]


# --------------------------------------------------------------------------- #
# Generating-function coefficients
# --------------------------------------------------------------------------- #


def _bin_poly(m: int, g: int) -> list[int]:
    """``sum_{j < g} C(m, j) x^j``."""

    return [math.comb(m, j) for j in range(min(g - 1, m) + 1)]


def _convolve(p: list[int], q: list[int], degree: int) -> list[int]:
    out = [0] * min(len(p) + len(q) - 1, degree + 1)
    for i, a in enumerate(p):
        if a == 0 or i > degree:
            continue
        for j, b in enumerate(q[: degree - i + 1]):
            out[i + j] += a * b
    return out


def _coefficient(bins: Sequence[int], g: int, degree: int) -> int:
    if degree < 0:
        return 0
    poly = [1]
    for m in bins:
        poly = _convolve(poly, _bin_poly(m, g), degree)
    return poly[degree] if degree < len(poly) else 0


def _check_g(g: int) -> None:
    if g < 1:
        raise exceptions.InvalidOptionsError(f"Mode size must be >= 1, got {g}")


@cache
def gen_coeff_a(counts: CategoryCounts, g: int, excluded: int) -> int:
    """Coefficient of ``x^(n-g)`` in the product over categories other than ``excluded``."""

    _check_g(g)
    if g > counts.n:
        raise exceptions.InvalidOptionsError(f"Mode size {g} exceeds the sample size {counts.n}")
    if not 0 <= excluded <= counts.k:
        raise exceptions.InvalidOptionsError(f"Category {excluded} out of range 0..{counts.k}")
    others = [m for i, m in enumerate(counts.counts) if i != excluded]
    return _coefficient(others, g, counts.n - g)


@cache
def gen_coeff_b(counts: CategoryCounts, g: int) -> int:
    """Number of size-``n`` worker selections in which every category appears fewer than ``g`` times."""

    _check_g(g)
    return _coefficient(counts.counts, g, counts.n)


def mode_prob(counts: CategoryCounts, g: int, category: int) -> Fraction:
    """Probability that ``category`` is the unique most frequent one with exactly ``g`` members."""

    m = counts.counts[category]
    if m < g:
        return Fraction(0)
    return Fraction(math.comb(m, g) * gen_coeff_a(counts, g, category), counts.total)


def no_tie_ratio(counts: CategoryCounts, g: int) -> Fraction:
    """``b_g / C(N, n)``: chance that a row's largest group is smaller than ``g``."""

    return Fraction(gen_coeff_b(counts, g), counts.total)


# --------------------------------------------------------------------------- #
# Single-row distribution
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ModeDistribution:
    counts: CategoryCounts
    g0: int
    probs: Mapping[tuple[int, int], Fraction] = field(repr=False)
    q_hat: tuple[Fraction, ...]
    q_g: Mapping[int, Fraction] = field(repr=False)
    q: Fraction

    @property
    def q0(self) -> float | None:
        return float(self.q_hat[RELIABLE] / self.q) if self.q else None

    @property
    def q_l(self) -> tuple[float, ...] | None:
        if not self.q:
            return None
        return tuple(float(qh / self.q) for qh in self.q_hat)

    @property
    def q_hat_adversarial(self) -> Fraction:
        """Mode probability of one adversarial category (they are equal in a homogeneous split)."""

        return max(self.q_hat[1:], default=Fraction(0))

    def as_row(self) -> dict[str, float]:
        return {
            "q_hat_l": float(self.q_hat_adversarial),
            "q_hat_0": float(self.q_hat[RELIABLE]),
            "q": float(self.q),
            "q0": self.q0 if self.q0 is not None else float("nan"),
        }


def mode_distribution(counts: CategoryCounts, rule: G0Rule = G0Rule.LEMMA) -> ModeDistribution:
    g0 = counts.g0(rule)
    probs: dict[tuple[int, int], Fraction] = {}
    for g in range(g0, counts.n + 1):
        for category in range(counts.k + 1):
            probs[(g, category)] = mode_prob(counts, g, category)
    q_hat = tuple(sum((probs[(g, c)] for g in range(g0, counts.n + 1)), Fraction(0)) for c in range(counts.k + 1))
    q_g = {g: sum((probs[(g, c)] for c in range(counts.k + 1)), Fraction(0)) for g in range(g0, counts.n + 1)}
    return ModeDistribution(counts=counts, g0=g0, probs=probs, q_hat=q_hat, q_g=q_g, q=sum(q_hat, Fraction(0)))


def joint_mode_prob(
    counts: Mapping[int, CategoryCounts] | Sequence[CategoryCounts],
    t: int,
    category: int,
    g: int,
    tau: Sequence[int],
) -> Fraction:
    """Row ``t`` wins with ``category`` at mode size ``g`` while every other row of ``tau`` stays below ``g``."""

    if t not in tau:
        raise exceptions.InvalidOptionsError(f"Row {t} is not part of {list(tau)}")
    value = mode_prob(counts[t], g, category)
    for s in tau:
        if s != t and value:
            value *= no_tie_ratio(counts[s], g)
    return value


def joint_row_prob(
    counts: Mapping[int, CategoryCounts] | Sequence[CategoryCounts],
    t: int,
    g: int,
    tau: Sequence[int],
) -> Fraction:
    return sum((joint_mode_prob(counts, t, c, g, tau) for c in range(counts[t].k + 1)), Fraction(0))


# --------------------------------------------------------------------------- #
# Convergence constants
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TheoremConstants:
    d1: int
    d0: int
    sigma_min_tilde: float
    q_min: Fraction
    beta: tuple[Fraction, ...] = field(repr=False)
    # (row class, g) -> contribution of mode size g to that class's beta
    q_max: Mapping[tuple[int, int], Fraction] = field(repr=False)
    row_class: tuple[int, ...] = field(repr=False)
    alpha: float
    homogeneous_q: Fraction | None = None
    homogeneous_beta: Fraction | None = None

    def forcing(self, err_norms: Sequence[float] | np.ndarray) -> float:
        """``sum_t beta_t |e_t|^2``."""

        err = np.asarray(err_norms, dtype=float)
        if err.shape != (self.d1,):
            raise exceptions.InvalidOptionsError(f"Need {self.d1} error norms, got {err.shape}")
        return float(sum(float(b) * e for b, e in zip(self.beta, err, strict=True) if e))

    def asymptote(self, err_norms: Sequence[float] | np.ndarray) -> float:
        if not 0 < self.alpha < 1:
            raise exceptions.BoundUndefinedError(f"alpha = {self.alpha} is outside (0, 1)")
        return self.forcing(err_norms) / (1.0 - self.alpha)


def _multisets(available: Sequence[int], size: int) -> Iterator[tuple[int, ...]]:
    """All ``(k_1, ..., k_m)`` with ``0 <= k_c <= available[c]`` summing to ``size``."""

    if not available:
        if size == 0:
            yield ()
        return
    head, rest = available[0], available[1:]
    room = sum(rest)
    for take in range(max(0, size - room), min(head, size) + 1):
        for tail in _multisets(rest, size - take):
            yield (take, *tail)


def _multiset_count(available: Sequence[int], size: int, cap: int) -> int:
    # Counts by dynamic programming so the cap check does not enumerate.
    ways = [1] + [0] * size
    for a in available:
        ways = [sum(ways[s - j] for j in range(0, min(a, s) + 1)) for s in range(size + 1)]
        if ways[size] > cap:
            return ways[size]
    return ways[size]


def theorem_constants(
    d1: int,
    d0: int,
    counts: CategoryCounts | Sequence[CategoryCounts],
    sigma_min_tilde: float,
    rule: G0Rule = G0Rule.LEMMA,
    max_multisets: int = MAX_MULTISETS,
) -> TheoremConstants:
    """Contraction factor and error weights of the multi-row convergence bound.

    The min over ``(t, tau)`` and the sum over ``tau`` only depend on how many
    rows of each distinct count class sit in ``tau``, so they are evaluated
    exactly over class multisets weighted by the number of row subsets
    realizing them.
    """

    if not 1 <= d0 <= d1:
        raise exceptions.InvalidOptionsError(f"Need 1 <= d0 <= d1, got d0={d0}, d1={d1}")
    rows = [counts] * d1 if isinstance(counts, CategoryCounts) else list(counts)
    if len(rows) != d1:
        raise exceptions.InvalidOptionsError(f"Need counts for {d1} rows, got {len(rows)}")

    classes: list[CategoryCounts] = []
    row_class: list[int] = []
    for c in rows:
        if c not in classes:
            classes.append(c)
        row_class.append(classes.index(c))
    multiplicity = [row_class.count(i) for i in range(len(classes))]
    dists = [mode_distribution(c, rule) for c in classes]
    total_subsets = math.comb(d1, d0)

    q_min: Fraction | None = None
    beta_by_class: list[Fraction] = []
    q_max: dict[tuple[int, int], Fraction] = {}
    for ci, dist in enumerate(dists):
        available = [m - (1 if i == ci else 0) for i, m in enumerate(multiplicity)]
        if _multiset_count(available, d0 - 1, max_multisets) > max_multisets:
            raise exceptions.InvalidOptionsError(
                f"More than {max_multisets} row-class multisets for d0={d0}; reduce the number of distinct row classes"
            )
        beta = Fraction(0)
        for taken in _multisets(available, d0 - 1):
            weight = math.prod(math.comb(a, t) for a, t in zip(available, taken, strict=True))
            q_value = Fraction(0)
            for g in range(dist.g0, dist.counts.n + 1):
                others = math.prod((no_tie_ratio(classes[i], g) ** t for i, t in enumerate(taken) if t), start=Fraction(1))
                if not others:
                    continue
                q_value += dist.q_g[g] * others
                worst = max(dist.probs[(g, c)] for c in range(dist.counts.k + 1)) * others
                contribution = Fraction(weight, total_subsets) * worst
                q_max[(ci, g)] = q_max.get((ci, g), Fraction(0)) + contribution
                beta += contribution
            if q_min is None or q_value < q_min:
                q_min = q_value
        beta_by_class.append(beta)

    q_min = q_min if q_min is not None else Fraction(0)
    alpha = 1.0 - float(q_min) * d0 / d1 * sigma_min_tilde**2
    if not 0 < alpha < 1:
        logger.warning("alpha = %.6g for d0=%d lies outside (0, 1)", alpha, d0)

    homogeneous_q = homogeneous_beta = None
    if len(classes) == 1:
        homogeneous_q = homogeneous_mode_weight(dists[0], d0)
        homogeneous_beta = Fraction(d0, d1) * homogeneous_q
    return TheoremConstants(
        d1=d1,
        d0=d0,
        sigma_min_tilde=float(sigma_min_tilde),
        q_min=q_min,
        beta=tuple(beta_by_class[c] for c in row_class),
        q_max=q_max,
        row_class=tuple(row_class),
        alpha=alpha,
        homogeneous_q=homogeneous_q,
        homogeneous_beta=homogeneous_beta,
    )


def homogeneous_mode_weight(dist: ModeDistribution, d0: int) -> Fraction:
    """``sum_{g >= g0} q_g (b_g / C(N, n))^(d0 - 1)`` for identical rows."""

    return sum(
        (q * no_tie_ratio(dist.counts, g) ** (d0 - 1) for g, q in dist.q_g.items()),
        Fraction(0),
    )


# --------------------------------------------------------------------------- #
# Bounds
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class BoundCurve:
    iterations: tuple[int, ...]
    values: tuple[float, ...]
    alpha: float
    asymptote: float


def error_norms(problem: LinearProblem, adversary: AdversaryConfig) -> np.ndarray:
    """``|e_t|^2 = sum_l e_{t,l}^2 / |A_t|^2`` per row."""

    if adversary.d1 != problem.d1:
        raise exceptions.InvalidAdversaryError(f"Adversary covers {adversary.d1} rows, problem has {problem.d1}")
    return np.einsum("ij,ij->i", adversary.e_table, adversary.e_table) / problem.row_norms_sq


def _geometric_bound(alpha: float, x0_err_sq: float, forcing: float, iters: Sequence[int], shift: int) -> BoundCurve:
    if not 0 < alpha < 1:
        raise exceptions.BoundUndefinedError(f"alpha = {alpha} is outside (0, 1); the bound is undefined")
    values = tuple(alpha ** (i + shift) * x0_err_sq + (1 - alpha ** (i + 1)) / (1 - alpha) * forcing for i in iters)
    return BoundCurve(iterations=tuple(int(i) for i in iters), values=values, alpha=alpha, asymptote=forcing / (1 - alpha))


def bound_curve(
    constants: TheoremConstants,
    x0_err_sq: float,
    err_norms: Sequence[float] | np.ndarray,
    iters: Sequence[int],
) -> BoundCurve:
    """``alpha^i |x0 - x*|^2 + (1 - alpha^(i+1)) / (1 - alpha) * sum_t beta_t |e_t|^2``."""

    return _geometric_bound(constants.alpha, x0_err_sq, constants.forcing(err_norms), iters, shift=0)


def single_row_bound(
    problem: LinearProblem,
    counts: CategoryCounts,
    e_table: np.ndarray,
    x0_err_sq: float,
    iters: Sequence[int],
    rule: G0Rule = G0Rule.LEMMA,
) -> BoundCurve:
    """Bound for the norm-weighted single-row engine with a shared worker pool.

    ``alpha = 1 - sigma_min(A)^2 / |A|_F^2``; the forcing term is
    ``sum_l q_l |e_l|^2 / |A|_F^2`` with ``q_l`` the conditional mode
    probabilities of category ``l``.
    """

    dist = mode_distribution(counts, rule)
    if not dist.q:
        raise exceptions.BoundUndefinedError("No mode can ever be formed with these counts")
    e_table = np.asarray(e_table, dtype=float)
    if e_table.shape != (problem.d1, counts.k):
        raise exceptions.InvalidAdversaryError(f"e_table must have shape ({problem.d1}, {counts.k})")
    sigma_min = float(np.linalg.svd(problem.A, compute_uv=False)[-1])
    alpha = 1.0 - sigma_min**2 / problem.frob_sq
    q_l = dist.q_l
    forcing = sum(q_l[c] * float(e_table[:, c - 1] @ e_table[:, c - 1]) for c in range(1, counts.k + 1)) / problem.frob_sq
    return _geometric_bound(alpha, x0_err_sq, forcing, iters, shift=1)


# --------------------------------------------------------------------------- #
# Choice of d0
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class D0Point:
    d0: int
    q: Fraction
    alpha: float
    slope: float

    @property
    def slope_sign(self) -> int:
        return int(np.sign(self.slope))


@dataclass(frozen=True)
class D0Scan:
    points: tuple[D0Point, ...]
    best_d0: int
    continuous_minimizer: float | None


def alpha_slope(dist: ModeDistribution, d0: float) -> float:
    """``-sum_g q_g (1 + d0 log r_g) r_g^(d0 - 1)`` with ``r_g = b_g / C(N, n)``; ``r_g = 0`` terms are dropped."""

    total = 0.0
    for g, q in dist.q_g.items():
        r = float(no_tie_ratio(dist.counts, g))
        if r <= 0.0 or not q:
            continue
        total -= float(q) * (1.0 + d0 * math.log(r)) * r ** (d0 - 1)
    return total


def scan_d0(
    counts: CategoryCounts,
    d1: int,
    sigma_min_tilde: float,
    d0_range: Sequence[int] | range,
    rule: G0Rule = G0Rule.LEMMA,
) -> D0Scan:
    """``alpha(d0) = 1 - Q(d0) d0 / d1 sigma^2`` for identical rows over an integer range of ``d0``."""

    dist = mode_distribution(counts, rule)
    points = []
    for d0 in d0_range:
        if not 1 <= d0 <= d1:
            raise exceptions.InvalidOptionsError(f"d0 = {d0} outside [1, {d1}]")
        q = homogeneous_mode_weight(dist, d0)
        points.append(D0Point(d0=d0, q=q, alpha=1.0 - float(q) * d0 / d1 * sigma_min_tilde**2, slope=alpha_slope(dist, d0)))
    if not points:
        raise exceptions.InvalidOptionsError("Empty d0 range")

    minimizer = None
    if dist.g0 == counts.n:
        r = float(no_tie_ratio(counts, counts.n))
        if 0.0 < r < 1.0:
            minimizer = -1.0 / math.log(r)
    best = min(points, key=lambda p: (p.alpha, p.d0))
    return D0Scan(points=tuple(points), best_d0=best.d0, continuous_minimizer=minimizer)
