"""Closed-form analysis of age-dependent Markov selection policies.

A client's age lives on the chain ``0 -> 1 -> ... -> m`` (state ``m`` loops on
itself).  In state ``j`` the client transmits with probability ``p[j]`` and
returns to state 0.  The load metric ``X`` is the return time to state 0, i.e.
the number of rounds between two consecutive selections of the client.

Every function here is pure.  Probabilities may be floats or
:class:`fractions.Fraction`; with fractions all arithmetic is exact, which the
test-suite uses to check the optimum formulas with zero tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from numbers import Real
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linprog, minimize_scalar

from ._validation import check_int, check_probability

__all__ = [
    "PolicyConfig",
    "MarkovPolicy",
    "StationaryDistribution",
    "ReturnTimeMoments",
    "ReturnTimePMF",
    "OptimalPolicyResult",
    "GridSearchResult",
    "SelectionStats",
    "Regime",
    "random_selection_stats",
    "stationary_distribution",
    "return_time_moments",
    "return_time_distribution",
    "optimal_policy",
    "grid_search_optimum",
    "grid_search_m1",
    "constraint_residual",
]


class Regime(str, Enum):
    """Which branch of the optimum construction produced a policy."""

    M1_LOW_K = "m1_low_k"                  # m = 1, k <= n/2
    M1_HIGH_K = "m1_high_k"                # m = 1, k > n/2
    BELOW_FLOOR = "m_below_floor"          # m <= floor(n/k) - 1
    AT_OR_ABOVE_FLOOR = "m_at_or_above_floor"  # m >= floor(n/k)


@dataclass(frozen=True)
class PolicyConfig:
    """Population size ``n``, per-round budget ``k`` and maximum age ``m``."""

    n: int
    k: int
    m: int = 1

    def __post_init__(self):
        n = check_int(self.n, "n", min_value=1)
        k = check_int(self.k, "k", min_value=1)
        check_int(self.m, "m", min_value=1)
        if k > n:
            raise ValueError(f"k must not exceed n (k={k}, n={n})")

    @property
    def ratio(self) -> Fraction:
        """Mean gap ``n/k`` as an exact fraction."""
        return Fraction(self.n, self.k)

    @property
    def period(self) -> int:
        """``floor(n/k)``."""
        return self.n // self.k

    @property
    def selection_probability(self) -> float:
        return self.k / self.n


@dataclass(frozen=True)
class MarkovPolicy:
    """Transmission probabilities ``p[0..m]`` of the age chain.

    ``p[m] == 0`` is rejected because state ``m`` would then be absorbing and
    every return-time moment diverges.
    """

    probs: tuple

    def __post_init__(self):
        probs = self.probs
        if isinstance(probs, np.ndarray):
            probs = probs.tolist()
        probs = tuple(p if isinstance(p, Fraction) else float(p) for p in probs)
        if len(probs) < 2:
            raise ValueError("a Markov policy needs at least two states (m >= 1)")
        for j, p in enumerate(probs):
            check_probability(p, f"p[{j}]")
        if probs[-1] == 0:
            raise ValueError("p[m] must be > 0; state m would be absorbing")
        object.__setattr__(self, "probs", probs)

    @property
    def m(self) -> int:
        return len(self.probs) - 1

    @property
    def exact(self) -> bool:
        return all(isinstance(p, Fraction) for p in self.probs)

    def as_array(self) -> np.ndarray:
        return np.array([float(p) for p in self.probs], dtype=float)

    def to_float(self) -> "MarkovPolicy":
        return MarkovPolicy(tuple(float(p) for p in self.probs))

    def __len__(self):
        return len(self.probs)


@dataclass(frozen=True)
class StationaryDistribution:
    pi: tuple

    def as_array(self) -> np.ndarray:
        return np.array([float(v) for v in self.pi], dtype=float)


@dataclass(frozen=True)
class ReturnTimeMoments:
    """``e[i]`` is the mean number of rounds to reach state 0 from state ``i``
    and ``e2[i]`` the matching second moment.  ``mean`` and ``variance`` refer
    to ``X``, the return time started from state 0."""

    e: tuple
    e2: tuple
    mean: Real
    variance: Real

    @property
    def second_moment(self):
        return self.e2[0]


class SelectionStats(NamedTuple):
    mean: Real
    variance: Real


@dataclass(frozen=True)
class OptimalPolicyResult:
    policy: MarkovPolicy
    min_variance: Real
    regime: Regime


@dataclass(frozen=True)
class GridSearchResult:
    policy: MarkovPolicy
    variance: float
    mean: float


@dataclass(frozen=True)
class ReturnTimePMF:
    """Return-time probabilities on ``1..x_max`` plus the mass beyond.

    Past state ``m`` the walk is geometric, so the tail contribution to the
    moments is added in closed form instead of being truncated.
    """

    pmf: tuple
    tail_mass: Real
    tail_rate: Real
    x_max: int

    def prob(self, x: int):
        if 1 <= x <= self.x_max:
            return self.pmf[x - 1]
        raise IndexError(f"x={x} outside 1..{self.x_max}")

    def as_array(self) -> np.ndarray:
        return np.array([float(v) for v in self.pmf], dtype=float)

    def total_mass(self):
        return sum(self.pmf) + self.tail_mass

    def mean(self):
        head = sum(x * q for x, q in enumerate(self.pmf, start=1))
        p = self.tail_rate
        return head + self.tail_mass * (self.x_max + 1 / p)

    def second_moment(self):
        head = sum(x * x * q for x, q in enumerate(self.pmf, start=1))
        p, b = self.tail_rate, self.x_max
        return head + self.tail_mass * (b * b + 2 * b / p + (2 - p) / (p * p))

    def variance(self):
        mean = self.mean()
        return self.second_moment() - mean * mean


def _coerce_policy(policy) -> MarkovPolicy:
    if isinstance(policy, MarkovPolicy):
        return policy
    return MarkovPolicy(tuple(policy))


def _survival_products(probs: Sequence) -> list:
    """``y[t] = prod_{j<=t} (1 - p[j])`` for ``t = 0..m-1``."""
    out = []
    acc = 1
    for p in probs[:-1]:
        acc = acc * (1 - p)
        out.append(acc)
    return out


def random_selection_stats(config: PolicyConfig, exact: bool = False) -> SelectionStats:
    """Mean and variance of the gap under uniform random ``k``-of-``n`` selection.

    The gap is geometric with success probability ``k/n``.
    """
    n, k = config.n, config.k
    mean = Fraction(n, k)
    variance = Fraction(n * (n - k), k * k)
    if exact:
        return SelectionStats(mean, variance)
    return SelectionStats(float(mean), float(variance))


def stationary_distribution(policy) -> StationaryDistribution:
    """Long-run occupation probabilities of the age states."""
    policy = _coerce_policy(policy)
    probs = policy.probs
    y = _survival_products(probs)
    p_last = probs[-1]
    denom = 1 + sum(y[:-1]) + y[-1] / p_last
    pi = [1 / denom]
    pi.extend(y[i - 1] / denom for i in range(1, policy.m))
    pi.append((y[-1] / p_last) / denom)
    return StationaryDistribution(tuple(pi))


def return_time_moments(policy) -> ReturnTimeMoments:
    """First and second moments of the return time to state 0.

    Solved by the backward recursions
    ``E_i = 1 + (1 - p_i) E_{i+1}`` and
    ``E[X_i^2] = 1 + (1 - p_i) (2 E_{i+1} + E[X_{i+1}^2])``
    anchored at ``E_m = 1/p_m`` and ``E[X_m^2] = (2 - p_m)/p_m^2``.
    """
    policy = _coerce_policy(policy)
    probs = policy.probs
    m = policy.m
    p_last = probs[m]
    e = [None] * (m + 1)
    e2 = [None] * (m + 1)
    e[m] = 1 / p_last
    e2[m] = (2 - p_last) / (p_last * p_last)
    for i in range(m - 1, -1, -1):
        q = 1 - probs[i]
        e[i] = 1 + q * e[i + 1]
        e2[i] = 1 + q * (2 * e[i + 1] + e2[i + 1])
    mean = e[0]
    variance = e2[0] - mean * mean
    return ReturnTimeMoments(tuple(e), tuple(e2), mean, variance)


def return_time_distribution(policy, x_max: int) -> ReturnTimePMF:
    """Exact law of the return time, tabulated on ``1..x_max``.

    Used as an oracle for :func:`return_time_moments`: it walks the chain
    forward instead of solving the recursions.
    """
    policy = _coerce_policy(policy)
    m = policy.m
    x_max = check_int(x_max, "x_max", min_value=1)
    if x_max < m:
        # below m the overshoot past x_max is not geometric
        raise ValueError(f"x_max must be >= m = {m}, got {x_max}")
    probs = policy.probs
    p_last = probs[m]
    pmf = []
    reach = 1  # probability of not having been selected before age x-1
    for x in range(1, m + 1):
        pmf.append(probs[x - 1] * reach)
        reach = reach * (1 - probs[x - 1])
    # reach == P(X > m)
    stay = 1 - p_last
    for x in range(m + 1, x_max + 1):
        pmf.append(reach * p_last * stay ** (x - m - 1))
    tail = reach * stay ** (x_max - m)
    return ReturnTimePMF(tuple(pmf), tail, p_last, x_max)


def constraint_residual(policy, config: PolicyConfig) -> float:
    """``E[X] - n/k``; zero when the policy selects each client at rate ``k/n``."""
    mean = return_time_moments(policy).mean
    if isinstance(mean, Fraction):
        return mean - config.ratio
    return float(mean) - config.n / config.k


def optimal_policy(config: PolicyConfig, exact: bool = False) -> OptimalPolicyResult:
    """Variance-minimising policy subject to mean gap ``n/k``.

    For ``m = 1`` the optimum is ``[0, k/(n-k)]`` when ``k <= n/2`` and
    ``[(2k-n)/k, 1]`` otherwise.  For larger ``m``, with ``i = floor(n/k)``:
    if ``m < i`` all mass goes on the last state, ``p_m = 1/(n/k - m)``;
    otherwise ``p`` is zero before state ``i-1``, ``i + 1 - n/k`` at ``i-1``
    and one from ``i`` on.  The minimum variance is then ``c (1 - c)`` with
    ``c`` the fractional part of ``n/k``.
    """
    n, k, m = config.n, config.k, config.m
    r = config.ratio
    zero, one = Fraction(0), Fraction(1)
    if m == 1:
        if 2 * k <= n:
            probs = [zero, Fraction(k, n - k)]
            var = Fraction((n - k) * (n - 2 * k), k * k)
            regime = Regime.M1_LOW_K
        else:
            probs = [Fraction(2 * k - n, k), one]
            var = Fraction((n - k) * (2 * k - n), k * k)
            regime = Regime.M1_HIGH_K
    else:
        i = config.period
        if m <= i - 1:
            probs = [zero] * m + [1 / (r - m)]
            var = (r - m) * (r - (m + 1))
            regime = Regime.BELOW_FLOOR
        else:
            probs = [zero] * (i - 1) + [i + 1 - r] + [one] * (m - i + 1)
            c = r - i
            var = c * (1 - c)
            regime = Regime.AT_OR_ABOVE_FLOOR
    policy = MarkovPolicy(tuple(probs))
    if not exact:
        return OptimalPolicyResult(policy.to_float(), float(var), regime)
    return OptimalPolicyResult(policy, var, regime)


# --------------------------------------------------------------------------
# numerical oracle

def _moment_coefficients(m: int, p_last):
    """Coefficients of E[X] and E[X^2] as linear forms in ``(1, y_0..y_{m-1})``.

    Built from the law ``P(X = x) = y_{x-2} - y_{x-1}`` (``y_{-1} = 1``) for
    ``x <= m`` and ``P(X > m) = y_{m-1}`` with a geometric overshoot of rate
    ``p_last``.  ``p_last`` may be an array, in which case the last column
    broadcasts over it.
    """
    p_last = np.asarray(p_last, dtype=float)
    shape = p_last.shape + (m + 1,)
    c1 = np.zeros(shape)
    c2 = np.zeros(shape)
    for x in range(1, m + 1):
        # +y_{x-2}: column x-1 (column 0 is the constant y_{-1} = 1)
        c1[..., x - 1] += x
        c2[..., x - 1] += x * x
        c1[..., x] -= x
        c2[..., x] -= x * x
    c1[..., m] += m + 1.0 / p_last
    c2[..., m] += m * m + 2.0 * m / p_last + (2.0 - p_last) / p_last ** 2
    return c1, c2


def _policy_from_survival(y, p_last) -> MarkovPolicy:
    probs = []
    prev = 1.0
    for yt in y:
        if prev <= 1e-15:
            probs.append(1.0)
        else:
            probs.append(min(1.0, max(0.0, 1.0 - yt / prev)))
        prev = yt
    probs.append(float(p_last))
    return MarkovPolicy(tuple(probs))


def grid_search_m1(config: PolicyConfig, resolution: int = 1000) -> GridSearchResult:
    """Brute-force optimum for ``m = 1`` on a ``(p0, p1)`` grid.

    Each axis carries a uniform grid of spacing ``1/resolution``; every grid
    value is projected onto the constraint curve ``E[X] = n/k`` along the
    other axis and the feasible projections are scored.
    """
    resolution = check_int(resolution, "resolution", min_value=1)
    r = config.n / config.k
    grid = np.linspace(0.0, 1.0, resolution + 1)
    p0_parts, p1_parts = [], []
    if r > 1:
        # p0 on the grid, p1 projected
        p1 = (1.0 - grid) / (r - 1.0)
        ok = (p1 > 0) & (p1 <= 1.0)
        p0_parts.append(grid[ok])
        p1_parts.append(p1[ok])
    # p1 on the grid, p0 projected
    p1 = grid[1:]
    p0 = 1.0 - p1 * (r - 1.0)
    ok = (p0 >= 0) & (p0 <= 1.0)
    p0_parts.append(p0[ok])
    p1_parts.append(p1[ok])
    p0 = np.concatenate(p0_parts)
    p1 = np.concatenate(p1_parts)
    if p0.size == 0:
        raise ValueError(f"no feasible grid point for {config}")
    c1, c2 = _moment_coefficients(1, p1)
    y0 = 1.0 - p0
    mean = c1[:, 0] + c1[:, 1] * y0
    var = c2[:, 0] + c2[:, 1] * y0 - mean ** 2
    best = int(np.argmin(var))
    policy = MarkovPolicy((float(p0[best]), float(p1[best])))
    return GridSearchResult(policy, float(var[best]), float(mean[best]))


def _lp_slice(m: int, r: float, p_last: float):
    """Best ``(variance, y)`` with ``p_m = p_last`` fixed, or ``None`` if infeasible."""
    c1, c2 = _moment_coefficients(m, p_last)
    a_ub = np.zeros((m - 1, m))
    for t in range(m - 1):
        a_ub[t, t] = -1.0
        a_ub[t, t + 1] = 1.0
    res = linprog(
        c2[1:],
        A_ub=a_ub,
        b_ub=np.zeros(m - 1),
        A_eq=c1[1:].reshape(1, -1),
        b_eq=[r - c1[0]],
        bounds=[(0.0, 1.0)] * m,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10,
                 "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        return None
    y = np.clip(res.x, 0.0, 1.0)
    if abs(c1[0] + c1[1:] @ y - r) > 1e-9 * r:
        return None
    return float(c2[0] + c2[1:] @ y - r * r), y


def grid_search_optimum(config: PolicyConfig, resolution: int = 200) -> GridSearchResult:
    """Numerical optimum used to cross-check :func:`optimal_policy`.

    Oracle only; not a production path.  In survival coordinates
    ``y_t = prod_{j<=t} (1 - p_j)`` both the mean constraint and the second
    moment are linear in ``y`` once ``p_m`` is fixed, so ``p_m`` is scanned on
    a uniform grid and each slice is solved as a linear programme over
    ``1 >= y_0 >= ... >= y_{m-1} >= 0``.  The best grid cell is then polished:
    the feasibility edge in ``p_m`` is located by bisection and a bounded
    scalar search runs inside the cell.  Every scored point is feasible, so
    the result never undercuts the true minimum.

    ``m = 1`` delegates to :func:`grid_search_m1`.  Tested up to ``m = 12``.
    """
    resolution = check_int(resolution, "resolution", min_value=1)
    m = config.m
    if m == 1:
        return grid_search_m1(config, resolution)
    r = config.n / config.k
    h = 1.0 / resolution

    best = None  # (variance, y, p_last)

    def consider(p_last):
        nonlocal best
        out = _lp_slice(m, r, p_last)
        if out is None:
            return math.inf
        var, y = out
        if best is None or var < best[0]:
            best = (var, y, p_last)
        return var

    feasible = {}
    # descending so that ties (p_m irrelevant when state m is unreachable)
    # keep the largest p_m
    for j in range(resolution, 0, -1):
        feasible[j] = math.isfinite(consider(j * h))
    if best is None:
        raise ValueError(f"no feasible policy found for {config}")

    j_best = round(best[2] / h)
    lower = max((j_best - 1) * h, h * 1e-3)
    upper = min((j_best + 1) * h, 1.0)
    if j_best < resolution and not feasible[j_best + 1]:
        lo, hi = j_best * h, (j_best + 1) * h
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _lp_slice(m, r, mid) is None:
                hi = mid
            else:
                lo = mid
        upper = lo
        consider(upper)
    if upper > lower:
        minimize_scalar(consider, bounds=(lower, upper), method="bounded",
                        options={"xatol": 1e-12})

    var, y, p_last = best
    policy = _policy_from_survival(y, p_last)
    c1, _ = _moment_coefficients(m, p_last)
    mean = float(c1[0] + c1[1:] @ y)
    return GridSearchResult(policy, var, mean)
