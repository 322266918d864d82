"""Round-by-round Monte-Carlo simulation of client selection policies.

Clients are tracked by their true (uncapped) age, the number of rounds since
they were last selected.  The Markov chain state of a client is
``min(age, m)``, so a single integer array carries both.  When a client is
selected its gap ``X = age + 1`` is recorded and its age resets to zero.

Randomness: every round consumes exactly one uniform per client, drawn from a
counter-based Philox stream as a ``(rounds, n)`` block.  The value used by
client ``i`` in round ``t`` is fixed by its position in that block, so the
order in which clients are visited never changes the outcome.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from ._validation import check_int, check_probability
from .policy_math import (
    MarkovPolicy,
    PolicyConfig,
    optimal_policy,
    return_time_distribution,
    return_time_moments,
)

__all__ = [
    "InitMode",
    "UniformK",
    "BernoulliIID",
    "MarkovSelection",
    "OldestAgeK",
    "SimMetrics",
    "make_policy",
    "initial_ages",
    "step_round",
    "run_simulation",
    "compare_policies",
    "policy_seed",
    "default_burn_in",
    "format_table",
]

_UNIFORM, _BERNOULLI, _MARKOV, _OLDEST = 0, 1, 2, 3


class InitMode(str, Enum):
    ALL_ZERO = "all_zero"
    RANDOM_PHASE = "random_phase"


@dataclass(frozen=True)
class UniformK:
    """Exactly ``k`` distinct clients chosen uniformly at random."""

    k: int
    name: str = "uniform"
    _kind = _UNIFORM

    def __post_init__(self):
        check_int(self.k, "k", min_value=1)

    def decide(self, ages: np.ndarray, u: np.ndarray) -> np.ndarray:
        # the k smallest of n iid uniforms form a uniformly random k-subset
        chosen = np.zeros(ages.shape[0], dtype=bool)
        chosen[np.argsort(u, kind="stable")[: self.k]] = True
        return chosen


@dataclass(frozen=True)
class BernoulliIID:
    """Each client joins independently with probability ``prob``."""

    prob: float
    name: str = "bernoulli"
    _kind = _BERNOULLI

    def __post_init__(self):
        check_probability(self.prob, "prob")

    def decide(self, ages, u):
        return u < self.prob


@dataclass(frozen=True)
class MarkovSelection:
    """Decentralised age-dependent rule: a client of age ``a`` transmits
    with probability ``p[min(a, m)]``."""

    policy: MarkovPolicy
    name: str = "markov"
    _kind = _MARKOV

    def __post_init__(self):
        if not isinstance(self.policy, MarkovPolicy):
            object.__setattr__(self, "policy", MarkovPolicy(tuple(self.policy)))

    @property
    def m(self) -> int:
        return self.policy.m

    def decide(self, ages, u):
        probs = self.policy.as_array()
        return u < probs[np.minimum(ages, self.policy.m)]


@dataclass(frozen=True)
class OldestAgeK:
    """Centralised baseline: the ``k`` oldest clients, ties broken uniformly."""

    k: int
    name: str = "oldest"
    _kind = _OLDEST

    def __post_init__(self):
        check_int(self.k, "k", min_value=1)

    def decide(self, ages, u):
        # ages are integers and u < 1, so adding u only reorders ties
        keys = ages + u
        chosen = np.zeros(ages.shape[0], dtype=bool)
        chosen[np.argsort(-keys, kind="stable")[: self.k]] = True
        return chosen


POLICY_NAMES = ("uniform", "bernoulli", "markov", "oldest")


def make_policy(name: str, config: PolicyConfig, probs: Sequence | None = None):
    """Build a policy by name; ``markov`` defaults to the optimal policy for ``config``."""
    if name == "uniform":
        return UniformK(config.k)
    if name == "bernoulli":
        return BernoulliIID(config.k / config.n)
    if name == "markov":
        policy = MarkovPolicy(tuple(probs)) if probs is not None else optimal_policy(config).policy
        return MarkovSelection(policy)
    if name == "oldest":
        return OldestAgeK(config.k)
    raise ValueError(f"unknown policy {name!r}; expected one of {', '.join(POLICY_NAMES)}")


def default_burn_in(config: PolicyConfig) -> int:
    return 10 * math.ceil(config.n / config.k)


def policy_seed(seed, name: str) -> np.random.SeedSequence:
    """Per-policy stream, keyed by name so that adding or reordering policies
    leaves the other rows of a comparison unchanged."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def _check_compatible(config: PolicyConfig, policy) -> None:
    if isinstance(policy, (UniformK, OldestAgeK)) and policy.k > config.n:
        raise ValueError(f"policy selects k={policy.k} of only n={config.n} clients")


def initial_ages(config: PolicyConfig, policy, init, rng: np.random.Generator) -> np.ndarray:
    """Starting ages for ``n`` clients.

    ``ALL_ZERO`` is the textbook start where nobody has aged yet.
    ``RANDOM_PHASE`` draws each age from its long-run law, ``P(A = a) =
    P(X > a) / E[X]``; for Markov policies this puts the chain state
    ``min(A, m)`` at its stationary distribution.  Other policies use the
    geometric law of uniform selection and rely on burn-in.
    """
    init = InitMode(init)
    n = config.n
    if init is InitMode.ALL_ZERO:
        return np.zeros(n, dtype=np.int64)
    if isinstance(policy, MarkovSelection):
        mp = policy.policy.to_float()
        m = mp.m
        pmf = return_time_distribution(mp, m).as_array()
        survival = 1.0 - np.concatenate(([0.0], np.cumsum(pmf[:-1])))  # P(X > a), a < m
        p_last = mp.probs[m]
        weights = np.append(survival, (1.0 - pmf.sum()) / p_last)
        weights = np.clip(weights, 0.0, None)
        weights /= weights.sum()
        ages = rng.choice(m + 1, size=n, p=weights).astype(np.int64)
        beyond = ages == m
        ages[beyond] += rng.geometric(p_last, size=int(beyond.sum())) - 1
        return ages
    return (rng.geometric(config.k / config.n, size=n) - 1).astype(np.int64)


def step_round(ages: np.ndarray, policy, rng: np.random.Generator) -> np.ndarray:
    """Advance one round in place; return the boolean selection vector."""
    u = rng.random(ages.shape[0])
    chosen = policy.decide(ages, u)
    ages += 1
    ages[chosen] = 0
    return chosen


@njit(cache=True)
def _simulate_block(kind, k, prob, probs, u, ages, t0, burn_in,
                    sel_counts, gap_hist, count_hist):
    n = ages.shape[0]
    m = probs.shape[0] - 1
    chosen = np.zeros(n, dtype=np.bool_)
    keys = np.empty(n)
    for r in range(u.shape[0]):
        row = u[r]
        if kind == 0:
            order = np.argsort(row)
            chosen[:] = False
            for j in range(k):
                chosen[order[j]] = True
        elif kind == 1:
            for i in range(n):
                chosen[i] = row[i] < prob
        elif kind == 2:
            for i in range(n):
                s = ages[i] if ages[i] < m else m
                chosen[i] = row[i] < probs[s]
        else:
            for i in range(n):
                keys[i] = -(ages[i] + row[i])
            order = np.argsort(keys)
            chosen[:] = False
            for j in range(k):
                chosen[order[j]] = True
        record = t0 + r >= burn_in
        count = 0
        for i in range(n):
            if chosen[i]:
                count += 1
                if record:
                    gap_hist[ages[i] + 1] += 1
                    sel_counts[i] += 1
                ages[i] = 0
            else:
                ages[i] += 1
        if record:
            count_hist[count] += 1


@dataclass
class SimMetrics:
    """Empirical statistics of one simulation run (post burn-in only)."""

    policy: str
    peak_age_mean: float
    peak_age_variance: float
    per_client_selection_freq: np.ndarray
    selected_count_mean: float
    selected_count_variance: float
    peak_age_histogram: dict
    selected_count_histogram: np.ndarray
    rounds_simulated: int
    burn_in: int
    n_samples: int = field(default=0)

    @property
    def recorded_rounds(self) -> int:
        return self.rounds_simulated - self.burn_in

    def _central_moment(self, order: int) -> float:
        xs = np.fromiter(self.peak_age_histogram.keys(), dtype=float)
        cs = np.fromiter(self.peak_age_histogram.values(), dtype=float)
        return float(cs @ (xs - self.peak_age_mean) ** order / cs.sum())

    @property
    def peak_age_mean_stderr(self) -> float:
        return math.sqrt(self.peak_age_variance / self.n_samples)

    @property
    def peak_age_variance_stderr(self) -> float:
        mu4 = self._central_moment(4)
        return math.sqrt(max(mu4 - self.peak_age_variance ** 2, 0.0) / self.n_samples)

    @property
    def selection_freq_stderr(self) -> float:
        """Standard error of one client's selection frequency.

        Renewal-reward CLT: over ``T`` rounds the number of selections has
        variance ``T Var[X] / E[X]^3``.  Reduces to the binomial value
        ``sqrt(p (1 - p) / T)`` for geometric gaps.
        """
        mean = self.peak_age_mean
        return math.sqrt(self.peak_age_variance / (mean ** 3 * self.recorded_rounds))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_client_selection_freq"] = [float(v) for v in self.per_client_selection_freq]
        out["selected_count_histogram"] = [int(v) for v in self.selected_count_histogram]
        out["peak_age_histogram"] = {str(x): int(c) for x, c in self.peak_age_histogram.items()}
        return out

    def histogram_rows(self) -> list[tuple[int, int]]:
        return sorted(self.peak_age_histogram.items())


def run_simulation(config: PolicyConfig, policy, rounds: int, burn_in: int | None = None,
                   seed=0, init=InitMode.RANDOM_PHASE, block_rounds: int = 8192) -> SimMetrics:
    """Simulate ``rounds`` rounds and summarise everything after ``burn_in``.

    Deterministic in ``(config, policy, rounds, burn_in, seed, init)``.
    """
    rounds = check_int(rounds, "rounds", min_value=1)
    if burn_in is None:
        burn_in = default_burn_in(config)
    burn_in = check_int(burn_in, "burn_in", min_value=0)
    if rounds <= burn_in:
        raise ValueError(f"rounds ({rounds}) must exceed burn_in ({burn_in})")
    _check_compatible(config, policy)
    n = config.n
    init_ss, select_ss = _seed_sequence(seed).spawn(2)
    ages = initial_ages(config, policy, init, np.random.default_rng(init_ss))
    rng = np.random.Generator(np.random.Philox(select_ss))

    kind = policy._kind
    k = getattr(policy, "k", 0)
    prob = float(getattr(policy, "prob", 0.0))
    probs = policy.policy.as_array() if kind == _MARKOV else np.ones(1)

    sel_counts = np.zeros(n, dtype=np.int64)
    gap_hist = np.zeros(int(ages.max()) + rounds + 2, dtype=np.int64)
    count_hist = np.zeros(n + 1, dtype=np.int64)
    t = 0
    while t < rounds:
        size = min(block_rounds, rounds - t)
        u = rng.random((size, n))
        _simulate_block(kind, k, prob, probs, u, ages, t, burn_in,
                        sel_counts, gap_hist, count_hist)
        t += size

    recorded = rounds - burn_in
    support = np.flatnonzero(gap_hist)
    counts = gap_hist[support]
    n_samples = int(counts.sum())
    if n_samples:
        mean = float(counts @ support) / n_samples
        var = float(counts @ (support - mean) ** 2) / n_samples
    else:
        mean = var = float("nan")
    sizes = np.arange(n + 1)
    count_mean = float(count_hist @ sizes) / recorded
    count_var = float(count_hist @ (sizes - count_mean) ** 2) / recorded
    return SimMetrics(
        policy=policy.name,
        peak_age_mean=mean,
        peak_age_variance=var,
        per_client_selection_freq=sel_counts / recorded,
        selected_count_mean=count_mean,
        selected_count_variance=count_var,
        peak_age_histogram={int(x): int(c) for x, c in zip(support, counts)},
        selected_count_histogram=count_hist,
        rounds_simulated=rounds,
        burn_in=burn_in,
        n_samples=n_samples,
    )


def compare_policies(config: PolicyConfig, policies: Iterable, rounds: int, seed=0,
                     burn_in: int | None = None, init=InitMode.RANDOM_PHASE) -> dict:
    """Run every policy on its own derived stream; rows keyed by policy name."""
    policies = list(policies)
    if not policies:
        raise ValueError("need at least one policy")
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate policy names: {names}")
    return {
        p.name: run_simulation(config, p, rounds, burn_in, policy_seed(seed, p.name), init)
        for p in policies
    }


def expected_moments(policy, config: PolicyConfig) -> tuple[float, float]:
    """Analytic gap mean and variance where known (Markov and Bernoulli)."""
    if isinstance(policy, MarkovSelection):
        mom = return_time_moments(policy.policy.to_float())
        return float(mom.mean), float(mom.variance)
    if isinstance(policy, BernoulliIID):
        p = policy.prob
        return 1.0 / p, (1.0 - p) / p ** 2
    return float("nan"), float("nan")


def format_table(results: dict) -> str:
    header = f"{'policy':<10} {'mean X':>10} {'Var X':>12} {'mean sel':>10} {'Var sel':>10} {'samples':>10}"
    lines = [header, "-" * len(header)]
    for name, r in results.items():
        lines.append(
            f"{name:<10} {r.peak_age_mean:>10.4f} {r.peak_age_variance:>12.4f} "
            f"{r.selected_count_mean:>10.4f} {r.selected_count_variance:>10.4f} {r.n_samples:>10d}"
        )
    return "\n".join(lines)
