"""Classical Bernoulli-bandit strategies and Gittins indices over Beta posteriors."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import Agent
from .errors import InvalidArgument, NumericalFailure


@dataclass(frozen=True)
class BetaPosterior:
    a: float = 1.0
    b: float = 1.0

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)


def update_beta(posterior: BetaPosterior, reward) -> BetaPosterior:
    if reward == 1:
        return BetaPosterior(posterior.a + 1, posterior.b)
    if reward == 0:
        return BetaPosterior(posterior.a, posterior.b + 1)
    raise InvalidArgument(f"Bernoulli reward must be 0 or 1, got {reward!r}")


@dataclass
class ArmStats:
    """Pull counts and empirical means, seeded with one success and one failure per arm."""

    pulls: np.ndarray
    successes: np.ndarray

    @classmethod
    def initial(cls, k: int) -> "ArmStats":
        return cls(np.full(k, 2.0), np.ones(k))

    @property
    def means(self) -> np.ndarray:
        return self.successes / self.pulls

    def update(self, arm: int, reward: float) -> None:
        self.pulls[arm] += 1
        self.successes[arm] += reward


def _ab(posteriors: Sequence[BetaPosterior]) -> tuple[np.ndarray, np.ndarray]:
    a = np.fromiter((p.a for p in posteriors), float, len(posteriors))
    b = np.fromiter((p.b for p in posteriors), float, len(posteriors))
    return a, b


def ucb1_select(stats: ArmStats, t: int, c: float) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    bonus = c * np.sqrt(2.0 * np.log(t) / stats.pulls)
    return int(np.argmax(stats.means + bonus))


def thompson_select(posteriors: Sequence[BetaPosterior], rng: np.random.Generator) -> int:
    a, b = _ab(posteriors)
    return int(np.argmax(rng.beta(a, b)))


OTS_VARIANTS = ("max_of_n", "max_density")


def optimistic_thompson_select(
    posteriors: Sequence[BetaPosterior], N: int, rng: np.random.Generator, variant: str = "max_of_n"
) -> int:
    """Optimistic Thompson sampling.

    ``max_of_n`` scores each arm by the largest of ``N`` posterior draws.
    ``max_density`` draws ``N`` joint samples, keeps the one with the highest
    posterior log-density and plays its best arm.
    """
    if N < 1:
        raise InvalidArgument("N must be >= 1")
    a, b = _ab(posteriors)
    draws = rng.beta(a, b, size=(N, a.size))
    if variant == "max_of_n":
        return int(np.argmax(draws.max(axis=0)))
    if variant == "max_density":
        clipped = np.clip(draws, 1e-300, 1 - 1e-16)
        logpdf = ((a - 1) * np.log(clipped) + (b - 1) * np.log1p(-clipped)).sum(axis=1)
        return int(np.argmax(draws[int(np.argmax(logpdf))]))
    raise InvalidArgument(f"unknown OTS variant {variant!r}")


def epsilon_greedy_select(stats: ArmStats, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidArgument("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(stats.pulls.size))
    return int(np.argmax(stats.means))


# ---------------------------------------------------------------------------
# Gittins indices


@dataclass(frozen=True, eq=False)
class GittinsTable:
    """Gittins indices on the integer lattice ``a, b >= 1, a + b <= 2 + n_trunc``.

    ``values[a, b]`` holds the index; entries off the lattice are NaN.
    """

    gamma: float
    n_trunc: int
    tolerance: float
    values: np.ndarray

    def index(self, a: float, b: float) -> float:
        ia, ib = int(a), int(b)
        if ia == a and ib == b and ia >= 1 and ib >= 1 and ia + ib <= 2 + self.n_trunc:
            return float(self.values[ia, ib])
        # beyond the lattice: posterior mean
        return a / (a + b)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, gamma=self.gamma, n_trunc=self.n_trunc, tolerance=self.tolerance, values=self.values)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "GittinsTable":
        with np.load(path) as data:
            return cls(float(data["gamma"]), int(data["n_trunc"]), float(data["tolerance"]), data["values"].copy())


def _continuation_value(a: np.ndarray, s: int, depth: int, gamma: float, lam: np.ndarray) -> np.ndarray:
    """Value of pulling once more from Beta(a, s - a), then acting optimally
    against retirement paying ``lam`` per step. Vectorized over rows of ``a``."""
    retire = (lam / (1.0 - gamma))[:, None]
    a = a[:, None].astype(float)
    i = np.arange(depth + 1)[None, :]
    value = np.maximum(retire, (a + i) / (s + depth) / (1.0 - gamma))
    for j in range(depth - 1, -1, -1):
        mu = (a + i[:, : j + 1]) / (s + j)
        cont = mu + gamma * (mu * value[:, 1 : j + 2] + (1.0 - mu) * value[:, : j + 1])
        if j == 0:
            return cont[:, 0]
        value = np.maximum(retire, cont)
    # depth == 0: on the truncation frontier the arm pays its mean forever
    return (a[:, 0] / s) / (1.0 - gamma)


def compute_gittins_table(gamma: float, n_trunc: int, tolerance: float = 1e-7, max_iter: int = 200) -> GittinsTable:
    """Calibrate every lattice point by bisection on the retirement rate.

    For a candidate rate the continuation value is obtained by backward
    induction over the posterior lattice below the point; points on one
    anti-diagonal ``a + b = s`` share a depth and are solved together.
    """
    if not 0.0 < gamma < 1.0:
        raise InvalidArgument("gamma must lie in (0, 1)")
    if n_trunc < 1:
        raise InvalidArgument("n_trunc must be >= 1")
    size = n_trunc + 2
    values = np.full((size, size), np.nan)
    for s in range(2, n_trunc + 3):
        a = np.arange(1, s)
        depth = n_trunc + 2 - s
        lo = a / s
        hi = np.ones_like(lo)
        for _ in range(max_iter):
            if np.all(hi - lo <= tolerance):
                break
            lam = 0.5 * (lo + hi)
            better = _continuation_value(a, s, depth, gamma, lam) > lam / (1.0 - gamma)
            lo = np.where(better, lam, lo)
            hi = np.where(better, hi, lam)
        else:
            raise NumericalFailure(
                "Gittins bisection did not converge",
                gamma=gamma, diagonal=s, max_gap=float(np.max(hi - lo)), max_iter=max_iter,
            )
        values[a, s - a] = 0.5 * (lo + hi)
    return GittinsTable(gamma, n_trunc, tolerance, values)


_TABLE_MEMO: dict[tuple, GittinsTable] = {}


def default_cache_dir() -> Path:
    return Path(os.environ.get("METARL_CACHE_DIR", Path.home() / ".cache" / "metarl"))


def cached_gittins_table(gamma: float, n_trunc: int = 150, tolerance: float = 1e-7, cache_dir=None) -> GittinsTable:
    key = (round(gamma, 12), n_trunc, tolerance)
    if key in _TABLE_MEMO:
        return _TABLE_MEMO[key]
    path = Path(cache_dir or default_cache_dir()) / f"gittins_g{gamma:.12g}_n{n_trunc}_t{tolerance:.3g}.npz"
    if path.exists():
        table = GittinsTable.load(path)
    else:
        table = compute_gittins_table(gamma, n_trunc, tolerance)
        table.save(path)
    _TABLE_MEMO[key] = table
    return table


def gittins_select(table: GittinsTable, posteriors: Sequence[BetaPosterior]) -> int:
    scores = np.array([table.index(p.a, p.b) for p in posteriors])
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# Agents


class _StatsAgent(Agent):
    families = ("bandit",)

    def start_trial(self, task, rng):
        super().start_trial(task, rng)
        self.stats = ArmStats.initial(self.n_actions)
        self.t = 0

    def observe(self, inp, action, result):
        self.stats.update(action, result.reward)
        self.t += 1


class _PosteriorAgent(Agent):
    families = ("bandit",)

    def start_trial(self, task, rng):
        super().start_trial(task, rng)
        self.posteriors = [BetaPosterior()] * self.n_actions

    def observe(self, inp, action, result):
        self.posteriors[action] = update_beta(self.posteriors[action], result.reward)


class UCB1Agent(_StatsAgent):
    name = "ucb1"

    def __init__(self, c: float = 1.0):
        super().__init__(c=c)
        self.c = c

    def act(self, inp):
        return ucb1_select(self.stats, self.t + 1, self.c)


class EpsilonGreedyBanditAgent(_StatsAgent):
    name = "epsilon_greedy"

    def __init__(self, epsilon: float = 0.1):
        super().__init__(epsilon=epsilon)
        self.epsilon = epsilon

    def act(self, inp):
        return epsilon_greedy_select(self.stats, self.epsilon, self.rng)


class GreedyBanditAgent(EpsilonGreedyBanditAgent):
    name = "greedy"

    def __init__(self):
        super().__init__(epsilon=0.0)


class ThompsonAgent(_PosteriorAgent):
    name = "ts"

    def act(self, inp):
        return thompson_select(self.posteriors, self.rng)


class OptimisticThompsonAgent(_PosteriorAgent):
    name = "ots"

    def __init__(self, N: int = 10, variant: str = "max_of_n"):
        super().__init__(N=N, variant=variant)
        self.N = N
        self.variant = variant

    def act(self, inp):
        return optimistic_thompson_select(self.posteriors, self.N, self.rng, self.variant)


class GittinsAgent(_PosteriorAgent):
    name = "gittins"

    def __init__(self, gamma: float = 0.9, n_trunc: int = 150, table: GittinsTable | None = None):
        super().__init__(gamma=gamma, n_trunc=n_trunc)
        self.table = table or cached_gittins_table(gamma, n_trunc)

    def act(self, inp):
        return gittins_select(self.table, self.posteriors)
