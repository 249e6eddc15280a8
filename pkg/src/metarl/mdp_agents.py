"""Classical tabular-MDP agents: posterior sampling, optimism and MAP planning.

All planners optimize the undiscounted return of a length-``T`` episode by
backward induction.  Posteriors are updated every step; plans are rebuilt at
episode boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import Agent
from .errors import InvalidArgument


@dataclass
class TabularPosterior:
    """Dirichlet transition counts and Normal reward posteriors (known unit noise).

    The transition prior is Dirichlet(1, ..., 1); the reward prior is
    Normal(1, 1), so after observations r_1..r_j the reward mean is
    ``(1 + sum r) / (1 + j)`` with pseudo-count ``1 + j``.
    """

    counts: np.ndarray  # [s, a, s'] Dirichlet parameters
    reward_mean: np.ndarray  # [s, a]
    reward_kappa: np.ndarray  # [s, a]
    visits: np.ndarray  # [s, a]

    @classmethod
    def prior(cls, n_states: int, n_actions: int, reward_prior_mean: float = 1.0) -> "TabularPosterior":
        return cls(
            np.ones((n_states, n_actions, n_states)),
            np.full((n_states, n_actions), float(reward_prior_mean)),
            np.ones((n_states, n_actions)),
            np.zeros((n_states, n_actions), dtype=np.int64),
        )

    @property
    def n_states(self) -> int:
        return self.counts.shape[0]

    @property
    def n_actions(self) -> int:
        return self.counts.shape[1]

    def transition_mean(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=2, keepdims=True)

    def transition_map(self) -> np.ndarray:
        """Mode of the Dirichlet: observed counts normalized; uniform for unvisited rows."""
        observed = self.counts - 1.0
        totals = observed.sum(axis=2, keepdims=True)
        uniform = np.full_like(observed, 1.0 / self.n_states)
        return np.where(totals > 0, observed / np.maximum(totals, 1e-300), uniform)

    def copy(self) -> "TabularPosterior":
        return TabularPosterior(
            self.counts.copy(), self.reward_mean.copy(), self.reward_kappa.copy(), self.visits.copy()
        )


def update_posterior(posterior: TabularPosterior, s: int, a: int, r: float, s_next: int) -> TabularPosterior:
    """Conjugate update, applied in place; returns ``posterior``."""
    S, A = posterior.n_states, posterior.n_actions
    if not (0 <= s < S and 0 <= a < A and 0 <= s_next < S):
        raise InvalidArgument(f"indices out of range: s={s}, a={a}, s'={s_next}")
    posterior.counts[s, a, s_next] += 1.0
    kappa = posterior.reward_kappa[s, a]
    posterior.reward_mean[s, a] = (kappa * posterior.reward_mean[s, a] + r) / (kappa + 1.0)
    posterior.reward_kappa[s, a] = kappa + 1.0
    posterior.visits[s, a] += 1
    return posterior


@dataclass
class FiniteHorizonPlan:
    q: np.ndarray  # [t, s, a]
    policy: np.ndarray = field(init=False)  # [t, s]

    def __post_init__(self):
        self.policy = np.argmax(self.q, axis=2)

    @property
    def values(self) -> np.ndarray:
        return self.q.max(axis=2)

    @property
    def horizon(self) -> int:
        return self.q.shape[0]


def _check_stochastic(P: np.ndarray) -> None:
    if P.ndim != 3 or np.any(P < -1e-12) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-8):
        raise InvalidArgument("transition rows must be probability vectors")


def value_iterate(rewards: np.ndarray, transitions: np.ndarray, T: int) -> FiniteHorizonPlan:
    """Q[t] = R + P @ max_a Q[t+1], with Q[T-1] = R."""
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    _check_stochastic(transitions)
    S, A = rewards.shape
    q = np.empty((T, S, A))
    q[T - 1] = rewards
    for t in range(T - 2, -1, -1):
        q[t] = rewards + transitions @ q[t + 1].max(axis=1)
    return FiniteHorizonPlan(q)


def sample_model(posterior: TabularPosterior, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    gammas = rng.standard_gamma(posterior.counts)
    P = gammas / gammas.sum(axis=2, keepdims=True)
    R = posterior.reward_mean + rng.standard_normal(posterior.reward_mean.shape) / np.sqrt(posterior.reward_kappa)
    return R, P


def psrl_plan(posterior: TabularPosterior, rng: np.random.Generator, T: int) -> FiniteHorizonPlan:
    R, P = sample_model(posterior, rng)
    return value_iterate(R, P, T)


def opsrl_plan(
    posterior: TabularPosterior, K: int, rng: np.random.Generator, T: int, start_state: int = 0
) -> FiniteHorizonPlan:
    """Best of ``K`` posterior samples by planned value at the start state."""
    if K < 1:
        raise InvalidArgument("K must be >= 1")
    best = None
    for _ in range(K):
        plan = psrl_plan(posterior, rng, T)
        if best is None or plan.values[0, start_state] > best.values[0, start_state]:
            best = plan
    return best


def beb_plan(posterior: TabularPosterior, beta: float, T: int) -> FiniteHorizonPlan:
    if beta < 0:
        raise InvalidArgument("beta must be >= 0")
    bonus = beta / (1.0 + posterior.visits)
    return value_iterate(posterior.reward_mean + bonus, posterior.transition_mean(), T)


def ucrl2_widths(posterior: TabularPosterior, delta: float) -> tuple[np.ndarray, np.ndarray]:
    n = np.maximum(1.0, posterior.visits)
    log_term = np.log(2.0 / delta)
    reward_width = np.sqrt(log_term / (2.0 * n))
    l1_radius = np.sqrt(2.0 * posterior.n_states * log_term / n)
    return reward_width, l1_radius


def optimistic_transition(p_hat: np.ndarray, values: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Maximize ``p @ values`` over the L1 ball of ``radius`` around each row of ``p_hat``.

    ``p_hat`` is [..., S]; mass ``radius / 2`` moves onto the best successor,
    taken from the worst successors first.
    """
    S = values.shape[0]
    order = np.argsort(-values, kind="stable")
    p = p_hat[..., order].copy()
    extra = np.minimum(radius / 2.0, 1.0 - p[..., 0])
    p[..., 0] += extra
    remaining = extra
    for j in range(S - 1, 0, -1):
        take = np.minimum(p[..., j], remaining)
        p[..., j] -= take
        remaining = remaining - take
    out = np.empty_like(p)
    out[..., order] = p
    return out


def extended_value_iterate(
    rewards: np.ndarray, p_hat: np.ndarray, reward_width: np.ndarray, l1_radius: np.ndarray, T: int
) -> FiniteHorizonPlan:
    S, A = rewards.shape
    r_opt = rewards + reward_width
    q = np.empty((T, S, A))
    q[T - 1] = r_opt
    for t in range(T - 2, -1, -1):
        v = q[t + 1].max(axis=1)
        P = optimistic_transition(p_hat, v, l1_radius)
        q[t] = r_opt + P @ v
    return FiniteHorizonPlan(q)


def ucrl2_plan(posterior: TabularPosterior, delta: float, T: int) -> FiniteHorizonPlan:
    """Extended value iteration around the MAP model with count-based confidence sets."""
    if not 0.0 < delta < 1.0:
        raise InvalidArgument("delta must lie in (0, 1)")
    reward_width, l1_radius = ucrl2_widths(posterior, delta)
    return extended_value_iterate(posterior.reward_mean, posterior.transition_map(), reward_width, l1_radius, T)


def map_plan(posterior: TabularPosterior, T: int) -> FiniteHorizonPlan:
    return value_iterate(posterior.reward_mean, posterior.transition_map(), T)


def map_epsilon_greedy_plan(posterior: TabularPosterior, epsilon: float, T: int) -> "EpsilonGreedyPolicy":
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidArgument("epsilon must lie in [0, 1]")
    return EpsilonGreedyPolicy(map_plan(posterior, T), epsilon)


@dataclass
class EpsilonGreedyPolicy:
    plan: FiniteHorizonPlan
    epsilon: float

    def action(self, t: int, s: int, rng: np.random.Generator) -> int:
        if rng.random() < self.epsilon:
            return int(rng.integers(self.plan.q.shape[2]))
        return int(self.plan.policy[t, s])


# ---------------------------------------------------------------------------
# Agents


class PlanningAgent(Agent):
    """Replans at every episode start; updates the posterior every step.

    ``reward_prior_mean`` defaults to 0, the convention of the reference
    baseline implementations; the published baseline scores are only
    reproduced with it (a prior mean of 1 makes Greedy markedly stronger).
    """

    families = ("mdp",)

    def __init__(self, reward_prior_mean: float = 0.0, **hyperparams):
        super().__init__(**hyperparams)
        self.reward_prior_mean = reward_prior_mean
        if reward_prior_mean != 0.0:
            self.hyperparams["reward_prior_mean"] = reward_prior_mean

    def start_trial(self, task, rng):
        super().start_trial(task, rng)
        self.horizon = task.horizon
        self.start_state = task.start_state
        self.posterior = TabularPosterior.prior(task.n_states, task.n_actions, self.reward_prior_mean)
        self.t = 0
        self.plan = self.make_plan()

    def make_plan(self) -> FiniteHorizonPlan:
        raise NotImplementedError

    def act(self, inp):
        return int(self.plan.policy[self.t, inp.observation])

    def observe(self, inp, action, result):
        s_next = result.next_input.observation
        if result.episode_done:
            # the successor at the horizon is not revealed (next observation is
            # the reset state), so only the reward is informative
            self._update_reward_only(inp.observation, action, result.reward)
            self.t = 0
            if not result.trial_done:
                self.plan = self.make_plan()
            return
        update_posterior(self.posterior, inp.observation, action, result.reward, s_next)
        self.t += 1

    def _update_reward_only(self, s, a, r):
        p = self.posterior
        kappa = p.reward_kappa[s, a]
        p.reward_mean[s, a] = (kappa * p.reward_mean[s, a] + r) / (kappa + 1.0)
        p.reward_kappa[s, a] = kappa + 1.0
        p.visits[s, a] += 1


class PSRLAgent(PlanningAgent):
    name = "psrl"

    def make_plan(self):
        return psrl_plan(self.posterior, self.rng, self.horizon)


class OPSRLAgent(PlanningAgent):
    name = "opsrl"

    def __init__(self, K: int = 10, reward_prior_mean: float = 0.0):
        super().__init__(reward_prior_mean, K=K)
        self.K = K

    def make_plan(self):
        return opsrl_plan(self.posterior, self.K, self.rng, self.horizon, self.start_state)


class BEBAgent(PlanningAgent):
    name = "beb"

    def __init__(self, beta: float = 1.0, reward_prior_mean: float = 0.0):
        super().__init__(reward_prior_mean, beta=beta)
        self.beta = beta

    def make_plan(self):
        return beb_plan(self.posterior, self.beta, self.horizon)


class UCRL2Agent(PlanningAgent):
    name = "ucrl2"

    def __init__(self, delta: float = 0.1, reward_prior_mean: float = 0.0):
        super().__init__(reward_prior_mean, delta=delta)
        self.delta = delta

    def make_plan(self):
        return ucrl2_plan(self.posterior, self.delta, self.horizon)


class EpsilonGreedyMdpAgent(PlanningAgent):
    name = "epsilon_greedy"

    def __init__(self, epsilon: float = 0.1, reward_prior_mean: float = 0.0):
        super().__init__(reward_prior_mean, epsilon=epsilon)
        self.epsilon = epsilon

    def make_plan(self):
        self.policy = map_epsilon_greedy_plan(self.posterior, self.epsilon, self.horizon)
        return self.policy.plan

    def act(self, inp):
        return self.policy.action(self.t, inp.observation, self.rng)


class GreedyMdpAgent(EpsilonGreedyMdpAgent):
    name = "greedy"

    def __init__(self, reward_prior_mean: float = 0.0):
        super().__init__(0.0, reward_prior_mean)
