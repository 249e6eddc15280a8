import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metarl.agent import RandomAgent
from metarl.errors import InvalidArgument
from metarl.mdp_agents import (
    BEBAgent,
    EpsilonGreedyMdpAgent,
    GreedyMdpAgent,
    OPSRLAgent,
    PSRLAgent,
    TabularPosterior,
    UCRL2Agent,
    beb_plan,
    extended_value_iterate,
    map_epsilon_greedy_plan,
    map_plan,
    opsrl_plan,
    optimistic_transition,
    psrl_plan,
    ucrl2_plan,
    update_posterior,
    value_iterate,
)
from metarl.meta_env import TrialConfig, sample_tabular_mdp
from metarl.stats import welch_t_test


def test_value_iterate_base_case():
    R = np.array([[1.0, 2.0], [3.0, -1.0]])
    P = np.full((2, 2, 2), 0.5)
    plan = value_iterate(R, P, 1)
    np.testing.assert_array_equal(plan.q[0], R)


def test_value_iterate_two_state_chain():
    # action 0 = stay, action 1 = go to s1; reward 1 only in s1
    R = np.array([[0.0, 0.0], [1.0, 1.0]])
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    P[:, 1, 1] = 1.0
    plan = value_iterate(R, P, 2)
    assert plan.q[0, 0, 1] == pytest.approx(1.0)
    assert plan.policy[0, 0] == 1


def test_value_iterate_rejects_bad_rows():
    with pytest.raises(InvalidArgument):
        value_iterate(np.zeros((2, 1)), np.full((2, 1, 2), 0.6), 2)


def enumerate_best_return(R, P, T, start):
    S, A = R.shape
    best = -np.inf
    for flat in itertools.product(range(A), repeat=T * S):
        pol = np.array(flat).reshape(T, S)
        dist = np.zeros(S)
        dist[start] = 1.0
        total = 0.0
        for t in range(T):
            acts = pol[t]
            total += float(dist @ R[np.arange(S), acts])
            dist = dist @ P[np.arange(S), acts]
        best = max(best, total)
    return best


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_value_iterate_matches_policy_enumeration(seed):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(2, 2))
    P = rng.dirichlet(np.ones(2), size=(2, 2))
    plan = value_iterate(R, P, 2)
    assert plan.values[0, 0] == pytest.approx(enumerate_best_return(R, P, 2, 0), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 6))
def test_bellman_recursion_pointwise(seed, T):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(4, 3))
    P = rng.dirichlet(np.ones(4), size=(4, 3))
    q = value_iterate(R, P, T).q
    for t in range(T):
        for s, a in itertools.product(range(4), range(3)):
            expect = R[s, a] + (sum(P[s, a, s2] * q[t + 1, s2].max() for s2 in range(4)) if t < T - 1 else 0.0)
            assert abs(q[t, s, a] - expect) <= 1e-10


def test_posterior_updates():
    post = TabularPosterior.prior(5, 2)
    update_posterior(post, 0, 1, 3.0, 2)
    assert post.reward_mean[0, 1] == pytest.approx(2.0) and post.reward_kappa[0, 1] == 2
    np.testing.assert_array_equal(post.counts[0, 1], [1, 1, 2, 1, 1])
    np.testing.assert_allclose(post.transition_mean()[0, 1], post.counts[0, 1] / post.counts[0, 1].sum())
    assert post.visits[0, 1] == 1
    with pytest.raises(InvalidArgument):
        update_posterior(post, 5, 0, 0.0, 0)


@settings(max_examples=30, deadline=None)
@given(obs=st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1), st.floats(-5, 5), st.integers(0, 2)), max_size=25),
       seed=st.integers(0, 1000))
def test_posterior_updates_commute(obs, seed):
    order = np.random.default_rng(seed).permutation(len(obs))
    a = TabularPosterior.prior(3, 2)
    b = TabularPosterior.prior(3, 2)
    for o in obs:
        update_posterior(a, *o)
    for i in order:
        update_posterior(b, *obs[i])
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_array_equal(a.visits, b.visits)
    np.testing.assert_allclose(a.reward_mean, b.reward_mean, atol=1e-12)
    # closed form from the Normal(1, 1) prior
    for s, act in itertools.product(range(3), range(2)):
        rs = [r for (s2, a2, r, _) in obs if (s2, a2) == (s, act)]
        assert a.reward_mean[s, act] == pytest.approx((1 + sum(rs)) / (1 + len(rs)), abs=1e-9)


def concentrated(task, scale=1e8):
    post = TabularPosterior.prior(task.n_states, task.n_actions)
    post.counts = 1.0 + task.transitions * scale
    post.reward_mean = task.reward_means.copy()
    post.reward_kappa = np.full_like(task.reward_means, scale)
    post.visits = np.full(task.reward_means.shape, int(scale))
    return post


def test_degenerate_posterior_limit_all_planners():
    task = sample_tabular_mdp(np.random.default_rng(4))
    truth = value_iterate(task.reward_means, task.transitions, task.horizon)
    post = concentrated(task)
    rng = np.random.default_rng(0)
    plans = [psrl_plan(post, rng, 10), opsrl_plan(post, 5, rng, 10), beb_plan(post, 1.0, 10), ucrl2_plan(post, 0.1, 10)]
    for plan in plans:
        np.testing.assert_allclose(plan.q, truth.q, atol=0.05)
        gap = truth.values - truth.q[np.arange(10)[:, None], np.arange(10)[None, :], plan.policy]
        assert gap.max() < 0.05


def test_psrl_and_opsrl_determinism_and_argmax():
    post = TabularPosterior.prior(10, 5)
    a = psrl_plan(post, np.random.default_rng(3), 10)
    b = psrl_plan(post, np.random.default_rng(3), 10)
    np.testing.assert_array_equal(a.q, b.q)
    rng = np.random.default_rng(9)
    candidates = [psrl_plan(post, rng, 10) for _ in range(7)]
    best = opsrl_plan(post, 7, np.random.default_rng(9), 10)
    assert best.values[0, 0] == max(c.values[0, 0] for c in candidates)
    with pytest.raises(InvalidArgument):
        opsrl_plan(post, 0, rng, 10)


def test_opsrl_k1_is_psrl():
    post = TabularPosterior.prior(4, 2)
    a = opsrl_plan(post, 1, np.random.default_rng(1), 5)
    b = psrl_plan(post, np.random.default_rng(1), 5)
    np.testing.assert_array_equal(a.q, b.q)


def test_beb_bonus():
    post = TabularPosterior.prior(3, 2)
    for _ in range(4):
        update_posterior(post, 0, 0, 1.0, 1)
    plan = beb_plan(post, 2.0, 1)
    assert plan.q[0, 0, 0] == pytest.approx(post.reward_mean[0, 0] + 2.0 / 5)
    assert plan.q[0, 1, 1] == pytest.approx(post.reward_mean[1, 1] + 2.0)
    np.testing.assert_array_equal(beb_plan(post, 0.0, 4).q, value_iterate(post.reward_mean, post.transition_mean(), 4).q)


def test_ucrl2_degenerate_widths_reduce_to_value_iteration():
    rng = np.random.default_rng(0)
    R = rng.normal(size=(4, 2))
    P = rng.dirichlet(np.ones(4), size=(4, 2))
    zeros = np.zeros((4, 2))
    np.testing.assert_allclose(extended_value_iterate(R, P, zeros, zeros, 5).q, value_iterate(R, P, 5).q)


def test_l1_full_radius_puts_all_mass_on_best():
    p = np.array([[0.2, 0.3, 0.5]])
    out = optimistic_transition(p, np.array([1.0, 5.0, 2.0]), np.array([2.0]))
    np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), radius=st.floats(0, 2))
def test_l1_inner_max_feasible_and_optimal(seed, radius):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4))
    v = rng.normal(size=4)
    q = optimistic_transition(p[None, :], v, np.array([radius]))[0]
    assert abs(q.sum() - 1) < 1e-12 and np.all(q >= -1e-15)
    assert np.abs(q - p).sum() <= radius + 1e-12
    # no random feasible point does better
    for _ in range(200):
        d = rng.dirichlet(np.ones(4))
        if np.abs(d - p).sum() <= radius:
            assert d @ v <= q @ v + 1e-12


def test_map_transitions_uniform_when_unvisited():
    post = TabularPosterior.prior(4, 2)
    np.testing.assert_allclose(post.transition_map(), 0.25)
    update_posterior(post, 0, 0, 0.0, 3)
    np.testing.assert_allclose(post.transition_map()[0, 0], [0, 0, 0, 1])


def test_map_epsilon_greedy_policy():
    post = TabularPosterior.prior(3, 2)
    pol = map_epsilon_greedy_plan(post, 0.0, 4)
    plan = map_plan(post, 4)
    rng = np.random.default_rng(0)
    assert all(pol.action(t, s, rng) == plan.policy[t, s] for t in range(4) for s in range(3))
    uniform = map_epsilon_greedy_plan(post, 1.0, 4)
    freq = np.bincount([uniform.action(0, 0, rng) for _ in range(20000)], minlength=2) / 20000
    np.testing.assert_allclose(freq, 0.5, atol=0.02)


@pytest.mark.parametrize(
    "agent", [PSRLAgent(), OPSRLAgent(5), BEBAgent(1.0), UCRL2Agent(0.1), EpsilonGreedyMdpAgent(0.1), GreedyMdpAgent()]
)
def test_planners_beat_random(agent):
    rng = np.random.default_rng(0)
    count = 1000
    tasks = [sample_tabular_mdp(rng) for _ in range(count)]

    def run(a):
        env_rngs = [np.random.default_rng(100 + i) for i in range(count)]
        agent_rngs = [np.random.default_rng(10**5 + i) for i in range(count)]
        return a.run_trials(tasks, TrialConfig(2), env_rngs, agent_rngs)

    assert welch_t_test(run(agent), run(RandomAgent())).significant(0.05)
