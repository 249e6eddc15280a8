"""Common agent interface used by the evaluation harness."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .meta_env import AgentInput, StepResult, TrialConfig, TrialEnv


class Agent:
    """One full trial at a time: ``start_trial``, then ``act``/``observe`` per step."""

    name = "agent"
    families: tuple[str, ...] = ("bandit", "mdp", "maze")

    def __init__(self, **hyperparams):
        self.hyperparams = dict(hyperparams)

    def start_trial(self, task, rng: np.random.Generator) -> None:
        self.rng = rng
        self.n_actions = task.n_actions

    def act(self, inp: AgentInput) -> int:
        raise NotImplementedError

    def observe(self, inp: AgentInput, action: int, result: StepResult) -> None:
        pass

    def run_trial(self, task, trial_config: TrialConfig, env_rng, agent_rng) -> float:
        env = TrialEnv(task, trial_config)
        inp = env.reset()
        self.start_trial(task, agent_rng)
        total = 0.0
        while True:
            action = self.act(inp)
            result = env.step(action, env_rng)
            self.observe(inp, action, result)
            total += result.reward
            if result.trial_done:
                return total
            inp = result.next_input

    def run_trials(self, tasks: Sequence, trial_config: TrialConfig, env_rngs, agent_rngs) -> np.ndarray:
        """Total undiscounted reward per trial; subclasses may batch this."""
        return np.array(
            [self.run_trial(t, trial_config, e, a) for t, e, a in zip(tasks, env_rngs, agent_rngs)]
        )

    def describe(self) -> dict:
        return {"agent": self.name, "hyperparams": self.hyperparams}


class RandomAgent(Agent):
    name = "random"

    def act(self, inp):
        return int(self.rng.integers(self.n_actions))
