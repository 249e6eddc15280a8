"""Recurrent policy and value networks whose hidden state spans a whole trial.

Each step the networks read ``[observation | previous action | previous
reward | previous done]``.  The hidden state starts at zero for every trial
and is carried across episode boundaries inside the trial.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, ProtocolViolation
from .meta_env import PLACEHOLDER, AgentInput
from .tensor_nn import Categorical, GruNet, Params, load_checkpoint, log_softmax, save_checkpoint, softmax

MAZE_VIEW_CELLS = 9
MAZE_CELL_CODES = 3
MAZE_HEADINGS = 4


@dataclass(frozen=True)
class EmbeddingSpec:
    family: str
    n_actions: int
    n_states: int = 0  # tabular MDPs only

    @property
    def obs_width(self) -> int:
        if self.family == "bandit":
            return 1
        if self.family == "mdp":
            return self.n_states
        if self.family == "maze":
            return MAZE_VIEW_CELLS * MAZE_CELL_CODES + MAZE_HEADINGS
        raise InvalidArgument(f"unknown task family {self.family!r}")

    @property
    def width(self) -> int:
        return self.obs_width + self.n_actions + 2

    @classmethod
    def for_task(cls, task) -> "EmbeddingSpec":
        return cls(task.family, task.n_actions, getattr(task, "n_states", 0))

    def to_dict(self) -> dict:
        return {"family": self.family, "n_actions": self.n_actions, "n_states": self.n_states}


def embed_inputs(inputs: Sequence[AgentInput | None], spec: EmbeddingSpec) -> np.ndarray:
    """Embed a batch of inputs; ``None`` entries (finished trials) embed to zeros."""
    out = np.zeros((len(inputs), spec.width))
    ow, A = spec.obs_width, spec.n_actions
    for i, inp in enumerate(inputs):
        if inp is None:
            continue
        a = inp.prev_action
        if a == PLACEHOLDER:
            a = 0
        elif not 0 <= a < A:
            raise InvalidArgument(f"action {a} out of range for {A} actions")
        if spec.family == "mdp":
            s = inp.observation
            if not 0 <= s < spec.n_states:
                raise InvalidArgument(f"state {s} out of range")
            out[i, s] = 1.0
        elif spec.family == "maze":
            view, heading = inp.observation
            for cell, code in enumerate(view):
                out[i, MAZE_CELL_CODES * cell + code] = 1.0
            out[i, MAZE_VIEW_CELLS * MAZE_CELL_CODES + heading] = 1.0
        # bandits: constant zero observation
        out[i, ow + a] = 1.0
        out[i, ow + A] = inp.prev_reward
        out[i, ow + A + 1] = inp.prev_done
    return out


def embed_input(inp: AgentInput, spec: EmbeddingSpec) -> np.ndarray:
    return embed_inputs([inp], spec)[0]


@dataclass
class PolicySnapshot:
    embedding: EmbeddingSpec
    hidden: int
    policy: Params
    value: Params
    metadata: dict = field(default_factory=dict)
    # the value head predicts (return - value_shift) / value_scale
    value_shift: float = 0.0
    value_scale: float = 1.0

    def value_from_output(self, out: np.ndarray) -> np.ndarray:
        return self.value_shift + self.value_scale * out

    @property
    def policy_net(self) -> GruNet:
        return GruNet(self.embedding.width, self.hidden, self.embedding.n_actions)

    @property
    def value_net(self) -> GruNet:
        return GruNet(self.embedding.width, self.hidden, 1)

    @classmethod
    def initial(cls, embedding: EmbeddingSpec, hidden: int, rng: np.random.Generator, zero_head: bool = False):
        policy = GruNet(embedding.width, hidden, embedding.n_actions).init_params(rng, zero_head=zero_head)
        value = GruNet(embedding.width, hidden, 1).init_params(rng, zero_head=zero_head)
        return cls(embedding, hidden, policy, value)

    @classmethod
    def zeros(cls, embedding: EmbeddingSpec, hidden: int):
        return cls(
            embedding,
            hidden,
            GruNet(embedding.width, hidden, embedding.n_actions).zero_params(),
            GruNet(embedding.width, hidden, 1).zero_params(),
        )

    def copy(self) -> "PolicySnapshot":
        return replace(
            self,
            policy={k: v.copy() for k, v in self.policy.items()},
            value={k: v.copy() for k, v in self.value.items()},
            metadata=dict(self.metadata),
        )

    def save(self, path: str | Path) -> None:
        arrays = {f"policy/{k}": v for k, v in self.policy.items()}
        arrays.update({f"value/{k}": v for k, v in self.value.items()})
        meta = {
            "embedding": self.embedding.to_dict(), "hidden": self.hidden, "input_order": "obs,action,reward,done",
            "value_shift": self.value_shift, "value_scale": self.value_scale,
        }
        meta.update(self.metadata)
        save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "PolicySnapshot":
        arrays, meta = load_checkpoint(path)
        embedding = EmbeddingSpec(**meta.pop("embedding"))
        hidden = int(meta.pop("hidden"))
        meta.pop("input_order", None)
        shift, scale = float(meta.pop("value_shift", 0.0)), float(meta.pop("value_scale", 1.0))
        policy = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("policy/")}
        value = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("value/")}
        return cls(embedding, hidden, policy, value, meta, shift, scale)


@dataclass
class PolicyState:
    h_policy: np.ndarray
    h_value: np.ndarray
    step: int = 0
    trial_done: bool = False


def reset_for_new_trial(snapshot: PolicySnapshot) -> PolicyState:
    return PolicyState(np.zeros(snapshot.hidden), np.zeros(snapshot.hidden), 0, False)


def close_trial(state: PolicyState) -> PolicyState:
    return replace(state, trial_done=True)


def act(
    inp: AgentInput, state: PolicyState, snapshot: PolicySnapshot, rng: np.random.Generator, greedy: bool = False
) -> tuple[int, float, float, PolicyState]:
    if state.trial_done:
        raise ProtocolViolation("act() called after the trial finished; reset_for_new_trial first")
    x = embed_input(inp, snapshot.embedding)[None, :]
    h_pol, logits = snapshot.policy_net.step(snapshot.policy_net.effective(snapshot.policy), x, state.h_policy[None, :])
    h_val, value = snapshot.value_net.step(snapshot.value_net.effective(snapshot.value), x, state.h_value[None, :])
    dist = Categorical(softmax(logits[0]))
    action = int(np.argmax(dist.probs)) if greedy else dist.sample(rng)
    log_prob = float(log_softmax(logits[0])[action])
    return action, log_prob, float(snapshot.value_from_output(value[0, 0])), PolicyState(h_pol[0], h_val[0], state.step + 1, False)


@dataclass
class SequenceEval:
    log_prob: np.ndarray  # [T, B]
    entropy: np.ndarray  # [T, B]
    value: np.ndarray  # [T, B]
    probs: np.ndarray  # [T, B, A]
    logits: np.ndarray  # [T, B, A]
    policy_tape: object
    value_tape: object


def evaluate_sequences(batch, snapshot: PolicySnapshot, with_value: bool = True) -> SequenceEval:
    """Teacher-forced replay of both networks over ``batch.inputs[T, B, D]``."""
    X = batch.inputs
    if X.ndim != 3 or X.shape[2] != snapshot.embedding.width:
        raise InvalidArgument(f"batch inputs {X.shape} do not match embedding width {snapshot.embedding.width}")
    if batch.actions.shape != X.shape[:2] or batch.mask.shape != X.shape[:2]:
        raise InvalidArgument("actions/mask shape does not match inputs")
    ptape = snapshot.policy_net.forward(snapshot.policy, X)
    logp_all = log_softmax(ptape.out)
    probs = softmax(ptape.out)
    log_prob = np.take_along_axis(logp_all, batch.actions[..., None], axis=-1)[..., 0]
    entropy = -np.sum(probs * logp_all, axis=-1)
    if with_value:
        vtape = snapshot.value_net.forward(snapshot.value, X)
        value = snapshot.value_from_output(vtape.out[..., 0])
    else:
        vtape, value = None, np.zeros(X.shape[:2])
    return SequenceEval(log_prob, entropy, value, probs, ptape.out, ptape, vtape)
