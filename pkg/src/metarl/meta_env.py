"""Task distributions and the multi-episode trial protocol.

A *trial* is ``n`` episodes played against one task drawn from a task
distribution.  At every step the agent receives an :class:`AgentInput`
carrying the current observation together with the previous action, reward
and episode-termination flag, so that a recurrent agent can infer the task
from its own interaction history.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from .errors import InvalidArgument, ProtocolViolation

PLACEHOLDER = -1
"""``prev_action`` value at the first step of a trial."""

BANDIT_OBSERVATION = 0

# maze cell codes as seen by the agent
WALL, OPEN, TARGET = 0, 1, 2
# headings: north, east, south, west
HEADING_DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))
FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2

MAZE_STEP_REWARD = -0.04
MAZE_WALL_PENALTY = -0.001
MAZE_TARGET_REWARD = 1.0


@dataclass(frozen=True)
class AgentInput:
    observation: Any
    prev_action: int = PLACEHOLDER
    prev_reward: float = 0.0
    prev_done: int = 0


@dataclass(frozen=True)
class StepResult:
    next_input: AgentInput
    reward: float
    episode_done: bool
    trial_done: bool


@dataclass(frozen=True)
class TrialConfig:
    episodes_per_trial: int
    discount: float = 0.99

    def __post_init__(self):
        if self.episodes_per_trial < 1:
            raise InvalidArgument("episodes_per_trial must be >= 1")
        if not 0.0 <= self.discount <= 1.0:
            raise InvalidArgument("discount must lie in [0, 1]")


class Task(Protocol):
    family: str

    @property
    def n_actions(self) -> int: ...

    @property
    def episode_horizon(self) -> int: ...

    def initial_state(self) -> Any: ...

    def observe(self, state: Any) -> Any: ...

    def transition(self, state: Any, action: int, rng: np.random.Generator) -> tuple[float, Any, bool]: ...


# ---------------------------------------------------------------------------
# Bandits


@dataclass(frozen=True, eq=False)
class BanditSpec:
    arm_means: np.ndarray
    family: str = field(default="bandit", init=False)

    def __post_init__(self):
        means = np.asarray(self.arm_means, dtype=np.float64)
        if means.ndim != 1 or means.size < 1:
            raise InvalidArgument("a bandit needs at least one arm")
        if np.any(means < 0.0) or np.any(means > 1.0):
            raise InvalidArgument("arm means must lie in [0, 1]")
        object.__setattr__(self, "arm_means", means)

    @property
    def k(self) -> int:
        return self.arm_means.size

    @property
    def n_actions(self) -> int:
        return self.k

    @property
    def episode_horizon(self) -> int:
        return 1

    def initial_state(self):
        return None

    def observe(self, state):
        return BANDIT_OBSERVATION

    def transition(self, state, action, rng):
        reward = 1.0 if rng.random() < self.arm_means[action] else 0.0
        return reward, None, True

    def to_dict(self) -> dict:
        return {"family": "bandit", "arm_means": self.arm_means.tolist()}


def sample_bandit(rng: np.random.Generator, k: int) -> BanditSpec:
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    return BanditSpec(rng.uniform(0.0, 1.0, size=k))


# ---------------------------------------------------------------------------
# Tabular MDPs


@dataclass(frozen=True, eq=False)
class TabularMdpSpec:
    transitions: np.ndarray  # [s, a, s']
    reward_means: np.ndarray  # [s, a]
    reward_stddev: float = 1.0
    horizon: int = 10
    start_state: int = 0
    family: str = field(default="mdp", init=False)

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=np.float64)
        R = np.asarray(self.reward_means, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise InvalidArgument(f"inconsistent shapes {P.shape} / {R.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-9):
            raise InvalidArgument("transition rows must be probability vectors")
        if self.horizon < 1:
            raise InvalidArgument("horizon must be >= 1")
        if not 0 <= self.start_state < P.shape[0]:
            raise InvalidArgument("start_state out of range")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "reward_means", R)
        object.__setattr__(self, "_cdf", np.cumsum(P, axis=2))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def episode_horizon(self) -> int:
        return self.horizon

    def initial_state(self):
        return self.start_state

    def observe(self, state):
        return state

    def transition(self, state, action, rng):
        reward = self.reward_means[state, action] + self.reward_stddev * rng.standard_normal()
        cdf = self._cdf[state, action]
        nxt = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return float(reward), min(nxt, self.n_states - 1), False

    def to_dict(self) -> dict:
        return {
            "family": "mdp",
            "transitions": self.transitions.tolist(),
            "reward_means": self.reward_means.tolist(),
            "reward_stddev": self.reward_stddev,
            "horizon": self.horizon,
            "start_state": self.start_state,
        }


def sample_tabular_mdp(
    rng: np.random.Generator, n_states: int = 10, n_actions: int = 5, horizon: int = 10
) -> TabularMdpSpec:
    rewards = rng.normal(1.0, 1.0, size=(n_states, n_actions))
    transitions = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    return TabularMdpSpec(transitions, rewards, 1.0, horizon, 0)


# ---------------------------------------------------------------------------
# Mazes


@dataclass(frozen=True, eq=False)
class MazeSpec:
    walls: np.ndarray  # [row, col] True where blocked
    start_cell: tuple[int, int]
    target_cell: tuple[int, int]
    horizon: int = 250
    start_heading: int = 0
    family: str = field(default="maze", init=False)

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=bool)
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "start_cell", tuple(int(v) for v in self.start_cell))
        object.__setattr__(self, "target_cell", tuple(int(v) for v in self.target_cell))
        if walls[self.start_cell] or walls[self.target_cell]:
            raise InvalidArgument("start and target must be open cells")
        if self.start_cell == self.target_cell:
            raise InvalidArgument("start and target must differ")
        if self.target_cell not in flood_fill(walls, self.start_cell):
            raise InvalidArgument("target unreachable from start")
        if self.horizon < 1:
            raise InvalidArgument("horizon must be >= 1")

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    @property
    def n_actions(self) -> int:
        return 3

    @property
    def episode_horizon(self) -> int:
        return self.horizon

    def initial_state(self):
        return (self.start_cell, self.start_heading)

    def _cell_code(self, r: int, c: int) -> int:
        if not (0 <= r < self.height and 0 <= c < self.width) or self.walls[r, c]:
            return WALL
        return TARGET if (r, c) == self.target_cell else OPEN

    def observe(self, state):
        (r, c), heading = state
        view = tuple(self._cell_code(r + dr, c + dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1))
        return (view, heading)

    def transition(self, state, action, rng):
        (r, c), heading = state
        reward = MAZE_STEP_REWARD
        if action == TURN_LEFT:
            return reward, ((r, c), (heading - 1) % 4), False
        if action == TURN_RIGHT:
            return reward, ((r, c), (heading + 1) % 4), False
        if action != FORWARD:
            raise InvalidArgument(f"unknown maze action {action}")
        dr, dc = HEADING_DELTAS[heading]
        if self._cell_code(r + dr, c + dc) == WALL:
            return reward + MAZE_WALL_PENALTY, state, False
        cell = (r + dr, c + dc)
        if cell == self.target_cell:
            return reward + MAZE_TARGET_REWARD, (cell, heading), True
        return reward, (cell, heading), False

    def layout_key(self) -> tuple:
        return (self.walls.tobytes(), self.walls.shape, self.target_cell)

    def to_dict(self) -> dict:
        return {
            "family": "maze",
            "walls": self.walls.astype(int).tolist(),
            "start_cell": list(self.start_cell),
            "target_cell": list(self.target_cell),
            "horizon": self.horizon,
            "start_heading": self.start_heading,
        }


def flood_fill(walls: np.ndarray, start: tuple[int, int]) -> set[tuple[int, int]]:
    seen = {start}
    stack = [start]
    h, w = walls.shape
    while stack:
        r, c = stack.pop()
        for dr, dc in HEADING_DELTAS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not walls[nr, nc] and (nr, nc) not in seen:
                seen.add((nr, nc))
                stack.append((nr, nc))
    return seen


def carve_maze(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Perfect maze by iterative recursive backtracking on an odd-sized grid."""
    walls = np.ones((height, width), dtype=bool)
    cells_r, cells_c = (height - 1) // 2, (width - 1) // 2
    start = (int(rng.integers(cells_r)), int(rng.integers(cells_c)))
    visited = np.zeros((cells_r, cells_c), dtype=bool)
    visited[start] = True
    walls[2 * start[0] + 1, 2 * start[1] + 1] = False
    stack = [start]
    while stack:
        r, c = stack[-1]
        options = [
            (r + dr, c + dc)
            for dr, dc in HEADING_DELTAS
            if 0 <= r + dr < cells_r and 0 <= c + dc < cells_c and not visited[r + dr, c + dc]
        ]
        if not options:
            stack.pop()
            continue
        nr, nc = options[int(rng.integers(len(options)))]
        visited[nr, nc] = True
        walls[r + nr + 1, c + nc + 1] = False  # passage between the two cells
        walls[2 * nr + 1, 2 * nc + 1] = False
        stack.append((nr, nc))
    return walls


def sample_maze(rng: np.random.Generator, width: int, height: int, horizon: int = 250) -> MazeSpec:
    if width % 2 == 0 or height % 2 == 0:
        raise InvalidArgument(f"maze dimensions must be odd, got {width}x{height}")
    if width < 5 or height < 5:
        raise InvalidArgument("maze dimensions must be >= 5")
    walls = carve_maze(rng, width, height)
    open_cells = [tuple(int(v) for v in rc) for rc in np.argwhere(~walls)]
    start = open_cells[int(rng.integers(len(open_cells)))]
    others = [cell for cell in open_cells if cell != start]
    target = others[int(rng.integers(len(others)))]
    return MazeSpec(walls, start, target, horizon)


# ---------------------------------------------------------------------------
# Task distributions


@dataclass(frozen=True)
class BanditDistribution:
    k: int
    family: str = field(default="bandit", init=False)

    @property
    def n_actions(self) -> int:
        return self.k

    def sample(self, rng: np.random.Generator) -> BanditSpec:
        return sample_bandit(rng, self.k)


@dataclass(frozen=True)
class TabularMdpDistribution:
    n_states: int = 10
    n_actions: int = 5
    horizon: int = 10
    family: str = field(default="mdp", init=False)

    def sample(self, rng: np.random.Generator) -> TabularMdpSpec:
        return sample_tabular_mdp(rng, self.n_states, self.n_actions, self.horizon)


@dataclass(frozen=True)
class MazeDistribution:
    """Mazes drawn fresh, or uniformly from a frozen corpus when one is given."""

    width: int = 5
    height: int = 5
    horizon: int = 250
    corpus: tuple = ()
    family: str = field(default="maze", init=False)

    @property
    def n_actions(self) -> int:
        return 3

    def sample(self, rng: np.random.Generator) -> MazeSpec:
        if self.corpus:
            return self.corpus[int(rng.integers(len(self.corpus)))]
        return sample_maze(rng, self.width, self.height, self.horizon)


def build_maze_corpus(
    master_seed: int, count: int, width: int, height: int, horizon: int, namespace: str = "maze"
) -> list[MazeSpec]:
    from .seeding import instance_rng

    return [sample_maze(instance_rng(master_seed, namespace, i), width, height, horizon) for i in range(count)]


# ---------------------------------------------------------------------------
# Trial protocol


class TrialEnv:
    """Serves ``episodes_per_trial`` episodes of one task.

    Single-threaded state machine; randomness comes from the generator passed
    to :meth:`step`.
    """

    def __init__(self, task: Task, config: TrialConfig):
        self.task = task
        self.config = config
        self.episode = 0
        self.t = 0
        self.trial_done = False
        self._state = task.initial_state()

    def reset(self) -> AgentInput:
        self.episode = 0
        self.t = 0
        self.trial_done = False
        self._state = self.task.initial_state()
        return AgentInput(self.task.observe(self._state))

    @property
    def n_actions(self) -> int:
        return self.task.n_actions

    def step(self, action: int, rng: np.random.Generator) -> StepResult:
        if self.trial_done:
            raise ProtocolViolation("step() called on a finished trial")
        if not 0 <= action < self.task.n_actions:
            raise InvalidArgument(f"action {action} out of range")
        reward, state, terminal = self.task.transition(self._state, action, rng)
        self.t += 1
        episode_done = terminal or self.t >= self.task.episode_horizon
        if episode_done:
            self.episode += 1
            self.t = 0
            state = self.task.initial_state()
            self.trial_done = self.episode >= self.config.episodes_per_trial
        self._state = state
        nxt = AgentInput(self.task.observe(state), int(action), float(reward), int(episode_done))
        return StepResult(nxt, float(reward), bool(episode_done), self.trial_done)


def trial_reset(task: Task, trial_config: TrialConfig) -> tuple[TrialEnv, AgentInput]:
    env = TrialEnv(task, trial_config)
    return env, env.reset()


def trial_step(env: TrialEnv, action: int, rng: np.random.Generator) -> StepResult:
    return env.step(action, rng)


# ---------------------------------------------------------------------------
# Serialization


def task_from_dict(data: dict):
    family = data["family"]
    if family == "bandit":
        return BanditSpec(np.asarray(data["arm_means"]))
    if family == "mdp":
        return TabularMdpSpec(
            np.asarray(data["transitions"]),
            np.asarray(data["reward_means"]),
            float(data["reward_stddev"]),
            int(data["horizon"]),
            int(data["start_state"]),
        )
    if family == "maze":
        return MazeSpec(
            np.asarray(data["walls"], dtype=bool),
            tuple(data["start_cell"]),
            tuple(data["target_cell"]),
            int(data["horizon"]),
            int(data.get("start_heading", 0)),
        )
    raise InvalidArgument(f"unknown task family {family!r}")


def save_tasks(path: str | Path, tasks: Sequence) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tasks]))


def load_tasks(path: str | Path) -> list:
    return [task_from_dict(d) for d in json.loads(Path(path).read_text())]
