"""Experiment orchestration: seeded instance sets, evaluation, tuning, tables, distillation."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import bandit_agents as ba
from . import mdp_agents as ma
from .agent import Agent, RandomAgent
from .errors import InvalidArgument
from .meta_env import (
    BanditDistribution,
    MazeDistribution,
    TabularMdpDistribution,
    TrialConfig,
    TrialEnv,
    build_maze_corpus,
)
from .rl2_agent import EmbeddingSpec, PolicySnapshot, embed_inputs
from .seeding import instance_rng, stable_seed
from .stats import normalize_score, significance
from .tensor_nn import Adam, log_softmax, softmax
from .trpo_gae import CsvCurveSink, TrajectoryBatch, TrpoConfig, rollout, train

PROFILES: dict[str, dict[str, Any]] = {
    "desk": {"hidden": 64, "batch_timesteps": 25000, "classical_instances": 1000, "policy_instances": 500},
    "paper": {
        "hidden": 256,
        "batch_timesteps": {"bandit": 250000, "mdp": 250000, "maze": 50000},
        "classical_instances": 1000,
        "policy_instances": 1000,
    },
}


def profile_trpo_config(profile: str, family: str, **overrides) -> TrpoConfig:
    if profile not in PROFILES:
        raise InvalidArgument(f"unknown profile {profile!r}")
    batch = PROFILES[profile]["batch_timesteps"]
    if isinstance(batch, dict):
        batch = batch[family]
    base = {"batch_timesteps": batch, "gae_lambda": 0.99 if family == "maze" else 0.3}
    base.update(overrides)
    return TrpoConfig(**base)


# ---------------------------------------------------------------------------
# Configuration


def parse_task(text: str) -> tuple[str, dict[str, int]]:
    """``"bandit:k=5,n=10"`` -> ``("bandit", {"k": 5, "n": 10})``."""
    family, _, rest = text.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq:
            raise InvalidArgument(f"malformed task parameter {item!r}")
        params[key.strip()] = int(value)
    cfg = ExperimentConfig(family=family.strip(), task_params=params)
    cfg.trial_config()  # validates
    return cfg.family, cfg.task_params


@dataclass
class ExperimentConfig:
    family: str
    task_params: dict = field(default_factory=dict)
    agent: str = "random"
    agent_params: dict = field(default_factory=dict)
    instances: int = 1000
    master_seed: int = 0
    profile: str = "desk"

    def __post_init__(self):
        if self.family not in ("bandit", "mdp", "maze"):
            raise InvalidArgument(f"unknown task family {self.family!r}")
        if self.profile not in PROFILES:
            raise InvalidArgument(f"unknown profile {self.profile!r}")
        if self.instances < 1:
            raise InvalidArgument("instances must be >= 1")

    @classmethod
    def from_task_string(cls, task: str, **kwargs) -> "ExperimentConfig":
        family, params = parse_task(task)
        return cls(family=family, task_params=params, **kwargs)

    @property
    def task_string(self) -> str:
        return self.family + ":" + ",".join(f"{k}={v}" for k, v in self.task_params.items())

    def trial_config(self) -> TrialConfig:
        default_n = 2 if self.family == "maze" else 10
        return TrialConfig(int(self.task_params.get("n", default_n)))

    def task_distribution(self):
        p = self.task_params
        if self.family == "bandit":
            return BanditDistribution(int(p.get("k", 5)))
        if self.family == "mdp":
            return TabularMdpDistribution(
                int(p.get("states", 10)), int(p.get("actions", 5)), int(p.get("horizon", 10))
            )
        size = int(p.get("size", 5))
        horizon = int(p.get("horizon", 250))
        corpus_size = int(p.get("corpus", 0))
        corpus = tuple(build_maze_corpus(self.master_seed, corpus_size, size, size, horizon)) if corpus_size else ()
        return MazeDistribution(size, size, horizon, corpus)

    def with_agent(self, agent: str, params: Mapping | None = None) -> "ExperimentConfig":
        return ExperimentConfig(
            self.family, dict(self.task_params), agent, dict(params or {}), self.instances, self.master_seed, self.profile
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        return cls(**data)


def config_hash(data: Mapping) -> str:
    """Content hash of a JSON-serializable config (sorted keys, compact separators)."""
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Training runs


@dataclass
class TrainingRun:
    snapshot: PolicySnapshot
    curve: list[dict]
    metadata: dict


def training_metadata(run_config: Mapping) -> dict:
    """Resolve a JSON training config (task, profile, seed, hidden, iterations, trpo overrides)."""
    task = run_config.get("task", "bandit:k=5,n=10")
    profile = run_config.get("profile", "desk")
    exp = ExperimentConfig.from_task_string(task, profile=profile, master_seed=int(run_config.get("seed", 0)))
    trpo = profile_trpo_config(profile, exp.family, **run_config.get("trpo", {}))
    meta = {
        "task": task, "profile": profile, "seed": exp.master_seed,
        "hidden": int(run_config.get("hidden", PROFILES[profile]["hidden"])),
        "iterations": int(run_config.get("iterations", 300)),
        "trpo": asdict(trpo), "mode": trpo.mode, "advantage_normalization": trpo.normalize_advantages,
    }
    meta["config_hash"] = config_hash(meta)
    return meta


def run_training(run_config: Mapping, out_dir: str | Path) -> TrainingRun:
    """Train from a JSON-style config, writing run.json, curve.csv and snapshot.ckpt to ``out_dir``.

    ``run.json`` gets ``"completed": true`` only after the last iteration.
    """
    meta = training_metadata(run_config)
    exp = ExperimentConfig.from_task_string(meta["task"], profile=meta["profile"], master_seed=meta["seed"])
    trpo = TrpoConfig(**meta["trpo"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").unlink(missing_ok=True)
    (out / "run.json").write_text(json.dumps(dict(meta, completed=False), indent=1))
    dist = exp.task_distribution()
    rng = np.random.default_rng(meta["seed"])
    probe = dist.sample(np.random.default_rng(meta["seed"]))
    snapshot = PolicySnapshot.initial(EmbeddingSpec.for_task(probe), meta["hidden"], rng)
    snapshot.metadata.update({"task": meta["task"], "mode": trpo.mode, "config_hash": meta["config_hash"]})
    snapshot, curve = train(
        dist, exp.trial_config(), trpo, meta["iterations"], rng,
        sinks=[CsvCurveSink(out / "curve.csv")], snapshot=snapshot, checkpoint_dir=out,
    )
    (out / "run.json").write_text(json.dumps(dict(meta, completed=True), indent=1))
    return TrainingRun(snapshot, curve, meta)


def load_completed_run(out_dir: str | Path, run_config: Mapping) -> PolicySnapshot | None:
    """The snapshot in ``out_dir`` if it finished training under exactly ``run_config``."""
    path = Path(out_dir) / "run.json"
    if not path.exists():
        return None
    saved = json.loads(path.read_text())
    if not saved.get("completed") or saved.get("config_hash") != training_metadata(run_config)["config_hash"]:
        return None
    return PolicySnapshot.load(Path(out_dir) / "snapshot.ckpt")


# ---------------------------------------------------------------------------
# Agents


class RL2Agent(Agent):
    """A trained recurrent policy; evaluates trials in lockstep batches."""

    name = "rl2"

    def __init__(self, snapshot: PolicySnapshot | None = None, path: str | None = None, greedy: bool = False):
        if snapshot is None:
            if path is None:
                raise InvalidArgument("rl2 agent needs a snapshot or a checkpoint path")
            snapshot = PolicySnapshot.load(path)
        super().__init__(path=path, greedy=greedy, hidden=snapshot.hidden)
        self.snapshot = snapshot
        self.greedy = greedy
        self.families = (snapshot.embedding.family,)

    def run_trials(self, tasks, trial_config, env_rngs, agent_rngs) -> np.ndarray:
        return self.rollout(tasks, trial_config, env_rngs, agent_rngs).trial_returns

    def rollout(self, tasks, trial_config, env_rngs, agent_rngs) -> TrajectoryBatch:
        return rollout(tasks, trial_config, self.snapshot, env_rngs, agent_rngs, greedy=self.greedy)

    def run_trial(self, task, trial_config, env_rng, agent_rng) -> float:
        return float(self.run_trials([task], trial_config, [env_rng], [agent_rng])[0])


AGENTS: dict[str, type[Agent]] = {
    "random": RandomAgent,
    "greedy": ba.GreedyBanditAgent,
    "epsilon_greedy": ba.EpsilonGreedyBanditAgent,
    "ucb1": ba.UCB1Agent,
    "ts": ba.ThompsonAgent,
    "ots": ba.OptimisticThompsonAgent,
    "gittins": ba.GittinsAgent,
    "psrl": ma.PSRLAgent,
    "opsrl": ma.OPSRLAgent,
    "beb": ma.BEBAgent,
    "ucrl2": ma.UCRL2Agent,
    "mdp_epsilon_greedy": ma.EpsilonGreedyMdpAgent,
    "mdp_greedy": ma.GreedyMdpAgent,
    "rl2": RL2Agent,
}

# Tuning grids for the classical baselines.
DEFAULT_GRIDS: dict[str, dict[str, list]] = {
    "epsilon_greedy": {"epsilon": [0.01, 0.05, 0.1, 0.2]},
    "ucb1": {"c": [0.1, 0.2, 0.5, 1.0, 2.0]},
    "ots": {"N": [1, 2, 5, 10, 20]},
    "gittins": {"gamma": [0.8, 0.9, 0.95, 0.99]},
    "opsrl": {"K": [2, 5, 10, 20]},
    "beb": {"beta": [0.5, 1.0, 2.0, 5.0]},
    "ucrl2": {"delta": [0.05, 0.1, 0.2, 0.5]},
    "mdp_epsilon_greedy": {"epsilon": [0.0, 0.05, 0.1, 0.2]},
}


def default_grid(agent: str, config: "ExperimentConfig") -> dict[str, list]:
    grid = {k: list(v) for k, v in DEFAULT_GRIDS.get(agent, {}).items()}
    if agent == "gittins":
        n = config.trial_config().episodes_per_trial
        if n > 1 and 1.0 - 1.0 / n not in grid["gamma"]:
            grid["gamma"].append(1.0 - 1.0 / n)
    return grid


def make_agent(name: str, params: Mapping | None = None) -> Agent:
    if name not in AGENTS:
        raise InvalidArgument(f"unknown agent {name!r}; choose from {sorted(AGENTS)}")
    return AGENTS[name](**dict(params or {}))


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    agent: str
    hyperparams: dict
    totals: np.ndarray
    seeds: list[int]
    task: str = ""
    namespace: str = ""

    @property
    def count(self) -> int:
        return self.totals.size

    @property
    def mean(self) -> float:
        return float(self.totals.mean())

    @property
    def stderr(self) -> float:
        if self.totals.size < 2:
            return float("nan")
        return float(self.totals.std(ddof=1) / np.sqrt(self.totals.size))

    def to_dict(self) -> dict:
        return {
            "agent": self.agent, "hyperparams": self.hyperparams, "task": self.task, "namespace": self.namespace,
            "mean": self.mean, "stderr": self.stderr, "count": self.count,
            "totals": self.totals.tolist(), "seeds": [str(s) for s in self.seeds],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalReport":
        return cls(
            data["agent"], dict(data.get("hyperparams", {})), np.asarray(data["totals"], dtype=float),
            [int(s) for s in data.get("seeds", [])], data.get("task", ""), data.get("namespace", ""),
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "task_seed", "total_reward"])
            for i, (s, t) in enumerate(zip(self.seeds, self.totals)):
                w.writerow([i, s, repr(float(t))])

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def instance_seeds(master_seed: int, count: int, namespace: str = "") -> list[int]:
    """Task seeds for instances ``0..count-1``; ``namespace="tune"`` gives the tuning set."""
    prefix = f"{namespace}/" if namespace else ""
    return [stable_seed(master_seed, prefix + "task", i) for i in range(count)]


def _instance_streams(config: ExperimentConfig, namespace: str, indices: Sequence[int]):
    prefix = f"{namespace}/" if namespace else ""
    dist = config.task_distribution()
    tasks = [dist.sample(instance_rng(config.master_seed, prefix + "task", i)) for i in indices]
    env_rngs = [instance_rng(config.master_seed, prefix + "env", i) for i in indices]
    agent_rngs = [instance_rng(config.master_seed, prefix + "agent", i) for i in indices]
    return tasks, env_rngs, agent_rngs


def _run_chunk(agent: Agent, config: ExperimentConfig, namespace: str, indices: Sequence[int]) -> np.ndarray:
    tasks, env_rngs, agent_rngs = _instance_streams(config, namespace, indices)
    return np.asarray(agent.run_trials(tasks, config.trial_config(), env_rngs, agent_rngs), dtype=float)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("METARL_WORKERS", "1")))
    except ValueError:
        raise InvalidArgument("METARL_WORKERS must be an integer") from None


def evaluate(agent: Agent, config: ExperimentConfig, namespace: str = "") -> EvalReport:
    """One full trial per instance; totals are undiscounted and ordered by instance index."""
    if config.family not in agent.families:
        raise InvalidArgument(f"agent {agent.name!r} does not support {config.family!r} tasks")
    indices = list(range(config.instances))
    workers = min(worker_count(), len(indices))
    if workers <= 1:
        totals = _run_chunk(agent, config, namespace, indices)
    else:
        chunks = [indices[w::workers] for w in range(workers)]
        totals = np.empty(len(indices))
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_run_chunk, agent, config, namespace, c) for c in chunks]
            for chunk, fut in zip(chunks, futures):
                totals[chunk] = fut.result()
    return EvalReport(
        agent.name, agent.describe()["hyperparams"], totals,
        instance_seeds(config.master_seed, config.instances, namespace), config.task_string, namespace,
    )


def evaluate_named(config: ExperimentConfig, namespace: str = "") -> EvalReport:
    return evaluate(make_agent(config.agent, config.agent_params), config, namespace)


@dataclass(frozen=True)
class MazeEpisodeStats:
    mean_success_length: tuple[float, ...]  # per episode index, successful episodes only (nan if none)
    success_rate: tuple[float, ...]
    improved: float  # share of trials whose episode 2 succeeds in fewer steps than episode 1


def maze_episode_stats(batch: TrajectoryBatch, n_episodes: int = 2) -> MazeEpisodeStats:
    """Per-episode lengths from a maze rollout; an episode succeeds when it ends on the target reward.

    A failed episode counts as infinitely long, so a trial improves when episode 2
    succeeds and episode 1 either failed or took more steps.
    """
    lengths = np.full((batch.n_trials, n_episodes), np.inf)
    for j in range(batch.n_trials):
        ends = np.flatnonzero(batch.episode_done[: batch.lengths[j], j])
        start = 0
        for e, end in enumerate(ends[:n_episodes]):
            if batch.rewards[end, j] > 0.5:
                lengths[j, e] = end - start + 1
            start = end + 1
    ok = np.isfinite(lengths)
    means = tuple(float(lengths[ok[:, e], e].mean()) if ok[:, e].any() else float("nan") for e in range(n_episodes))
    improved = float(np.mean(ok[:, 1] & (lengths[:, 1] < lengths[:, 0]))) if n_episodes > 1 else 0.0
    return MazeEpisodeStats(means, tuple(float(r) for r in ok.mean(axis=0)), improved)


def expand_grid(grid: Mapping[str, Sequence] | Sequence[Mapping]) -> list[dict]:
    if isinstance(grid, Mapping):
        keys = list(grid)
        points = [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]
    else:
        points = [dict(p) for p in grid]
    if not points:
        raise InvalidArgument("empty hyperparameter grid")
    return points


@dataclass
class GridReport:
    agent: str
    best: dict
    points: list[tuple[dict, EvalReport]]

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "best": self.best,
            "points": [{"params": p, "mean": r.mean, "stderr": r.stderr} for p, r in self.points],
        }


def grid_search(agent_name: str, grid, config: ExperimentConfig) -> GridReport:
    """Evaluate every grid point on the tuning instances; first-listed wins ties."""
    points = expand_grid(grid)
    results = [(p, evaluate(make_agent(agent_name, p), config, namespace="tune")) for p in points]
    best_params, best_report = results[0]
    for p, r in results[1:]:
        if r.mean > best_report.mean:
            best_params, best_report = p, r
    return GridReport(agent_name, best_params, results)


# ---------------------------------------------------------------------------
# Tables


def make_table(rows: Mapping[str, Mapping[str, EvalReport | None]], alpha: float = 0.05) -> tuple[str, str]:
    """``rows[setup][agent]`` -> (CSV, text).  Bold = best mean or not significantly worse than it."""
    agents: list[str] = []
    for cells in rows.values():
        agents.extend(a for a in cells if a not in agents)
    csv_buf = io.StringIO()
    w = csv.writer(csv_buf)
    w.writerow(["setup"] + [f"{a}{suffix}" for a in agents for suffix in ("", "_stderr", "_bold")])
    text_rows = [["setup"] + agents]
    for setup, cells in rows.items():
        present = {a: r for a, r in cells.items() if r is not None}
        bold = highlighted(present, alpha)
        csv_row, text_row = [setup], [setup]
        for a in agents:
            r = present.get(a)
            if r is None:
                csv_row += ["", "", ""]
                text_row.append("-")
                continue
            csv_row += [f"{r.mean:.4f}", f"{r.stderr:.4f}", int(a in bold)]
            cell = f"{r.mean:.1f}"
            text_row.append(f"**{cell}**" if a in bold else cell)
        w.writerow(csv_row)
        text_rows.append(text_row)
    widths = [max(len(row[i]) for row in text_rows) for i in range(len(text_rows[0]))]
    text = "\n".join("  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in text_rows)
    return csv_buf.getvalue(), text + "\n"


def highlighted(reports: Mapping[str, EvalReport], alpha: float = 0.05) -> set[str]:
    if not reports:
        return set()
    best = max(reports, key=lambda a: reports[a].mean)
    out = {best}
    for a, r in reports.items():
        if a != best and (r.count < 2 or not significance(reports[best], r, alpha)):
            out.add(a)
    return out


# ---------------------------------------------------------------------------
# Distillation from the Gittins policy


@dataclass
class DistillResult:
    snapshot: PolicySnapshot
    losses: list[float]
    teacher: EvalReport
    student: EvalReport
    random: EvalReport

    @property
    def normalized_score(self) -> float:
        return normalize_score(self.student.mean, self.random.mean, self.teacher.mean)

    def to_dict(self) -> dict:
        return {
            "losses": self.losses,
            "teacher": {"mean": self.teacher.mean, "stderr": self.teacher.stderr},
            "student": {"mean": self.student.mean, "stderr": self.student.stderr},
            "random": {"mean": self.random.mean, "stderr": self.random.stderr},
            "normalized_score": self.normalized_score,
        }


def record_teacher_trials(teacher: Agent, config: ExperimentConfig, count: int, namespace: str = "distill"):
    """Play ``count`` trials with ``teacher``; return embedded input histories and chosen actions."""
    tasks, env_rngs, agent_rngs = _instance_streams(config, namespace, range(count))
    tc = config.trial_config()
    spec = EmbeddingSpec.for_task(tasks[0])
    histories, actions = [], []
    for task, env_rng, agent_rng in zip(tasks, env_rngs, agent_rngs):
        env = TrialEnv(task, tc)
        inp = env.reset()
        teacher.start_trial(task, agent_rng)
        inputs, acts = [], []
        while True:
            a = teacher.act(inp)
            res = env.step(a, env_rng)
            teacher.observe(inp, a, res)
            inputs.append(inp)
            acts.append(a)
            if res.trial_done:
                break
            inp = res.next_input
        histories.append(embed_inputs(inputs, spec))
        actions.append(acts)
    T = max(len(a) for a in actions)
    X = np.zeros((T, count, spec.width))
    A = np.zeros((T, count), dtype=np.int64)
    M = np.zeros((T, count), dtype=bool)
    for j, (h, a) in enumerate(zip(histories, actions)):
        X[: len(a), j] = h
        A[: len(a), j] = a
        M[: len(a), j] = True
    return spec, X, A, M


def cross_entropy(snapshot: PolicySnapshot, X, A, M) -> float:
    logp = log_softmax(snapshot.policy_net.forward(snapshot.policy, X).out)
    picked = np.take_along_axis(logp, A[..., None], axis=-1)[..., 0]
    return float(-(picked * M).sum() / max(1, M.sum()))


def distill_from_gittins(
    config: ExperimentConfig,
    hidden: int,
    dataset_trials: int,
    epochs: int,
    rng: np.random.Generator,
    gamma: float | None = None,
    learning_rate: float = 3e-3,
    minibatch: int = 500,
    eval_instances: int | None = None,
    teacher: Agent | None = None,
) -> DistillResult:
    """Behavior-clone the Gittins policy into the recurrent architecture by teacher forcing."""
    if config.family != "bandit":
        raise InvalidArgument("distillation is defined for bandit tasks")
    if teacher is None:
        teacher = ba.GittinsAgent(**({"gamma": gamma} if gamma is not None else {}))
    spec, X, A, M = record_teacher_trials(teacher, config, dataset_trials)
    snapshot = PolicySnapshot.initial(spec, hidden, rng, zero_head=True)
    net = snapshot.policy_net
    onehot = np.eye(spec.n_actions)[A]
    opt = Adam(learning_rate)
    losses = [cross_entropy(snapshot, X, A, M)]
    order = np.arange(dataset_trials)
    for _ in range(epochs):
        rng.shuffle(order)
        for start in range(0, dataset_trials, minibatch):
            idx = order[start : start + minibatch]
            Xb, Mb = X[:, idx], M[:, idx]
            tape = net.forward(snapshot.policy, Xb)
            d_out = (softmax(tape.out) - onehot[:, idx]) * (Mb / max(1, Mb.sum()))[..., None]
            snapshot.policy = opt.step(snapshot.policy, net.backward(snapshot.policy, tape, d_out))
        losses.append(cross_entropy(snapshot, X, A, M))
    eval_cfg = ExperimentConfig(
        config.family, dict(config.task_params), "rl2", {}, eval_instances or config.instances,
        config.master_seed, config.profile,
    )
    student = evaluate(RL2Agent(snapshot), eval_cfg)
    return DistillResult(snapshot, losses, evaluate(teacher, eval_cfg), student, evaluate(RandomAgent(), eval_cfg))
