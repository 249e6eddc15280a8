"""Trial-level policy optimization: batched rollouts, GAE, baseline fitting, TRPO."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, NumericalFailure
from .meta_env import TrialConfig, TrialEnv
from .rl2_agent import PolicySnapshot, embed_inputs, evaluate_sequences
from .seeding import instance_rng, stable_seed
from .tensor_nn import (
    Adam,
    Categorical,
    add_scaled,
    check_finite,
    clip_by_global_norm,
    flatten,
    log_softmax,
    softmax,
    unflatten,
)

log = logging.getLogger(__name__)


@dataclass
class TrajectoryBatch:
    """Whole trials, time-major and right-padded; ``mask`` marks real steps."""

    inputs: np.ndarray  # [T, B, D]
    actions: np.ndarray  # [T, B]
    rewards: np.ndarray  # [T, B]
    log_probs: np.ndarray  # [T, B]
    values: np.ndarray  # [T, B]
    mask: np.ndarray  # [T, B] bool
    episode_done: np.ndarray  # [T, B] bool
    lengths: np.ndarray  # [B]

    @property
    def n_trials(self) -> int:
        return self.lengths.size

    @property
    def total_timesteps(self) -> int:
        return int(self.lengths.sum())

    @property
    def trial_returns(self) -> np.ndarray:
        return (self.rewards * self.mask).sum(axis=0)

    @staticmethod
    def concat(batches: Sequence["TrajectoryBatch"]) -> "TrajectoryBatch":
        if len(batches) == 1:
            return batches[0]
        T = max(b.inputs.shape[0] for b in batches)

        def pad(a):
            width = [(0, T - a.shape[0])] + [(0, 0)] * (a.ndim - 1)
            return np.pad(a, width)

        fields = ("inputs", "actions", "rewards", "log_probs", "values", "mask", "episode_done")
        merged = {f: np.concatenate([pad(getattr(b, f)) for b in batches], axis=1) for f in fields}
        return TrajectoryBatch(**merged, lengths=np.concatenate([b.lengths for b in batches]))


@dataclass
class TrpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.3
    max_mean_kl: float = 0.01
    batch_timesteps: int = 25000
    cg_iterations: int = 10
    cg_damping: float = 1e-3
    line_search_backtracks: int = 10
    baseline_epochs: int = 10
    baseline_step_size: float = 1e-2
    baseline_optimizer: str = "adam"
    mode: str = "natural"
    normalize_advantages: bool = True
    normalize_returns: bool = True
    # "monte_carlo": discounted returns to trial end; "lambda": the GAE(lambda) returns
    baseline_targets: str = "monte_carlo"
    first_order_step_size: float = 0.01
    first_order_epochs: int = 1
    kl_penalty_init: float = 1.0
    max_grad_norm: float | None = None
    # weight of a mean-entropy bonus in the surrogate; 0 is plain TRPO
    entropy_coef: float = 0.0

    def __post_init__(self):
        if self.max_mean_kl <= 0:
            raise InvalidArgument("max_mean_kl must be > 0")
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise InvalidArgument("gamma and gae_lambda must lie in [0, 1]")
        if self.batch_timesteps < 1:
            raise InvalidArgument("batch_timesteps must be >= 1")
        if self.mode not in ("natural", "first_order"):
            raise InvalidArgument(f"unknown TRPO mode {self.mode!r}")
        if self.baseline_optimizer not in ("adam", "sgd"):
            raise InvalidArgument(f"unknown baseline optimizer {self.baseline_optimizer!r}")
        if self.baseline_targets not in ("monte_carlo", "lambda"):
            raise InvalidArgument(f"unknown baseline targets {self.baseline_targets!r}")
        if self.entropy_coef < 0:
            raise InvalidArgument("entropy_coef must be >= 0")


# ---------------------------------------------------------------------------
# Rollouts


def rollout(
    tasks: Sequence,
    trial_config: TrialConfig,
    snapshot: PolicySnapshot,
    env_rngs: Sequence[np.random.Generator],
    agent_rngs: Sequence[np.random.Generator],
    greedy: bool = False,
) -> TrajectoryBatch:
    """Play one trial per task with the policy, all trials stepped in lockstep.

    Finished trials keep occupying their batch row with zero inputs so that
    every forward pass here has the same shape as the teacher-forced replay.
    """
    B = len(tasks)
    spec = snapshot.embedding
    pnet, vnet = snapshot.policy_net, snapshot.value_net
    peff, veff = pnet.effective(snapshot.policy), vnet.effective(snapshot.value)
    envs = [TrialEnv(task, trial_config) for task in tasks]
    current = [env.reset() for env in envs]
    h_pol = np.zeros((B, snapshot.hidden))
    h_val = np.zeros((B, snapshot.hidden))
    steps = {k: [] for k in ("inputs", "actions", "rewards", "log_probs", "values", "mask", "episode_done")}
    lengths = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    while active.any():
        x = embed_inputs(current, spec)
        h_pol, logits = pnet.step(peff, x, h_pol)
        h_val, values = vnet.step(veff, x, h_val)
        probs = softmax(logits)
        if greedy:
            actions = np.argmax(probs, axis=1)
        else:
            u = np.array([rng.random() if on else 0.0 for rng, on in zip(agent_rngs, active)])
            actions = Categorical(probs).inverse_cdf(u)
        logp = np.take_along_axis(log_softmax(logits), actions[:, None], axis=1)[:, 0]
        rewards = np.zeros(B)
        done = np.zeros(B, dtype=bool)
        mask = active.copy()
        for i in np.flatnonzero(active):
            res = envs[i].step(int(actions[i]), env_rngs[i])
            rewards[i] = res.reward
            done[i] = res.episode_done
            lengths[i] += 1
            if res.trial_done:
                active[i] = False
                current[i] = None
            else:
                current[i] = res.next_input
        for key, val in (
            ("inputs", x), ("actions", actions), ("rewards", rewards), ("log_probs", logp),
            ("values", snapshot.value_from_output(values[:, 0])), ("mask", mask), ("episode_done", done),
        ):
            steps[key].append(val)
    arrays = {k: np.stack(v) for k, v in steps.items()}
    arrays["actions"] = arrays["actions"].astype(np.int64)
    for k in ("rewards", "log_probs", "values"):
        arrays[k] = np.where(arrays["mask"], arrays[k], 0.0)
    return TrajectoryBatch(**arrays, lengths=lengths)


def trial_length_bound(task_distribution, trial_config: TrialConfig) -> tuple[int, bool]:
    """(maximum trial length, whether every trial has exactly that length)."""
    n = trial_config.episodes_per_trial
    family = task_distribution.family
    if family == "bandit":
        return n, True
    if family == "mdp":
        return n * task_distribution.horizon, True
    return n * task_distribution.horizon, False


def collect_batch(
    task_distribution,
    trial_config: TrialConfig,
    snapshot: PolicySnapshot,
    config: TrpoConfig,
    rng: np.random.Generator,
) -> TrajectoryBatch:
    """Roll out whole trials until at least ``batch_timesteps`` steps are collected.

    Trial ``j`` draws its task, environment noise and action noise from
    streams seeded by ``(batch seed, namespace, j)``.
    """
    batch_seed = int(rng.integers(2**63))
    max_len, fixed = trial_length_bound(task_distribution, trial_config)
    waves, collected, start = [], 0, 0
    mean_len = float(max_len)
    while collected < config.batch_timesteps:
        remaining = config.batch_timesteps - collected
        count = max(1, math.ceil(remaining / (max_len if fixed else mean_len)))
        idx = range(start, start + count)
        tasks = [task_distribution.sample(instance_rng(batch_seed, "task", j)) for j in idx]
        env_rngs = [instance_rng(batch_seed, "env", j) for j in idx]
        agent_rngs = [instance_rng(batch_seed, "agent", j) for j in idx]
        wave = rollout(tasks, trial_config, snapshot, env_rngs, agent_rngs)
        waves.append(wave)
        collected += wave.total_timesteps
        start += count
        mean_len = collected / start
    return TrajectoryBatch.concat(waves)


# ---------------------------------------------------------------------------
# Advantages and baseline


def compute_gae(batch: TrajectoryBatch, values: np.ndarray, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """GAE over whole trials: the value after a trial's last step is 0 and
    episode boundaries inside a trial do not cut the recursion."""
    if values.shape != batch.rewards.shape:
        raise InvalidArgument(f"values {values.shape} misaligned with rewards {batch.rewards.shape}")
    T = values.shape[0]
    mask = batch.mask.astype(np.float64)
    values = values * mask
    adv = np.zeros_like(values)
    running = np.zeros(values.shape[1])
    for t in range(T - 1, -1, -1):
        cont = mask[t + 1] if t + 1 < T else np.zeros_like(running)
        next_v = values[t + 1] * cont if t + 1 < T else 0.0
        delta = batch.rewards[t] + gamma * next_v - values[t]
        running = (delta + gamma * lam * cont * running) * mask[t]
        adv[t] = running
    return adv, (adv + values) * mask


def normalize_advantages(adv: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    if not m.any():
        return adv
    mean = adv[m].mean()
    std = adv[m].std()
    return np.where(m, (adv - mean) / (std + 1e-8), 0.0)


def baseline_loss(batch: TrajectoryBatch, returns: np.ndarray, value_params, snapshot: PolicySnapshot) -> float:
    total = 0.0
    for cols, T in trial_chunks(batch.lengths, 100_000):
        T = max(T, 1)
        out = snapshot.value_from_output(snapshot.value_net.forward(value_params, batch.inputs[:T, cols]).out[..., 0])
        total += np.sum(batch.mask[:T, cols] * (out - returns[:T, cols]) ** 2)
    return float(total / max(1.0, batch.mask.sum()))


def fit_baseline(
    batch: TrajectoryBatch,
    returns: np.ndarray,
    snapshot: PolicySnapshot,
    config: TrpoConfig,
    optimizer: Adam | None = None,
):
    """Full-batch regression of the value network onto ``returns``; returns new value params.

    The regression runs in the head's normalized units, ``(returns - shift) / scale``.
    """
    net = snapshot.value_net
    params = snapshot.value
    if config.baseline_optimizer == "adam" and optimizer is None:
        optimizer = Adam(config.baseline_step_size)
    n = max(1.0, float(batch.mask.sum()))
    targets = (returns - snapshot.value_shift) / snapshot.value_scale
    chunks = [(cols, max(T, 1)) for cols, T in trial_chunks(batch.lengths, 100_000)]
    for _ in range(config.baseline_epochs):
        grads = None
        for cols, T in chunks:
            tape = net.forward(params, batch.inputs[:T, cols])
            err = (tape.out[..., 0] - targets[:T, cols]) * batch.mask[:T, cols]
            grads = _sum_grads(grads, net.backward(params, tape, (2.0 * err / n)[..., None]))
        check_finite("baseline gradient", grads)
        if config.max_grad_norm is not None:
            grads = clip_by_global_norm(grads, config.max_grad_norm)
        if config.baseline_optimizer == "adam":
            params = optimizer.step(params, grads)
        else:
            params = add_scaled(params, grads, -config.baseline_step_size)
    return params


def rescale_value_head(snapshot: PolicySnapshot, returns: np.ndarray, mask: np.ndarray, min_scale: float = 1e-2):
    """Move the value normalization to the batch's return statistics without changing predictions.

    The output gain and bias absorb the change, so ``shift + scale * out`` is
    the same function before and after.
    """
    m = mask.astype(bool)
    if not m.any():
        return snapshot
    shift = float(returns[m].mean())
    scale = max(float(returns[m].std()), min_scale)
    new = snapshot.copy()
    ratio = snapshot.value_scale / scale
    new.value["W_out.g"] = snapshot.value["W_out.g"] * ratio
    new.value["b_out"] = (snapshot.value["b_out"] * snapshot.value_scale + snapshot.value_shift - shift) / scale
    new.value_shift, new.value_scale = shift, scale
    return new


# ---------------------------------------------------------------------------
# Policy update


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray, iterations: int = 10, residual_tol: float = 1e-10
) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iterations):
        if math.sqrt(rr) <= residual_tol:
            break
        Ap = matvec(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0:
            raise NumericalFailure("conjugate gradient hit a non-positive or non-finite curvature", pAp=float(pAp))
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = r @ r
        if not np.isfinite(rr_new):
            raise NumericalFailure("conjugate gradient residual is not finite")
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def trial_chunks(lengths: np.ndarray, max_cells: int) -> list[tuple[np.ndarray, int]]:
    """Group trials by length so each group's padded ``T x B`` stays under ``max_cells``.

    Returns ``(trial indices, padded length)`` pairs. Variable-length trials
    (mazes) would otherwise all be padded to the longest one.
    """
    order = np.argsort(lengths, kind="stable")
    chunks, current = [], []
    for j in order:
        if current and int(lengths[j]) * (len(current) + 1) > max_cells:
            chunks.append((np.array(current), int(lengths[current[-1]])))
            current = []
        current.append(j)
    if current:
        chunks.append((np.array(current), int(lengths[current[-1]])))
    return chunks


def _sum_grads(total, part):
    if total is None:
        return part
    return {k: total[k] + part[k] for k in total}


class _Chunk:
    def __init__(self, batch: TrajectoryBatch, advantages: np.ndarray, cols: np.ndarray, T: int, net, params_old):
        T = max(T, 1)
        self.inputs = batch.inputs[:T, cols]
        self.actions = batch.actions[:T, cols]
        self.mask = batch.mask[:T, cols].astype(np.float64)
        self.adv = advantages[:T, cols]
        self.old_log_prob = batch.log_probs[:T, cols]
        self.tape_old = net.forward(params_old, self.inputs)
        self.logp_old_all = log_softmax(self.tape_old.out)
        self.probs_old = np.exp(self.logp_old_all)
        self.onehot = np.eye(net.out_dim)[self.actions]


class PolicyObjective:
    """Surrogate, mean KL, gradients and Fisher-vector products on one batch.

    Work is split into length-bucketed chunks (see :func:`trial_chunks`); every
    quantity is a masked mean over the whole batch.
    """

    def __init__(
        self,
        batch: TrajectoryBatch,
        advantages: np.ndarray,
        snapshot: PolicySnapshot,
        entropy_coef: float = 0.0,
        max_cells: int = 100_000,
    ):
        self.batch = batch
        self.entropy_coef = entropy_coef
        self.net = snapshot.policy_net
        self.params_old = snapshot.policy
        self.n = max(1.0, float(batch.mask.sum()))
        self.chunks = [
            _Chunk(batch, advantages, cols, T, self.net, self.params_old)
            for cols, T in trial_chunks(batch.lengths, max_cells)
        ]

    def evaluate(self, params) -> dict:
        parts = []
        surrogate = kl_sum = ent_sum = 0.0
        for c in self.chunks:
            tape = self.net.forward(params, c.inputs)
            logp_all = log_softmax(tape.out)
            logp = np.take_along_axis(logp_all, c.actions[..., None], axis=-1)[..., 0]
            ratio = np.exp(np.where(c.mask > 0, logp - c.old_log_prob, 0.0))
            kl = np.sum(c.probs_old * (c.logp_old_all - logp_all), axis=-1)
            entropy = -np.sum(np.exp(logp_all) * logp_all, axis=-1)
            surrogate += np.sum(c.mask * (ratio * c.adv + self.entropy_coef * entropy))
            kl_sum += np.sum(c.mask * kl)
            ent_sum += np.sum(c.mask * entropy)
            parts.append((tape, logp_all, ratio))
        return {
            "parts": parts, "surrogate": float(surrogate / self.n),
            "mean_kl": float(kl_sum / self.n), "entropy": float(ent_sum / self.n),
        }

    def surrogate_grad(self, params, ev=None, kl_coef: float = 0.0):
        ev = ev or self.evaluate(params)
        total = None
        for c, (tape, logp_all, ratio) in zip(self.chunks, ev["parts"]):
            probs = np.exp(logp_all)
            w = (c.mask * ratio * c.adv / self.n)[..., None]
            d_out = w * (c.onehot - probs)
            if self.entropy_coef:
                ent = -np.sum(probs * logp_all, axis=-1, keepdims=True)
                d_out -= self.entropy_coef * (c.mask / self.n)[..., None] * probs * (logp_all + ent)
            if kl_coef:
                d_out -= kl_coef * (c.mask / self.n)[..., None] * (probs - c.probs_old)
            total = _sum_grads(total, self.net.backward(params, tape, d_out))
        return total

    def kl_grad(self, params):
        """Gradient of the mean KL(old || params)."""
        ev = self.evaluate(params)
        total = None
        for c, (tape, logp_all, _) in zip(self.chunks, ev["parts"]):
            d_out = (c.mask / self.n)[..., None] * (np.exp(logp_all) - c.probs_old)
            total = _sum_grads(total, self.net.backward(params, tape, d_out))
        return total

    def fisher_vector_product(self, vector: np.ndarray, damping: float = 0.0) -> np.ndarray:
        """Hessian of the mean KL at the old parameters times ``vector`` (Gauss-Newton form)."""
        tangent = unflatten(vector, self.params_old)
        fv = np.zeros_like(vector)
        for c in self.chunks:
            d_logits = self.net.jvp(self.params_old, c.tape_old, tangent)
            p = c.probs_old
            u = p * d_logits - p * np.sum(p * d_logits, axis=-1, keepdims=True)
            u *= (c.mask / self.n)[..., None]
            fv += flatten(self.net.backward(self.params_old, c.tape_old, u))
        return fv + damping * vector


@dataclass
class KlPenaltyState:
    beta: float = 1.0


def trpo_update(
    batch: TrajectoryBatch,
    advantages: np.ndarray,
    snapshot: PolicySnapshot,
    config: TrpoConfig,
    kl_state: KlPenaltyState | None = None,
) -> tuple[PolicySnapshot, dict]:
    objective = PolicyObjective(batch, advantages, snapshot, config.entropy_coef)
    before = objective.evaluate(snapshot.policy)
    stats = {
        "mode": config.mode, "surrogate_before": before["surrogate"], "surrogate_after": before["surrogate"],
        "mean_kl": 0.0, "entropy": before["entropy"], "step_fraction": 0.0, "accepted": False,
    }
    if config.mode == "natural":
        new_params = _natural_step(objective, before, snapshot.policy, config, stats)
    else:
        kl_state = kl_state or KlPenaltyState(config.kl_penalty_init)
        new_params = _first_order_step(objective, before, snapshot.policy, config, kl_state, stats)
    if new_params is snapshot.policy:
        return snapshot, stats
    new = snapshot.copy()
    new.policy = new_params
    return new, stats


def _natural_step(objective, before, params, config, stats):
    grad = flatten(objective.surrogate_grad(params, before))
    check_finite("policy gradient", grad)
    if not np.any(grad):
        return params
    step_dir = conjugate_gradient(
        lambda v: objective.fisher_vector_product(v, config.cg_damping), grad, config.cg_iterations
    )
    shs = step_dir @ objective.fisher_vector_product(step_dir, config.cg_damping)
    if not np.isfinite(shs) or shs <= 0:
        raise NumericalFailure("degenerate natural-gradient curvature", shs=float(shs))
    full_step = unflatten(step_dir * math.sqrt(2.0 * config.max_mean_kl / shs), params)
    for k in range(config.line_search_backtracks):
        frac = 0.5**k
        candidate = add_scaled(params, full_step, frac)
        ev = objective.evaluate(candidate)
        if not (np.isfinite(ev["surrogate"]) and np.isfinite(ev["mean_kl"])):
            continue
        if ev["surrogate"] > before["surrogate"] and ev["mean_kl"] <= config.max_mean_kl:
            stats.update(
                surrogate_after=ev["surrogate"], mean_kl=ev["mean_kl"], entropy=ev["entropy"],
                step_fraction=frac, accepted=True,
            )
            return candidate
    return params


def _first_order_step(objective, before, params, config, kl_state, stats):
    ev = before
    current = params
    for _ in range(config.first_order_epochs):
        grads = objective.surrogate_grad(current, ev, kl_coef=kl_state.beta)
        check_finite("policy gradient", grads)
        if not any(np.any(g) for g in grads.values()):
            break
        if config.max_grad_norm is not None:
            grads = clip_by_global_norm(grads, config.max_grad_norm)
        current = add_scaled(current, grads, config.first_order_step_size)
        ev = objective.evaluate(current)
        if not (np.isfinite(ev["surrogate"]) and np.isfinite(ev["mean_kl"])):
            raise NumericalFailure("non-finite surrogate after first-order step")
    if current is params:
        return params
    if ev["mean_kl"] > 2.0 * config.max_mean_kl:
        kl_state.beta *= 2.0
    elif ev["mean_kl"] < 0.5 * config.max_mean_kl:
        kl_state.beta *= 0.5
    stats.update(
        surrogate_after=ev["surrogate"], mean_kl=ev["mean_kl"], entropy=ev["entropy"],
        step_fraction=1.0, accepted=True, beta=kl_state.beta,
    )
    return current


# ---------------------------------------------------------------------------
# Training loop


class CsvCurveSink:
    """Append-only learning-curve CSV."""

    fields = ("iteration", "mean_trial_reward", "mean_kl", "entropy", "wall_clock_s")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.fields)

    def __call__(self, record: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([record[f] for f in self.fields])


def train(
    task_distribution,
    trial_config: TrialConfig,
    config: TrpoConfig,
    iterations: int,
    rng: np.random.Generator,
    sinks: Iterable[Callable[[dict], None]] = (),
    snapshot: PolicySnapshot | None = None,
    hidden: int = 64,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 25,
) -> tuple[PolicySnapshot, list[dict]]:
    """collect -> GAE -> baseline fit -> policy update, ``iterations`` times."""
    from .rl2_agent import EmbeddingSpec

    if snapshot is None:
        probe = task_distribution.sample(np.random.default_rng(0))
        snapshot = PolicySnapshot.initial(EmbeddingSpec.for_task(probe), hidden, rng)
    sinks = list(sinks)
    curve: list[dict] = []
    kl_state = KlPenaltyState(config.kl_penalty_init)
    baseline_opt = Adam(config.baseline_step_size) if config.baseline_optimizer == "adam" else None
    start = time.perf_counter()
    ckpt_path = Path(checkpoint_dir) / "snapshot.ckpt" if checkpoint_dir else None
    for it in range(iterations):
        batch = collect_batch(task_distribution, trial_config, snapshot, config, rng)
        adv, returns = compute_gae(batch, batch.values, config.gamma, config.gae_lambda)
        if config.baseline_targets == "monte_carlo":
            # lambda-returns at small lambda mostly echo the stale baseline
            returns = compute_gae(batch, batch.values, config.gamma, 1.0)[1]
        if config.normalize_advantages:
            adv = normalize_advantages(adv, batch.mask)
        try:
            if config.normalize_returns:
                snapshot = rescale_value_head(snapshot, returns, batch.mask)
            value_params = fit_baseline(batch, returns, snapshot, config, baseline_opt)
            new_snapshot, stats = trpo_update(batch, adv, snapshot, config, kl_state)
        except NumericalFailure:
            if ckpt_path is not None:
                snapshot.save(ckpt_path)
            raise
        new_snapshot = new_snapshot.copy() if new_snapshot is snapshot else new_snapshot
        new_snapshot.value = value_params
        snapshot = new_snapshot
        record = {
            "iteration": it,
            "mean_trial_reward": float(batch.trial_returns.mean()),
            "mean_kl": stats["mean_kl"],
            "entropy": stats["entropy"],
            "wall_clock_s": time.perf_counter() - start,
        }
        curve.append(record)
        log.info("iter %d reward %.3f kl %.4f entropy %.3f", it, record["mean_trial_reward"], stats["mean_kl"], stats["entropy"])
        for sink in sinks:
            sink(record)
        if ckpt_path is not None and (it + 1) % checkpoint_every == 0:
            snapshot.save(ckpt_path)
    if ckpt_path is not None:
        snapshot.save(ckpt_path)
    return snapshot, curve
