import json
import math

import numpy as np
import pytest

from metarl import cli
from metarl.agent import RandomAgent
from metarl.errors import InvalidArgument
from metarl.harness import (
    AGENTS,
    EvalReport,
    ExperimentConfig,
    RL2Agent,
    config_hash,
    default_grid,
    distill_from_gittins,
    evaluate,
    evaluate_named,
    expand_grid,
    grid_search,
    highlighted,
    instance_seeds,
    load_completed_run,
    make_agent,
    make_table,
    maze_episode_stats,
    parse_task,
    profile_trpo_config,
)
from metarl.rl2_agent import EmbeddingSpec, PolicySnapshot
from metarl.stats import normalize_score, significance, welch_t_test
from metarl.trpo_gae import TrajectoryBatch


def report(name, totals):
    totals = np.asarray(totals, dtype=float)
    return EvalReport(name, {}, totals, list(range(totals.size)), "bandit:k=5,n=10", "")


def test_parse_task():
    assert parse_task("bandit:k=5,n=10") == ("bandit", {"k": 5, "n": 10})
    assert parse_task("mdp:n=10") == ("mdp", {"n": 10})
    for bad in ("pomdp:n=1", "bandit:k5", "bandit:n=0"):
        with pytest.raises(InvalidArgument):
            parse_task(bad)


def test_config_roundtrip_and_hash():
    cfg = ExperimentConfig.from_task_string("maze:size=5,n=2", agent="rl2", master_seed=3)
    assert cfg.trial_config().episodes_per_trial == 2
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert config_hash(cfg.to_dict()) == config_hash(again.to_dict())
    assert config_hash(cfg.to_dict()) != config_hash(cfg.with_agent("random").to_dict())


def test_profiles():
    desk = profile_trpo_config("desk", "bandit")
    assert (desk.batch_timesteps, desk.gae_lambda, desk.gamma, desk.max_mean_kl) == (25000, 0.3, 0.99, 0.01)
    assert profile_trpo_config("paper", "bandit").batch_timesteps == 250000
    assert profile_trpo_config("paper", "maze").batch_timesteps == 50000
    assert profile_trpo_config("desk", "maze").gae_lambda == 0.99
    with pytest.raises(InvalidArgument):
        profile_trpo_config("laptop", "bandit")


def test_random_anchor_bandit():
    rep = evaluate(RandomAgent(), ExperimentConfig.from_task_string("bandit:k=5,n=10"))
    assert rep.count == 1000 and abs(rep.mean - 5.0) <= 0.2


def test_random_anchor_mdp():
    rep = evaluate(RandomAgent(), ExperimentConfig.from_task_string("mdp:n=10"))
    assert abs(rep.mean - 100.1) <= 2.0


def test_report_statistics():
    rep = report("x", [1.0, 2.0, 3.0, 6.0])
    assert rep.mean == 3.0
    assert rep.stderr == pytest.approx(np.std([1, 2, 3, 6], ddof=1) / 2)


def test_evaluation_deterministic_and_paired():
    cfg = ExperimentConfig.from_task_string("bandit:k=5,n=10", instances=50, agent="ucb1", agent_params={"c": 0.2})
    a, b = evaluate_named(cfg), evaluate_named(cfg)
    np.testing.assert_array_equal(a.totals, b.totals)
    other = evaluate_named(cfg.with_agent("ts"))
    assert other.seeds == a.seeds


def test_worker_count_does_not_change_results(monkeypatch):
    cfg = ExperimentConfig.from_task_string("bandit:k=5,n=10", instances=30, agent="ts")
    serial = evaluate_named(cfg)
    monkeypatch.setenv("METARL_WORKERS", "3")
    parallel = evaluate_named(cfg)
    np.testing.assert_array_equal(serial.totals, parallel.totals)


def test_incompatible_agent():
    with pytest.raises(InvalidArgument):
        evaluate(make_agent("ucb1", {"c": 1.0}), ExperimentConfig.from_task_string("mdp:n=10", instances=2))
    with pytest.raises(InvalidArgument):
        make_agent("nope")


def test_tune_and_eval_seeds_disjoint():
    tune = set(instance_seeds(0, 1000, "tune"))
    ev = set(instance_seeds(0, 1000))
    assert len(tune) == len(ev) == 1000 and not tune & ev


def test_report_io(tmp_path):
    rep = report("ts", [1.0, 2.0, 4.0])
    rep.save(tmp_path / "r.json")
    loaded = EvalReport.load(tmp_path / "r.json")
    np.testing.assert_array_equal(loaded.totals, rep.totals)
    assert (tmp_path / "r.csv").exists()


def test_grid_singleton_and_empty():
    cfg = ExperimentConfig.from_task_string("bandit:k=5,n=10", instances=20)
    result = grid_search("ucb1", {"c": [0.5]}, cfg)
    assert result.best == {"c": 0.5} and len(result.points) == 1
    assert result.points[0][1].namespace == "tune"
    with pytest.raises(InvalidArgument):
        grid_search("ucb1", {"c": []}, cfg)
    with pytest.raises(InvalidArgument):
        expand_grid([])


def test_grid_ties_go_to_first_listed():
    cfg = ExperimentConfig.from_task_string("bandit:k=5,n=10", instances=20)
    # greedy ignores its hyperparameter-free grid points, so every point ties
    result = grid_search("greedy", [{}, {}], cfg)
    assert result.best == {} and result.points[0][1].mean == result.points[1][1].mean


def test_grid_epsilon_zero_vs_one():
    cfg = ExperimentConfig.from_task_string("bandit:k=5,n=100", instances=300)
    result = grid_search("epsilon_greedy", {"epsilon": [1.0, 0.0]}, cfg)
    assert result.best == {"epsilon": 0.0}
    greedy, uniform = result.points[1][1], result.points[0][1]
    assert welch_t_test(greedy.totals, uniform.totals).significant(0.05)


def test_default_grids_cover_tuned_agents():
    cfg = ExperimentConfig.from_task_string("bandit:k=5,n=10")
    assert {"c": 1.0} in expand_grid(default_grid("ucb1", cfg))
    assert any(abs(p["gamma"] - 0.9) < 1e-12 for p in expand_grid(default_grid("gittins", cfg)))
    assert set(AGENTS) >= {"random", "greedy", "epsilon_greedy", "ucb1", "ts", "ots", "gittins",
                           "psrl", "opsrl", "beb", "ucrl2", "rl2"}


def test_welch_hand_example():
    res = welch_t_test([2.0, 4.0, 6.0], [1.0, 3.0, 5.0])
    # each sample variance is 4, so se = sqrt(4/3 + 4/3)
    assert res.t == pytest.approx(1.0 / math.sqrt(8.0 / 3.0))
    assert res.df == pytest.approx(4.0)
    assert not res.significant(0.05)


def test_welch_identical_and_power():
    x = np.random.default_rng(0).normal(size=50)
    assert not welch_t_test(x, x).significant(0.05)
    rng = np.random.default_rng(1)
    assert welch_t_test(rng.normal(1, 1, 1000), rng.normal(0, 1, 1000)).significant(0.05)
    with pytest.raises(InvalidArgument):
        welch_t_test([1.0], [1.0, 2.0])


def test_significance_on_reports():
    a, b = report("a", [5, 6, 7, 6, 5, 7] * 20), report("b", [1, 2, 3, 2, 1, 3] * 20)
    assert significance(a, b) and not significance(b, a)


def test_normalize_score():
    assert normalize_score(6.6, 5.0, 6.6) == 1.0
    assert normalize_score(5.0, 5.0, 6.6) == 0.0
    assert normalize_score(78.7, 49.9, 78.3) == pytest.approx(1.014, abs=1e-3)
    with pytest.raises(InvalidArgument):
        normalize_score(1.0, 2.0, 2.0)


def test_highlighting():
    assert highlighted({"only": report("only", [1.0, 2.0])}) == {"only"}
    same = [1.0, 2.0, 3.0, 4.0]
    assert highlighted({"a": report("a", same), "b": report("b", same)}) == {"a", "b"}
    rng = np.random.default_rng(0)
    row = {
        "UCB1": report("UCB1", rng.normal(6.7, 1.6, 1000)),
        "RL2": report("RL2", rng.normal(6.7, 1.6, 1000)),
        "Random": report("Random", rng.normal(5.0, 1.6, 1000)),
    }
    assert highlighted(row) == {"UCB1", "RL2"}


def test_make_table_outputs():
    rng = np.random.default_rng(0)
    rows = {
        "n=10": {"ucb1": report("ucb1", rng.normal(6.7, 1, 100)), "random": report("random", rng.normal(5, 1, 100))},
        "n=100": {"ucb1": report("ucb1", rng.normal(78, 5, 100)), "random": None},
    }
    csv_text, text = make_table(rows)
    lines = csv_text.strip().splitlines()
    assert lines[0] == "setup,ucb1,ucb1_stderr,ucb1_bold,random,random_stderr,random_bold"
    assert lines[1].split(",")[3] == "1" and lines[1].split(",")[6] == "0"
    assert "**" in text and "-" in text.splitlines()[2]
    assert make_table(rows) == (csv_text, text)


def test_rl2_agent_zero_snapshot_is_random_like():
    snap = PolicySnapshot.zeros(EmbeddingSpec("bandit", 5), 4)
    cfg = ExperimentConfig.from_task_string("bandit:k=5,n=10", instances=400)
    rep = evaluate(RL2Agent(snap), cfg)
    assert abs(rep.mean - 5.0) < 0.3


def test_distill_zero_epochs_and_descent():
    cfg = ExperimentConfig.from_task_string("bandit:k=5,n=10", instances=300)
    zero = distill_from_gittins(cfg, 16, 200, 0, np.random.default_rng(0), eval_instances=300)
    assert len(zero.losses) == 1 and zero.losses[0] == pytest.approx(math.log(5))
    assert abs(zero.normalized_score) < 0.3
    trained = distill_from_gittins(cfg, 16, 200, 4, np.random.default_rng(0), learning_rate=1e-3, eval_instances=50)
    assert all(b <= a + 1e-12 for a, b in zip(trained.losses, trained.losses[1:]))


def test_distill_rejects_mdp():
    with pytest.raises(InvalidArgument):
        distill_from_gittins(ExperimentConfig.from_task_string("mdp:n=10"), 8, 10, 0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# CLI


def test_cli_eval_gridsearch_report(tmp_path, capsys):
    assert cli.main(["eval", "--agent", "random", "--task", "bandit:k=5,n=10", "--instances", "40",
                     "--out", str(tmp_path / "random.json")]) == 0
    assert cli.main(["gridsearch", "--agent", "ucb1", "--grid", '{"c": [0.2, 1.0]}', "--task", "bandit:k=5,n=10",
                     "--instances", "40", "--out", str(tmp_path / "grid.json"),
                     "--eval-out", str(tmp_path / "ucb1.json")]) == 0
    grid = json.loads((tmp_path / "grid.json").read_text())
    assert len(grid["points"]) == 2
    assert cli.main(["report", "--inputs", str(tmp_path / "*1*.json"), "--format", "csv",
                     "--out", str(tmp_path / "t.csv")]) == 0
    assert cli.main(["report", "--inputs", str(tmp_path / "r*.json")]) == 0
    out = capsys.readouterr().out
    assert "random" in out


def test_cli_train_and_eval_snapshot(tmp_path):
    config = {"task": "bandit:k=3,n=4", "iterations": 2, "hidden": 6, "trpo": {"batch_timesteps": 40}}
    assert cli.main(["train", "--config", json.dumps(config), "--out", str(tmp_path / "run")]) == 0
    meta = json.loads((tmp_path / "run" / "run.json").read_text())
    assert len(meta["config_hash"]) == 16 and meta["mode"] == "natural"
    assert len((tmp_path / "run" / "curve.csv").read_text().splitlines()) == 3
    assert meta["completed"]
    assert load_completed_run(tmp_path / "run", config) is not None
    assert load_completed_run(tmp_path / "run", dict(config, iterations=3)) is None
    assert cli.main(["eval", "--agent", "rl2", "--snapshot", str(tmp_path / "run" / "snapshot.ckpt"),
                     "--task", "bandit:k=3,n=4", "--instances", "10", "--out", str(tmp_path / "rl2.json")]) == 0


def test_cli_distill(tmp_path):
    assert cli.main(["distill", "--task", "bandit:k=3,n=4", "--trials", "30", "--epochs", "1", "--hidden", "6",
                     "--instances", "20", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "distilled.ckpt").exists()


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["report", "--inputs", str(tmp_path / "none*.json")]) == 2
    assert cli.main(["eval", "--agent", "ucb1", "--task", "mdp:n=10", "--instances", "2",
                     "--out", str(tmp_path / "x.json")]) == 2
    assert "error" in capsys.readouterr().err


def maze_batch(episodes):
    """episodes: per trial, a list of (length, success) pairs."""
    T = max(sum(n for n, _ in ep) for ep in episodes)
    B = len(episodes)
    rewards = np.zeros((T, B))
    done = np.zeros((T, B), dtype=bool)
    lengths = []
    for j, ep in enumerate(episodes):
        t = 0
        for n, success in ep:
            rewards[t:t + n, j] = -0.04
            t += n
            done[t - 1, j] = True
            if success:
                rewards[t - 1, j] = 0.96
        lengths.append(t)
    mask = np.arange(T)[:, None] < np.array(lengths)[None]
    z = np.zeros((T, B))
    return TrajectoryBatch(np.zeros((T, B, 1)), np.zeros((T, B), dtype=np.int64), rewards, z, z, mask, done,
                           np.array(lengths))


def test_maze_episode_stats_hand_example():
    batch = maze_batch([[(3, True), (2, True)], [(4, False), (3, True)], [(2, True), (3, True)]])
    stats = maze_episode_stats(batch)
    assert stats.mean_success_length == pytest.approx((2.5, 8 / 3))
    assert stats.success_rate == pytest.approx((2 / 3, 1.0))
    assert stats.improved == pytest.approx(2 / 3)


def test_maze_episode_stats_failed_second_episode_never_improves():
    stats = maze_episode_stats(maze_batch([[(5, True), (4, False)]]))
    assert stats.improved == 0.0 and np.isnan(stats.mean_success_length[1])
