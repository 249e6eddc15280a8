"""Command-line entry point: train, eval, gridsearch, distill, report."""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import MetaRLError


def _json_arg(text: str):
    path = Path(text)
    if path.exists():
        return json.loads(path.read_text())
    return json.loads(text)


def cmd_train(args) -> int:
    run = harness.run_training(_json_arg(args.config), args.out)
    print(f"final mean trial reward {run.curve[-1]['mean_trial_reward']:.3f}" if run.curve else "no iterations run")
    return 0


def _experiment(args, agent: str, params: dict) -> harness.ExperimentConfig:
    return harness.ExperimentConfig.from_task_string(
        args.task, agent=agent, agent_params=params, instances=args.instances, master_seed=args.seed,
        profile=args.profile,
    )


def cmd_eval(args) -> int:
    params = _json_arg(args.params) if args.params else {}
    if args.snapshot:
        params["path"] = args.snapshot
    cfg = _experiment(args, args.agent, params)
    report = harness.evaluate_named(cfg)
    report.save(args.out)
    print(f"{report.agent} {cfg.task_string}: {report.mean:.3f} +- {report.stderr:.3f} ({report.count} instances)")
    return 0


def cmd_gridsearch(args) -> int:
    cfg = _experiment(args, args.agent, {})
    grid = _json_arg(args.grid) if args.grid else (harness.default_grid(args.agent, cfg) or [{}])
    result = harness.grid_search(args.agent, grid, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(result.to_dict(), indent=1))
    print(f"best {result.best}")
    if args.eval_out:
        report = harness.evaluate(harness.make_agent(args.agent, result.best), cfg)
        report.save(args.eval_out)
        print(f"evaluation: {report.mean:.3f} +- {report.stderr:.3f}")
    return 0


def cmd_distill(args) -> int:
    cfg = harness.ExperimentConfig.from_task_string(
        args.task, instances=args.instances, master_seed=args.seed, profile=args.profile
    )
    result = harness.distill_from_gittins(
        cfg, args.hidden or harness.PROFILES[args.profile]["hidden"], args.trials, args.epochs,
        np.random.default_rng(args.seed), gamma=args.gamma,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.snapshot.save(out / "distilled.ckpt")
    (out / "distill.json").write_text(json.dumps(result.to_dict(), indent=1))
    print(
        f"gittins {result.teacher.mean:.3f}  distilled {result.student.mean:.3f}  "
        f"normalized {result.normalized_score:.3f}"
    )
    return 0


def cmd_report(args) -> int:
    paths = sorted(glob.glob(args.inputs))
    if not paths:
        raise MetaRLError(f"no reports match {args.inputs!r}")
    rows: dict[str, dict] = {}
    for p in paths:
        report = harness.EvalReport.load(p)
        rows.setdefault(report.task or "?", {})[report.agent] = report
    csv_text, table_text = harness.make_table(rows)
    text = csv_text if args.format == "csv" else table_text
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metarl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a recurrent policy with TRPO")
    p.add_argument("--config", required=True, help="JSON file or inline JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    def common(p, default_instances=1000):
        p.add_argument("--task", required=True, help="e.g. bandit:k=5,n=10 | mdp:n=10 | maze:size=5,n=2")
        p.add_argument("--instances", type=int, default=default_instances)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--profile", choices=sorted(harness.PROFILES), default="desk")

    p = sub.add_parser("eval", help="evaluate an agent on a seeded instance set")
    p.add_argument("--agent", required=True, choices=sorted(harness.AGENTS))
    p.add_argument("--params", help="agent hyperparameters as JSON")
    p.add_argument("--snapshot", help="checkpoint path for the rl2 agent")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", help="tune an agent on the tuning instance set")
    p.add_argument("--agent", required=True, choices=sorted(harness.AGENTS))
    p.add_argument("--grid", help="JSON mapping of name -> values, or list of points")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-out", help="also evaluate the best point and save the report here")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("distill", help="clone the Gittins policy into the recurrent architecture")
    common(p, default_instances=500)
    p.add_argument("--trials", type=int, default=5000)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("report", help="combine saved reports into a table")
    p.add_argument("--inputs", required=True, help="glob of report JSON files")
    p.add_argument("--format", choices=("csv", "text"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MetaRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
