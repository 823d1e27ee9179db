"""Command-line surface: evolve, evaluate, compare, report, replay."""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from .controller import run_evolution
from .evaluation import evaluate_agent, get_task
from .harness import (
    ConfigValidationError,
    TrajectoryLog,
    build_report,
    diff_event_streams,
    emit_report,
    load_run_config,
    prepare_run,
)
from .pipeline import AgentConfig, validate_pipeline
from .structure_search import ab_compare, sample_validation_subset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agentevo",
        description="Self-evolve a frozen-model agent: prompt search plus gated pipeline edits.",
    )
    sub = parser.add_subparsers(dest="command")

    evolve = sub.add_parser("evolve", help="run the full evolution loop")
    evolve.add_argument("--config", required=True)
    evolve.add_argument("--out", default="run_out")
    evolve.add_argument("--seed", type=int, default=None)
    evolve.add_argument("--backend-url", default=None, help="override http endpoint")
    evolve.add_argument("--deterministic", action="store_true", help="force sequential evaluation")

    evaluate = sub.add_parser("evaluate", help="score an agent file on a dataset split")
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--agent", required=True)
    evaluate.add_argument("--split", choices=("train", "test"), default="test")

    compare = sub.add_parser("compare", help="one-off A/B of two agent files")
    compare.add_argument("--config", required=True)
    compare.add_argument("--agent-a", required=True)
    compare.add_argument("--agent-b", required=True)

    report = sub.add_parser("report", help="turn a trajectory into report tables")
    report.add_argument("--trajectory", required=True)
    report.add_argument("--out", default="report_out")
    report.add_argument("--plots", action="store_true")

    replay = sub.add_parser("replay", help="re-execute a run and diff its trajectory")
    replay.add_argument("--config", required=True)
    replay.add_argument("--trajectory", required=True)

    return parser


def _load_config(args) -> "RunConfig":
    config = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "backend_url", None):
        config.backend = dict(config.backend)
        config.backend["endpoints"] = [args.backend_url]
    if getattr(args, "deterministic", False):
        config.workers = 1
    return config


def _load_agent(path: str) -> AgentConfig:
    with open(path, encoding="utf-8") as handle:
        agent = AgentConfig.from_dict(json.load(handle))
    violations = validate_pipeline(agent.logic)
    if violations:
        raise ValueError(f"agent file {path} has an invalid pipeline: {violations}")
    return agent


def cmd_evolve(args) -> int:
    config = _load_config(args)
    splits, backend, task = prepare_run(config)
    run = run_evolution(config, backend, splits, task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.log.write(out / "trajectory.jsonl")
    agent_doc = run.final_agent.to_dict()
    agent_doc["run_config_digest"] = config.digest()
    (out / "agent.json").write_text(
        json.dumps(agent_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"final utility: {run.final_utility}")
    print(f"trajectory: {out / 'trajectory.jsonl'} ({len(run.log)} events)")
    print(f"agent: {out / 'agent.json'}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    splits, backend, task = prepare_run(config)
    samples = splits.test_set if args.split == "test" else splits.train_pool
    if not samples:
        print(f"error: {args.split} split is empty", file=sys.stderr)
        return 2
    agent = _load_agent(args.agent)
    result = evaluate_agent(
        agent, list(samples), backend, task,
        workers=config.workers, max_output_units=config.max_output_units,
    )
    print(f"samples: {len(result.rows)}")
    print(f"utility: {result.utility:.4f}")
    print(f"per-query units: {result.per_query_units():.1f}")
    return 0


def cmd_compare(args) -> int:
    config = _load_config(args)
    splits, backend, task = prepare_run(config)
    agent_a = _load_agent(args.agent_a)
    agent_b = _load_agent(args.agent_b)
    rng = random.Random(config.seed)
    subset_ids = sample_validation_subset(
        splits.train_pool, rng, config.validation_size_range
    )
    by_id = {sample.id: sample for sample in splits.train_pool}
    subset = [by_id[sample_id] for sample_id in subset_ids]
    report = ab_compare(
        agent_a, agent_b, subset, backend, task,
        delta=config.delta, max_output_units=config.max_output_units,
    )
    print(f"subset size: {len(report.subset_ids)}")
    print(f"utility A: {report.utility_old:.4f}")
    print(f"utility B: {report.utility_new:.4f}")
    print(f"delta: {report.delta:+.4f} (gate {config.delta})")
    print(f"recommendation: {report.recommendation}")
    return 0


def cmd_report(args) -> int:
    log = TrajectoryLog.read(args.trajectory)
    bundle = emit_report(log.events, args.out, make_plots=args.plots)
    print(json.dumps(bundle.to_dict(), indent=2, sort_keys=True))
    print(f"tables written to {args.out}")
    return 0


def cmd_replay(args) -> int:
    config = _load_config(args)
    recorded = TrajectoryLog.read(args.trajectory)
    splits, backend, task = prepare_run(config)
    rerun = run_evolution(config, backend, splits, task)
    divergences = diff_event_streams(recorded.events, rerun.log.events)
    if divergences:
        print(f"{len(divergences)} divergence(s):")
        for line in divergences[:20]:
            print(f"  {line}")
        return 1
    print(f"no divergence across {len(recorded)} events")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage()
        return 2
    handler = {
        "evolve": cmd_evolve,
        "evaluate": cmd_evaluate,
        "compare": cmd_compare,
        "report": cmd_report,
        "replay": cmd_replay,
    }[args.command]
    try:
        return handler(args)
    except (ConfigValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
