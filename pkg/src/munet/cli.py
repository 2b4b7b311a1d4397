"""Command-line entry points.

The config file is JSON with two sections: "run" (RunConfig fields) and
"data" (DataConfig fields). Exit codes: 0 success, 2 configuration or
argument problems, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DataConfig, build_task_datas, preprocess_eval_batch
from .evolution import (
    RunConfig,
    RunLog,
    compute_budget,
    evaluate_logits,
    parse_preset,
    run_baseline,
    run_experiment,
)
from .report import export_flow_graph, export_graph, generate_report
from .store import model_forward


def load_config(path) -> tuple[RunConfig, DataConfig]:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise SystemExit(_config_error(f"config file not found: {path}"))
    except json.JSONDecodeError as e:
        raise SystemExit(_config_error(f"config is not valid JSON: {e}"))
    try:
        run_cfg = RunConfig.from_dict(raw["run"])
        data_cfg = DataConfig.from_dict(raw.get("data", {}))
    except (KeyError, TypeError, ValueError) as e:
        raise SystemExit(_config_error(f"bad config field: {e}"))
    if run_cfg.tasks == ("auto",):
        names = tuple(f"synth{i}" for i in range(data_cfg.n_tasks))
        run_cfg = RunConfig.from_dict({**run_cfg.to_dict(), "tasks": list(names)})
    return run_cfg, data_cfg


def _config_error(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def _workers_override(args, config: RunConfig) -> RunConfig:
    workers = args.workers
    if workers is None:
        env = os.environ.get("MUNET_WORKERS")
        workers = int(env) if env else None
    if workers is None or workers == config.parallel_width:
        return config
    return RunConfig.from_dict({**config.to_dict(), "parallel_width": workers})


def cmd_evolve(args) -> int:
    config, data_cfg = load_config(args.config)
    if args.seed is not None:
        config = RunConfig.from_dict({**config.to_dict(), "master_seed": args.seed})
    config = _workers_override(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task_datas = build_task_datas(data_cfg)
    log = RunLog(out / "run_log.jsonl")
    system, log = run_experiment(config, task_datas, log)
    save_checkpoint(
        system,
        out / "checkpoint",
        extra={"run": config.to_dict(), "data": data_cfg.to_dict()},
    )
    budget = compute_budget(config, {td.task.name: len(td.train) for td in task_datas})
    summary = {
        "log_hash": f"{log.content_hash():016x}",
        "budget": budget,
        "parallel_width": config.parallel_width,
        "tasks": {},
    }
    for line in reversed(log.lines):
        event = json.loads(line)
        if event["event"] == "run_end":
            summary["tasks"] = event["summary"]
            break
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"run complete; log hash {summary['log_hash']}")
    for task, info in sorted(summary["tasks"].items()):
        print(
            f"  {task}: valid {info['valid_acc']:.4f} test {info['test_acc']:.4f} "
            f"accounted {info['accounted_params']:.0f}"
        )
    return 0


def cmd_baseline(args) -> int:
    config, data_cfg = load_config(args.config)
    try:
        parse_preset(args.preset)
    except ValueError as e:
        return _config_error(str(e))
    if args.seed is not None:
        config = RunConfig.from_dict({**config.to_dict(), "master_seed": args.seed})
    config = _workers_override(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task_datas = build_task_datas(data_cfg)
    log = RunLog(out / "baseline_log.jsonl")
    system, results, log = run_baseline(args.preset, config, task_datas, log)
    save_checkpoint(
        system,
        out / "checkpoint",
        extra={"run": config.to_dict(), "data": data_cfg.to_dict(), "preset": args.preset},
    )
    with open(out / "summary.json", "w") as fh:
        json.dump({"preset": args.preset, "tasks": results}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"baseline {args.preset} complete")
    for task, info in sorted(results.items()):
        if info.get("valid_acc") is None:
            print(f"  {task}: diverged")
            continue
        print(
            f"  {task}: valid {info['valid_acc']:.4f} test {info['test_acc']:.4f} "
            f"trainable {info['trainable_params']}"
        )
    return 0


def cmd_export_graph(args) -> int:
    system, _ = load_checkpoint(args.ckpt)
    dot = export_graph(system)
    Path(args.out).write_text(dot)
    print(f"wrote {args.out}")
    return 0


def cmd_flow_graph(args) -> int:
    system, _ = load_checkpoint(args.ckpt)
    dot = export_flow_graph(system)
    Path(args.out).write_text(dot)
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    for path in args.logs:
        if not Path(path).exists():
            return _config_error(f"log not found: {path}")
    generate_report(args.logs, args.out)
    print(f"report written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    system, extra = load_checkpoint(args.ckpt)
    if args.task not in system.best_per_task:
        return _config_error(
            f"task {args.task!r} not in checkpoint; has {sorted(system.best_per_task)}"
        )
    if "data" not in extra:
        return _config_error("checkpoint has no data config to rebuild the test set from")
    data_cfg = DataConfig.from_dict(extra["data"])
    task_datas = {td.task.name: td for td in build_task_datas(data_cfg)}
    if args.task not in task_datas:
        return _config_error(f"data config does not generate task {args.task!r}")
    model = system.best_per_task[args.task]
    td = task_datas[args.task]
    batch = preprocess_eval_batch(td.test, model.hyperparams)
    acc = evaluate_logits(model_forward(system, model, batch), td.test.labels)
    print(f"{args.task}: test accuracy {acc:.4f} over {len(td.test)} samples")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="munet",
        description="Evolutionary multitask learning over immutable shared layers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run the evolutionary experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("baseline", help="run a fixed-architecture baseline")
    p.add_argument("--preset", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("export-graph", help="write the layer-sharing DOT graph")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("flow-graph", help="write the knowledge-flow DOT graph")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow_graph)

    p = sub.add_parser("report", help="aggregate run logs into tables")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="evaluate a checkpointed task model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as e:
        # SystemExit from config validation passes through untouched
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
