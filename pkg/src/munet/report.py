"""Model-graph DOT export, knowledge-flow DOT, and run-log reports.

Both DOT writers order nodes by layer id and edges by (task, position),
so identical checkpoints always produce identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from pathlib import Path

from .store import SystemState, knowledge_flow, unique_task_count

PALETTE = [
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#e377c2",
    "#17becf",
]


def _task_colors(tasks: list[str]) -> dict[str, str]:
    return {task: PALETTE[i % len(PALETTE)] for i, task in enumerate(sorted(tasks))}


def export_graph(system: SystemState) -> str:
    """DOT digraph of every layer reachable from a best-per-task model.

    Each task contributes one color of edges from its input pseudo-node to
    its head; layer nodes carry the count of unique tasks in their lineage
    history, head nodes their model's validation accuracy.
    """
    tasks = sorted(system.best_per_task)
    colors = _task_colors(tasks)
    node_ids = sorted({i for t in tasks for i in system.best_per_task[t].layer_ids})

    lines = [
        "digraph munet {",
        "  rankdir=BT;",
        '  node [shape=box, style=filled, fillcolor="#f2f2f2", fontname="Helvetica"];',
    ]
    for task in tasks:
        lines.append(f'  "input_{task}" [label="{task}", shape=oval, fillcolor=white];')
    heads = {system.best_per_task[t].layer_ids[-1]: t for t in tasks}
    for layer_id in node_ids:
        layer = system.store.get(layer_id)
        badge = unique_task_count(system.store, layer_id)
        if layer_id in heads:
            task = heads[layer_id]
            q = system.best_per_task[task].validation_quality
            acc = f"{q:.3f}" if q is not None else "?"
            label = f"{layer.config.kind} #{layer_id}\\nacc={acc}\\ntasks={badge}"
        else:
            label = f"{layer.config.kind} #{layer_id}\\ntasks={badge}"
        lines.append(f'  "layer_{layer_id}" [label="{label}"];')
    for task in tasks:
        path = system.best_per_task[task].layer_ids
        color = colors[task]
        lines.append(f'  "input_{task}" -> "layer_{path[0]}" [color="{color}"];')
        for a, b in zip(path, path[1:]):
            lines.append(f'  "layer_{a}" -> "layer_{b}" [color="{color}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_flow_graph(system: SystemState) -> str:
    """DOT digraph of task-to-task knowledge flow.

    An edge A -> B with weight f means fraction f of the parameter-weighted
    training behind B's best model was performed on task A.
    """
    tasks = sorted(system.best_per_task)
    colors = _task_colors(tasks)
    lines = [
        "digraph knowledge_flow {",
        "  rankdir=LR;",
        '  node [shape=ellipse, style=filled, fillcolor="#f2f2f2", fontname="Helvetica"];',
    ]
    for task in tasks:
        lines.append(f'  "{task}" [color="{colors[task]}"];')
    for target in tasks:
        flow = knowledge_flow(system, system.best_per_task[target])
        for source in sorted(flow):
            frac = flow[source]
            if frac <= 0.0:
                continue
            lines.append(
                f'  "{source}" -> "{target}" '
                f'[label="{frac:.3f}", penwidth={max(0.5, 4.0 * frac):.2f}, '
                f'color="{colors.get(source, "#777777")}"];'
            )
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# run-log reports


def _read_log(path) -> list[dict]:
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError:
                print(f"warning: {path}:{lineno}: unparseable line skipped", file=sys.stderr)
    return events


def _mean(xs: list[float]) -> float:
    return sum(xs) / len(xs)


def _std(xs: list[float]) -> float:
    m = _mean(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def generate_report(log_paths: list, out_dir) -> dict:
    """Aggregate one or more repetition logs into markdown + CSV tables.

    Produces summary.csv / report.md (per-task max, avg, std of test
    accuracy and mean accounted params), per-dimension hyperparameter
    histogram CSVs over all sampled children, and a knowledge-flow
    adjacency CSV averaged over logs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [_read_log(p) for p in log_paths]

    summaries = []
    for events in runs:
        end = [e for e in events if e.get("event") == "run_end"]
        if end:
            summaries.append(end[-1].get("summary", {}))
    tasks = sorted({t for s in summaries for t in s})

    rows = []
    for task in tasks:
        accs = [s[task]["test_acc"] for s in summaries if task in s and s[task].get("test_acc") is not None]
        accounted = [
            s[task]["accounted_params"]
            for s in summaries
            if task in s and s[task].get("accounted_params") is not None
        ]
        rows.append(
            {
                "task": task,
                "runs": len(accs),
                "max_test_acc": max(accs) if accs else "",
                "avg_test_acc": _mean(accs) if accs else "",
                "std_test_acc": _std(accs) if accs else "",
                "avg_accounted_params": _mean(accounted) if accounted else "",
            }
        )
    if rows and all(r["avg_test_acc"] != "" for r in rows):
        rows.append(
            {
                "task": "MEAN",
                "runs": min(r["runs"] for r in rows),
                "max_test_acc": _mean([r["max_test_acc"] for r in rows]),
                "avg_test_acc": _mean([r["avg_test_acc"] for r in rows]),
                "std_test_acc": _mean([r["std_test_acc"] for r in rows]),
                "avg_accounted_params": _mean([r["avg_accounted_params"] for r in rows]),
            }
        )

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["task"])
        writer.writeheader()
        writer.writerows(rows)

    # histogram of every hyperparameter value sampled into a child
    counts: dict[str, dict[str, int]] = {}
    for events in runs:
        for e in events:
            if e.get("event") != "child":
                continue
            for name, value in e.get("hyperparams", {}).items():
                bucket = counts.setdefault(name, {})
                key = json.dumps(value)
                bucket[key] = bucket.get(key, 0) + 1
    for name, bucket in sorted(counts.items()):
        with open(out / f"hp_{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "count"])
            for key in sorted(bucket):
                writer.writerow([json.loads(key), bucket[key]])

    flows: dict[tuple[str, str], list[float]] = {}
    for s in summaries:
        for task, info in s.items():
            for source, frac in info.get("knowledge_flow", {}).items():
                flows.setdefault((task, source), []).append(frac)
    with open(out / "knowledge_flow.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target_task", "source_task", "fraction"])
        for (target, source), vals in sorted(flows.items()):
            writer.writerow([target, source, _mean(vals)])

    md = ["# Run report", "", f"Aggregated over {len(runs)} log(s).", ""]
    md.append("| task | runs | max test acc | avg test acc | std | avg accounted params |")
    md.append("|---|---|---|---|---|---|")

    def fmt(v) -> str:
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    for r in rows:
        md.append(
            f"| {r['task']} | {r['runs']} | {fmt(r['max_test_acc'])} "
            f"| {fmt(r['avg_test_acc'])} | {fmt(r['std_test_acc'])} "
            f"| {fmt(r['avg_accounted_params'])} |"
        )
    with open(out / "report.md", "w") as fh:
        fh.write("\n".join(md) + "\n")

    return {"tasks": tasks, "rows": rows}
