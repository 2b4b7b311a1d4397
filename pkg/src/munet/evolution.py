"""The evolutionary loop: phases, parent sampling, child training, scoring.

One experiment sweeps the task list ``task_iterations`` times. Within a
task's active phase, generations of children are sampled sequentially
from a master rng (so the sampled sequence is independent of training
parallelism), trained fork-join style, and retained only when they beat
their parent's score. Committed layers never change; a phase ends by
keeping just the best model for the task.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TaskData, TaskDef, preprocess, preprocess_eval_batch
from .hyperparams import Hyperparams, HyperparamSpace
from .layers import (
    CLASS_TOKEN,
    HEAD,
    PATCH_EMBED,
    POS_EMBED,
    RESIDUAL_ADAPTER,
    TRANSFORMER_BLOCK,
    LayerConfig,
    init_layer,
    param_count,
)
from .mutation import ChildModel, PrivateLayer, apply_mutations, sample_mutations
from .optim import OptimizerState, lr_at_step, sgd_step
from .store import (
    ModelSpec,
    SystemState,
    accounted_params,
    create_system,
    fnv1a64,
    knowledge_flow,
    model_param_count,
    path_backward,
    path_forward,
)
from .substrate import cross_entropy


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the root transformer."""

    hidden_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    mlp_dim: int = 64
    patch_size: int = 4
    in_channels: int = 1
    image_size: int = 16

    def layer_configs(self) -> list[LayerConfig]:
        grid = self.image_size // self.patch_size
        configs = [
            LayerConfig(
                kind=PATCH_EMBED,
                hidden_dim=self.hidden_dim,
                patch_size=self.patch_size,
                in_channels=self.in_channels,
            ),
            LayerConfig(kind=CLASS_TOKEN, hidden_dim=self.hidden_dim),
            LayerConfig(kind=POS_EMBED, hidden_dim=self.hidden_dim, grid_extent=grid),
        ]
        for _ in range(self.num_blocks):
            configs.append(
                LayerConfig(
                    kind=TRANSFORMER_BLOCK,
                    hidden_dim=self.hidden_dim,
                    num_heads=self.num_heads,
                    mlp_dim=self.mlp_dim,
                )
            )
        return configs

    def to_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "num_blocks": self.num_blocks,
            "num_heads": self.num_heads,
            "mlp_dim": self.mlp_dim,
            "patch_size": self.patch_size,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
        }


@dataclass(frozen=True)
class RunConfig:
    tasks: tuple[str, ...]
    task_iterations: int = 2
    generations_per_phase: int = 8
    children_per_generation: int = 4
    child_epochs: int = 5
    samples_cap_batches: int = 100
    batch_size: int = 16
    scale_factor: float = 1.0
    mu: float = 0.1
    master_seed: int = 0
    parallel_width: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0.0 < self.scale_factor <= 1.0:
            raise ValueError(f"scale_factor {self.scale_factor} outside (0, 1]")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu {self.mu} outside [0, 1]")
        for name in (
            "task_iterations",
            "generations_per_phase",
            "children_per_generation",
            "child_epochs",
            "samples_cap_batches",
            "batch_size",
            "parallel_width",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.tasks:
            raise ValueError("at least one task required")

    def to_dict(self) -> dict:
        d = {
            "tasks": list(self.tasks),
            "task_iterations": self.task_iterations,
            "generations_per_phase": self.generations_per_phase,
            "children_per_generation": self.children_per_generation,
            "child_epochs": self.child_epochs,
            "samples_cap_batches": self.samples_cap_batches,
            "batch_size": self.batch_size,
            "scale_factor": self.scale_factor,
            "mu": self.mu,
            "master_seed": self.master_seed,
            "parallel_width": self.parallel_width,
            "model": self.model.to_dict(),
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        d["tasks"] = tuple(d["tasks"])
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        return RunConfig(**d)


# ---------------------------------------------------------------------------
# scoring (quality discounted by accounted size)


def score(system: SystemState, model: ModelSpec, s: float, active_task: str) -> float:
    """quality * s ** (accounted / root_params); s = 1 disables the penalty."""
    if not 0.0 < s <= 1.0:
        raise ValueError(f"scale factor {s} outside (0, 1]")
    if model.validation_quality is None:
        raise ValueError(f"model {model.model_id} has no validation quality")
    if s == 1.0:
        return model.validation_quality
    root_params = model_param_count(system, system.root_model)
    acct = accounted_params(system, model, active_task)
    return model.validation_quality * s ** (acct / root_params)


def _sort_key(system: SystemState, model: ModelSpec, active_task: str):
    # deterministic total order: score, then quality, then smaller size, then id
    return (
        -(model.score if model.score is not None else -math.inf),
        -(model.validation_quality if model.validation_quality is not None else -math.inf),
        accounted_params(system, model, active_task),
        model.model_id,
    )


# ---------------------------------------------------------------------------
# parent sampling (half-life back-off over the score-ranked population)


def sample_parent(
    seed_parents: list[ModelSpec],
    active: list[ModelSpec],
    population: list[ModelSpec],
    rng: np.random.Generator,
) -> tuple[ModelSpec, bool]:
    """Draw the next child's parent.

    While seed parents remain, each is drawn uniformly and used once. After
    that, walk the active population in descending score order, accepting a
    candidate with probability (1/2)^offspring_count; if the walk rejects
    everyone, fall back to a uniform draw over active + population. Every
    selection increments the chosen parent's offspring count.
    """
    if seed_parents:
        idx = int(rng.integers(len(seed_parents)))
        parent = seed_parents.pop(idx)
        parent.offspring_count += 1
        return parent, True
    if not active and not population:
        raise ValueError("no candidates to sample a parent from")
    for candidate in active:
        if 0.5**candidate.offspring_count > rng.random():
            candidate.offspring_count += 1
            return candidate, False
    pool = active + [m for m in population if m not in active]
    parent = pool[int(rng.integers(len(pool)))]
    parent.offspring_count += 1
    return parent, False


# ---------------------------------------------------------------------------
# child training


def _epoch_batches(n_samples: int, batch_size: int) -> int:
    return max(n_samples // batch_size, 1)


def train_cycle_plan(config: RunConfig, n_train: int) -> tuple[int, int]:
    """(batches per cycle, number of cycles) for one child.

    A cycle trains min(one epoch, the batch cap) and then evaluates. The
    child consumes exactly child_epochs worth of batches overall, so the
    final cycle may run short; this keeps budgets comparable across modes.
    """
    epoch = _epoch_batches(n_train, config.batch_size)
    per_cycle = min(epoch, config.samples_cap_batches)
    cycles = math.ceil(config.child_epochs * epoch / per_cycle)
    return per_cycle, cycles


@dataclass
class TrainResult:
    child: ChildModel
    quality: float | None  # best cycle validation accuracy, None if never kept
    best_cycle: int  # 1-based cycle of the snapshot
    cycle_metrics: list[dict]
    diverged: bool = False


def evaluate_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _forward_eval(layers, batch: np.ndarray, eval_batch_size: int = 256) -> np.ndarray:
    outs = []
    for i in range(0, len(batch), eval_batch_size):
        outs.append(path_forward(layers, batch[i : i + eval_batch_size]))
    return np.concatenate(outs, axis=0)


def train_child(
    system: SystemState,
    child: ChildModel,
    data: TaskData,
    config: RunConfig,
    child_seed: int,
    parent_quality_bar: float,
) -> TrainResult:
    """Train a child through its cycles and keep the best-scoring snapshot.

    ``parent_quality_bar`` carries the parent's quality (or -inf when the
    parent was never trained on this task); at s-independent level the
    snapshot race is run on validation accuracy and the caller converts to
    scores for the retention decision.
    """
    rng = np.random.default_rng(child_seed)
    hp = child.hyperparams
    layers = child.layers(system)
    trainable = child.trainable_indexes()
    per_cycle, cycles = train_cycle_plan(config, len(data.train))
    total_steps = config.child_epochs * _epoch_batches(len(data.train), config.batch_size)
    optimizer = OptimizerState(momentum=hp.momentum, nesterov=hp.nesterov)
    valid_batch = preprocess_eval_batch(data.valid, hp)
    valid_labels = data.valid.labels

    best_quality: float | None = None
    best_cycle = 0
    best_params: dict[int, dict] | None = None
    metrics: list[dict] = []
    step = 0
    n = len(data.train)
    for cycle in range(1, cycles + 1):
        for _ in range(min(per_cycle, total_steps - step)):
            idx = rng.integers(n, size=config.batch_size)
            batch = np.stack(
                [preprocess(data.train.images[j], hp, rng, training=True) for j in idx]
            )
            labels = data.train.labels[idx]
            logits, caches = path_forward(layers, batch, with_cache=True)
            loss, d_logits = cross_entropy(logits, labels)
            if not np.isfinite(loss):
                return TrainResult(child, None, 0, metrics, diverged=True)
            grads = path_backward(layers, caches, d_logits, trainable)
            lr = lr_at_step(hp.learning_rate, step, total_steps, hp.schedule, hp.warmup_ratio)
            # one flat view so the norm clip spans every trainable tensor
            flat_grads = {}
            flat_params = {}
            for i, layer_grads in grads.items():
                for k, g in layer_grads.items():
                    flat_grads[f"{i}.{k}"] = g
                    flat_params[f"{i}.{k}"] = layers[i][1][k]
            sgd_step(flat_params, flat_grads, optimizer, lr)
            for i, layer_grads in grads.items():
                for k in layer_grads:
                    layers[i][1][k] = flat_params[f"{i}.{k}"]
            step += 1
        logits = _forward_eval(layers, valid_batch)
        quality = evaluate_logits(logits, valid_labels)
        improved = (quality > parent_quality_bar) and (
            best_quality is None or quality > best_quality
        )
        metrics.append({"cycle": cycle, "loss": round(float(loss), 6), "valid_acc": quality})
        if improved:
            best_quality = quality
            best_cycle = cycle
            best_params = {
                i: {k: v.copy() for k, v in layers[i][1].items()} for i in trainable
            }
    if best_params is not None:
        for i, params in best_params.items():
            for k, v in params.items():
                layers[i][1][k][...] = v
    return TrainResult(child, best_quality, best_cycle, metrics)


def child_accounted_params(system: SystemState, child: ChildModel, active_task: str) -> float:
    """Accounted size of an uncommitted child: shared entries carry their
    sharer discount, private entries are unshared by construction."""
    total = 0.0
    for entry in child.entries:
        if isinstance(entry, int):
            layer = system.store.get(entry)
            sharers = sum(
                1
                for task, best in system.best_per_task.items()
                if task != active_task and entry in best.layer_ids
            )
            total += param_count(layer.config) / (sharers + 1)
        else:
            total += param_count(entry.config)
    return total


# ---------------------------------------------------------------------------
# run log


class RunLog:
    """JSON-lines event sink with a running content hash."""

    def __init__(self, path=None):
        self.path = path
        self.lines: list[str] = []
        self._fh = open(path, "w") if path else None

    def emit(self, event: str, **fields) -> None:
        record = {"event": event, **fields}
        line = json.dumps(record, sort_keys=True)
        self.lines.append(line)
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def content_hash(self) -> int:
        return fnv1a64("\n".join(self.lines).encode())

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# active phase


def run_active_phase(
    system: SystemState,
    task_data: TaskData,
    config: RunConfig,
    space: HyperparamSpace,
    master_rng: np.random.Generator,
    log: RunLog,
    phase_index: int,
    child_counter: list[int],
) -> None:
    """Evolve the population for one task, then keep only its best model."""
    task = task_data.task.name
    s = config.scale_factor

    for m in system.population():
        m.offspring_count = 0
    active = [m for m in system.population() if m.trained and m.task_name == task]
    # sharer sets may have changed since this task was last active
    for m in active:
        m.score = score(system, m, s, task)
    seeds = list(system.population())
    log.emit(
        "phase_start",
        phase=phase_index,
        task=task,
        seed_ids=[m.model_id for m in seeds],
        active_ids=[m.model_id for m in active],
    )

    for generation in range(config.generations_per_phase):
        active.sort(key=lambda m: _sort_key(system, m, task))
        jobs = []
        for _ in range(config.children_per_generation):
            parent, is_seed = sample_parent(seeds, active, system.population(), master_rng)
            actions = sample_mutations(system, parent, space, config.mu, master_rng, is_seed)
            child = apply_mutations(
                system,
                parent,
                actions,
                task,
                task_data.task.num_classes,
                master_rng,
                is_seed=is_seed,
            )
            child_seed = int(master_rng.integers(2**63))
            if parent.trained and parent.task_name == task:
                parent_score = score(system, parent, s, task)
                acct = child_accounted_params(system, child, task)
                root_params = model_param_count(system, system.root_model)
                bar = parent_score / s ** (acct / root_params) if s < 1.0 else parent_score
            else:
                bar = -math.inf
            child_counter[0] += 1
            jobs.append((child_counter[0], parent, is_seed, child, child_seed, bar))

        def _train(job):
            child_id, parent, is_seed, child, child_seed, bar = job
            return train_child(system, child, task_data, config, child_seed, bar)

        if config.parallel_width > 1:
            with ThreadPoolExecutor(max_workers=config.parallel_width) as pool:
                results = list(pool.map(_train, jobs))
        else:
            results = [_train(job) for job in jobs]

        for (child_id, parent, is_seed, child, child_seed, bar), result in zip(jobs, results):
            retained = result.quality is not None
            model_id = None
            acct = child_accounted_params(system, child, task)
            child_score = None
            if retained:
                spec = child.commit(system, result.best_cycle)
                spec.validation_quality = result.quality
                spec.trained = True
                spec.score = score(system, spec, s, task)
                child_score = spec.score
                model_id = spec.model_id
                active.append(spec)
            log.emit(
                "child",
                phase=phase_index,
                task=task,
                generation=generation,
                child_id=child_id,
                model_id=model_id,
                parent_id=parent.model_id,
                is_seed=is_seed,
                mutations=child.applied,
                skipped=child.skipped,
                hyperparams=child.hyperparams.to_dict(),
                trainable_params=child.trainable_param_count(),
                cycle_metrics=result.cycle_metrics,
                quality=result.quality,
                accounted_params=acct,
                score=child_score,
                retained=retained,
                diverged=result.diverged,
            )

    if active:
        active.sort(key=lambda m: _sort_key(system, m, task))
        winner = active[0]
        system.best_per_task[task] = winner
        log.emit(
            "phase_end",
            phase=phase_index,
            task=task,
            best_model_id=winner.model_id,
            best_quality=winner.validation_quality,
            best_score=winner.score,
            accounted_params=accounted_params(system, winner, task),
        )
    else:
        log.emit("phase_end", phase=phase_index, task=task, best_model_id=None)


# ---------------------------------------------------------------------------
# whole experiment


def run_experiment(
    config: RunConfig,
    task_datas: list[TaskData],
    log: RunLog | None = None,
) -> tuple[SystemState, RunLog]:
    """Algorithm: sweep the task list task_iterations times, one active
    phase per task per sweep."""
    log = log or RunLog()
    names = [td.task.name for td in task_datas]
    if sorted(names) != sorted(config.tasks):
        raise ValueError(f"config tasks {config.tasks} != provided datasets {names}")
    by_name = {td.task.name: td for td in task_datas}

    master_rng = np.random.default_rng(config.master_seed)
    space = HyperparamSpace(config.model.patch_size, config.model.image_size)
    system = create_system(config.model.layer_configs(), master_rng, space.defaults())
    # worker width is an execution knob, not part of the experiment identity;
    # keeping it out of the log keeps the content hash invariant to it
    logged = config.to_dict()
    logged.pop("parallel_width")
    log.emit("run_start", config=logged)

    child_counter = [0]
    phase_index = 0
    for _ in range(config.task_iterations):
        for task in config.tasks:
            run_active_phase(
                system,
                by_name[task],
                config,
                space,
                master_rng,
                log,
                phase_index,
                child_counter,
            )
            phase_index += 1

    summary = {}
    for task in config.tasks:
        best = system.best_per_task.get(task)
        if best is None:
            continue
        test_logits = _forward_eval(
            [(system.store.get(i).config, system.store.get(i).params) for i in best.layer_ids],
            preprocess_eval_batch(by_name[task].test, best.hyperparams),
        )
        summary[task] = {
            "model_id": best.model_id,
            "valid_acc": best.validation_quality,
            "test_acc": evaluate_logits(test_logits, by_name[task].test.labels),
            "accounted_params": accounted_params(system, best, task),
            "total_params": model_param_count(system, best),
            "knowledge_flow": knowledge_flow(system, best),
        }
    log.emit("run_end", summary=summary)
    log.close()
    return system, log


# ---------------------------------------------------------------------------
# budget accounting


def baseline_epochs(config: RunConfig) -> int:
    """Epoch budget granted to each baseline replica."""
    return config.child_epochs * config.generations_per_phase * config.task_iterations


def compute_budget(config: RunConfig, n_train_per_task: dict[str, int]) -> dict:
    """Total training batches both modes will consume, per task and overall.

    A muNet run trains children_per_generation children per generation slot;
    the baseline gets the same width as replicas, each running the
    baseline-epoch budget, so the two sides consume identical batch counts
    whenever one epoch fits under the cycle cap.
    """
    per_task = {}
    for task, n_train in n_train_per_task.items():
        epoch = _epoch_batches(n_train, config.batch_size)
        child_batches = config.child_epochs * epoch
        munet = (
            config.children_per_generation
            * config.generations_per_phase
            * config.task_iterations
            * child_batches
        )
        baseline = config.children_per_generation * baseline_epochs(config) * epoch
        per_task[task] = {"munet_batches": munet, "baseline_batches": baseline}
    return {
        "baseline_epochs": baseline_epochs(config),
        "per_task": per_task,
        "munet_total": sum(v["munet_batches"] for v in per_task.values()),
        "baseline_total": sum(v["baseline_batches"] for v in per_task.values()),
    }


# ---------------------------------------------------------------------------
# baselines


BASELINE_PRESETS = ("multi_head", "full_finetune", "adapters", "freeze_below")


def parse_preset(spec: str) -> tuple[str, int | None]:
    """"multi_head", "full_finetune", "adapters:DIM", "freeze_below:K"."""
    name, _, arg = spec.partition(":")
    if name not in BASELINE_PRESETS:
        raise ValueError(f"unknown preset {spec!r}; options: {BASELINE_PRESETS}")
    if name in ("adapters", "freeze_below"):
        if not arg:
            arg = "32" if name == "adapters" else "1"
        return name, int(arg)
    if arg:
        raise ValueError(f"preset {name} takes no argument")
    return name, None


def _baseline_child(
    system: SystemState,
    preset: tuple[str, int | None],
    task: TaskDef,
    hp: Hyperparams,
    rng: np.random.Generator,
) -> ChildModel:
    """A fixed per-task architecture: what gets cloned is the preset."""
    name, arg = preset
    root = system.root_model
    kinds = [system.store.get(i).config.kind for i in root.layer_ids]
    entries: list = list(root.layer_ids)

    def clone(i: int) -> None:
        source = system.store.get(root.layer_ids[i])
        params = {k: np.array(v, copy=True) for k, v in source.params.items()}
        entries[i] = PrivateLayer(
            config=source.config, params=params, parent_layer_id=source.layer_id
        )

    if name == "full_finetune":
        for i in range(len(entries)):
            clone(i)
    elif name == "freeze_below":
        blocks = [i for i, k in enumerate(kinds) if k == TRANSFORMER_BLOCK]
        for pos, i in enumerate(blocks):
            if pos >= arg:
                clone(i)
    elif name == "adapters":
        blocks = [i for i, k in enumerate(kinds) if k == TRANSFORMER_BLOCK]
        with_adapters: list = []
        for i, entry in enumerate(entries):
            with_adapters.append(entry)
            if i in blocks[:-1]:
                cfg = LayerConfig(
                    kind=RESIDUAL_ADAPTER,
                    hidden_dim=system.store.get(root.layer_ids[i]).config.hidden_dim,
                    adapter_inner_dim=arg,
                )
                with_adapters.append(PrivateLayer(config=cfg, params=init_layer(cfg, rng)))
        entries = with_adapters

    hidden = system.store.get(root.layer_ids[0]).config.hidden_dim
    head_cfg = LayerConfig(kind=HEAD, hidden_dim=hidden, num_classes=task.num_classes)
    entries.append(PrivateLayer(config=head_cfg, params=init_layer(head_cfg, rng)))
    return ChildModel(
        task_name=task.name, hyperparams=hp, entries=entries, parent=root, is_seed=False
    )


def run_baseline(
    preset_spec: str,
    config: RunConfig,
    task_datas: list[TaskData],
    log: RunLog | None = None,
) -> tuple[SystemState, dict, RunLog]:
    """Train each task's fixed architecture for the full matched budget.

    children_per_generation replicas run per task (the same width the
    evolutionary side gets); the best replica by validation accuracy is
    kept. Returns per-task metrics alongside the populated system.
    """
    preset = parse_preset(preset_spec)
    log = log or RunLog()
    master_rng = np.random.default_rng(config.master_seed)
    space = HyperparamSpace(config.model.patch_size, config.model.image_size)
    system = create_system(config.model.layer_configs(), master_rng, space.defaults())
    budget_config = replace(config, child_epochs=baseline_epochs(config))
    logged = config.to_dict()
    logged.pop("parallel_width")  # same W-invariance contract as the evolved run
    log.emit("run_start", config=logged, preset=preset_spec, mode="baseline")

    results: dict[str, dict] = {}
    for td in task_datas:
        replicas = []
        for r in range(config.children_per_generation):
            child = _baseline_child(system, preset, td.task, space.defaults(), master_rng)
            child_seed = int(master_rng.integers(2**63))
            replicas.append((r, child, child_seed))

        def _train(job):
            r, child, child_seed = job
            return train_child(system, child, td, budget_config, child_seed, -math.inf)

        if config.parallel_width > 1:
            with ThreadPoolExecutor(max_workers=config.parallel_width) as pool:
                outs = list(pool.map(_train, replicas))
        else:
            outs = [_train(job) for job in replicas]

        best_result = None
        for (r, child, child_seed), result in zip(replicas, outs):
            log.emit(
                "baseline_child",
                task=td.task.name,
                replica=r,
                trainable_params=child.trainable_param_count(),
                cycle_metrics=result.cycle_metrics,
                quality=result.quality,
                diverged=result.diverged,
            )
            if result.quality is None:
                continue
            if best_result is None or result.quality > best_result[1].quality:
                best_result = ((r, child, child_seed), result)
        if best_result is None:
            results[td.task.name] = {"valid_acc": None, "test_acc": None}
            continue
        (_, child, _), result = best_result
        spec = child.commit(system, result.best_cycle)
        spec.validation_quality = result.quality
        spec.trained = True
        system.best_per_task[td.task.name] = spec
        test_logits = _forward_eval(
            child.layers(system), preprocess_eval_batch(td.test, child.hyperparams)
        )
        results[td.task.name] = {
            "model_id": spec.model_id,
            "valid_acc": result.quality,
            "test_acc": evaluate_logits(test_logits, td.test.labels),
            "trainable_params": child.trainable_param_count(),
            "total_params": model_param_count(system, spec),
        }
    log.emit("run_end", summary=results, preset=preset_spec)
    log.close()
    return system, results, log
