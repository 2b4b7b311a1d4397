"""Immutable layer registry and the model graph built on top of it.

A layer is committed once, content-hashed, and never changes; models are
ordered paths of layer ids plus a hyperparameter set. Everything needed
to reason about sharing lives here: parameter accounting with sharer
discounts, lineage-aware task counts, knowledge-flow fractions, and a
hash audit that proves no committed tensor ever moved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hyperparams import Hyperparams
from .layers import (
    CLASS_TOKEN,
    HEAD,
    PATCH_EMBED,
    POS_EMBED,
    RESIDUAL_ADAPTER,
    TRANSFORMER_BLOCK,
    LayerConfig,
    Params,
    init_layer,
    layer_backward,
    layer_fwd,
    param_count,
    validate_params,
)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a over raw bytes."""
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def hash_params(params: Params) -> int:
    """Content hash over parameter bytes, tensors in name order, little-endian."""
    h = FNV_OFFSET
    for name in sorted(params):
        h = fnv1a64(np.ascontiguousarray(params[name], dtype="<f4").tobytes(), h)
    return h


@dataclass
class StoredLayer:
    layer_id: int
    config: LayerConfig
    params: Params
    content_hash: int
    parent_layer_id: int | None = None
    training_history: list[tuple[str, int]] = field(default_factory=list)


@dataclass
class ModelSpec:
    model_id: int
    task_name: str | None
    layer_ids: tuple[int, ...]
    hyperparams: Hyperparams
    validation_quality: float | None = None
    score: float | None = None
    offspring_count: int = 0
    trained: bool = False
    parent_model_id: int | None = None


class LayerStore:
    """Append-only registry; ids are dense and monotonically assigned."""

    def __init__(self):
        self._layers: dict[int, StoredLayer] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._layers)

    def __contains__(self, layer_id: int) -> bool:
        return layer_id in self._layers

    def ids(self) -> list[int]:
        return sorted(self._layers)

    def get(self, layer_id: int) -> StoredLayer:
        if layer_id not in self._layers:
            raise KeyError(f"layer {layer_id} not in store")
        return self._layers[layer_id]

    def commit(
        self,
        config: LayerConfig,
        params: Params,
        parent_layer_id: int | None = None,
        training_history: list[tuple[str, int]] | None = None,
    ) -> int:
        """Freeze a layer into the store and return its new id.

        The params are copied and marked read-only; the content hash is
        taken at commit time and is the thing audits verify against.
        """
        validate_params(config, params)
        if parent_layer_id is not None and parent_layer_id not in self._layers:
            raise KeyError(f"parent layer {parent_layer_id} not in store")
        frozen: Params = {}
        for name, tensor in params.items():
            copy = np.array(tensor, dtype=tensor.dtype, copy=True)
            copy.setflags(write=False)
            frozen[name] = copy
        layer_id = self._next_id
        self._next_id += 1
        self._layers[layer_id] = StoredLayer(
            layer_id=layer_id,
            config=config,
            params=frozen,
            content_hash=hash_params(frozen),
            parent_layer_id=parent_layer_id,
            training_history=list(training_history or []),
        )
        return layer_id

    def restore(self, layer: StoredLayer) -> None:
        """Re-register a previously committed layer under its original id."""
        if layer.layer_id in self._layers:
            raise ValueError(f"layer {layer.layer_id} already present")
        self._layers[layer.layer_id] = layer
        self._next_id = max(self._next_id, layer.layer_id + 1)

    def lineage(self, layer_id: int) -> list[StoredLayer]:
        """The layer followed by its ancestors, nearest first."""
        chain = []
        current: int | None = layer_id
        seen = set()
        while current is not None:
            if current in seen:
                raise ValueError(f"lineage cycle at layer {current}")
            seen.add(current)
            layer = self.get(current)
            chain.append(layer)
            current = layer.parent_layer_id
        return chain


@dataclass
class SystemState:
    store: LayerStore
    root_model: ModelSpec
    best_per_task: dict[str, ModelSpec] = field(default_factory=dict)
    _next_model_id: int = 1

    def new_model_id(self) -> int:
        mid = self._next_model_id
        self._next_model_id += 1
        return mid

    def population(self) -> list[ModelSpec]:
        """The retained set M: root plus each task's current best."""
        return [self.root_model] + [self.best_per_task[t] for t in sorted(self.best_per_task)]


def create_system(
    layer_configs: list[LayerConfig],
    rng: np.random.Generator,
    root_hyperparams: Hyperparams,
) -> SystemState:
    """Commit freshly initialized layers and wrap them as the root model.

    The root is headless and taskless; children grow heads via mutation
    and inherit the root's hyperparameters (the search-space defaults).
    """
    store = LayerStore()
    ids = []
    for cfg in layer_configs:
        if cfg.kind == HEAD:
            raise ValueError("root model is headless; heads belong to task models")
        ids.append(store.commit(cfg, init_layer(cfg, rng)))
    root = ModelSpec(
        model_id=0,
        task_name=None,
        layer_ids=tuple(ids),
        hyperparams=root_hyperparams,
    )
    validate_path([store.get(i).config for i in ids], require_head=False)
    return SystemState(store=store, root_model=root)


# ---------------------------------------------------------------------------
# path structure


def validate_path(configs: list[LayerConfig], require_head: bool = True) -> None:
    """Enforce PatchEmbed, ClassToken, PosEmbed, {Block | Adapter}*, [Head].

    Adapters may only sit directly after a transformer block and must be
    followed by another block (they fill slots between consecutive blocks).
    """
    kinds = [c.kind for c in configs]
    prefix = [PATCH_EMBED, CLASS_TOKEN, POS_EMBED]
    if kinds[:3] != prefix:
        raise ValueError(f"path must start {prefix}, got {kinds[:3]}")
    middle = kinds[3:]
    if require_head:
        if not middle or middle[-1] != HEAD:
            raise ValueError("path must end with a head")
        middle = middle[:-1]
    elif middle and middle[-1] == HEAD:
        raise ValueError("headless path expected")
    if not middle or middle[0] != TRANSFORMER_BLOCK:
        raise ValueError("at least one transformer block required after the prefix")
    for prev, kind in zip(middle, middle[1:]):
        if kind not in (TRANSFORMER_BLOCK, RESIDUAL_ADAPTER):
            raise ValueError(f"unexpected {kind} in block segment")
        if kind == RESIDUAL_ADAPTER and prev != TRANSFORMER_BLOCK:
            raise ValueError("adapter not directly after a transformer block")
    if middle[-1] == RESIDUAL_ADAPTER:
        raise ValueError("adapter above the topmost transformer block")


def path_forward(layers: list[tuple[LayerConfig, Params]], batch: np.ndarray, with_cache: bool = False):
    """Run a batch through (config, params) pairs in order.

    Returns logits, or (logits, caches) when ``with_cache`` is set.
    """
    x = batch
    caches = []
    for cfg, params in layers:
        x, cache = layer_fwd(cfg, params, x)
        if with_cache:
            caches.append(cache)
    return (x, caches) if with_cache else x


def path_backward(
    layers: list[tuple[LayerConfig, Params]],
    caches: list,
    d_logits: np.ndarray,
    need_grads: set[int],
):
    """Backpropagate through the path; collect grads for layer indexes in
    ``need_grads``. Stops early once nothing below still needs gradients."""
    grads: dict[int, Params] = {}
    lowest = min(need_grads) if need_grads else len(layers)
    d = d_logits
    for i in range(len(layers) - 1, lowest - 1, -1):
        cfg, params = layers[i]
        d, layer_grads = layer_backward(cfg, params, caches[i], d)
        if i in need_grads:
            grads[i] = layer_grads
    return grads


def model_layers(system: SystemState, model: ModelSpec) -> list[tuple[LayerConfig, Params]]:
    return [(l.config, l.params) for l in (system.store.get(i) for i in model.layer_ids)]


def model_forward(system: SystemState, model: ModelSpec, batch: np.ndarray) -> np.ndarray:
    """Logits of a committed model on a preprocessed batch."""
    return path_forward(model_layers(system, model), batch)


# ---------------------------------------------------------------------------
# accounting and provenance


def accounted_params(system: SystemState, model: ModelSpec, active_task: str) -> float:
    """Size measure where layers shared with other tasks' best models count
    fractionally: each layer contributes param_count / (sharers + 1)."""
    total = 0.0
    for layer_id in model.layer_ids:
        layer = system.store.get(layer_id)
        sharers = sum(
            1
            for task, best in system.best_per_task.items()
            if task != active_task and layer_id in best.layer_ids
        )
        total += param_count(layer.config) / (sharers + 1)
    return total


def model_param_count(system: SystemState, model: ModelSpec) -> int:
    return sum(param_count(system.store.get(i).config) for i in model.layer_ids)


def unique_task_count(store: LayerStore, layer_id: int) -> int:
    tasks = set()
    for layer in store.lineage(layer_id):
        tasks.update(task for task, _ in layer.training_history)
    return len(tasks)


def knowledge_flow(system: SystemState, model: ModelSpec) -> dict[str, float]:
    """Fraction of lineage training attributable to each source task.

    Each layer's lineage cycles are weighted by the layer's parameter count;
    fractions sum to 1. An untrained model maps to {}.
    """
    weighted: dict[str, float] = {}
    for layer_id in model.layer_ids:
        layer = system.store.get(layer_id)
        mass = float(param_count(layer.config))
        for ancestor in system.store.lineage(layer_id):
            for task, cycles in ancestor.training_history:
                weighted[task] = weighted.get(task, 0.0) + mass * cycles
    total = sum(weighted.values())
    if total == 0.0:
        return {}
    return {task: v / total for task, v in sorted(weighted.items())}


def capture_hashes(system: SystemState) -> dict[int, int]:
    return {i: system.store.get(i).content_hash for i in system.store.ids()}


def audit_immutability(system: SystemState, baseline: dict[int, int]) -> list[dict]:
    """Re-hash every baseline layer; report mismatches and disappearances.

    An empty report means no committed parameter changed since capture.
    """
    report = []
    for layer_id, expected in sorted(baseline.items()):
        if layer_id not in system.store:
            report.append({"layer_id": layer_id, "problem": "missing"})
            continue
        actual = hash_params(system.store.get(layer_id).params)
        if actual != expected:
            report.append(
                {
                    "layer_id": layer_id,
                    "problem": "hash mismatch",
                    "expected": expected,
                    "actual": actual,
                }
            )
    return report
