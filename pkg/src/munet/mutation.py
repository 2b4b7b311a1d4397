"""The four mutation operators and their sampling.

A child is described by a list of entries, each either a shared layer id
(frozen, still owned by the store) or a private trainable layer. Actions
are applied in a fixed order — hyperparameters, removal, clones,
insertions, head — so a sampled set has one well-defined meaning.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .hyperparams import Hyperparams, HyperparamSpace
from .layers import (
    HEAD,
    POS_EMBED,
    RESIDUAL_ADAPTER,
    TRANSFORMER_BLOCK,
    LayerConfig,
    Params,
    init_layer,
    param_count,
    resample_pos_embed,
)
from .store import ModelSpec, SystemState, validate_path

CLONE_LAYER = "clone_layer"
INSERT_ADAPTER = "insert_adapter"
REMOVE_TOP_TRANSFORMER = "remove_top_transformer"
CHANGE_HYPERPARAM = "change_hyperparam"
MAKE_TRAINABLE_HEAD = "make_trainable_head"


@dataclass(frozen=True)
class MutationAction:
    kind: str
    index: int = -1  # CLONE_LAYER: position in the parent's path
    slot: int = -1  # INSERT_ADAPTER: gap after the slot-th transformer block
    inner_dim: int = 0
    name: str = ""  # CHANGE_HYPERPARAM
    new_value: object = None

    def describe(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == CLONE_LAYER:
            d["index"] = self.index
        elif self.kind == INSERT_ADAPTER:
            d["slot"] = self.slot
            d["inner_dim"] = self.inner_dim
        elif self.kind == CHANGE_HYPERPARAM:
            d["name"] = self.name
            d["new_value"] = self.new_value
        return d


@dataclass
class PrivateLayer:
    """A trainable layer owned by one child until it is committed."""

    config: LayerConfig
    params: Params
    parent_layer_id: int | None = None


@dataclass
class ChildModel:
    """A mutated model between sampling and retention.

    ``entries`` mixes shared store ids with private trainable layers;
    only the private ones receive gradients.
    """

    task_name: str
    hyperparams: Hyperparams
    entries: list  # int | PrivateLayer
    parent: ModelSpec
    is_seed: bool
    applied: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def layers(self, system: SystemState) -> list[tuple[LayerConfig, Params]]:
        out = []
        for entry in self.entries:
            if isinstance(entry, PrivateLayer):
                out.append((entry.config, entry.params))
            else:
                layer = system.store.get(entry)
                out.append((layer.config, layer.params))
        return out

    def trainable_indexes(self) -> set[int]:
        return {i for i, e in enumerate(self.entries) if isinstance(e, PrivateLayer)}

    def trainable_param_count(self) -> int:
        return sum(param_count(e.config) for e in self.entries if isinstance(e, PrivateLayer))

    def commit(self, system: SystemState, train_cycles: int) -> ModelSpec:
        """Freeze the private layers and register the child as a model."""
        ids = []
        for entry in self.entries:
            if isinstance(entry, PrivateLayer):
                history = [(self.task_name, train_cycles)] if train_cycles > 0 else []
                ids.append(
                    system.store.commit(
                        entry.config,
                        entry.params,
                        parent_layer_id=entry.parent_layer_id,
                        training_history=history,
                    )
                )
            else:
                ids.append(entry)
        return ModelSpec(
            model_id=system.new_model_id(),
            task_name=self.task_name,
            layer_ids=tuple(ids),
            hyperparams=self.hyperparams,
            parent_model_id=self.parent.model_id,
        )


def _block_positions(kinds: list[str]) -> list[int]:
    return [i for i, k in enumerate(kinds) if k == TRANSFORMER_BLOCK]


def enumerate_actions(
    system: SystemState, parent: ModelSpec, space: HyperparamSpace
) -> list[MutationAction]:
    """Every action a non-seed child of this parent may sample.

    One clone per parent layer, one adapter insertion per free slot between
    consecutive transformer blocks, one top-block removal when two or more
    blocks remain, and one change per hyperparameter dimension.
    """
    kinds = [system.store.get(i).config.kind for i in parent.layer_ids]
    actions = [MutationAction(kind=CLONE_LAYER, index=i) for i in range(len(kinds))]
    blocks = _block_positions(kinds)
    for slot in range(len(blocks) - 1):
        gap = kinds[blocks[slot] + 1 : blocks[slot + 1]]
        if RESIDUAL_ADAPTER not in gap:
            actions.append(
                MutationAction(
                    kind=INSERT_ADAPTER,
                    slot=slot,
                    inner_dim=parent.hyperparams.adapter_inner_dim,
                )
            )
    if len(blocks) >= 2:
        actions.append(MutationAction(kind=REMOVE_TOP_TRANSFORMER))
    for name in space.names():
        actions.append(MutationAction(kind=CHANGE_HYPERPARAM, name=name))
    return actions


def sample_mutations(
    system: SystemState,
    parent: ModelSpec,
    space: HyperparamSpace,
    mu: float,
    rng: np.random.Generator,
    is_seed: bool,
) -> list[MutationAction]:
    """Head mutation always; each enumerated action independently w.p. mu.

    Seed parents get only the head mutation. Hyperparameter changes draw
    their target value at inclusion time.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu {mu} outside [0, 1]")
    sampled = [MutationAction(kind=MAKE_TRAINABLE_HEAD)]
    if is_seed:
        return sampled
    for action in enumerate_actions(system, parent, space):
        if rng.random() < mu:
            if action.kind == CHANGE_HYPERPARAM:
                current = getattr(parent.hyperparams, action.name)
                options = space.neighbors(action.name, current)
                value = options[int(rng.integers(len(options)))]
                action = replace(action, new_value=value)
            sampled.append(action)
    return sampled


def apply_mutations(
    system: SystemState,
    parent: ModelSpec,
    actions: list[MutationAction],
    task_name: str,
    task_num_classes: int,
    rng: np.random.Generator,
    is_seed: bool = False,
) -> ChildModel:
    """Build the child structure; committed layers are never touched.

    Conflicting actions (clone of a removed layer, insertion into a removed
    slot, clone of the head) become recorded no-ops instead of errors.
    """
    store = system.store
    parent_kinds = [store.get(i).config.kind for i in parent.layer_ids]
    child = ChildModel(
        task_name=task_name,
        hyperparams=parent.hyperparams,
        entries=list(parent.layer_ids),
        parent=parent,
        is_seed=is_seed,
    )
    removed: set[int] = set()
    by_kind: dict[str, list[MutationAction]] = {}
    for a in actions:
        by_kind.setdefault(a.kind, []).append(a)

    # hyperparameters first: later steps read the child's values
    for a in by_kind.get(CHANGE_HYPERPARAM, ()):
        child.hyperparams = replace(child.hyperparams, **{a.name: a.new_value})
        child.applied.append(a.describe())
    if child.hyperparams.image_size != parent.hyperparams.image_size:
        _force_pos_embed_clone(system, child)

    for a in by_kind.get(REMOVE_TOP_TRANSFORMER, ()):
        blocks = _block_positions(parent_kinds)
        top = blocks[-1]
        removed.add(top)
        # an adapter left dangling at the top goes with it
        below = top - 1
        if below >= 0 and parent_kinds[below] == RESIDUAL_ADAPTER:
            removed.add(below)
        child.applied.append(a.describe())

    for a in by_kind.get(CLONE_LAYER, ()):
        i = a.index
        if i in removed:
            child.skipped.append({**a.describe(), "reason": "layer removed"})
            continue
        if parent_kinds[i] == HEAD:
            child.skipped.append({**a.describe(), "reason": "head handled separately"})
            continue
        if isinstance(child.entries[i], PrivateLayer):
            child.skipped.append({**a.describe(), "reason": "already private"})
            continue
        source = store.get(parent.layer_ids[i])
        params = {k: np.array(v, copy=True) for k, v in source.params.items()}
        child.entries[i] = PrivateLayer(
            config=source.config, params=params, parent_layer_id=source.layer_id
        )
        child.applied.append(a.describe())

    inserts: dict[int, PrivateLayer] = {}
    blocks = _block_positions(parent_kinds)
    for a in by_kind.get(INSERT_ADAPTER, ()):
        lo, hi = blocks[a.slot], blocks[a.slot + 1]
        if lo in removed or hi in removed:
            child.skipped.append({**a.describe(), "reason": "slot removed"})
            continue
        hidden = store.get(parent.layer_ids[lo]).config.hidden_dim
        cfg = LayerConfig(
            kind=RESIDUAL_ADAPTER,
            hidden_dim=hidden,
            adapter_inner_dim=child.hyperparams.adapter_inner_dim,
        )
        inserts[lo] = PrivateLayer(config=cfg, params=init_layer(cfg, rng))
        child.applied.append({**a.describe(), "inner_dim": cfg.adapter_inner_dim})

    entries: list = []
    for i, entry in enumerate(child.entries):
        if i in removed:
            continue
        entries.append(entry)
        if i in inserts:
            entries.append(inserts[i])
    child.entries = entries

    _make_trainable_head(system, child, parent, task_name, task_num_classes, rng)
    child.applied.append({"kind": MAKE_TRAINABLE_HEAD})

    validate_path([cfg for cfg, _ in child.layers(system)], require_head=True)
    return child


def _force_pos_embed_clone(system: SystemState, child: ChildModel) -> None:
    """An image-size change re-grids the position embedding, and a frozen
    shared layer cannot be resampled in place."""
    for i, entry in enumerate(child.entries):
        if isinstance(entry, PrivateLayer) or system.store.get(entry).config.kind != POS_EMBED:
            continue
        source = system.store.get(entry)
        patch = _patch_size_of(system, child)
        new_extent = child.hyperparams.image_size // patch
        params = resample_pos_embed(source.params, source.config.grid_extent, new_extent)
        cfg = LayerConfig(
            kind=POS_EMBED, hidden_dim=source.config.hidden_dim, grid_extent=new_extent
        )
        child.entries[i] = PrivateLayer(
            config=cfg, params=params, parent_layer_id=source.layer_id
        )
        child.applied.append({"kind": CLONE_LAYER, "index": i, "reason": "image size change"})
        return


def _patch_size_of(system: SystemState, child: ChildModel) -> int:
    for entry in child.entries:
        cfg = entry.config if isinstance(entry, PrivateLayer) else system.store.get(entry).config
        if cfg.patch_size:
            return cfg.patch_size
    raise ValueError("no patch embedding in path")


def _make_trainable_head(
    system: SystemState,
    child: ChildModel,
    parent: ModelSpec,
    task_name: str,
    num_classes: int,
    rng: np.random.Generator,
) -> None:
    has_head = bool(parent.layer_ids) and (
        system.store.get(parent.layer_ids[-1]).config.kind == HEAD
    )
    if has_head and parent.task_name == task_name:
        source = system.store.get(parent.layer_ids[-1])
        # the parent path may have lost its top block; hidden dim is unchanged
        params = {k: np.array(v, copy=True) for k, v in source.params.items()}
        head = PrivateLayer(
            config=source.config, params=params, parent_layer_id=source.layer_id
        )
        if isinstance(child.entries[-1], PrivateLayer) and child.entries[-1].config.kind == HEAD:
            child.entries[-1] = head
        elif (
            not isinstance(child.entries[-1], PrivateLayer)
            and system.store.get(child.entries[-1]).config.kind == HEAD
        ):
            child.entries[-1] = head
        else:
            child.entries.append(head)
        return
    hidden = _hidden_dim_of(system, child)
    cfg = LayerConfig(kind=HEAD, hidden_dim=hidden, num_classes=num_classes)
    head = PrivateLayer(config=cfg, params=init_layer(cfg, rng))
    if child.entries:
        last = child.entries[-1]
        last_cfg = last.config if isinstance(last, PrivateLayer) else system.store.get(last).config
        if last_cfg.kind == HEAD:
            child.entries[-1] = head
            return
    child.entries.append(head)


def _hidden_dim_of(system: SystemState, child: ChildModel) -> int:
    for entry in child.entries:
        cfg = entry.config if isinstance(entry, PrivateLayer) else system.store.get(entry).config
        if cfg.kind != HEAD and cfg.hidden_dim:
            return cfg.hidden_dim
    raise ValueError("no hidden dimension in path")
