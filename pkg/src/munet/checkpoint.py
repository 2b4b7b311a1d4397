"""Checkpoint persistence: one binary file per layer plus a JSON manifest.

A layer file is a sequence of tensor records in sorted-name order, each
``MUNL`` magic, u32 version, u32 rank, u32 dims, then raw little-endian
float32 data (all integers little-endian). Tensor names are not stored;
they are recovered from the layer config, which lives in the manifest.
Loading re-hashes every layer and refuses silently corrupted data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .hyperparams import Hyperparams
from .layers import LayerConfig, Params, param_shapes
from .store import LayerStore, ModelSpec, StoredLayer, SystemState, hash_params

MAGIC = b"MUNL"
VERSION = 1


def _write_tensor(fh, tensor: np.ndarray) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(struct.pack("<I", tensor.ndim))
    fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
    fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def _read_tensor(fh, path: Path) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if dims else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError(f"{path}: truncated tensor data")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def _layer_file(layer_id: int) -> str:
    return f"layer_{layer_id:06d}.bin"


def _model_to_dict(model: ModelSpec) -> dict:
    return {
        "model_id": model.model_id,
        "task_name": model.task_name,
        "layer_ids": list(model.layer_ids),
        "hyperparams": model.hyperparams.to_dict(),
        "validation_quality": model.validation_quality,
        "score": model.score,
        "offspring_count": model.offspring_count,
        "trained": model.trained,
        "parent_model_id": model.parent_model_id,
    }


def _model_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        model_id=d["model_id"],
        task_name=d["task_name"],
        layer_ids=tuple(d["layer_ids"]),
        hyperparams=Hyperparams.from_dict(d["hyperparams"]),
        validation_quality=d["validation_quality"],
        score=d["score"],
        offspring_count=d["offspring_count"],
        trained=d["trained"],
        parent_model_id=d["parent_model_id"],
    )


def save_checkpoint(system: SystemState, out_dir, extra: dict | None = None) -> None:
    """Persist the root and best-per-task models with every reachable layer.

    Reachable means referenced by a retained model or an ancestor of one
    (lineage carries the training history the provenance statistics need).
    Everything else — layers of pruned children with no retained
    descendants — is dropped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reachable: set[int] = set()
    for m in system.population():
        for i in m.layer_ids:
            for ancestor in system.store.lineage(i):
                reachable.add(ancestor.layer_id)
    layers_meta = {}
    for layer_id in sorted(reachable):
        layer = system.store.get(layer_id)
        with open(out / _layer_file(layer_id), "wb") as fh:
            for name in sorted(layer.params):
                _write_tensor(fh, layer.params[name])
        layers_meta[str(layer_id)] = {
            "config": layer.config.to_dict(),
            "parent_layer_id": layer.parent_layer_id,
            "training_history": [[t, c] for t, c in layer.training_history],
            "content_hash": f"{layer.content_hash:016x}",
            "file": _layer_file(layer_id),
        }
    manifest = {
        "format_version": VERSION,
        "layers": layers_meta,
        "root_model": _model_to_dict(system.root_model),
        "best_per_task": {
            task: _model_to_dict(m) for task, m in sorted(system.best_per_task.items())
        },
        "next_model_id": system._next_model_id,
        "extra": extra or {},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir) -> tuple[SystemState, dict]:
    """Rebuild the system; every layer's recomputed hash must match."""
    ckpt = Path(ckpt_dir)
    with open(ckpt / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest["format_version"] != VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['format_version']}")

    store = LayerStore()
    for key in sorted(manifest["layers"], key=int):
        meta = manifest["layers"][key]
        layer_id = int(key)
        config = LayerConfig.from_dict(meta["config"])
        params: Params = {}
        with open(ckpt / meta["file"], "rb") as fh:
            for name in sorted(param_shapes(config)):
                params[name] = _read_tensor(fh, ckpt / meta["file"])
            if fh.read(1):
                raise ValueError(f"{meta['file']}: trailing bytes")
        for name, shape in param_shapes(config).items():
            if tuple(params[name].shape) != shape:
                raise ValueError(f"layer {layer_id}.{name}: shape {params[name].shape} != {shape}")
        actual = hash_params(params)
        expected = int(meta["content_hash"], 16)
        if actual != expected:
            raise ValueError(
                f"layer {layer_id}: content hash mismatch "
                f"(expected {expected:016x}, got {actual:016x})"
            )
        for tensor in params.values():
            tensor.setflags(write=False)
        store.restore(
            StoredLayer(
                layer_id=layer_id,
                config=config,
                params=params,
                content_hash=actual,
                parent_layer_id=meta["parent_layer_id"],
                training_history=[(t, c) for t, c in meta["training_history"]],
            )
        )

    system = SystemState(
        store=store,
        root_model=_model_from_dict(manifest["root_model"]),
        best_per_task={
            task: _model_from_dict(d) for task, d in manifest["best_per_task"].items()
        },
        _next_model_id=manifest["next_model_id"],
    )
    return system, manifest.get("extra", {})
