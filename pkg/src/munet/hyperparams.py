"""The searchable training-and-preprocessing configuration of one model.

Every field lives on an explicit axis: a sorted list of numeric values, a
list of categories, or a boolean. Numeric mutation moves to an immediately
adjacent value on its axis; categorical mutation picks any other category;
boolean mutation flips.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

LEARNING_RATES = [0.0001, 0.0002, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5]
SCHEDULES = ["constant", "cosine", "restarts"]
WARMUP_RATIOS = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4]
MOMENTA = [0.7, 0.8, 0.85, 0.9, 0.95, 0.98, 0.99]
CROP_AREA_MINS = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]
ASPECT_MINS = [0.25, 0.5, 0.75, 1.0]
JITTER_DELTAS = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2]
ADAPTER_DIMS = [8, 16, 32, 64, 128]


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.01
    schedule: str = "cosine"
    warmup_ratio: float = 0.1
    momentum: float = 0.9
    nesterov: bool = False
    crop_area_min: float = 0.05
    aspect_min: float = 0.75
    flip: bool = True
    brightness_delta: float = 0.0
    contrast_delta: float = 0.0
    saturation_delta: float = 0.0
    hue_delta: float = 0.0
    image_size: int = 0
    adapter_inner_dim: int = 32

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "Hyperparams":
        return Hyperparams(**d)


@dataclass(frozen=True)
class Axis:
    name: str
    kind: str  # "numeric" | "categorical" | "boolean"
    values: tuple = ()


class HyperparamSpace:
    """The axes a mutation may move along, with defaults filled in."""

    def __init__(self, patch_size: int, default_image_size: int):
        if default_image_size % patch_size:
            raise ValueError(
                f"default image size {default_image_size} not a multiple of {patch_size}"
            )
        self.patch_size = patch_size
        self.default_image_size = default_image_size
        image_sizes = list(range(patch_size, 2 * default_image_size + 1, patch_size))
        self.axes: dict[str, Axis] = {}
        for name, kind, values in [
            ("learning_rate", "numeric", LEARNING_RATES),
            ("schedule", "categorical", SCHEDULES),
            ("warmup_ratio", "numeric", WARMUP_RATIOS),
            ("momentum", "numeric", MOMENTA),
            ("nesterov", "boolean", [False, True]),
            ("crop_area_min", "numeric", CROP_AREA_MINS),
            ("aspect_min", "numeric", ASPECT_MINS),
            ("flip", "boolean", [False, True]),
            ("brightness_delta", "numeric", JITTER_DELTAS),
            ("contrast_delta", "numeric", JITTER_DELTAS),
            ("saturation_delta", "numeric", JITTER_DELTAS),
            ("hue_delta", "numeric", JITTER_DELTAS),
            ("image_size", "numeric", image_sizes),
            ("adapter_inner_dim", "numeric", ADAPTER_DIMS),
        ]:
            self.axes[name] = Axis(name, kind, tuple(values))

    def defaults(self) -> Hyperparams:
        return Hyperparams(image_size=self.default_image_size)

    def names(self) -> list[str]:
        return list(self.axes)

    def validate(self, hp: Hyperparams) -> None:
        for name, axis in self.axes.items():
            value = getattr(hp, name)
            if value not in axis.values:
                raise ValueError(f"{name}={value!r} not on its axis {axis.values}")

    def neighbors(self, name: str, value) -> list:
        """Values a single mutation of ``name`` may land on, current excluded."""
        axis = self.axes[name]
        if axis.kind == "boolean":
            return [not value]
        if axis.kind == "categorical":
            return [v for v in axis.values if v != value]
        idx = axis.values.index(value)
        lo = max(idx - 1, 0)
        hi = min(idx + 1, len(axis.values) - 1)
        return [axis.values[i] for i in range(lo, hi + 1) if i != idx]

    def mutate(self, hp: Hyperparams, name: str, rng: np.random.Generator) -> Hyperparams:
        if name not in self.axes:
            raise KeyError(name)
        options = self.neighbors(name, getattr(hp, name))
        choice = options[int(rng.integers(len(options)))]
        return replace(hp, **{name: choice})
