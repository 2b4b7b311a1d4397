"""Search-space axes, defaults, and neighbor-constrained mutation."""

import numpy as np
import pytest

from munet.hyperparams import Hyperparams, HyperparamSpace


@pytest.fixture
def space():
    return HyperparamSpace(patch_size=16, default_image_size=32)


class TestSpace:
    def test_dimension_count(self, space):
        assert len(space.names()) == 14

    def test_defaults_on_axes(self, space):
        hp = space.defaults()
        space.validate(hp)
        assert hp.learning_rate == 0.01
        assert hp.schedule == "cosine"
        assert hp.warmup_ratio == 0.1
        assert hp.momentum == 0.9
        assert hp.nesterov is False
        assert hp.crop_area_min == 0.05
        assert hp.aspect_min == 0.75
        assert hp.flip is True
        assert hp.brightness_delta == 0.0
        assert hp.adapter_inner_dim == 32
        assert hp.image_size == 32

    def test_numeric_axes_strictly_sorted(self, space):
        for name, axis in space.axes.items():
            if axis.kind == "numeric" and name != "image_size":
                vals = list(axis.values)
                assert vals == sorted(vals) and len(set(vals)) == len(vals), name

    def test_image_sizes_are_patch_multiples(self, space):
        assert space.axes["image_size"].values == (16, 32, 48, 64)

    def test_image_size_axis_scales_with_patch(self):
        small = HyperparamSpace(patch_size=4, default_image_size=16)
        assert small.axes["image_size"].values == tuple(range(4, 33, 4))

    def test_bad_default_image_size(self):
        with pytest.raises(ValueError):
            HyperparamSpace(patch_size=16, default_image_size=40)

    def test_validate_rejects_off_axis(self, space):
        from dataclasses import replace

        bad = replace(space.defaults(), learning_rate=0.003)
        with pytest.raises(ValueError):
            space.validate(bad)

    def test_adapter_axis(self, space):
        assert space.axes["adapter_inner_dim"].values == (8, 16, 32, 64, 128)


class TestNeighbors:
    def test_interior_two_options(self, space):
        assert space.neighbors("learning_rate", 0.01) == [0.005, 0.02]

    def test_lower_boundary_single(self, space):
        assert space.neighbors("learning_rate", 0.0001) == [0.0002]

    def test_upper_boundary_single(self, space):
        assert space.neighbors("learning_rate", 0.5) == [0.2]

    def test_boolean_flip(self, space):
        assert space.neighbors("nesterov", False) == [True]
        assert space.neighbors("flip", True) == [False]

    def test_categorical_all_others(self, space):
        assert space.neighbors("schedule", "cosine") == ["constant", "restarts"]

    def test_current_never_included(self, space):
        for name, axis in space.axes.items():
            for value in axis.values:
                assert value not in space.neighbors(name, value), name

    def test_neighbors_match_sorted_adjacency(self, space):
        # brute-force oracle: walk every numeric axis position
        for name, axis in space.axes.items():
            if axis.kind != "numeric":
                continue
            vals = axis.values
            for i, value in enumerate(vals):
                want = [vals[j] for j in (i - 1, i + 1) if 0 <= j < len(vals)]
                assert space.neighbors(name, value) == want, name


class TestMutate:
    def test_interior_split_is_even(self, space):
        rng = np.random.default_rng(0)
        hp = space.defaults()
        hits = {0.005: 0, 0.02: 0}
        n = 100_000
        for _ in range(n):
            hits[space.mutate(hp, "learning_rate", rng).learning_rate] += 1
        assert hits[0.005] / n == pytest.approx(0.5, abs=0.01)
        assert hits[0.02] / n == pytest.approx(0.5, abs=0.01)

    def test_boundary_deterministic(self, space):
        from dataclasses import replace

        rng = np.random.default_rng(1)
        hp = replace(space.defaults(), learning_rate=0.0001)
        for _ in range(50):
            assert space.mutate(hp, "learning_rate", rng).learning_rate == 0.0002

    def test_boolean_always_flips(self, space):
        rng = np.random.default_rng(2)
        hp = space.defaults()
        assert space.mutate(hp, "nesterov", rng).nesterov is True
        assert space.mutate(hp, "flip", rng).flip is False

    def test_original_untouched(self, space):
        rng = np.random.default_rng(3)
        hp = space.defaults()
        mutated = space.mutate(hp, "momentum", rng)
        assert hp.momentum == 0.9
        assert mutated.momentum in (0.85, 0.95)

    def test_result_stays_on_axis(self, space):
        rng = np.random.default_rng(4)
        hp = space.defaults()
        for name in space.names():
            space.validate(space.mutate(hp, name, rng))

    def test_unknown_name(self, space):
        with pytest.raises(KeyError):
            space.mutate(space.defaults(), "dropout", np.random.default_rng(0))


def test_round_trip_dict():
    hp = Hyperparams(image_size=32)
    assert Hyperparams.from_dict(hp.to_dict()) == hp
