"""Layer kinds: counting, initialization, identities, gradients."""

import numpy as np
import pytest

from munet.layers import (
    CLASS_TOKEN,
    HEAD,
    PATCH_EMBED,
    POS_EMBED,
    RESIDUAL_ADAPTER,
    TRANSFORMER_BLOCK,
    LayerConfig,
    bilinear_resize,
    init_layer,
    layer_backward,
    layer_fwd,
    param_count,
    param_shapes,
    patch_embed_forward,
    resample_pos_embed,
    residual_adapter_forward,
    transformer_block_forward,
    head_forward,
)
from munet.substrate import finite_diff_grad, grad_check_rel_error


def count_allocated(params):
    return sum(int(np.prod(t.shape)) for t in params.values())


def random_configs(seed, n=20):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        heads = int(rng.integers(1, 4))
        hidden = heads * int(rng.integers(2, 9))
        out.extend(
            [
                LayerConfig(
                    kind=PATCH_EMBED,
                    hidden_dim=hidden,
                    patch_size=int(rng.integers(1, 6)),
                    in_channels=int(rng.integers(1, 4)),
                ),
                LayerConfig(kind=CLASS_TOKEN, hidden_dim=hidden),
                LayerConfig(kind=POS_EMBED, hidden_dim=hidden, grid_extent=int(rng.integers(1, 5))),
                LayerConfig(
                    kind=TRANSFORMER_BLOCK,
                    hidden_dim=hidden,
                    num_heads=heads,
                    mlp_dim=int(rng.integers(4, 33)),
                ),
                LayerConfig(
                    kind=RESIDUAL_ADAPTER, hidden_dim=hidden, adapter_inner_dim=int(rng.integers(2, 17))
                ),
                LayerConfig(kind=HEAD, hidden_dim=hidden, num_classes=int(rng.integers(2, 11))),
            ]
        )
    return out


class TestParamCount:
    @pytest.mark.parametrize("seed", range(3))
    def test_count_matches_allocation(self, seed):
        rng = np.random.default_rng(seed)
        for cfg in random_configs(seed):
            params = init_layer(cfg, rng)
            assert param_count(cfg) == count_allocated(params)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            LayerConfig(kind="conv")

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            LayerConfig(kind=TRANSFORMER_BLOCK, hidden_dim=10, num_heads=3, mlp_dim=4)


class TestInit:
    def test_head_zero(self):
        cfg = LayerConfig(kind=HEAD, hidden_dim=8, num_classes=4)
        params = init_layer(cfg, np.random.default_rng(0))
        assert all(np.all(t == 0) for t in params.values())

    def test_adapter_second_fc_zero(self):
        cfg = LayerConfig(kind=RESIDUAL_ADAPTER, hidden_dim=8, adapter_inner_dim=4)
        params = init_layer(cfg, np.random.default_rng(0))
        assert np.all(params["w2"] == 0)
        assert np.all(params["b2"] == 0)
        assert np.all(params["ln_gamma"] == 1)
        assert np.any(params["w1"] != 0)

    def test_same_seed_identical(self):
        cfg = LayerConfig(kind=TRANSFORMER_BLOCK, hidden_dim=8, num_heads=2, mlp_dim=16)
        a = init_layer(cfg, np.random.default_rng(7))
        b = init_layer(cfg, np.random.default_rng(7))
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_truncated_normal_statistics(self):
        # 10^5 draws: mean near zero, support hard-capped at 2 sigma
        cfg = LayerConfig(kind=PATCH_EMBED, hidden_dim=500, patch_size=10, in_channels=2)
        params = init_layer(cfg, np.random.default_rng(3))
        w = params["weight"].ravel()
        assert w.size == 100_000
        assert abs(float(w.mean())) < 0.005 * 0.02 * 100  # |mean| < 0.005 in sigma units
        assert np.max(np.abs(w)) <= 2 * 0.02 + 1e-7

    def test_zero_mode(self):
        cfg = LayerConfig(kind=TRANSFORMER_BLOCK, hidden_dim=4, num_heads=1, mlp_dim=8)
        params = init_layer(cfg, np.random.default_rng(0), init_mode="zero")
        assert np.all(params["wq"] == 0)
        assert np.all(params["ln1_gamma"] == 1)


class TestPatchEmbed:
    def test_token_count(self):
        cfg = LayerConfig(kind=PATCH_EMBED, hidden_dim=8, patch_size=16, in_channels=1)
        params = init_layer(cfg, np.random.default_rng(0))
        image = np.random.default_rng(1).random((32, 32, 1)).astype(np.float32)
        assert patch_embed_forward(cfg, params, image).shape == (4, 8)

    def test_zero_params_zero_tokens(self):
        cfg = LayerConfig(kind=PATCH_EMBED, hidden_dim=8, patch_size=4, in_channels=1)
        params = init_layer(cfg, np.random.default_rng(0), init_mode="zero")
        image = np.random.default_rng(1).random((8, 8, 1)).astype(np.float32)
        assert np.all(patch_embed_forward(cfg, params, image) == 0)

    def test_scalar_affine(self):
        # 1x1 patch, hidden 1, weight 2, bias 1, pixel 3 -> token 7
        cfg = LayerConfig(kind=PATCH_EMBED, hidden_dim=1, patch_size=1, in_channels=1)
        params = {
            "weight": np.array([[2.0]], dtype=np.float32),
            "bias": np.array([1.0], dtype=np.float32),
        }
        image = np.array([[[3.0]]], dtype=np.float32)
        assert patch_embed_forward(cfg, params, image)[0, 0] == 7.0

    def test_non_multiple_extent_rejected(self):
        cfg = LayerConfig(kind=PATCH_EMBED, hidden_dim=4, patch_size=5, in_channels=1)
        params = init_layer(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError):
            patch_embed_forward(cfg, params, np.zeros((12, 12, 1), dtype=np.float32))


class TestClassAndPos:
    def test_prepend_length(self):
        cfg = LayerConfig(kind=CLASS_TOKEN, hidden_dim=6)
        params = init_layer(cfg, np.random.default_rng(0))
        tokens = np.zeros((4, 6), dtype=np.float32)
        out, _ = layer_fwd(cfg, params, tokens)
        assert out.shape == (5, 6)
        again, _ = layer_fwd(cfg, params, out)
        assert again.shape[0] == out.shape[0] + 1

    def test_zero_embed_identity(self):
        cfg = LayerConfig(kind=POS_EMBED, hidden_dim=4, grid_extent=2)
        params = {"embed": np.zeros((5, 4), dtype=np.float32)}
        tokens = np.random.default_rng(0).random((5, 4)).astype(np.float32)
        out, _ = layer_fwd(cfg, params, tokens)
        assert np.array_equal(out, tokens)


class TestBilinear:
    def test_constant_preserved_exactly(self):
        grid = np.full((2, 2, 3), 0.137, dtype=np.float32)
        out = bilinear_resize(grid, 4, 4)
        assert np.array_equal(out, np.full((4, 4, 3), np.float32(0.137)))

    def test_identity_extent(self):
        rng = np.random.default_rng(0)
        grid = rng.random((3, 3, 2)).astype(np.float32)
        assert np.array_equal(bilinear_resize(grid, 3, 3), grid)

    def test_linear_ramp_midpoints(self):
        # the 2->3 upsample of [0, 1] lands the center at the exact average
        grid = np.array([[[0.0], [1.0]]], dtype=np.float64)
        out = bilinear_resize(grid, 1, 3)
        assert out[0, 1, 0] == pytest.approx(0.5, abs=1e-12)

    def test_pos_embed_resample_keeps_class_row(self):
        cfg = LayerConfig(kind=POS_EMBED, hidden_dim=3, grid_extent=2)
        params = init_layer(cfg, np.random.default_rng(5))
        out = resample_pos_embed(params, 2, 4)
        assert out["embed"].shape == (17, 3)
        assert np.array_equal(out["embed"][0], params["embed"][0])

    def test_pos_embed_constant_resample(self):
        embed = np.concatenate(
            [np.full((1, 2), 9.0, dtype=np.float32), np.full((4, 2), 0.25, dtype=np.float32)]
        )
        out = resample_pos_embed({"embed": embed}, 2, 4)
        assert np.array_equal(out["embed"][1:], np.full((16, 2), np.float32(0.25)))


class TestTransformerBlock:
    def test_zero_projections_identity(self):
        cfg = LayerConfig(kind=TRANSFORMER_BLOCK, hidden_dim=6, num_heads=2, mlp_dim=12)
        params = init_layer(cfg, np.random.default_rng(0), init_mode="zero")
        x = np.random.default_rng(1).standard_normal((4, 6)).astype(np.float32)
        assert np.array_equal(transformer_block_forward(cfg, params, x), x)

    def test_batched_matches_single(self):
        cfg = LayerConfig(kind=TRANSFORMER_BLOCK, hidden_dim=8, num_heads=2, mlp_dim=16)
        params = init_layer(cfg, np.random.default_rng(2))
        x = np.random.default_rng(3).standard_normal((3, 5, 8)).astype(np.float32)
        batched = transformer_block_forward(cfg, params, x)
        singles = np.stack([transformer_block_forward(cfg, params, xi) for xi in x])
        assert np.array_equal(batched, singles)


class TestAdapter:
    def test_fresh_adapter_exact_identity(self):
        cfg = LayerConfig(kind=RESIDUAL_ADAPTER, hidden_dim=8, adapter_inner_dim=4)
        for seed in range(10):
            params = init_layer(cfg, np.random.default_rng(seed))
            x = np.random.default_rng(100 + seed).standard_normal((5, 8)).astype(np.float32)
            assert np.array_equal(residual_adapter_forward(cfg, params, x), x)


class TestHead:
    def test_zero_head_zero_logits(self):
        cfg = LayerConfig(kind=HEAD, hidden_dim=4, num_classes=3)
        params = init_layer(cfg, np.random.default_rng(0))
        tokens = np.random.default_rng(1).standard_normal((5, 4)).astype(np.float32)
        assert np.all(head_forward(cfg, params, tokens) == 0)

    def test_identity_weight(self):
        cfg = LayerConfig(kind=HEAD, hidden_dim=2, num_classes=2)
        params = {"weight": np.eye(2, dtype=np.float32), "bias": np.zeros(2, dtype=np.float32)}
        tokens = np.array([[1.5, -2.5], [0.0, 0.0]], dtype=np.float32)
        assert np.array_equal(head_forward(cfg, params, tokens), tokens[0])


def layer_input(cfg, rng):
    if cfg.kind == PATCH_EMBED:
        extent = cfg.patch_size * 2
        return rng.standard_normal((2, extent, extent, cfg.in_channels)).astype(np.float32)
    if cfg.kind == CLASS_TOKEN:
        return rng.standard_normal((2, 4, cfg.hidden_dim)).astype(np.float32)
    if cfg.kind == POS_EMBED:
        return rng.standard_normal((2, 1 + cfg.grid_extent**2, cfg.hidden_dim)).astype(np.float32)
    return rng.standard_normal((2, 5, cfg.hidden_dim)).astype(np.float32)


SIMPLE_GRAD_CONFIGS = [
    LayerConfig(kind=PATCH_EMBED, hidden_dim=6, patch_size=2, in_channels=1),
    LayerConfig(kind=CLASS_TOKEN, hidden_dim=6),
    LayerConfig(kind=POS_EMBED, hidden_dim=6, grid_extent=2),
    LayerConfig(kind=HEAD, hidden_dim=6, num_classes=4),
]

COMPOSITE_GRAD_CONFIGS = [
    LayerConfig(kind=TRANSFORMER_BLOCK, hidden_dim=6, num_heads=2, mlp_dim=8),
    LayerConfig(kind=RESIDUAL_ADAPTER, hidden_dim=6, adapter_inner_dim=3),
]


def randomized_params(cfg, rng):
    # zero-initialized tensors hide gradient errors behind dead branches
    params = init_layer(cfg, rng)
    for name, t in params.items():
        if np.all(t == 0):
            params[name] = (0.1 * rng.standard_normal(t.shape)).astype(np.float32)
    return params


def oracle_gelu(x):
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def oracle_layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def oracle_adapter(p, x):
    normed = oracle_layer_norm(x, p["ln_gamma"], p["ln_beta"])
    act = oracle_gelu(normed @ p["w1"] + p["b1"])
    return x + act @ p["w2"] + p["b2"]


def oracle_block(cfg, p, x):
    """Independent pre-norm block forward in float64 (loops over heads)."""
    heads, dim = cfg.num_heads, cfg.hidden_dim
    hd = dim // heads
    normed = oracle_layer_norm(x, p["ln1_gamma"], p["ln1_beta"])
    q = normed @ p["wq"] + p["bq"]
    k = normed @ p["wk"] + p["bk"]
    v = normed @ p["wv"] + p["bv"]
    pieces = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / np.sqrt(hd)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        pieces.append(attn @ v[..., sl])
    mid = x + np.concatenate(pieces, axis=-1) @ p["wo"] + p["bo"]
    normed2 = oracle_layer_norm(mid, p["ln2_gamma"], p["ln2_beta"])
    act = oracle_gelu(normed2 @ p["w1"] + p["b1"])
    return mid + act @ p["w2"] + p["b2"]


@pytest.mark.parametrize("cfg", SIMPLE_GRAD_CONFIGS, ids=lambda c: c.kind)
@pytest.mark.parametrize("seed", range(3))
def test_simple_layer_gradients(cfg, seed):
    # finite differences straight through the float32 forward
    rng = np.random.default_rng(seed)
    params = randomized_params(cfg, rng)
    x = layer_input(cfg, rng)
    d_out = rng.standard_normal(layer_fwd(cfg, params, x)[0].shape).astype(np.float32)

    _, cache = layer_fwd(cfg, params, x)
    d_x, grads = layer_backward(cfg, params, cache, d_out)

    def loss_wrt_x(inp):
        return float((layer_fwd(cfg, params, inp)[0].astype(np.float64) * d_out).sum())

    assert grad_check_rel_error(d_x, finite_diff_grad(loss_wrt_x, x)) <= 1e-3
    for name in params:
        def loss_wrt_param(t, _name=name):
            trial = dict(params)
            trial[_name] = t
            return float((layer_fwd(cfg, trial, x)[0].astype(np.float64) * d_out).sum())

        err = grad_check_rel_error(grads[name], finite_diff_grad(loss_wrt_param, params[name]))
        assert err <= 1e-3, name


@pytest.mark.parametrize("cfg", COMPOSITE_GRAD_CONFIGS, ids=lambda c: c.kind)
@pytest.mark.parametrize("seed", range(3))
def test_composite_layer_gradients(cfg, seed):
    # float32 rounding inside the deep forwards swamps direct finite
    # differences, so the reference loss runs through an independent
    # float64 reimplementation instead
    rng = np.random.default_rng(seed)
    params = randomized_params(cfg, rng)
    x = layer_input(cfg, rng)
    d_out = rng.standard_normal(x.shape).astype(np.float32)

    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    oracle = (
        (lambda p, inp: oracle_block(cfg, p, inp))
        if cfg.kind == TRANSFORMER_BLOCK
        else oracle_adapter
    )

    out, cache = layer_fwd(cfg, params, x)
    assert np.abs(out - oracle(p64, x.astype(np.float64))).max() <= 1e-5

    d_x, grads = layer_backward(cfg, params, cache, d_out)

    def loss_wrt_x(inp):
        return float((oracle(p64, inp.astype(np.float64)) * d_out).sum())

    assert grad_check_rel_error(d_x, finite_diff_grad(loss_wrt_x, x.astype(np.float64))) <= 1e-3
    for name in params:
        def loss_wrt_param(t, _name=name):
            trial = dict(p64)
            trial[_name] = t.astype(np.float64)
            return float((oracle(trial, x.astype(np.float64)) * d_out).sum())

        fd = finite_diff_grad(loss_wrt_param, p64[name])
        if max(np.abs(grads[name]).max(), np.abs(fd).max()) < 1e-6:
            continue  # both vanish (see test_key_bias_is_null_direction)
        assert grad_check_rel_error(grads[name], fd) <= 1e-3, name


def test_key_bias_is_null_direction():
    # shifting every key by a constant moves each score row uniformly,
    # which softmax cancels, so d_bk must vanish
    cfg = LayerConfig(kind=TRANSFORMER_BLOCK, hidden_dim=6, num_heads=2, mlp_dim=8)
    rng = np.random.default_rng(11)
    params = randomized_params(cfg, rng)
    x = layer_input(cfg, rng)
    _, cache = layer_fwd(cfg, params, x)
    _, grads = layer_backward(cfg, params, cache, np.ones_like(x))
    assert np.abs(grads["bk"]).max() <= 1e-6

    shifted = dict(params)
    shifted["bk"] = params["bk"] + np.float32(0.75)
    base = layer_fwd(cfg, params, x)[0]
    moved = layer_fwd(cfg, shifted, x)[0]
    assert np.abs(base - moved).max() <= 1e-5
