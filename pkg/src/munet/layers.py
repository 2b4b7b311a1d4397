"""The model's layer kinds: forwards, backwards, init, and exact counting.

Six kinds exist: patch embedding, class token, position embedding,
pre-norm transformer block, residual adapter, and classification head.
Layer parameters are plain ``{name: float32 ndarray}`` dicts whose shapes
are fully determined by a :class:`LayerConfig`.

Forward passes accept a single sample or a leading batch axis. Each kind
also has a ``*_fwd`` variant returning the cache its ``*_backward`` needs;
backwards return ``(d_input, {name: grad})`` with gradients for every
parameter, whether or not the caller intends to update them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .substrate import (
    DTYPE,
    Array,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    softmax,
)

PATCH_EMBED = "patch_embed"
CLASS_TOKEN = "class_token"
POS_EMBED = "pos_embed"
TRANSFORMER_BLOCK = "transformer_block"
RESIDUAL_ADAPTER = "residual_adapter"
HEAD = "head"

LAYER_KINDS = (
    PATCH_EMBED,
    CLASS_TOKEN,
    POS_EMBED,
    TRANSFORMER_BLOCK,
    RESIDUAL_ADAPTER,
    HEAD,
)

LN_EPS = 1e-6
INIT_STD = 0.02

Params = dict[str, Array]


@dataclass(frozen=True)
class LayerConfig:
    kind: str
    hidden_dim: int = 0
    patch_size: int = 0
    in_channels: int = 0
    num_heads: int = 0
    mlp_dim: int = 0
    adapter_inner_dim: int = 0
    num_classes: int = 0
    grid_extent: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind: {self.kind!r}")
        if self.kind == TRANSFORMER_BLOCK and self.hidden_dim % max(self.num_heads, 1) != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.kind == POS_EMBED and self.grid_extent < 1:
            raise ValueError("pos_embed grid_extent must be >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden_dim": self.hidden_dim,
            "patch_size": self.patch_size,
            "in_channels": self.in_channels,
            "num_heads": self.num_heads,
            "mlp_dim": self.mlp_dim,
            "adapter_inner_dim": self.adapter_inner_dim,
            "num_classes": self.num_classes,
            "grid_extent": self.grid_extent,
        }

    @staticmethod
    def from_dict(d: dict) -> "LayerConfig":
        return LayerConfig(**d)


def param_shapes(config: LayerConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every tensor the layer owns, keyed by name."""
    h = config.hidden_dim
    if config.kind == PATCH_EMBED:
        flat = config.patch_size * config.patch_size * config.in_channels
        return {"weight": (flat, h), "bias": (h,)}
    if config.kind == CLASS_TOKEN:
        return {"token": (h,)}
    if config.kind == POS_EMBED:
        return {"embed": (1 + config.grid_extent**2, h)}
    if config.kind == TRANSFORMER_BLOCK:
        m = config.mlp_dim
        return {
            "ln1_gamma": (h,),
            "ln1_beta": (h,),
            "wq": (h, h),
            "bq": (h,),
            "wk": (h, h),
            "bk": (h,),
            "wv": (h, h),
            "bv": (h,),
            "wo": (h, h),
            "bo": (h,),
            "ln2_gamma": (h,),
            "ln2_beta": (h,),
            "w1": (h, m),
            "b1": (m,),
            "w2": (m, h),
            "b2": (h,),
        }
    if config.kind == RESIDUAL_ADAPTER:
        a = config.adapter_inner_dim
        return {
            "ln_gamma": (h,),
            "ln_beta": (h,),
            "w1": (h, a),
            "b1": (a,),
            "w2": (a, h),
            "b2": (h,),
        }
    if config.kind == HEAD:
        return {"weight": (h, config.num_classes), "bias": (config.num_classes,)}
    raise ValueError(f"unknown layer kind: {config.kind!r}")


def param_count(config: LayerConfig) -> int:
    """Exact number of scalars the layer allocates, biases and norms included."""
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def validate_params(config: LayerConfig, params: Params) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        raise ValueError(
            f"{config.kind}: tensor names {sorted(params)} != expected {sorted(expected)}"
        )
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{config.kind}.{name}: shape {params[name].shape} != {shape}")


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> Array:
    # resample anything beyond 2 sigma so the support is hard-bounded
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(DTYPE)


def init_layer(config: LayerConfig, rng: np.random.Generator, init_mode: str = "random") -> Params:
    """Fresh parameters for a layer.

    Heads and the adapter's second projection are always zero so that a new
    head yields uniform logits and a new adapter is an exact identity.
    Norm gains start at one; weights are truncated-normal(0.02); biases zero.
    ``init_mode="zero"`` zeroes the weights too (gains stay at one).
    """
    if init_mode not in ("random", "zero"):
        raise ValueError(f"unknown init_mode: {init_mode!r}")
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("bias", "beta")) or name in ("bq", "bk", "bv", "bo", "b1", "b2"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        elif name.endswith("gamma"):
            params[name] = np.ones(shape, dtype=DTYPE)
        elif config.kind == HEAD or (config.kind == RESIDUAL_ADAPTER and name == "w2"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        elif init_mode == "zero":
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            params[name] = _truncated_normal(rng, shape, INIT_STD)
    return params


# ---------------------------------------------------------------------------
# shape plumbing: every forward accepts (..., ) single or (batch, ...) input


def _batched(x: Array, sample_ndim: int) -> tuple[Array, bool]:
    if x.ndim == sample_ndim:
        return x[None], True
    if x.ndim == sample_ndim + 1:
        return x, False
    raise ValueError(f"expected {sample_ndim}- or {sample_ndim + 1}-d input, got {x.shape}")


def _unbatch(x: Array, squeeze: bool) -> Array:
    return x[0] if squeeze else x


def bilinear_resize(grid: Array, out_h: int, out_w: int) -> Array:
    """Resample a [h, w, c] field bilinearly (half-pixel centers).

    Interpolation is written in lerp form ``a + t * (b - a)`` so constant
    fields survive bit-exactly.
    """
    h, w, c = grid.shape
    src = np.asarray(grid, dtype=np.float64)

    def coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    ylo, yhi, ty = coords(out_h, h)
    xlo, xhi, tx = coords(out_w, w)

    top = src[ylo][:, xlo] + tx[None, :, None] * (src[ylo][:, xhi] - src[ylo][:, xlo])
    bot = src[yhi][:, xlo] + tx[None, :, None] * (src[yhi][:, xhi] - src[yhi][:, xlo])
    out = top + ty[:, None, None] * (bot - top)
    return out.astype(grid.dtype) if grid.dtype == DTYPE else out


def resample_pos_embed(params: Params, old_extent: int, new_extent: int) -> Params:
    """Adapt a position embedding to a new patch grid.

    The class-token row is kept as-is; the grid rows are resampled
    bilinearly. ``new_extent == old_extent`` returns an identical copy.
    """
    embed = params["embed"]
    h = embed.shape[1]
    cls_row = embed[:1]
    grid = embed[1:].reshape(old_extent, old_extent, h)
    resized = bilinear_resize(grid, new_extent, new_extent)
    new_grid = np.asarray(resized, dtype=DTYPE).reshape(new_extent * new_extent, h)
    return {"embed": np.concatenate([cls_row.copy(), new_grid], axis=0)}


# ---------------------------------------------------------------------------
# patch embedding


def patch_embed_fwd(config: LayerConfig, params: Params, images: Array):
    """[B, H, W, C] images -> [B, n_patches, hidden] tokens, plus cache."""
    x, squeeze = _batched(images, 3)
    b, img_h, img_w, c = x.shape
    ps = config.patch_size
    if img_h % ps or img_w % ps:
        raise ValueError(f"image {img_h}x{img_w} not divisible by patch size {ps}")
    if c != config.in_channels:
        raise ValueError(f"got {c} channels, layer expects {config.in_channels}")
    gh, gw = img_h // ps, img_w // ps
    # [B, gh, ps, gw, ps, C] -> [B, gh*gw, ps*ps*C]
    patches = x.reshape(b, gh, ps, gw, ps, c).transpose(0, 1, 3, 2, 4, 5)
    flat = np.ascontiguousarray(patches).reshape(b, gh * gw, ps * ps * c)
    w64 = params["weight"].astype(np.float64)
    out64 = flat.astype(np.float64) @ w64 + params["bias"].astype(np.float64)
    out = out64.astype(DTYPE)
    cache = (flat, (b, gh, gw, ps, c), squeeze)
    return _unbatch(out, squeeze), cache


def patch_embed_forward(config: LayerConfig, params: Params, images: Array) -> Array:
    out, _ = patch_embed_fwd(config, params, images)
    return out


def patch_embed_backward(config: LayerConfig, params: Params, cache, d_out: Array):
    flat, (b, gh, gw, ps, c), squeeze = cache
    d = _batched(d_out, 2)[0].astype(np.float64)
    flat64 = flat.astype(np.float64)
    w64 = params["weight"].astype(np.float64)
    n = gh * gw
    d_w = np.einsum("bpi,bpo->io", flat64, d, optimize=True)
    d_b = d.sum(axis=(0, 1))
    d_flat = d @ w64.T
    d_patches = d_flat.reshape(b, gh, gw, ps, ps, c).transpose(0, 1, 3, 2, 4, 5)
    d_images = np.ascontiguousarray(d_patches).reshape(b, gh * ps, gw * ps, c)
    grads = {"weight": d_w.astype(DTYPE), "bias": d_b.astype(DTYPE)}
    return _unbatch(d_images.astype(DTYPE), squeeze), grads


# ---------------------------------------------------------------------------
# class token


def class_token_fwd(config: LayerConfig, params: Params, tokens: Array):
    """Prepend the learned token: [B, n, h] -> [B, 1+n, h]."""
    x, squeeze = _batched(tokens, 2)
    b = x.shape[0]
    tok = np.broadcast_to(params["token"], (b, 1, config.hidden_dim))
    out = np.concatenate([tok, x], axis=1).astype(DTYPE)
    return _unbatch(out, squeeze), squeeze


def class_token_forward(config: LayerConfig, params: Params, tokens: Array) -> Array:
    out, _ = class_token_fwd(config, params, tokens)
    return out


def class_token_backward(config: LayerConfig, params: Params, cache, d_out: Array):
    squeeze = cache
    d = _batched(d_out, 2)[0]
    d_token = d[:, 0, :].astype(np.float64).sum(axis=0).astype(DTYPE)
    return _unbatch(d[:, 1:, :], squeeze), {"token": d_token}


# ---------------------------------------------------------------------------
# position embedding


def pos_embed_fwd(config: LayerConfig, params: Params, tokens: Array):
    x, squeeze = _batched(tokens, 2)
    n = 1 + config.grid_extent**2
    if x.shape[1] != n:
        raise ValueError(f"got {x.shape[1]} tokens, pos_embed covers {n}")
    out = (x.astype(np.float64) + params["embed"].astype(np.float64)).astype(DTYPE)
    return _unbatch(out, squeeze), squeeze


def pos_embed_forward(config: LayerConfig, params: Params, tokens: Array) -> Array:
    out, _ = pos_embed_fwd(config, params, tokens)
    return out


def pos_embed_backward(config: LayerConfig, params: Params, cache, d_out: Array):
    squeeze = cache
    d = _batched(d_out, 2)[0]
    d_embed = d.astype(np.float64).sum(axis=0).astype(DTYPE)
    return _unbatch(d, squeeze), {"embed": d_embed}


# ---------------------------------------------------------------------------
# transformer block (pre-norm): x + MSA(LN(x)), then + MLP(LN(.))


def _split_heads(x: Array, num_heads: int) -> Array:
    b, n, h = x.shape
    return x.reshape(b, n, num_heads, h // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Array) -> Array:
    b, nh, n, hd = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, n, nh * hd)


def _linear_tokens(x: Array, w: Array, b: Array) -> Array:
    out = x.astype(np.float64) @ w.astype(np.float64) + b.astype(np.float64)
    return out.astype(DTYPE)


def _linear_tokens_bwd(x: Array, w: Array, d_out: Array):
    x64 = x.astype(np.float64)
    d64 = d_out.astype(np.float64)
    d_w = np.einsum("bni,bno->io", x64, d64, optimize=True).astype(DTYPE)
    d_b = d64.sum(axis=(0, 1)).astype(DTYPE)
    d_x = (d64 @ w.astype(np.float64).T).astype(DTYPE)
    return d_x, d_w, d_b


def transformer_block_fwd(config: LayerConfig, params: Params, tokens: Array):
    x, squeeze = _batched(tokens, 2)
    p = params
    nh = config.num_heads
    hd = config.hidden_dim // nh
    scale = 1.0 / math.sqrt(hd)

    normed1 = layer_norm(x, p["ln1_gamma"], p["ln1_beta"], eps=LN_EPS)
    q = _split_heads(_linear_tokens(normed1, p["wq"], p["bq"]), nh)
    k = _split_heads(_linear_tokens(normed1, p["wk"], p["bk"]), nh)
    v = _split_heads(_linear_tokens(normed1, p["wv"], p["bv"]), nh)
    scores = (q.astype(np.float64) @ k.astype(np.float64).transpose(0, 1, 3, 2) * scale).astype(
        DTYPE
    )
    attn = softmax(scores, axis=-1)
    ctx = (attn.astype(np.float64) @ v.astype(np.float64)).astype(DTYPE)
    merged = _merge_heads(ctx)
    attn_out = _linear_tokens(merged, p["wo"], p["bo"])
    mid = (x.astype(np.float64) + attn_out.astype(np.float64)).astype(DTYPE)

    normed2 = layer_norm(mid, p["ln2_gamma"], p["ln2_beta"], eps=LN_EPS)
    pre_act = _linear_tokens(normed2, p["w1"], p["b1"])
    act = gelu(pre_act)
    mlp_out = _linear_tokens(act, p["w2"], p["b2"])
    out = (mid.astype(np.float64) + mlp_out.astype(np.float64)).astype(DTYPE)

    cache = (x, normed1, q, k, v, attn, merged, mid, normed2, pre_act, act, squeeze)
    return _unbatch(out, squeeze), cache


def transformer_block_forward(config: LayerConfig, params: Params, tokens: Array) -> Array:
    out, _ = transformer_block_fwd(config, params, tokens)
    return out


def transformer_block_backward(config: LayerConfig, params: Params, cache, d_out: Array):
    x, normed1, q, k, v, attn, merged, mid, normed2, pre_act, act, squeeze = cache
    p = params
    nh = config.num_heads
    hd = config.hidden_dim // nh
    scale = 1.0 / math.sqrt(hd)
    d = _batched(d_out, 2)[0]
    grads: Params = {}

    # mlp branch
    d_mlp_out = d
    d_act, grads["w2"], grads["b2"] = _linear_tokens_bwd(act, p["w2"], d_mlp_out)
    d_pre = gelu_backward(pre_act, d_act)
    d_normed2, grads["w1"], grads["b1"] = _linear_tokens_bwd(normed2, p["w1"], d_pre)
    d_mid_ln, grads["ln2_gamma"], grads["ln2_beta"] = layer_norm_backward(
        mid, p["ln2_gamma"], d_normed2, eps=LN_EPS
    )
    d_mid = (d.astype(np.float64) + d_mid_ln.astype(np.float64)).astype(DTYPE)

    # attention branch
    d_attn_out = d_mid
    d_merged, grads["wo"], grads["bo"] = _linear_tokens_bwd(merged, p["wo"], d_attn_out)
    d_ctx = _split_heads(d_merged, nh)
    d_attn = (d_ctx.astype(np.float64) @ v.astype(np.float64).transpose(0, 1, 3, 2)).astype(DTYPE)
    d_v = (attn.astype(np.float64).transpose(0, 1, 3, 2) @ d_ctx.astype(np.float64)).astype(DTYPE)
    a64 = attn.astype(np.float64)
    da64 = d_attn.astype(np.float64)
    d_scores = (a64 * (da64 - (a64 * da64).sum(axis=-1, keepdims=True))).astype(DTYPE)
    ds64 = d_scores.astype(np.float64) * scale
    d_q = (ds64 @ k.astype(np.float64)).astype(DTYPE)
    d_k = (ds64.transpose(0, 1, 3, 2) @ q.astype(np.float64)).astype(DTYPE)

    d_n1 = np.zeros_like(normed1, dtype=np.float64)
    for name, dh in (("wq", d_q), ("wk", d_k), ("wv", d_v)):
        d_part, d_w, d_b = _linear_tokens_bwd(normed1, p[name], _merge_heads(dh))
        grads[name] = d_w
        grads["b" + name[1]] = d_b
        d_n1 += d_part.astype(np.float64)
    d_x_ln, grads["ln1_gamma"], grads["ln1_beta"] = layer_norm_backward(
        x, p["ln1_gamma"], d_n1.astype(DTYPE), eps=LN_EPS
    )
    d_x = (d_mid.astype(np.float64) + d_x_ln.astype(np.float64)).astype(DTYPE)
    return _unbatch(d_x, squeeze), grads


# ---------------------------------------------------------------------------
# residual adapter: x + W2 gelu(W1 LN(x) + b1) + b2


def residual_adapter_fwd(config: LayerConfig, params: Params, tokens: Array):
    x, squeeze = _batched(tokens, 2)
    p = params
    normed = layer_norm(x, p["ln_gamma"], p["ln_beta"], eps=LN_EPS)
    pre_act = _linear_tokens(normed, p["w1"], p["b1"])
    act = gelu(pre_act)
    delta = _linear_tokens(act, p["w2"], p["b2"])
    out = (x.astype(np.float64) + delta.astype(np.float64)).astype(DTYPE)
    cache = (x, normed, pre_act, act, squeeze)
    return _unbatch(out, squeeze), cache


def residual_adapter_forward(config: LayerConfig, params: Params, tokens: Array) -> Array:
    out, _ = residual_adapter_fwd(config, params, tokens)
    return out


def residual_adapter_backward(config: LayerConfig, params: Params, cache, d_out: Array):
    x, normed, pre_act, act, squeeze = cache
    p = params
    d = _batched(d_out, 2)[0]
    grads: Params = {}
    d_act, grads["w2"], grads["b2"] = _linear_tokens_bwd(act, p["w2"], d)
    d_pre = gelu_backward(pre_act, d_act)
    d_normed, grads["w1"], grads["b1"] = _linear_tokens_bwd(normed, p["w1"], d_pre)
    d_x_ln, grads["ln_gamma"], grads["ln_beta"] = layer_norm_backward(
        x, p["ln_gamma"], d_normed, eps=LN_EPS
    )
    d_x = (d.astype(np.float64) + d_x_ln.astype(np.float64)).astype(DTYPE)
    return _unbatch(d_x, squeeze), grads


# ---------------------------------------------------------------------------
# head: logits from the class token


def head_fwd(config: LayerConfig, params: Params, tokens: Array):
    x, squeeze = _batched(tokens, 2)
    cls = x[:, 0, :]
    w64 = params["weight"].astype(np.float64)
    logits = (cls.astype(np.float64) @ w64 + params["bias"].astype(np.float64)).astype(DTYPE)
    cache = (cls, x.shape, squeeze)
    return _unbatch(logits, squeeze), cache


def head_forward(config: LayerConfig, params: Params, tokens: Array) -> Array:
    out, _ = head_fwd(config, params, tokens)
    return out


def head_backward(config: LayerConfig, params: Params, cache, d_out: Array):
    cls, x_shape, squeeze = cache
    d = d_out[None] if d_out.ndim == 1 else d_out
    cls64 = cls.astype(np.float64)
    d64 = d.astype(np.float64)
    grads = {
        "weight": (cls64.T @ d64).astype(DTYPE),
        "bias": d64.sum(axis=0).astype(DTYPE),
    }
    d_tokens = np.zeros(x_shape, dtype=DTYPE)
    d_tokens[:, 0, :] = (d64 @ params["weight"].astype(np.float64).T).astype(DTYPE)
    return _unbatch(d_tokens, squeeze), grads


_FWD = {
    PATCH_EMBED: patch_embed_fwd,
    CLASS_TOKEN: class_token_fwd,
    POS_EMBED: pos_embed_fwd,
    TRANSFORMER_BLOCK: transformer_block_fwd,
    RESIDUAL_ADAPTER: residual_adapter_fwd,
    HEAD: head_fwd,
}

_BWD = {
    PATCH_EMBED: patch_embed_backward,
    CLASS_TOKEN: class_token_backward,
    POS_EMBED: pos_embed_backward,
    TRANSFORMER_BLOCK: transformer_block_backward,
    RESIDUAL_ADAPTER: residual_adapter_backward,
    HEAD: head_backward,
}


def layer_fwd(config: LayerConfig, params: Params, x: Array):
    """Dispatch to the kind's forward; returns (output, cache)."""
    return _FWD[config.kind](config, params, x)


def layer_backward(config: LayerConfig, params: Params, cache, d_out: Array):
    """Dispatch to the kind's backward; returns (d_input, grads)."""
    return _BWD[config.kind](config, params, cache, d_out)
