"""Minimal dense-tensor math with hand-written backward passes.

Parameters and activations are float32; reductions (dot products, means,
norms, exp-sums) accumulate in float64 before casting back. Every op is a
pure function of its inputs, so concurrent callers never interfere.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf

Array = np.ndarray

DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _f64(x: Array) -> Array:
    return np.asarray(x, dtype=np.float64)


def matmul(a: Array, b: Array) -> Array:
    """Product of a [m, k] by b [k, n], accumulated at 64-bit."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return (_f64(a) @ _f64(b)).astype(DTYPE)


def softmax(x: Array, axis: int = -1) -> Array:
    """Shift-invariant softmax along ``axis``; rows sum to 1."""
    x64 = _f64(x)
    x64 = x64 - np.max(x64, axis=axis, keepdims=True)
    e = np.exp(x64)
    return (e / np.sum(e, axis=axis, keepdims=True)).astype(DTYPE)


def softmax_backward(probs: Array, d_out: Array, axis: int = -1) -> Array:
    """Gradient through softmax given its output ``probs``."""
    p = _f64(probs)
    d = _f64(d_out)
    inner = np.sum(p * d, axis=axis, keepdims=True)
    return (p * (d - inner)).astype(DTYPE)


def gelu(x: Array) -> Array:
    """Exact-erf Gaussian error linear unit."""
    x64 = _f64(x)
    return (0.5 * x64 * (1.0 + erf(x64 * _INV_SQRT2))).astype(DTYPE)


def gelu_backward(x: Array, d_out: Array) -> Array:
    x64 = _f64(x)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT_2PI
    return ((cdf + x64 * pdf) * _f64(d_out)).astype(DTYPE)


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-6) -> Array:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x64 = _f64(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm affine params {gamma.shape}/{beta.shape} do not match last axis {x.shape[-1]}"
        )
    mean = np.mean(x64, axis=-1, keepdims=True)
    var = np.mean((x64 - mean) ** 2, axis=-1, keepdims=True)
    xhat = (x64 - mean) / np.sqrt(var + eps)
    return (xhat * _f64(gamma) + _f64(beta)).astype(DTYPE)


def layer_norm_backward(
    x: Array, gamma: Array, d_out: Array, eps: float = 1e-6
) -> tuple[Array, Array, Array]:
    """Returns (d_x, d_gamma, d_beta) for the last-axis layer norm."""
    x64 = _f64(x)
    d64 = _f64(d_out)
    mean = np.mean(x64, axis=-1, keepdims=True)
    var = np.mean((x64 - mean) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean) * inv_std

    red_axes = tuple(range(x64.ndim - 1))
    d_beta = np.sum(d64, axis=red_axes)
    d_gamma = np.sum(d64 * xhat, axis=red_axes)

    d_xhat = d64 * _f64(gamma)
    d_x = inv_std * (
        d_xhat
        - np.mean(d_xhat, axis=-1, keepdims=True)
        - xhat * np.mean(d_xhat * xhat, axis=-1, keepdims=True)
    )
    return d_x.astype(DTYPE), d_gamma.astype(DTYPE), d_beta.astype(DTYPE)


def cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean negative log-softmax of the true class.

    Returns ``(loss, d_logits)`` with ``d_logits = (softmax - onehot) / batch``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [batch, classes], got {logits.shape}")
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label out of range [0, {classes})")

    x64 = _f64(logits)
    x64 = x64 - np.max(x64, axis=1, keepdims=True)
    e = np.exp(x64)
    z = np.sum(e, axis=1, keepdims=True)
    log_probs = x64 - np.log(z)
    loss = -float(np.mean(log_probs[np.arange(batch), labels]))

    probs = e / z
    probs[np.arange(batch), labels] -= 1.0
    return loss, (probs / batch).astype(DTYPE)


def finite_diff_grad(f: Callable[[Array], float], x: Array, h: float = 1e-3) -> Array:
    """Central-difference gradient of a scalar function, elementwise.

    The denominator uses the actually-representable float32 step so the
    estimate stays honest near the 32-bit resolution limit.
    """
    x = np.asarray(x, dtype=DTYPE)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] = np.float32(orig + h)
        xm[i] = np.float32(orig - h)
        fp = f(xp.reshape(x.shape))
        fm = f(xm.reshape(x.shape))
        denom = float(xp[i]) - float(xm[i])
        grad.reshape(-1)[i] = (fp - fm) / denom
    return grad.astype(DTYPE)


def grad_check_rel_error(analytic: Array, numeric: Array) -> float:
    """Global relative error used by every backward-vs-finite-difference test."""
    a = _f64(analytic)
    n = _f64(numeric)
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-8)
    return float(np.max(np.abs(a - n))) / scale
