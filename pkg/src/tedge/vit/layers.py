"""Forward/backward primitives. Leading axes are treated as batch axes."""
from __future__ import annotations

import numpy as np
from scipy.special import ndtr

__all__ = [
    "patchify",
    "unpatchify",
    "layer_norm",
    "layer_norm_backward",
    "gelu",
    "gelu_grad",
    "softmax",
    "softmax_backward",
    "self_attention",
    "multi_head_attention",
    "sigmoid",
    "bce_loss",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def patchify(image, patch_size: int) -> np.ndarray:
    """Split ``(..., H, W)`` into ``(..., N, S*S)`` patches, row-major grid and pixels."""
    x = np.asarray(image)
    *lead, H, W = x.shape
    S = patch_size
    if S < 1 or H % S or W % S:
        raise ValueError(f"image {H}x{W} is not divisible into {S}x{S} patches")
    x = x.reshape(*lead, H // S, S, W // S, S)
    x = np.moveaxis(x, -3, -2)  # (..., H/S, W/S, S, S)
    return x.reshape(*lead, (H // S) * (W // S), S * S)


def unpatchify(patches, patch_size: int, height: int, width: int) -> np.ndarray:
    p = np.asarray(patches)
    *lead, n, s2 = p.shape
    S = patch_size
    x = p.reshape(*lead, height // S, width // S, S, S)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, height, width)


def layer_norm(x, gain, bias, eps: float = 1e-6):
    """Normalise over the last axis. Returns ``(y, cache)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def layer_norm_backward(dy, cache, gain):
    xhat, inv_std = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = inv_std * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(x, return_cdf: bool = False):
    """Exact GELU, ``x * Phi(x)``; optionally also returns ``Phi(x)`` for the backward pass."""
    cdf = ndtr(x)
    return (x * cdf, cdf) if return_cdf else x * cdf


def gelu_grad(x, cdf=None):
    if cdf is None:
        cdf = ndtr(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(x, axis: int = -1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis: int = -1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def self_attention(Z, w_qkv):
    """One attention head: ``softmax(Q K^T / sqrt(d_h)) V`` with ``[Q, K, V] = Z W``.

    ``w_qkv`` has shape ``(d, 3 d_h)``; its columns are Q, K, V in that order.
    """
    qkv = Z @ w_qkv
    dh = w_qkv.shape[-1] // 3
    q, k, v = qkv[..., :dh], qkv[..., dh : 2 * dh], qkv[..., 2 * dh :]
    att = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(dh))
    return att @ v


def multi_head_attention(Z, w_qkv, w_msa):
    """Concatenate ``h`` heads (``w_qkv``: ``(h, d, 3 d_h)``) and project by ``w_msa``."""
    heads = [self_attention(Z, w_qkv[i]) for i in range(w_qkv.shape[0])]
    return np.concatenate(heads, axis=-1) @ w_msa


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


def bce_loss(logits, labels):
    """Mean binary cross-entropy over the last axis, computed from logits.

    Returns ``(loss, dloss/dlogits)``; ``loss`` has the leading shape of
    ``logits`` (a scalar for a 1-D input).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and labels {y.shape} differ in shape")
    n = z.shape[-1]
    # -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
    per_class = np.logaddexp(0.0, z) - y * z
    loss = per_class.mean(axis=-1)
    grad = (sigmoid(z) - y) / n
    return (float(loss) if loss.ndim == 0 else loss), grad
