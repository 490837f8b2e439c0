"""Vision Transformer with a sigmoid multi-label head, forward and exact backward.

Parameters live in an insertion-ordered dict; that order is the declaration
order used by checkpoints and the optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ViTConfig
from .layers import gelu, gelu_grad, layer_norm, layer_norm_backward, patchify, softmax, softmax_backward

__all__ = ["ViTModel", "param_shapes", "ForwardCache", "embed", "encoder_layer", "truncated_normal"]


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_shapes(c: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration order."""
    d, h, dh = c.model_dim, c.n_heads, c.head_dim
    shapes = {
        "patch_projection": (c.patch_size**2, d),
        "position_embeddings": (c.n_patches + 1, d),
        "class_token": (d,),
    }
    widths = [d] + [c.mlp_size] * c.mlp_layers + [d]
    for i in range(c.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "w_qkv"] = (h, d, 3 * dh)
        shapes[p + "w_msa"] = (h * dh, d)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[p + f"mlp.{j}.weight"] = (a, b)
            shapes[p + f"mlp.{j}.bias"] = (b,)
    shapes["head.ln.gain"] = (d,)
    shapes["head.ln.bias"] = (d,)
    shapes["head.weight"] = (d, c.n_classes)
    shapes["head.bias"] = (c.n_classes,)
    return shapes


def embed(patches, patch_projection, class_token, position_embeddings):
    """``[x_cls; x_1 E; ...; x_N E] + E_pos`` for ``(..., N, S*S)`` patches."""
    pe = patches @ patch_projection
    cls = np.broadcast_to(class_token, pe.shape[:-2] + (1, pe.shape[-1]))
    return np.concatenate([cls, pe], axis=-2) + position_embeddings


def _mlp_forward(x, weights, biases):
    acts, pres, cdfs = [x], [], []
    for j, (w, b) in enumerate(zip(weights, biases)):
        pre = acts[-1] @ w + b
        pres.append(pre)
        if j < len(weights) - 1:
            out, cdf = gelu(pre, return_cdf=True)
            acts.append(out)
            cdfs.append(cdf)
    return pres[-1], (acts, pres, cdfs)


def _sum_lead(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0) if x.ndim > 1 else x


@dataclass
class ForwardCache:
    patches: np.ndarray
    layers: list = field(default_factory=list)
    head: tuple | None = None


class ViTModel:
    def __init__(self, config: ViTConfig, params: dict[str, np.ndarray] | None = None, seed=0):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        else:
            expected = self.param_shapes()
            if list(params) != list(expected):
                raise ValueError("parameter names/order do not match the configuration")
            for name, shape in expected.items():
                if params[name].shape != shape:
                    raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
            params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.params = params

    # --- parameters -----------------------------------------------------------
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return param_shapes(self.config)

    def _init_params(self, rng):
        std = self.config.init_std
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith("gain"):
                params[name] = np.ones(shape)
            elif name.endswith("bias"):
                params[name] = np.zeros(shape)
            else:
                params[name] = truncated_normal(rng, shape, std)
        return params

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _mlp(self, i):
        n = self.config.mlp_layers + 1
        p = self.params
        return (
            [p[f"layers.{i}.mlp.{j}.weight"] for j in range(n)],
            [p[f"layers.{i}.mlp.{j}.bias"] for j in range(n)],
        )

    # --- forward --------------------------------------------------------------
    def forward(self, images, keep_cache: bool = True):
        """Logits for ``(H, W)`` or ``(B, H, W)`` images. Returns ``(logits, cache)``."""
        c = self.config
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (c.image_size, c.width):
            raise ValueError(f"expected images of shape (B, {c.image_size}, {c.width}), got {np.shape(images)}")
        p = self.params
        patches = patchify(x, c.patch_size)
        cache = ForwardCache(patches) if keep_cache else None
        z = embed(patches, p["patch_projection"], p["class_token"], p["position_embeddings"])
        for i in range(c.n_layers):
            z, layer_cache = self._encoder_forward(z, i)
            _check_finite(z, f"encoder layer {i}")
            if keep_cache:
                cache.layers.append(layer_cache)
        u, ln_cache = layer_norm(z[:, 0, :], p["head.ln.gain"], p["head.ln.bias"], c.layer_norm_eps)
        logits = u @ p["head.weight"] + p["head.bias"]
        _check_finite(logits, "logits")
        if keep_cache:
            cache.head = (u, ln_cache)
        return (logits[0] if single else logits), cache

    def _encoder_forward(self, z, i):
        c, p = self.config, self.params
        pre = f"layers.{i}."
        eps = c.layer_norm_eps
        a, ln1 = layer_norm(z, p[pre + "ln1.gain"], p[pre + "ln1.bias"], eps)
        w_qkv = p[pre + "w_qkv"]
        dh = c.head_dim
        qkv = a[:, None, :, :] @ w_qkv[None]  # (B, h, n, 3dh)
        q, k, v = qkv[..., :dh], qkv[..., dh : 2 * dh], qkv[..., 2 * dh :]
        att = softmax(q @ np.swapaxes(k, -1, -2) / np.sqrt(dh))
        o = att @ v  # (B, h, n, dh)
        B, h, n, _ = o.shape
        ocat = np.moveaxis(o, 1, 2).reshape(B, n, h * dh)
        zp = z + ocat @ p[pre + "w_msa"]
        b2, ln2 = layer_norm(zp, p[pre + "ln2.gain"], p[pre + "ln2.bias"], eps)
        ws, bs = self._mlp(i)
        m, mlp_cache = _mlp_forward(b2, ws, bs)
        return zp + m, (a, ln1, qkv, att, ocat, ln2, mlp_cache)

    def predict_proba(self, images, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        out = [self.forward(x[i : i + batch_size], keep_cache=False)[0] for i in range(0, len(x), batch_size)]
        logits = np.concatenate(out) if out else np.zeros((0, self.config.n_classes))
        return np.exp(-np.logaddexp(0.0, -logits))

    # --- backward -------------------------------------------------------------
    def backward(self, cache: ForwardCache | None, dlogits) -> dict[str, np.ndarray]:
        """Gradients of every parameter given ``dloss/dlogits`` for the cached batch."""
        if cache is None or cache.head is None:
            raise ValueError("backward needs the cache from forward(..., keep_cache=True)")
        c, p = self.config, self.params
        g = self.zero_grads()
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.ndim == 1:
            dlogits = dlogits[None]
        B = cache.patches.shape[0]
        if dlogits.shape != (B, c.n_classes):
            raise ValueError(f"dlogits shape {dlogits.shape}, expected {(B, c.n_classes)}")

        u, ln_cache = cache.head
        g["head.weight"] = u.T @ dlogits
        g["head.bias"] = dlogits.sum(axis=0)
        du = dlogits @ p["head.weight"].T
        dz0, g["head.ln.gain"], g["head.ln.bias"] = layer_norm_backward(du, ln_cache, p["head.ln.gain"])
        n_tok = c.n_patches + 1
        dz = np.zeros((B, n_tok, c.model_dim))
        dz[:, 0, :] = dz0

        for i in reversed(range(c.n_layers)):
            dz = self._encoder_backward(dz, cache.layers[i], i, g)

        g["position_embeddings"] = dz.sum(axis=0)
        g["class_token"] = dz[:, 0, :].sum(axis=0)
        patches = cache.patches
        g["patch_projection"] = patches.reshape(-1, patches.shape[-1]).T @ dz[:, 1:, :].reshape(-1, c.model_dim)
        return g

    def _encoder_backward(self, dz_out, layer_cache, i, g):
        c, p = self.config, self.params
        pre = f"layers.{i}."
        a, ln1, qkv, att, ocat, ln2, (acts, pres, cdfs) = layer_cache
        dh = c.head_dim
        ws, _ = self._mlp(i)

        # MLP branch
        dpre = dz_out
        for j in reversed(range(len(ws))):
            x_in = acts[j]
            g[pre + f"mlp.{j}.weight"] = x_in.reshape(-1, x_in.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
            g[pre + f"mlp.{j}.bias"] = _sum_lead(dpre)
            dx = dpre @ ws[j].T
            if j > 0:
                dpre = dx * gelu_grad(pres[j - 1], cdfs[j - 1])
        db2 = dx
        dln2, g[pre + "ln2.gain"], g[pre + "ln2.bias"] = layer_norm_backward(db2, ln2, p[pre + "ln2.gain"])
        dzp = dz_out + dln2

        # attention branch
        w_msa = p[pre + "w_msa"]
        g[pre + "w_msa"] = ocat.reshape(-1, ocat.shape[-1]).T @ dzp.reshape(-1, dzp.shape[-1])
        docat = dzp @ w_msa.T
        B, n, _ = docat.shape
        do = np.moveaxis(docat.reshape(B, n, c.n_heads, dh), 2, 1)  # (B, h, n, dh)
        q, k, v = qkv[..., :dh], qkv[..., dh : 2 * dh], qkv[..., 2 * dh :]
        datt = do @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(att, -1, -2) @ do
        ds = softmax_backward(datt, att) / np.sqrt(dh)
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        dqkv = np.concatenate([dq, dk, dv], axis=-1)  # (B, h, n, 3dh)
        g[pre + "w_qkv"] = np.einsum("bnd,bhne->hde", a, dqkv, optimize=True)
        da = np.einsum("bhne,hde->bnd", dqkv, p[pre + "w_qkv"], optimize=True)
        dln1, g[pre + "ln1.gain"], g[pre + "ln1.bias"] = layer_norm_backward(da, ln1, p[pre + "ln1.gain"])
        return dzp + dln1


def encoder_layer(z, model: ViTModel, layer_idx: int = 0) -> np.ndarray:
    """One encoder block (pre-norm MSA and MLP, each with a residual) on ``(N', d)`` or ``(B, N', d)``."""
    x = np.asarray(z, dtype=np.float64)
    single = x.ndim == 2
    out, _ = model._encoder_forward(x[None] if single else x, layer_idx)
    return out[0] if single else out


def _check_finite(x, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {where}")
