"""Mini-batch BCE + Adam training, prediction and Top-K evaluation.

In ``gaf`` input mode every (sample, content) pair is one training example:
the content's GAF image in, one logit out. In ``matrix`` mode each sample is
one example with an ``N_c``-wide output.
"""
from __future__ import annotations

import logging

import numpy as np

from ..pipeline import Dataset, Sample, count_image, gaf_encode_many
from .config import ViTConfig
from .layers import bce_loss
from .model import ViTModel
from .optim import DEFAULT_BETAS, DEFAULT_WEIGHT_DECAY, Adam

__all__ = [
    "Examples",
    "train",
    "predict_logits",
    "top_k_indices",
    "topk_jaccard",
    "evaluate_scores",
    "evaluate",
    "model_predictor",
]

log = logging.getLogger(__name__)


class Examples:
    """Flat view of a :class:`Dataset` as model inputs and targets."""

    def __init__(self, dataset: Dataset, config: ViTConfig):
        self.config = config
        self.n_samples = len(dataset)
        self.n_contents = dataset.n_contents
        if config.input_mode == "gaf":
            if config.n_classes != 1:
                raise ValueError("gaf input mode scores one content per image: n_classes must be 1")
            if config.image_size != dataset.history_len or config.width != dataset.history_len:
                raise ValueError(
                    f"GAF images are {dataset.history_len}x{dataset.history_len}, "
                    f"model expects {config.image_size}x{config.width}"
                )
            hist = np.stack([s.history for s in dataset.samples]).astype(np.float64) if len(dataset) else np.zeros((0, dataset.history_len, self.n_contents))
            # rows ordered (sample, content)
            self.series = np.swapaxes(hist, 1, 2).reshape(-1, dataset.history_len)
            if config.gaf_scale == "sample":
                lo, hi = hist.min(axis=(1, 2)), hist.max(axis=(1, 2))
                self.lo = np.repeat(lo, self.n_contents)
                self.hi = np.repeat(hi, self.n_contents)
            elif config.gaf_scale == "series":
                self.lo = self.hi = None
            else:
                raise ValueError(f"unknown gaf_scale {config.gaf_scale!r}")
            self.targets = dataset.labels().reshape(-1, 1).astype(np.float64)
        else:
            if config.n_classes != self.n_contents:
                raise ValueError("matrix input mode needs n_classes == N_c")
            self.histories = [s.history for s in dataset.samples]
            self.targets = dataset.labels().astype(np.float64)

    def __len__(self) -> int:
        return len(self.targets)

    def inputs(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if self.config.input_mode == "gaf":
            rng = None if self.lo is None else (self.lo[idx], self.hi[idx])
            return gaf_encode_many(self.series[idx], rng)
        return np.stack([count_image(self.histories[i], self.config.patch_size) for i in idx])


def _run_epoch_eval(model, ex: Examples, batch_size: int = 2048):
    logits = []
    for start in range(0, len(ex), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ex)))
        logits.append(model.forward(ex.inputs(idx), keep_cache=False)[0])
    if not logits:
        return np.zeros((0, model.config.n_classes))
    return np.concatenate(logits)


def predict_logits(model: ViTModel, dataset: Dataset, batch_size: int = 2048) -> np.ndarray:
    """Per-content logits, shape ``(M, N_c)``."""
    ex = Examples(dataset, model.config)
    return _run_epoch_eval(model, ex, batch_size).reshape(len(dataset), dataset.n_contents)


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(s)), -s))[:k]


def topk_jaccard(scores, labels, k: int) -> float:
    """Mean over samples of ``|predicted Top-K & labelled set| / K``."""
    s = np.atleast_2d(scores)
    y = np.atleast_2d(labels)
    vals = [y[i, top_k_indices(s[i], k)].sum() / k for i in range(len(s))]
    return float(np.mean(vals))


def evaluate_scores(logits, labels, k: int) -> dict[str, float]:
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if len(z) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    loss, _ = bce_loss(z, y)
    pred = (z > 0).astype(np.float64)  # sigmoid(z) > 0.5
    return {
        "accuracy": float((pred == y).mean()),
        "loss": float(np.mean(loss)),
        "topk_jaccard": topk_jaccard(z, y, k),
    }


def evaluate(model: ViTModel, dataset: Dataset, k: int | None = None) -> dict[str, float]:
    """Binary accuracy at 0.5, mean BCE and Top-K overlap with the labels."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return evaluate_scores(predict_logits(model, dataset), dataset.labels(), dataset.k if k is None else k)


def train(
    dataset: Dataset,
    config: ViTConfig,
    epochs: int,
    batch_size: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
    val_fraction: float = 0.2,
    betas: tuple[float, float] = DEFAULT_BETAS,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    eps: float = 1e-8,
    model: ViTModel | None = None,
):
    """Train a ViT on ``dataset``. Returns ``(model, history)``.

    The earliest ``1 - val_fraction`` of the samples (by update time) train;
    the rest validate. ``history`` holds one metrics dict per epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    train_ds, val_ds = dataset.split(1.0 - val_fraction) if val_fraction > 0 else (dataset, None)
    if len(train_ds) == 0:
        raise ValueError("training split is empty; lower val_fraction")
    if val_ds is not None and len(val_ds) == 0:
        val_ds = None

    if model is None:
        model = ViTModel(config, seed=seed)
    opt = Adam(model.params, lr=lr, betas=betas, weight_decay=weight_decay, eps=eps)
    ex = Examples(train_ds, config)
    val_ex = Examples(val_ds, config) if val_ds is not None else None
    rng = np.random.default_rng(seed)

    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(ex))
        total, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            logits, cache = model.forward(ex.inputs(idx))
            loss, dlogits = bce_loss(logits, ex.targets[idx])
            grads = model.backward(cache, dlogits / len(idx))
            opt.step(grads)
            total += float(np.sum(loss))
            seen += len(idx)
        record = {"epoch": epoch, "train_loss": total / seen}
        if val_ex is not None:
            z = _run_epoch_eval(model, val_ex).reshape(len(val_ds), -1)
            m = evaluate_scores(z, val_ds.labels(), val_ds.k)
            record.update({f"val_{key}": v for key, v in m.items()})
        history.append(record)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in record.items() if k != "epoch"})
    return model, history


def model_predictor(model: ViTModel, k: int):
    """Wrap ``model`` as a cache predictor ``(history, t_u) -> K content ids``.

    Ids are 1-based; the ``k`` highest logits win, ties to the lower id.
    """
    def predict(history, t_u):
        h = np.asarray(history)
        ds = Dataset([Sample(h, np.zeros(h.shape[1], np.uint8), t_u)], h.shape[0], h.shape[1], k)
        z = _run_epoch_eval(model, Examples(ds, model.config)).reshape(-1)
        return [int(i) + 1 for i in top_k_indices(z, k)]

    return predict
