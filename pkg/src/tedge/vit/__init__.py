"""From-scratch Vision Transformer for multi-label Top-K popularity prediction."""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, REFERENCE_PARAMS, ViTConfig, count_params, preset_model
from .layers import bce_loss, multi_head_attention, patchify, self_attention, unpatchify
from .model import ViTModel, embed, encoder_layer
from .optim import Adam, AdamState, adam_step
from .train import evaluate, evaluate_scores, model_predictor, predict_logits, top_k_indices, topk_jaccard, train

__all__ = [
    "ViTConfig", "ViTModel", "PRESETS", "REFERENCE_PARAMS", "preset_model", "count_params",
    "patchify", "unpatchify", "embed", "self_attention", "multi_head_attention", "encoder_layer",
    "bce_loss", "Adam", "AdamState", "adam_step", "train", "evaluate", "evaluate_scores",
    "predict_logits", "model_predictor", "top_k_indices", "topk_jaccard", "save_checkpoint", "load_checkpoint",
]
