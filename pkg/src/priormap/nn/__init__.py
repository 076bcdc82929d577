"""Minimal channels-last tensor engine for the fusion and refinement stacks."""

from __future__ import annotations

import numpy as np

from .functional import (check_finite, conv2d, cross_entropy, layernorm, matmul,
                         sine_positional_embedding, softmax)
from .gradcheck import GradCheckReport, grad_check
from .layers import (AttentionConfig, Conv2d, ConvTranspose2x, CrossAttentionLayer, Dropout, GELU, LayerNorm,
                     Linear, Module, MultiHeadAttention, Parameter, ReLU, Sequential,
                     TransformerBlock, Upsample2x)
from .optim import Adam, AdamState, adam_step
from .tensor_io import load_checkpoint, load_tensor, save_checkpoint, save_tensor


def multi_head_cross_attention(q: np.ndarray, f: np.ndarray, layer: CrossAttentionLayer,
                               cfg: AttentionConfig, train_mode: bool = False) -> np.ndarray:
    """Apply one cross-attention layer to un-batched ``nq x C`` queries and ``nk x C`` tokens."""
    if q.shape[-1] != cfg.model_dim or f.shape[-1] != cfg.model_dim:
        raise ValueError(f"feature dims {q.shape}, {f.shape} do not match C={cfg.model_dim}")
    layer.train(train_mode)
    return layer.forward(q[None], f[None])[0]


__all__ = [
    "Adam", "AdamState", "AttentionConfig", "Conv2d", "ConvTranspose2x", "CrossAttentionLayer", "Dropout", "GELU",
    "GradCheckReport", "LayerNorm", "Linear", "Module", "MultiHeadAttention", "Parameter", "ReLU",
    "Sequential", "TransformerBlock", "Upsample2x", "adam_step", "check_finite", "conv2d",
    "cross_entropy", "grad_check", "layernorm", "load_checkpoint", "load_tensor", "matmul",
    "multi_head_cross_attention", "save_checkpoint", "save_tensor", "sine_positional_embedding",
    "softmax",
]
