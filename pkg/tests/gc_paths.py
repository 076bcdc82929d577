"""Tiny S and S+H networks on an 8x8 grid for finite-difference checks."""

import numpy as np

from priormap.fusion import FusionConfig, FusionModel
from priormap.grid import grid_for_range, one_hot
from priormap.mae import MaeConfig, MaeModel, joint_backward, joint_forward
from priormap.nn import functional as F
from priormap.nn.layers import AttentionConfig

GRID = grid_for_range(4, 4, 0.5)  # 8 x 8 cells
WEIGHTS = (2.0, 2.0, 2.0, 1.0)


def _inputs(dtype, seed=3):
    rng = np.random.default_rng(seed)
    obs = one_hot(rng.integers(0, 4, size=(2, 8, 8)), dtype)
    sd = (rng.random((2, 4, 4, 1)) < 0.4).astype(dtype)
    gt = rng.integers(0, 4, size=(2, 8, 8))
    return obs, sd, gt


def _fusion(dtype):
    # random attention weights, so every parameter carries gradient
    cfg = FusionConfig(GRID, 2, AttentionConfig(2, 8, 4, 2, 0.1), "cross-attention", 4,
                       local_attention_init=False)
    return FusionModel(cfg, seed=5, dtype=dtype).eval()


def _mae(dtype):
    return MaeModel(MaeConfig(patch=4, dim=8, depth=1, heads=2, decoder_channels=4),
                    GRID.shape, seed=6, dtype=dtype).eval()


def s_path(dtype=np.float64):
    """Returns ``(loss_fn, named params)`` for encode -> fuse -> head -> CE."""
    model = _fusion(dtype)
    obs, sd, gt = _inputs(dtype)

    def loss_fn(backward):
        logits = model.forward(obs.astype(model.dtype), sd.astype(model.dtype))
        loss, d = F.cross_entropy(logits, gt, np.asarray(WEIGHTS, model.dtype), return_grad=True)
        if backward:
            model.backward(d)
        return loss

    return loss_fn, dict(model.named_parameters())


def sh_path(dtype=np.float64):
    """S path followed by softmax and the MAE refinement, CE on the refined logits."""
    fusion, mae = _fusion(dtype), _mae(dtype)
    obs, sd, gt = _inputs(dtype)
    params = {**{f"fusion.{k}": v for k, v in fusion.named_parameters()},
              **{f"mae.{k}": v for k, v in mae.named_parameters()}}

    def loss_fn(backward):
        _, probs, logits = joint_forward(fusion, mae, obs.astype(fusion.dtype),
                                         sd.astype(fusion.dtype))
        loss, d = F.cross_entropy(logits, gt, np.asarray(WEIGHTS, mae.dtype), return_grad=True)
        if backward:
            joint_backward(fusion, mae, probs, d)
        return loss

    return loss_fn, params


def float32_gradients(builder):
    """Analytic gradients from a 32-bit copy of the same network."""
    loss_fn, params = builder(np.float32)
    for p in params.values():
        p.grad = np.zeros_like(p.value)
    loss_fn(True)
    return [p.grad.copy() for p in params.values()]
