"""Masked-autoencoder HD-map prior: masking, ViT encoder, segmentation head.

The network reads a class-probability (or one-hot) raster and predicts
per-cell class logits, so the same model pretrains on masked ground truth and
later refines the fusion network's initial prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .fusion import (DEFAULT_CLASS_WEIGHTS, FusionModel, FusionSample, confusion_counts,
                     iou_from_counts, iterate_batches, stack_batch)
from .grid import BACKGROUND, NUM_CLASSES, GridSpec, one_hot
from .nn import functional as F
from .nn.layers import Conv2d, LayerNorm, Linear, Module, ReLU, Sequential, TransformerBlock
from .nn.optim import Adam

GRID_PATCH = (20, 20)
RANDOM_PATCH_CANDIDATES = ((20, 20), (20, 40), (25, 50), (40, 80))
MASK_PROPORTIONS = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class MaskSpec:
    strategy: str = "random"
    grid_patch: tuple[int, int] = GRID_PATCH
    random_patch_candidates: tuple[tuple[int, int], ...] = RANDOM_PATCH_CANDIDATES
    mask_proportion: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("grid", "random"):
            raise ValueError(f"unknown mask strategy {self.strategy!r}")
        if not 0.0 <= self.mask_proportion <= 1.0:
            raise ValueError("mask_proportion must be in [0, 1]")

    def with_seed(self, seed: int) -> "MaskSpec":
        return MaskSpec(self.strategy, self.grid_patch, self.random_patch_candidates,
                        self.mask_proportion, int(seed))


def _tiles(rows: int, cols: int, ph: int, pw: int):
    for r in range(0, rows, ph):
        for c in range(0, cols, pw):
            yield r, min(r + ph, rows), c, min(c + pw, cols)


def make_mask(spec: MaskSpec, grid: GridSpec | tuple[int, int]) -> np.ndarray:
    """Boolean ``rows x cols`` mask, ``True`` where the input is hidden."""
    rows, cols = grid.shape if isinstance(grid, GridSpec) else grid
    mask = np.zeros((rows, cols), dtype=bool)
    if spec.strategy == "grid":
        ph, pw = spec.grid_patch
        for r0, r1, c0, c1 in _tiles(rows, cols, ph, pw):
            if ((r0 // ph) + (c0 // pw)) % 2 == 1:
                mask[r0:r1, c0:c1] = True
        return mask
    rng = np.random.default_rng(spec.seed)
    cands = spec.random_patch_candidates
    ph, pw = cands[int(rng.integers(len(cands)))]
    tiles = list(_tiles(rows, cols, ph, pw))
    total = rows * cols
    masked = 0
    for t in rng.permutation(len(tiles)):
        if masked / total >= spec.mask_proportion:
            break
        r0, r1, c0, c1 = tiles[t]
        mask[r0:r1, c0:c1] = True
        masked += (r1 - r0) * (c1 - c0)
    return mask


def apply_mask(raster: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Set masked cells of a ``... x H x W x (Nc+1)`` raster to background one-hot."""
    if raster.shape[-3:-1] != mask.shape[-2:]:
        raise ShapeError(f"mask {mask.shape} does not match raster {raster.shape}")
    out = raster.copy()
    bg = np.zeros(raster.shape[-1], dtype=raster.dtype)
    bg[BACKGROUND] = 1
    out[..., mask, :] = bg
    return out


@dataclass(frozen=True)
class MaeConfig:
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    decoder_channels: int = 8
    input_skip: bool = True

    def __post_init__(self):
        if self.dim % self.heads or self.dim % 4:
            raise ValueError(f"dim {self.dim} must be divisible by heads and by 4")


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5) \
        .reshape(n, (h // p) * (w // p), p * p * c)


def unpatchify(t: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    n, _, d = t.shape
    c = d // (p * p)
    return t.reshape(n, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)


class MaeModel(Module):
    """ViT encoder over raster patches followed by a convolutional segmentation head."""

    def __init__(self, cfg: MaeConfig, shape: tuple[int, int], seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.rows, self.cols = shape
        p = cfg.patch
        self.prows, self.pcols = math.ceil(self.rows / p) * p, math.ceil(self.cols / p) * p
        rng = np.random.default_rng(seed)
        k = NUM_CLASSES + 1
        self.embed = Linear(p * p * k, cfg.dim, rng, dtype)
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, rng, cfg.mlp_ratio, dtype)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim, dtype)
        self.unpatch = Linear(cfg.dim, p * p * cfg.decoder_channels, rng, dtype)
        cin = cfg.decoder_channels + (k if cfg.input_skip else 0)
        self.head = Sequential(Conv2d(cin, cfg.decoder_channels, 1, rng, dtype=dtype), ReLU(),
                               Conv2d(cfg.decoder_channels, k, 1, rng, dtype=dtype))
        self._pe = F.sine_positional_embedding(self.prows // p, self.pcols // p, cfg.dim)

    @property
    def dtype(self):
        return self.norm.gain.value.dtype

    def forward(self, x: np.ndarray) -> np.ndarray:
        """``N x H x W x 4`` raster -> ``N x H x W x 4`` logits."""
        if x.shape[1:3] != (self.rows, self.cols):
            raise ShapeError(f"input {x.shape[1:3]} does not match model grid "
                             f"{self.rows}x{self.cols}")
        p = self.cfg.patch
        ph, pw = self.prows - self.rows, self.pcols - self.cols
        if ph or pw:
            xp = np.zeros((x.shape[0], self.prows, self.pcols, x.shape[3]), dtype=x.dtype)
            xp[..., BACKGROUND] = 1
            xp[:, :self.rows, :self.cols] = x
        else:
            xp = x
        t = self.embed.forward(patchify(xp, p)) + self._pe.astype(x.dtype)
        for blk in self.blocks:
            t = blk.forward(t)
        t = self.unpatch.forward(self.norm.forward(t))
        feat = unpatchify(t, p, self.prows, self.pcols)
        if self.cfg.input_skip:
            feat = np.concatenate([feat, xp], axis=-1)
        out = self.head.forward(feat)
        return out[:, :self.rows, :self.cols]

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Returns the gradient with respect to the input raster."""
        p = self.cfg.patch
        n = dlogits.shape[0]
        d = np.zeros((n, self.prows, self.pcols, dlogits.shape[3]), dtype=dlogits.dtype)
        d[:, :self.rows, :self.cols] = dlogits
        dfeat = self.head.backward(d)
        cd = self.cfg.decoder_channels
        dskip = dfeat[..., cd:] if self.cfg.input_skip else 0.0
        dt = self.unpatch.backward(patchify(np.ascontiguousarray(dfeat[..., :cd]), p))
        dt = self.norm.backward(dt)
        for blk in reversed(self.blocks):
            dt = blk.backward(dt)
        dxp = unpatchify(self.embed.backward(dt), p, self.prows, self.pcols) + dskip
        return dxp[:, :self.rows, :self.cols]


def mae_forward(x: np.ndarray, model: MaeModel) -> np.ndarray:
    """Eval-mode logits for a single ``H x W x 4`` raster or a batch."""
    model.eval()
    if x.ndim == 3:
        return model.forward(x[None])[0]
    return model.forward(x)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def refine(x_init: np.ndarray, model: MaeModel) -> np.ndarray:
    """Refined logits ``M'`` from initial logits ``X_init`` (softmax, then the MAE)."""
    return mae_forward(F.softmax(np.asarray(x_init, dtype=model.dtype), axis=-1), model)


def pretrain_mae(gt_labels: Sequence[np.ndarray], spec: MaskSpec, model: MaeModel,
                 epochs: int = 20, lr: float = 5e-4, seed: int = 0, batch_size: int = 4,
                 class_weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS,
                 callback=None) -> list[dict]:
    """Self-supervised reconstruction of GT label rasters from masked copies.

    A fresh mask is drawn for every sample in every epoch. Each log row holds
    the mean loss, reconstruction accuracy inside the masked region and mIoU.
    """
    if len(gt_labels) == 0:
        raise ValueError("empty pretraining set")
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    weights = np.asarray(class_weights, dtype=model.dtype)
    log = []
    model.train()
    for epoch in range(1, epochs + 1):
        total, count, hit, hidden = 0.0, 0, 0, 0
        counts = np.zeros((NUM_CLASSES, 2), dtype=np.int64)
        for idx in iterate_batches(len(gt_labels), batch_size, rng):
            gt = np.stack([gt_labels[i] for i in idx])
            masks = np.stack([make_mask(spec.with_seed(rng.integers(2**31)), gt.shape[1:])
                              for _ in idx])
            x = one_hot(gt, model.dtype)
            x[masks] = one_hot(np.array(BACKGROUND), model.dtype)
            opt.zero_grad()
            logits = model.forward(x)
            loss, dlogits = F.cross_entropy(logits, gt, weights, return_grad=True)
            F.check_finite(np.asarray(loss), "pretraining loss")
            model.backward(dlogits)
            opt.step()
            pred = np.argmax(logits, axis=-1)
            hit += int(np.count_nonzero((pred == gt) & masks))
            hidden += int(masks.sum())
            total += loss * len(idx)
            count += len(idx)
            counts += confusion_counts(pred, gt)
        ious = iou_from_counts(counts)
        row = {"epoch": epoch, "loss": total / count,
               "masked_accuracy": hit / hidden if hidden else 1.0,
               **{f"iou_{i}": float(v) for i, v in enumerate(ious)},
               "miou": float(ious.mean())}
        log.append(row)
        if callback is not None:
            callback(row)
    model.eval()
    return log


def joint_forward(fusion: FusionModel, mae: MaeModel, obs: np.ndarray, sd: np.ndarray):
    x_init = fusion.forward(obs, sd)
    probs = F.softmax(x_init, axis=-1)
    return x_init, probs, mae.forward(probs)


def joint_backward(fusion: FusionModel, mae: MaeModel, probs: np.ndarray, dlogits: np.ndarray,
                   freeze_fusion: bool = False) -> None:
    dprobs = mae.backward(dlogits)
    if not freeze_fusion:
        fusion.backward(softmax_backward(probs, dprobs))


def finetune(fusion: FusionModel, mae: MaeModel, samples: Sequence[FusionSample],
             epochs: int = 10, lr: float = 5e-4, seed: int = 0, batch_size: int = 4,
             class_weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS,
             freeze_fusion: bool = False, callback=None) -> list[dict]:
    """End-to-end cross-entropy on refined logits, gradients through both stacks."""
    if not samples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    for m in fusion.modules():
        if hasattr(m, "rng"):
            m.rng = np.random.default_rng(rng.integers(2**63))
    params = mae.parameters() + ([] if freeze_fusion else fusion.parameters())
    opt = Adam(params, lr=lr)
    weights = np.asarray(class_weights, dtype=mae.dtype)
    log = []
    fusion.train(not freeze_fusion)
    mae.train()
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        counts = np.zeros((NUM_CLASSES, 2), dtype=np.int64)
        for idx in iterate_batches(len(samples), batch_size, rng):
            obs, sd, gt = stack_batch(samples, idx, fusion.dtype)
            opt.zero_grad()
            _, probs, logits = joint_forward(fusion, mae, obs, sd)
            loss, dlogits = F.cross_entropy(logits, gt, weights, return_grad=True)
            F.check_finite(np.asarray(loss), "fine-tuning loss")
            joint_backward(fusion, mae, probs, dlogits, freeze_fusion)
            opt.step()
            total += loss * len(idx)
            count += len(idx)
            counts += confusion_counts(np.argmax(logits, axis=-1), gt)
        ious = iou_from_counts(counts)
        row = {"epoch": epoch, "loss": total / count,
               **{f"iou_{i}": float(v) for i, v in enumerate(ious)},
               "miou": float(ious.mean())}
        log.append(row)
        if callback is not None:
            callback(row)
    fusion.eval()
    mae.eval()
    return log


def predict_refined(samples: Sequence[FusionSample], fusion: FusionModel, mae: MaeModel,
                    batch_size: int = 8) -> list[np.ndarray]:
    fusion.eval()
    mae.eval()
    out = []
    for idx in iterate_batches(len(samples), batch_size, None):
        obs, sd, _ = stack_batch(samples, idx, fusion.dtype)
        _, _, logits = joint_forward(fusion, mae, obs, sd)
        out.extend(list(logits))
    return out
