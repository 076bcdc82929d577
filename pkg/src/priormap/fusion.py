"""SD-map prior fusion network producing the initial segmentation ``X_init``.

Pipeline per scene: observation raster -> conv encoder (B) -> strided
downsampler (B_small) -> BEV queries (flatten + sine embedding) -> stacked
cross-attention over SD prior tokens -> upsampling segmentation head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .grid import NUM_CLASSES, GridSpec, one_hot
from .nn import functional as F
from .nn.layers import (AttentionConfig, Conv2d, ConvTranspose2x, CrossAttentionLayer, Module,
                        ReLU, Sequential)

FUSION_MODES = ("none", "simply-concat", "cnn-concat", "cross-attention")


@dataclass(frozen=True)
class FusionConfig:
    grid: GridSpec
    downsample_factor: int = 4
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    mode: str = "cross-attention"
    encoder_channels: int = 8
    positional_embedding: bool = True
    skip_connection: bool = True
    num_classes: int = NUM_CLASSES
    local_attention_init: bool = True

    def __post_init__(self):
        d = self.downsample_factor
        if d < 1 or d & (d - 1):
            raise ValueError(f"downsample factor must be a power of two, got {d}")
        if self.grid.rows % d or self.grid.cols % d:
            raise ValueError(f"downsample factor {d} does not divide grid "
                             f"{self.grid.rows}x{self.grid.cols}")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}")
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}; expected one of {FUSION_MODES}")

    @property
    def small_grid(self) -> GridSpec:
        return self.grid.downsample(self.downsample_factor)


QK_INIT_GAIN = 4.0


def init_local_attention(attn) -> None:
    """Start the attention branch as a no-op that looks near each query's own cell.

    Query/key projections become a scaled identity, so q.k contains the
    positional-embedding dot product, which peaks at zero offset. A zero output
    projection makes the fused features equal the no-prior path until training
    moves it. From a random init the model needs many epochs just to learn
    where to look.
    """
    for lin in (attn.q, attn.k):
        w = lin.weight.value
        lin.weight.value = (QK_INIT_GAIN * np.eye(w.shape[0], w.shape[1])).astype(w.dtype)
        lin.bias.value = np.zeros_like(lin.bias.value)
    attn.proj.weight.value = np.zeros_like(attn.proj.weight.value)
    attn.proj.bias.value = np.zeros_like(attn.proj.bias.value)


class FusionModel(Module):
    def __init__(self, cfg: FusionConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, enc = cfg.attention.model_dim, cfg.encoder_channels
        nout = cfg.num_classes + 1
        stages = int(math.log2(cfg.downsample_factor))

        self.encoder = Sequential(Conv2d(nout, enc, 3, rng, dtype=dtype, input_grad=False), ReLU())

        chans = [enc] + [min(c, enc * 2 ** (i + 1)) for i in range(stages)]
        chans[-1] = c
        if stages == 0:
            self.downsampler = Sequential(Conv2d(enc, c, 3, rng, dtype=dtype), ReLU())
        else:
            layers = []
            for a, b in zip(chans[:-1], chans[1:]):
                layers += [Conv2d(a, b, 3, rng, stride=2, dtype=dtype), ReLU()]
            self.downsampler = Sequential(*layers)

        self.sd_encoder = Sequential(Conv2d(1, c // 2, 3, rng, dtype=dtype), ReLU(),
                                     Conv2d(c // 2, c, 3, rng, dtype=dtype))
        self.attention = [CrossAttentionLayer(cfg.attention, rng, dtype)
                          for _ in range(cfg.attention.num_layers)]
        if cfg.local_attention_init:
            for layer in self.attention:
                init_local_attention(layer.attn)
        if cfg.mode == "simply-concat":
            self.concat_proj = Sequential(Conv2d(c + 1, c, 1, rng, dtype=dtype), ReLU())
        elif cfg.mode == "cnn-concat":
            self.concat_proj = Sequential(Conv2d(2 * c, c, 1, rng, dtype=dtype), ReLU())

        head = []
        ch = c
        for i in range(stages):
            nxt = max(enc, ch // 2)
            head += [Conv2d(ch, nxt, 3, rng, dtype=dtype), ReLU(), ConvTranspose2x(nxt, nxt, rng, dtype)]
            ch = nxt
        self.head_up = Sequential(*head)
        # full-resolution layers stay 1x1: im2col at H x W dominates the cost otherwise
        self.head_out = Conv2d(ch + (enc if cfg.skip_connection else 0), nout, 1, rng, dtype=dtype)
        small = cfg.small_grid
        self._pe = F.sine_positional_embedding(small.rows, small.cols, c)

    @property
    def dtype(self):
        return self.head_out.weight.value.dtype

    def _embed(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        flat = x.reshape(n, h * w, c)
        if self.cfg.positional_embedding:
            pe = self._pe if self._pe.shape[0] == h * w else F.sine_positional_embedding(h, w, c)
            flat = flat + pe.astype(x.dtype)
        return flat

    # individual stages -------------------------------------------------
    def encode_observation(self, obs: np.ndarray) -> np.ndarray:
        g = self.cfg.grid
        if obs.shape[1:] != (g.rows, g.cols, self.cfg.num_classes + 1):
            raise ShapeError(f"observation {obs.shape[1:]} does not match grid "
                             f"{g.rows}x{g.cols}x{self.cfg.num_classes + 1}")
        return self.encoder.forward(obs)

    def downsample_bev(self, b: np.ndarray) -> np.ndarray:
        return self.downsampler.forward(b)

    def build_queries(self, b_small: np.ndarray) -> np.ndarray:
        return self._embed(b_small)

    def encode_sd_tokens(self, sd_raster: np.ndarray) -> np.ndarray:
        small = self.cfg.small_grid
        if sd_raster.shape[1:] != (small.rows, small.cols, 1):
            raise ShapeError(f"SD raster {sd_raster.shape[1:]} does not match downsampled grid "
                             f"{small.rows}x{small.cols}x1")
        return self._embed(self.sd_encoder.forward(sd_raster))

    def fuse(self, q: np.ndarray, f_sd: np.ndarray | None) -> np.ndarray:
        for layer in self.attention:
            if f_sd is None:
                q = layer.norm.forward(q)
            else:
                q = layer.forward(q, f_sd)
        return q

    def seg_head(self, b_improved: np.ndarray, skip: np.ndarray | None) -> np.ndarray:
        x = self.head_up.forward(b_improved)
        if self.cfg.skip_connection:
            x = np.concatenate([x, skip], axis=-1)
        return self.head_out.forward(x)

    # full pass ----------------------------------------------------------
    def forward(self, obs: np.ndarray, sd_raster: np.ndarray | None) -> np.ndarray:
        """``obs``: ``N x H x W x 4``; ``sd_raster``: ``N x H/d x W/d x 1``. Returns logits."""
        mode = self.cfg.mode
        b = self.encode_observation(obs)
        small = self.downsample_bev(b)
        n, h, w, c = small.shape
        self._small_shape = small.shape
        if mode == "cross-attention" or mode == "none":
            q = self.build_queries(small)
            f_sd = self.encode_sd_tokens(sd_raster) if mode == "cross-attention" else None
            improved = self.fuse(q, f_sd).reshape(n, h, w, c)
        elif mode == "simply-concat":
            improved = self.concat_proj.forward(np.concatenate([small, sd_raster.astype(small.dtype)], -1))
        else:
            feats = self.sd_encoder.forward(sd_raster)
            improved = self.concat_proj.forward(np.concatenate([small, feats], -1))
        return self.seg_head(improved, b)

    def backward(self, dlogits: np.ndarray) -> None:
        mode = self.cfg.mode
        n, h, w, c = self._small_shape
        dx = self.head_out.backward(dlogits)
        dskip = None
        if self.cfg.skip_connection:
            cs = self.cfg.encoder_channels
            dx, dskip = dx[..., :-cs], dx[..., -cs:]
        dimp = self.head_up.backward(dx)
        if mode == "cross-attention" or mode == "none":
            dq = dimp.reshape(n, h * w, c)
            dtokens = None
            for layer in reversed(self.attention):
                if mode == "none":
                    dq = layer.norm.backward(dq)
                else:
                    dq, df = layer.backward(dq)
                    dtokens = df if dtokens is None else dtokens + df
            dsmall = dq.reshape(n, h, w, c)
            if dtokens is not None:
                self.sd_encoder.backward(dtokens.reshape(n, h, w, c))
        else:
            dcat = self.concat_proj.backward(dimp)
            dsmall = dcat[..., :c]
            if mode == "cnn-concat":
                self.sd_encoder.backward(dcat[..., c:])
        db = self.downsampler.backward(dsmall)
        if dskip is not None:
            db = db + dskip
        self.encoder.backward(db)


def one_hot_batch(labels: np.ndarray, dtype=np.float32) -> np.ndarray:
    return one_hot(labels, dtype)


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per foreground class ``[intersection, union]`` counts, shape ``Nc x 2``."""
    out = np.zeros((NUM_CLASSES, 2), dtype=np.int64)
    for c in range(NUM_CLASSES):
        p, g = pred == c, gt == c
        out[c, 0] = np.count_nonzero(p & g)
        out[c, 1] = np.count_nonzero(p | g)
    return out


def iou_from_counts(counts: np.ndarray) -> np.ndarray:
    inter, union = counts[:, 0], counts[:, 1]
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


@dataclass
class FusionSample:
    """Training example: observation labels, GT labels and the SD raster at ``H/d x W/d``."""

    obs: np.ndarray
    gt: np.ndarray
    sd: np.ndarray


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def stack_batch(samples: Sequence[FusionSample], idx, dtype):
    obs = one_hot(np.stack([samples[i].obs for i in idx]), dtype)
    sd = np.stack([samples[i].sd for i in idx]).astype(dtype)
    gt = np.stack([samples[i].gt for i in idx])
    return obs, sd, gt


DEFAULT_CLASS_WEIGHTS = (2.0, 2.0, 2.0, 1.0)


def train_fusion(samples: Sequence[FusionSample], model: FusionModel, epochs: int,
                 lr: float = 5e-4, seed: int = 0, batch_size: int = 4,
                 class_weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS,
                 callback=None, warmup_epochs: float = 1.0) -> list[dict]:
    """Adam on pixel-wise cross-entropy of ``X_init`` against GT labels.

    The learning rate ramps linearly from 0 over the first ``warmup_epochs``;
    full-rate steps on a fresh network kill many head ReLUs.
    Returns one log row per epoch with the mean loss and the epoch's
    accumulated per-class IoU / mIoU on the training predictions.
    """
    from .nn.optim import Adam

    if not samples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    for m in model.modules():
        if hasattr(m, "rng"):
            m.rng = np.random.default_rng(rng.integers(2**63))
    opt = Adam(model.parameters(), lr=lr)
    warmup = warmup_epochs * math.ceil(len(samples) / batch_size)
    weights = np.asarray(class_weights, dtype=model.dtype)
    log = []
    model.train()
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        counts = np.zeros((NUM_CLASSES, 2), dtype=np.int64)
        for idx in iterate_batches(len(samples), batch_size, rng):
            obs, sd, gt = stack_batch(samples, idx, model.dtype)
            opt.zero_grad()
            logits = model.forward(obs, sd)
            loss, dlogits = F.cross_entropy(logits, gt, weights, return_grad=True)
            F.check_finite(np.asarray(loss), "training loss")
            model.backward(dlogits)
            opt.lr = lr * min(1.0, (opt.state.step + 1) / warmup) if warmup > 0 else lr
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
    model.eval()
    return log


def predict_fusion(samples: Sequence[FusionSample], model: FusionModel,
                   batch_size: int = 8) -> list[np.ndarray]:
    """Eval-mode logits for each sample."""
    model.eval()
    out = []
    for idx in iterate_batches(len(samples), batch_size, None):
        obs, sd, _ = stack_batch(samples, idx, model.dtype)
        logits = model.forward(obs, sd)
        out.extend(list(logits))
    return out


def baseline_config(cfg: FusionConfig) -> FusionConfig:
    """Same architecture with the cross-attention blocks bypassed."""
    return replace(cfg, mode="none")
