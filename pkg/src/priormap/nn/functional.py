"""Stateless numeric kernels. Arrays are channels-last (``N x H x W x C``)."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericError, ShapeError


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= np.sum(z, axis=axis, keepdims=True)
    return z


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def layernorm(x: np.ndarray, gain=None, bias=None, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, tuple]:
    """``N x H x W x C`` -> ``(N*Ho*Wo) x (C*k*k)`` patch matrix, ordered (c, ki, kj)."""
    n, h, w, c = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {k} larger than padded input {x.shape[1:3]}")
    if k == 1:
        cols = x[:, ::stride, ::stride, :][:, :ho, :wo, :]
        return np.ascontiguousarray(cols).reshape(n * ho * wo, c), (n, ho, wo)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # win: N x Ho x Wo x C x k x k
    return np.ascontiguousarray(win).reshape(n * ho * wo, c * k * k), (n, ho, wo)


def col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    n, h, w, c = x_shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    d = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[..., i, j]
    if padding:
        dx = dx[:, padding:padding + h, padding:padding + w, :]
    return dx


def kernel_matrix(kernels: np.ndarray) -> np.ndarray:
    """``k x k x Cin x Cout`` -> ``(Cin*k*k) x Cout`` matching :func:`im2col` order."""
    k, _, cin, cout = kernels.shape
    return kernels.transpose(2, 0, 1, 3).reshape(cin * k * k, cout)


def conv_input_grad(dy: np.ndarray, kernels: np.ndarray, x_shape: tuple, stride: int,
                    padding: int) -> np.ndarray:
    """Gradient of a convolution with respect to its input."""
    k, _, cin, cout = kernels.shape
    if stride == 1 and cout < cin and padding <= k - 1:
        # transposed convolution: correlate dy with the flipped, channel-swapped kernel
        flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2)
        cols, (n, ho, wo) = im2col(dy, k, 1, k - 1 - padding)
        dx = (cols @ kernel_matrix(flipped)).reshape(n, ho, wo, cin)
        return dx[:, :x_shape[1], :x_shape[2], :]
    dcols = dy.reshape(-1, cout) @ kernel_matrix(kernels).T
    return col2im(dcols, x_shape, k, stride, padding)


def conv2d(x: np.ndarray, kernels: np.ndarray, bias=None, stride: int = 1,
           padding: int = 0) -> np.ndarray:
    """Cross-correlation. ``x``: ``[N x] H x W x Cin``; ``kernels``: ``k x k x Cin x Cout``."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    k, k2, cin, cout = kernels.shape
    if k != k2:
        raise ShapeError(f"non-square kernel {kernels.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d input channels {x.shape} do not match kernels {kernels.shape}")
    cols, (n, ho, wo) = im2col(x, k, stride, padding)
    out = cols @ kernel_matrix(kernels)
    if bias is not None:
        out += bias
    out = out.reshape(n, ho, wo, cout)
    return out[0] if squeeze else out


def sine_positional_embedding(rows: int, cols: int, channels: int,
                              dtype=np.float64) -> np.ndarray:
    """2-D sine/cosine embedding, shape ``(rows*cols) x channels``, row-major cells.

    The first half of the channels encodes the row index, the second half the
    column index. Within a half, channel ``2i`` is ``sin(pos * f_i)`` and
    ``2i+1`` is ``cos(pos * f_i)`` with ``f_i = 10000 ** (-2i / (channels/2))``.
    """
    if channels % 4:
        raise ValueError(f"embedding channels must be divisible by 4, got {channels}")
    half = channels // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half // 2) / half)

    def axis_embed(n):
        ang = np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]
        e = np.empty((n, half))
        e[:, 0::2] = np.sin(ang)
        e[:, 1::2] = np.cos(ang)
        return e

    er, ec = axis_embed(rows), axis_embed(cols)
    pe = np.concatenate([np.repeat(er, cols, axis=0), np.tile(ec, (rows, 1))], axis=1)
    return pe.astype(dtype)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, class_weights=None,
                  return_grad: bool = False):
    """Mean of ``-w_y * log softmax(logits)_y`` over all rows.

    ``logits`` is ``... x K``; ``labels`` has the leading shape. With
    ``return_grad`` the gradient with respect to ``logits`` is also returned.
    """
    k = logits.shape[-1]
    flat = logits.reshape(-1, k)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if y.shape[0] != flat.shape[0]:
        raise ShapeError(f"labels {np.shape(labels)} do not match logits {logits.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    w = np.ones(k, dtype=logits.dtype) if class_weights is None else \
        np.asarray(class_weights, dtype=logits.dtype)
    lsm = log_softmax(flat, axis=-1)
    rows = np.arange(flat.shape[0])
    wy = w[y]
    n = flat.shape[0]
    loss = float(-(wy * lsm[rows, y]).sum() / n)
    if not return_grad:
        return loss
    grad = np.exp(lsm)
    grad[rows, y] -= 1.0
    grad *= (wy / n)[:, None]
    return loss, grad.reshape(logits.shape).astype(logits.dtype, copy=False)
