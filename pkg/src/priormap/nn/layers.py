"""Layers with hand-written backward passes.

Every layer caches what it needs during ``forward`` and consumes it in
``backward``; ``backward`` accumulates into parameter gradients and returns
the gradient with respect to the layer input. Layers are single-use per
forward/backward pair, which is all the two model stacks need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..errors import DataError, ShapeError
from . import functional as F


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


class Module:
    training = False

    def __setattr__(self, key, value):
        if isinstance(value, Parameter) and not value.name:
            value.name = key
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.value)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise DataError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, p in own.items():
            v = np.asarray(state[name])
            if v.shape != p.value.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {v.shape}, model {p.value.shape}")
            p.value = v.astype(p.value.dtype).copy()
            p.grad = np.zeros_like(p.value)

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        self.weight = Parameter(_uniform(rng, (din, dout), din, dtype))
        self.bias = Parameter(_uniform(rng, (dout,), din, dtype)) if bias else None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        x2 = x.reshape(-1, x.shape[-1])
        d2 = dy.reshape(-1, dy.shape[-1])
        self.weight.grad += x2.T @ d2
        if self.bias is not None:
            self.bias.grad += d2.sum(axis=0)
        return dy @ self.weight.value.T


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, dtype=np.float32,
                 input_grad: bool = True):
        self.k, self.stride = k, stride
        self.padding = k // 2 if padding is None else padding
        self.input_grad = input_grad
        fan_in = cin * k * k
        self.weight = Parameter(_uniform(rng, (k, k, cin, cout), fan_in, dtype))
        self.bias = Parameter(_uniform(rng, (cout,), fan_in, dtype))

    def forward(self, x: np.ndarray) -> np.ndarray:
        cin, cout = self.weight.value.shape[2:]
        if x.shape[-1] != cin:
            raise ShapeError(f"conv input {x.shape} does not match {cin} channels")
        cols, (n, ho, wo) = F.im2col(x, self.k, self.stride, self.padding)
        self._cols, self._xshape = cols, x.shape
        out = cols @ F.kernel_matrix(self.weight.value)
        out += self.bias.value
        return out.reshape(n, ho, wo, cout)

    def backward(self, dy: np.ndarray) -> np.ndarray | None:
        k = self.k
        cin, cout = self.weight.value.shape[2:]
        d2 = dy.reshape(-1, cout)
        gw = (self._cols.T @ d2).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
        self.weight.grad += gw
        self.bias.grad += d2.sum(axis=0)
        self._cols = None
        if not self.input_grad:
            return None
        if k == 1:
            n, h, w, _ = self._xshape
            dx = np.zeros(self._xshape, dtype=dy.dtype)
            ho, wo = dy.shape[1:3]
            dx[:, ::self.stride, ::self.stride, :][:, :ho, :wo, :] = \
                (d2 @ self.weight.value.reshape(cin, cout).T).reshape(n, ho, wo, cin)
            return dx
        return F.conv_input_grad(dy, self.weight.value, self._xshape, self.stride, self.padding)


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class GELU(Module):
    def forward(self, x):
        self._x = x
        return F.gelu(x)

    def backward(self, dy):
        return dy * F.gelu_grad(self._x)


class Upsample2x(Module):
    """Nearest-neighbour 2x upsampling of ``N x H x W x C``."""

    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, dy):
        n, h, w, c = dy.shape
        return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class ConvTranspose2x(Module):
    """Transposed conv with kernel 2 and stride 2: each input cell paints a learned 2x2 block."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(_uniform(rng, (2, 2, cin, cout), cin, dtype))
        self.bias = Parameter(_uniform(rng, (cout,), cin, dtype))

    def _matrix(self) -> np.ndarray:
        cin, cout = self.weight.value.shape[2:]
        return self.weight.value.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)

    def forward(self, x):
        n, h, w, cin = x.shape
        if cin != self.weight.value.shape[2]:
            raise ShapeError(f"transposed conv input {x.shape} does not match {self.weight.value.shape[2]} "
                             f"channels")
        cout = self.weight.value.shape[3]
        self._x = x
        z = (x @ self._matrix()).reshape(n, h, w, 2, 2, cout)
        return z.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, cout) + self.bias.value

    def backward(self, dy):
        x = self._x
        n, h, w, cin = x.shape
        cout = dy.shape[-1]
        dz = dy.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, 4 * cout)
        self.bias.grad += dy.reshape(-1, cout).sum(axis=0)
        dm = x.reshape(-1, cin).T @ dz.reshape(-1, 4 * cout)
        self.weight.grad += dm.reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)
        return dz @ self._matrix().T


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * rstd
        self._xhat, self._rstd = xhat, rstd
        return xhat * self.gain.value + self.bias.value

    def backward(self, dy):
        xhat, rstd = self._xhat, self._rstd
        c = xhat.shape[-1]
        self.gain.grad += (dy * xhat).reshape(-1, c).sum(axis=0)
        self.bias.grad += dy.reshape(-1, c).sum(axis=0)
        g = dy * self.gain.value
        return rstd * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=-1, keepdims=True))


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate, self.rng = rate, rng

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 4
    model_dim: int = 64
    head_dim: int = 16
    num_layers: int = 2
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.num_heads * self.head_dim != self.model_dim:
            raise ValueError(f"num_heads*head_dim = {self.num_heads}*{self.head_dim} "
                             f"!= model_dim {self.model_dim}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections and an output projection.

    ``forward(xq, xkv)`` takes ``N x nq x C`` queries and ``N x nk x C`` key/value
    sources; pass ``xkv=None`` for self-attention.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads, self.dim = heads, dim
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.last_weights = None

    def _split(self, x):
        n, l, _ = x.shape
        return x.reshape(n, l, self.heads, -1).transpose(0, 2, 1, 3)

    def _merge(self, x):
        n, h, l, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(n, l, h * d)

    def forward(self, xq, xkv=None):
        self._self = xkv is None
        if xkv is None:
            xkv = xq
        q = self._split(self.q.forward(xq))
        k = self._split(self.k.forward(xkv))
        v = self._split(self.v.forward(xkv))
        scale = 1.0 / math.sqrt(q.shape[-1])
        a = F.softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1)
        self._q, self._k, self._v, self._a, self._scale = q, k, v, a, scale
        self.last_weights = a
        return self.proj.forward(self._merge(a @ v))

    def backward(self, dy):
        q, k, v, a, scale = self._q, self._k, self._v, self._a, self._scale
        do = self._split(self.proj.backward(dy))
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dxq = self.q.backward(self._merge(dq))
        dxkv = self.k.backward(self._merge(dk)) + self.v.backward(self._merge(dv))
        self._q = self._k = self._v = self._a = None
        if self._self:
            return dxq + dxkv, None
        return dxq, dxkv


class CrossAttentionLayer(Module):
    """``layernorm(Q + Dropout(Proj(Concat_i CA_i(Q, F))))``."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32):
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, rng, dtype)
        self.drop = Dropout(cfg.dropout_rate, np.random.default_rng(rng.integers(2**63)))
        self.norm = LayerNorm(cfg.model_dim, dtype)

    def forward(self, q, f):
        return self.norm.forward(q + self.drop.forward(self.attn.forward(q, f)))

    def backward(self, dy):
        dz = self.norm.backward(dy)
        dq, df = self.attn.backward(self.drop.backward(dz))
        return dz + dq, df


class TransformerBlock(Module):
    """Pre-norm self-attention block with a GELU MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2,
                 dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Sequential(Linear(dim, dim * mlp_ratio, rng, dtype), GELU(),
                              Linear(dim * mlp_ratio, dim, rng, dtype))

    def forward(self, x):
        x = x + self.attn.forward(self.norm1.forward(x))
        return x + self.mlp.forward(self.norm2.forward(x))

    def backward(self, dy):
        dx = dy + self.norm2.backward(self.mlp.backward(dy))
        da, _ = self.attn.backward(dx)
        return dx + self.norm1.backward(da)
