"""Parameter containers and the handful of layers the decoder is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Every Tensor attribute is a parameter; Module and list-of-Module attributes nest."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.frozen = not flag

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Init:
    """Seeded parameter factory; creation order fixes the draw order."""

    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

    def normal(self, *shape, std: float = 1.0) -> Tensor:
        return Tensor((self.rng.standard_normal(shape) * std).astype(self.dtype), requires_grad=True)

    def fan_in(self, fan_in: int, fan_out: int) -> Tensor:
        return self.normal(fan_in, fan_out, std=1.0 / np.sqrt(fan_in))

    def zeros(self, *shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, *shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, init: Init, d_in: int, d_out: int, bias: bool = True):
        self.w = init.fan_in(d_in, d_out)
        if bias:
            self.b = init.zeros(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y + self.b if hasattr(self, "b") else y


class LayerNorm(Module):
    def __init__(self, init: Init, dim: int):
        self.gain = init.ones(dim)
        self.bias = init.zeros(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Stack of linear layers with GELU between them (none after the last)."""

    def __init__(self, init: Init, dims: list[int]):
        self.layers = [Linear(init, a, b) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


class Attention(Module):
    """Multi-head scaled dot-product attention with an optional narrowed inner width."""

    def __init__(self, init: Init, dim: int, heads: int, downsample: int = 1):
        inner = dim // downsample
        if inner % heads:
            raise ValueError(f"heads={heads} must divide inner dim {inner}")
        self.heads = heads
        self.q_proj = Linear(init, dim, inner)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.k_proj = Linear(init, dim, inner, bias=False)
        self.v_proj = Linear(init, dim, inner)
        self.out_proj = Linear(init, inner, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return T.transpose(x.reshape(b, n, self.heads, c // self.heads), (0, 2, 1, 3))

    def weights(self, q: Tensor, k: Tensor) -> Tensor:
        """Per-head attention probabilities [B, heads, Nq, Nk]."""
        qh, kh = self._split(self.q_proj(q)), self._split(self.k_proj(k))
        hd = qh.shape[-1]
        scores = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(hd))
        return T.softmax(scores, axis=-1)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
        attn = self.weights(q, k)
        vh = self._split(self.v_proj(v))
        o = T.matmul(attn, vh)
        b, h, n, hd = o.shape
        out = self.out_proj(T.transpose(o, (0, 2, 1, 3)).reshape(b, n, h * hd))
        return (out, attn) if return_weights else out


def multi_head_attention(q: Tensor, kv: Tensor, params: Attention) -> Tensor:
    return params(q, kv, kv)


def sinusoidal_encoding(coords: np.ndarray, dim: int) -> np.ndarray:
    """2-D sinusoidal features for (x, y) in [0, 1]; first half encodes x, second y."""
    coords = np.asarray(coords, dtype=np.float64)
    nf = dim // 4
    freqs = np.exp(np.linspace(0.0, np.log(32.0), nf)) * np.pi
    parts = []
    for axis in range(2):
        ang = coords[..., axis:axis + 1] * freqs
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=-1)


def grid_encoding(gh: int, gw: int, dim: int) -> np.ndarray:
    ys, xs = np.mgrid[0:gh, 0:gw]
    coords = np.stack([(xs + 0.5) / gw, (ys + 0.5) / gh], axis=-1).reshape(-1, 2)
    return sinusoidal_encoding(coords, dim)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows interpolate an n_in signal at n_out half-pixel-aligned sample points."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        x = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        x0 = int(np.floor(x))
        x1 = min(x0 + 1, n_in - 1)
        f = x - x0
        m[i, x0] += 1 - f
        m[i, x1] += f
    return m
