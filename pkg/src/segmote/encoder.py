"""Frozen image encoder standing in for a pretrained ViT backbone.

Patch embedding, learned-free positional grid, two pre-norm mixing blocks
(attention + MLP), all drawn from a seeded Gaussian and then made read-only.
Pure numpy: nothing here ever joins an autograd graph.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

INIT_STD = 0.02
# fixed pixel normalisation applied before patch embedding
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class EncoderParams:
    patch_w: np.ndarray  # [P*P*C, D]
    patch_b: np.ndarray  # [D]
    pos: np.ndarray  # [H'*W', D]
    qkv_w: np.ndarray  # [2, D, 3D]
    proj_w: np.ndarray  # [2, D, D]
    mlp_w1: np.ndarray  # [2, D, 2D]
    mlp_w2: np.ndarray  # [2, 2D, D]
    stride: int
    channels: int
    grid: int
    dim: int
    heads: int

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), np.ndarray)}

    @property
    def frozen(self) -> bool:
        return all(not a.flags.writeable for a in self.arrays().values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, a in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return sum(a.size for a in self.arrays().values())


def init_frozen(seed: int, dim: int = 256, stride: int = 8, channels: int = 1,
                image_size: int = 64, heads: int = 8) -> EncoderParams:
    rng = np.random.default_rng([seed, 0x5E6])
    grid = image_size // stride
    pd = stride * stride * channels

    def g(*shape):
        a = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
        a.flags.writeable = False
        return a

    return EncoderParams(
        patch_w=g(pd, dim), patch_b=g(dim), pos=g(grid * grid, dim),
        qkv_w=g(2, dim, 3 * dim), proj_w=g(2, dim, dim),
        mlp_w1=g(2, dim, 2 * dim), mlp_w2=g(2, 2 * dim, dim),
        stride=stride, channels=channels, grid=grid, dim=dim, heads=heads,
    )


def _ln(x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def encode_batch(p: EncoderParams, images: np.ndarray) -> np.ndarray:
    """[B, C, H, W] -> token-major embeddings [B, H'*W', D]."""
    b, c, h, w = images.shape
    s = p.stride
    if h % s or w % s:
        raise ValueError(f"image {h}x{w} not divisible by stride {s}")
    if c != p.channels:
        raise ValueError(f"expected {p.channels} channels, got {c}")
    gh, gw = h // s, w // s
    if gh * gw != p.pos.shape[0]:
        raise ValueError(f"encoder grid built for {p.grid}x{p.grid}, image gives {gh}x{gw}")
    patches = images.reshape(b, c, gh, s, gw, s).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, -1)
    # without centering every patch shares a large common component and the
    # embeddings of different modalities become nearly parallel
    patches = (patches.astype(np.float32) - PIXEL_MEAN) / PIXEL_STD
    x = patches @ p.patch_w + p.patch_b + p.pos
    d, nh = p.dim, p.heads
    hd = d // nh
    for i in range(2):
        qkv = _ln(x) @ p.qkv_w[i]
        q, k, v = (qkv[..., j * d:(j + 1) * d].reshape(b, -1, nh, hd).transpose(0, 2, 1, 3) for j in range(3))
        att = _softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd))
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, -1, d)
        x = x + o @ p.proj_w[i]
        x = x + _gelu(_ln(x) @ p.mlp_w1[i]) @ p.mlp_w2[i]
    return _ln(x).astype(np.float32)


def encode(p: EncoderParams, image: np.ndarray) -> np.ndarray:
    """[C, H, W] -> ImageEmbedding grid [D, H', W']."""
    tok = encode_batch(p, image[None])[0]
    gh, gw = image.shape[1] // p.stride, image.shape[2] // p.stride
    return tok.T.reshape(p.dim, gh, gw)
