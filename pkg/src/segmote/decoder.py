"""Two-way mask decoder hosting output, prompt, feature and expert tokens."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mote import MoTE
from .nn import MLP, Attention, Init, LayerNorm, Module, bilinear_matrix, grid_encoding, sinusoidal_encoding
from .tensor import Tensor

NUM_OUTPUT_TOKENS = 4
SEGMENTS = ("output", "prompt", "feature", "expert")


@dataclass
class TokenSequence:
    tokens: Tensor  # [B, L, D]
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def span(self, name: str) -> tuple[int, int]:
        return self.spans[name]

    def segment(self, name: str) -> Tensor:
        lo, hi = self.spans[name]
        return T.index(self.tokens, (slice(None), slice(lo, hi)))

    def replace(self, name: str, new: Tensor) -> TokenSequence:
        lo, hi = self.spans[name]
        if new.shape[1] != hi - lo:
            raise ValueError(f"segment {name} has length {hi - lo}, got {new.shape[1]}")
        parts = []
        if lo > 0:
            parts.append(T.index(self.tokens, (slice(None), slice(0, lo))))
        parts.append(new)
        if hi < self.tokens.shape[1]:
            parts.append(T.index(self.tokens, (slice(None), slice(hi, None))))
        tokens = T.concat(parts, axis=1) if len(parts) > 1 else new
        return TokenSequence(tokens, dict(self.spans))

    def __len__(self) -> int:
        return self.tokens.shape[1]


def _batched(x: Tensor | None, b: int, d: int, dtype) -> Tensor:
    if x is None:
        return Tensor(np.zeros((b, 0, d), dtype=dtype))
    if x.ndim == 2:
        return T.mul(x.reshape(1, *x.shape), Tensor(np.ones((b, 1, 1), dtype=dtype)))
    return x


def assemble_tokens(output: Tensor, prompt: Tensor | None, feature: Tensor | None,
                    expert: Tensor, batch: int | None = None) -> TokenSequence:
    """Concatenate segments along the sequence axis in fixed order.

    2-D segments ([n, D]) are shared across the batch; 3-D ones are per image.
    """
    d = output.shape[-1]
    segs = {"output": output, "prompt": prompt, "feature": feature, "expert": expert}
    for name, s in segs.items():
        if s is not None and s.shape[-1] != d:
            raise ValueError(f"{name} tokens have dim {s.shape[-1]}, expected {d}")
    if batch is None:
        batch = next((s.shape[0] for s in segs.values() if s is not None and s.ndim == 3), 1)
    parts, spans, pos = [], {}, 0
    for name in SEGMENTS:
        t = _batched(segs[name], batch, d, output.dtype)
        spans[name] = (pos, pos + t.shape[1])
        pos += t.shape[1]
        if t.shape[1]:
            parts.append(t)
    return TokenSequence(T.concat(parts, axis=1), spans)


class PromptEncoder(Module):
    """Points and boxes -> positional encoding plus a learned type embedding."""

    def __init__(self, init: Init, dim: int):
        self.point_embed = init.normal(1, dim)
        self.corner_embed = init.normal(2, dim)
        self.dim = dim

    def points(self, xy: np.ndarray, image_size: tuple[int, int]) -> Tensor:
        h, w = image_size
        xy = np.asarray(xy, dtype=np.float64)
        norm = np.stack([(xy[:, 0] + 0.5) / w, (xy[:, 1] + 0.5) / h], axis=-1)
        pe = sinusoidal_encoding(norm, self.dim).astype(self.point_embed.dtype)[:, None, :]
        return Tensor(pe) + self.point_embed.reshape(1, 1, self.dim)

    def boxes(self, boxes: np.ndarray, image_size: tuple[int, int]) -> Tensor:
        h, w = image_size
        bx = np.asarray(boxes, dtype=np.float64)
        corners = np.stack([
            np.stack([bx[:, 0] / w, bx[:, 1] / h], -1),
            np.stack([(bx[:, 2] + 1) / w, (bx[:, 3] + 1) / h], -1),
        ], axis=1)
        pe = sinusoidal_encoding(corners, self.dim).astype(self.corner_embed.dtype)
        return Tensor(pe) + self.corner_embed.reshape(1, 2, self.dim)


class DecoderLayer(Module):
    def __init__(self, init: Init, dim: int, heads: int, mlp_dim: int, n_experts: int,
                 k: int, smooth_load: bool, cross_downsample: int = 2):
        self.self_attn = Attention(init, dim, heads)
        self.norm1 = LayerNorm(init, dim)
        self.t2i = Attention(init, dim, heads, cross_downsample)
        self.norm2 = LayerNorm(init, dim)
        self.mlp = MLP(init, [dim, mlp_dim, dim])
        self.norm3 = LayerNorm(init, dim)
        self.mote = MoTE(init, dim, n_experts, k, smooth_load)
        self.norm4 = LayerNorm(init, dim)
        self.i2t = Attention(init, dim, heads, cross_downsample)
        self.norm5 = LayerNorm(init, dim)


def decoder_layer(seq: TokenSequence, image: Tensor, pe: Tensor, layer: DecoderLayer,
                  training: bool = False, rng: np.random.Generator | None = None):
    """Self-attn, token->image, MLP, MoTE on the expert span, image->token.

    Returns (tokens', image', RouterOutput, LoadStats).
    """
    q = seq.tokens
    q = layer.norm1(q + layer.self_attn(q, q, q))
    keys = image + pe
    q = layer.norm2(q + layer.t2i(q, keys, image))
    q = layer.norm3(q + layer.mlp(q))
    seq = TokenSequence(q, seq.spans)
    x = seq.segment("expert")
    z, router_out, stats = layer.mote(x, training, rng)
    seq = seq.replace("expert", layer.norm4(x + z))
    q = seq.tokens
    image = layer.norm5(image + layer.i2t(image + pe, q, q))
    return seq, image, router_out, stats


class MaskHead(Module):
    def __init__(self, init: Init, dim: int, heads: int, cross_downsample: int = 2):
        self.final_attn = Attention(init, dim, heads, cross_downsample)
        self.final_norm = LayerNorm(init, dim)
        self.mlp = MLP(init, [dim, dim, dim, dim])
        # w starts at 0 (every probability 0.5); a random start lets soft Dice
        # push all logits up together until the sigmoid saturates
        self.mlp.layers[-1].w = init.zeros(dim, dim)


@dataclass
class MaskPrediction:
    logits: Tensor  # [B, H, W]
    grid_logits: Tensor  # [B, H', W']
    winner_token: np.ndarray  # [B]

    @property
    def probabilities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))


def hypernetwork_weights(seq: TokenSequence, image: Tensor, winner: np.ndarray, head: MaskHead,
                         pe: Tensor) -> Tensor:
    """Winner token -> final token->image attention -> prediction MLP -> w [B, 1, D]."""
    b = image.shape[0]
    lo, hi = seq.span("expert")
    tok = T.index(seq.tokens, (np.arange(b), lo + winner)).reshape(b, 1, -1)
    tok = head.final_norm(tok + head.final_attn(tok, image + pe, image))
    return head.mlp(tok)


def mask_logits(w: Tensor, image: Tensor, grid: tuple[int, int], out_size: tuple[int, int]):
    """<w, image[:, h, w]> on the grid, bilinearly upsampled; returns (logits, grid_logits)."""
    b = image.shape[0]
    gh, gw = grid
    # 1/sqrt(D) keeps early Adam steps from pushing every logit into sigmoid saturation
    g = T.matmul(image, T.swapaxes(w, 1, 2)).reshape(b, gh, gw) * (1.0 / np.sqrt(w.shape[-1]))
    uh = Tensor(bilinear_matrix(out_size[0], gh).astype(image.dtype))
    uw = Tensor(bilinear_matrix(out_size[1], gw).T.astype(image.dtype))
    return T.matmul(T.matmul(uh, g), uw), g


def predict_mask(seq: TokenSequence, image: Tensor, winner: np.ndarray | None, head: MaskHead,
                 pe: Tensor, grid: tuple[int, int], out_size: tuple[int, int]) -> MaskPrediction:
    """Mask logits from the winning expert token only."""
    if winner is None:
        raise ValueError("predict_mask needs the winning token index from the last MoTE")
    lo, hi = seq.span("expert")
    winner = np.asarray(winner)
    if winner.min() < 0 or winner.max() >= hi - lo:
        raise ValueError("winner index outside the expert span")
    w = hypernetwork_weights(seq, image, winner, head, pe)
    logits, g = mask_logits(w, image, grid, out_size)
    return MaskPrediction(logits, g, winner)


def token_attention_maps(seq: TokenSequence, image: Tensor, head: MaskHead, pe: Tensor,
                         grid: tuple[int, int]) -> np.ndarray:
    """Final token->image attention of every expert token, head-averaged: [B, N, H', W']."""
    with T.no_grad():
        x = seq.segment("expert")
        att = head.final_attn.weights(x, image + pe).data  # [B, heads, N, HW]
    b, _, n, _ = att.shape
    return att.mean(axis=1).reshape(b, n, *grid)


class Decoder(Module):
    def __init__(self, init: Init, dim: int = 256, heads: int = 8, mlp_dim: int = 512,
                 n_experts: int = 4, k: int = 1, smooth_load: bool = False, n_layers: int = 2):
        self.output_tokens = init.normal(NUM_OUTPUT_TOKENS, dim)
        self.prompt_encoder = PromptEncoder(init, dim)
        self.layers = [DecoderLayer(init, dim, heads, mlp_dim, n_experts, k, smooth_load)
                       for _ in range(n_layers)]
        self.head = MaskHead(init, dim, heads)
        self.dim = dim

    def positional(self, grid: tuple[int, int], dtype) -> Tensor:
        return Tensor(grid_encoding(grid[0], grid[1], self.dim).astype(dtype)[None])
