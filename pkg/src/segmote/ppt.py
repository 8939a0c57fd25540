"""Progressive prompt tokenization: learnable queries that read the image.

During training the queries are biased by a foreground prior, either the
projected mean feature under the ground-truth mask or a class embedding
(the toy stand-in for a text prompt). At inference the prior is zero, so the
feature tokens depend on the image alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Attention, Init, LayerNorm, Linear, Module
from .tensor import Tensor

PRIOR_KINDS = ("mask", "text", "none")


class PPT(Module):
    def __init__(self, init: Init, dim: int, num_queries: int = 2, heads: int = 8,
                 num_classes: int = 2, class_std: float = 0.1):
        if num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        self.queries = init.normal(num_queries, dim)
        self.feat_norm = LayerNorm(init, dim)
        self.attn = Attention(init, dim, heads)
        self.mlp = MLP(init, [dim, 2 * dim, dim])
        self.class_embed = init.normal(num_classes, dim, std=class_std)
        self.mask_proj = Linear(init, dim, dim)

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    def __call__(self, image_emb: Tensor, prior: Tensor | None = None) -> Tensor:
        return ppt_forward(image_emb, prior, self)


@dataclass
class PromptPrior:
    kind: str
    vector: Tensor  # [B, D]


def ppt_forward(image_emb: Tensor, prior: Tensor | None, params: PPT) -> Tensor:
    """[B, HW, D] image tokens (+ optional [B, D] prior) -> [B, Q, D] feature tokens."""
    b = image_emb.shape[0]
    q, d = params.queries.shape
    queries = params.queries.reshape(1, q, d)
    if prior is not None:
        queries = queries + prior.reshape(b, 1, d)
    else:
        queries = queries + Tensor(np.zeros((b, 1, d), dtype=image_emb.dtype))
    kv = params.feat_norm(image_emb)
    attn_out = params.attn(queries, kv, kv)
    return queries + params.mlp(attn_out)


def draw_prior_kind(rng: np.random.Generator, training: bool, prior_mix: float = 0.5,
                    prior_drop: float = 0.0) -> str:
    """mask with probability prior_mix, else text; 'none' outside training.

    ``prior_drop`` additionally replaces the prior by 'none' during training.
    """
    if not training:
        return "none"
    if prior_drop > 0 and rng.random() < prior_drop:
        return "none"
    return "mask" if rng.random() < prior_mix else "text"


def prior_vectors(kind: str, image_emb: Tensor, lowres_masks: np.ndarray | None,
                  class_ids: np.ndarray, params: PPT) -> Tensor:
    """[B, D] prior for every image in the batch.

    Mask priors average the encoder features over foreground grid cells; an
    image whose foreground vanishes at grid resolution falls back to its text
    prior.
    """
    b, hw, d = image_emb.shape
    if kind == "none":
        return Tensor(np.zeros((b, d), dtype=image_emb.dtype))
    text = T.index(params.class_embed, np.asarray(class_ids, dtype=int))
    if kind == "text":
        return text
    if kind != "mask":
        raise ValueError(f"unknown prior kind {kind!r}")
    m = lowres_masks.reshape(b, hw).astype(image_emb.dtype)
    counts = m.sum(axis=1)
    empty = counts == 0
    weights = m / np.maximum(counts, 1)[:, None]
    pooled = T.matmul(Tensor(weights[:, None, :]), image_emb).reshape(b, d)
    mask_prior = params.mask_proj(pooled)
    if empty.any():
        return T.where(empty[:, None], text, mask_prior)
    return mask_prior


def sample_prior(sample, image_emb: Tensor, params: PPT, rng: np.random.Generator,
                 training: bool, prior_mix: float = 0.5, stride: int = 8) -> PromptPrior:
    """Single-sample prior; ``image_emb`` is that sample's [HW, D] tokens."""
    from .data import downsample_mask

    kind = draw_prior_kind(rng, training, prior_mix)
    emb = image_emb.reshape(1, *image_emb.shape[-2:])
    low = downsample_mask(sample.gt_mask, stride)[None] if kind == "mask" else None
    if kind == "mask" and low.sum() == 0:
        kind = "text"
    vec = prior_vectors(kind, emb, low, np.array([sample.class_id]), params)
    return PromptPrior(kind, vec)
