"""The assembled segmenter: frozen encoder, optional PPT, MoTE decoder, loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import PromptSet, downsample_mask
from .decoder import Decoder, MaskPrediction, TokenSequence, assemble_tokens, decoder_layer, predict_mask, \
    token_attention_maps
from .encoder import EncoderParams, encode_batch, init_frozen
from .losses import LossConfig, batch_dice_loss, total_loss
from .mote import LoadStats, RouterOutput
from .nn import Init, Module
from .ppt import PPT, prior_vectors
from .tensor import Tensor


@dataclass
class Batch:
    embeddings: np.ndarray  # [B, HW, D] frozen-encoder output
    masks: np.ndarray  # [B, H, W] ground truth
    class_ids: np.ndarray  # [B]
    prompt_kind: str  # point | box | none
    points: np.ndarray | None = None  # [B, 2] (x, y)
    boxes: np.ndarray | None = None  # [B, 4]
    prior_kind: str = "none"  # PPT prior: mask | text | none
    modality: np.ndarray | None = None
    sample_ids: list[str] | None = None

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class ForwardOutput:
    prediction: MaskPrediction
    routers: list[RouterOutput]
    stats: list[LoadStats]
    balance: Tensor
    tokens: TokenSequence
    image: Tensor

    @property
    def winner(self) -> np.ndarray:
        return self.routers[-1].winner_token


def noise_rng(seed: int, step: int, tensor_id: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, step, tensor id)."""
    key = np.random.SeedSequence([seed, step, tensor_id]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class SegMoTE(Module):
    def __init__(self, cfg: TrainConfig):
        init = Init(cfg.seed, np.dtype(cfg.dtype))
        d = cfg.dim
        self.expert_tokens = init.normal(cfg.n_expert_tokens, d)
        self.decoder = Decoder(init, d, cfg.heads, cfg.mlp_dim, cfg.n_experts, cfg.k, cfg.smooth_load)
        if cfg.ppt_enabled:
            self.ppt = PPT(init, d, cfg.ppt_num_queries, cfg.heads, cfg.num_classes)
        self.cfg = cfg
        self.encoder: EncoderParams = init_frozen(cfg.encoder_seed, d, cfg.stride, cfg.channels,
                                                  cfg.image_size, cfg.heads)

    @property
    def grid(self) -> tuple[int, int]:
        g = self.cfg.image_size // self.cfg.stride
        return g, g

    @property
    def has_ppt(self) -> bool:
        return hasattr(self, "ppt")

    def encode(self, images: np.ndarray) -> np.ndarray:
        return encode_batch(self.encoder, images).astype(self.cfg.dtype)

    def head_params(self) -> list[Tensor]:
        """Output tokens plus mask head: what ``unfreeze_decoder`` governs."""
        return [self.decoder.output_tokens] + self.decoder.head.parameters()

    # -- forward -----------------------------------------------------------
    def prompt_tokens(self, batch: Batch) -> Tensor | None:
        size = (self.cfg.image_size, self.cfg.image_size)
        if batch.prompt_kind == "point":
            return self.decoder.prompt_encoder.points(batch.points, size)
        if batch.prompt_kind == "box":
            return self.decoder.prompt_encoder.boxes(batch.boxes, size)
        if batch.prompt_kind == "none":
            return None
        raise ValueError(f"unknown prompt kind {batch.prompt_kind!r}")

    def feature_tokens(self, batch: Batch, image: Tensor) -> Tensor | None:
        if not self.has_ppt:
            return None
        low = None
        if batch.prior_kind == "mask":
            low = np.stack([downsample_mask(m, self.cfg.stride) for m in batch.masks])
        prior = prior_vectors(batch.prior_kind, image, low, batch.class_ids, self.ppt)
        return self.ppt(image, prior)

    def forward(self, batch: Batch, training: bool = False, step: int = 0) -> ForwardOutput:
        dtype = np.dtype(self.cfg.dtype)
        image = Tensor(batch.embeddings.astype(dtype))
        b = image.shape[0]
        pe = self.decoder.positional(self.grid, dtype)
        seq = assemble_tokens(self.decoder.output_tokens, self.prompt_tokens(batch),
                              self.feature_tokens(batch, image), self.expert_tokens, batch=b)
        routers, stats = [], []
        for i, layer in enumerate(self.decoder.layers):
            rng = noise_rng(self.cfg.seed, step, i) if training else None
            seq, image, r, s = decoder_layer(seq, image, pe, layer, training, rng)
            routers.append(r)
            stats.append(s)
        pred = predict_mask(seq, image, routers[-1].winner_token, self.decoder.head, pe, self.grid,
                            batch.masks.shape[-2:])
        balance = stats[0].balance_loss
        for s in stats[1:]:
            balance = balance + s.balance_loss
        balance = balance * (1.0 / len(stats))
        return ForwardOutput(pred, routers, stats, balance, seq, image)

    def loss(self, out: ForwardOutput, batch: Batch, lcfg: LossConfig | None = None):
        lcfg = lcfg or LossConfig(self.cfg.lambda_balance, self.cfg.dice_smooth)
        probs = T.sigmoid(out.prediction.logits)
        seg = batch_dice_loss(probs, batch.masks, lcfg.dice_smooth)
        return total_loss(seg, out.balance, lcfg), seg

    def attention_maps(self, out: ForwardOutput) -> np.ndarray:
        pe = self.decoder.positional(self.grid, out.image.dtype)
        return token_attention_maps(out.tokens, out.image, self.decoder.head, pe, self.grid)


def make_batch(model: SegMoTE, samples, embeddings: np.ndarray, prompt_kind: str,
               rng: np.random.Generator, prior_kind: str = "none") -> Batch:
    from .data import sample_prompt

    cfg = model.cfg
    points = boxes = None
    if prompt_kind in ("point", "box"):
        ps: list[PromptSet] = [sample_prompt(s, prompt_kind, rng, cfg.box_jitter, cfg.stride) for s in samples]
        if prompt_kind == "point":
            points = np.array([p.point for p in ps])
        else:
            boxes = np.array([p.box for p in ps])
    return Batch(
        embeddings=embeddings,
        masks=np.stack([s.gt_mask for s in samples]),
        class_ids=np.array([s.class_id for s in samples]),
        prompt_kind=prompt_kind, points=points, boxes=boxes, prior_kind=prior_kind,
        modality=np.array([s.modality_id for s in samples]),
        sample_ids=[s.sample_id for s in samples],
    )
