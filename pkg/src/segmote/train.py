"""Training, evaluation and routing diagnostics."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import Corpus, ManifestRow, SegmentationSample
from .losses import dice_metric
from .model import SegMoTE, make_batch
from .mote import cv_squared
from .ppt import draw_prior_kind
from .tensor import Tensor

log = logging.getLogger(__name__)

EVAL_SEED = 20240
EVAL_BATCH = 32


class TrainingDiverged(FloatingPointError):
    pass


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_seg: float
    l_balance: float
    l_total: float
    imp_cv2: float
    load_cv2: float
    # fraction of last-layer winner tokens sent to each expert over the epoch
    winner_expert_share: tuple[float, ...] = ()


@dataclass
class EvalResult:
    prompt: str
    sample_ids: list[str]
    modality: np.ndarray
    dice: np.ndarray
    winner: np.ndarray
    winner_expert: np.ndarray
    confidence: np.ndarray
    importance_cv2: float = 0.0

    def per_modality(self) -> dict[int, float]:
        return {int(m): float(self.dice[self.modality == m].mean()) for m in np.unique(self.modality)}

    @property
    def mean_dice(self) -> float:
        return float(self.dice.mean())


@dataclass
class RunReport:
    config: TrainConfig
    epochs: list[EpochRecord] = field(default_factory=list)
    evals: dict[str, EvalResult] = field(default_factory=dict)
    encoder_checksum_before: str = ""
    encoder_checksum_after: str = ""
    wall_clock: float = 0.0

    def write(self, out: Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "train_log.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "lr", "l_seg", "l_balance", "l_total", "imp_cv2", "load_cv2"]
                       + [f"winner_share_e{i}" for i in range(self.config.n_experts)])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.lr), f"{r.l_seg:.9g}", f"{r.l_balance:.9g}", f"{r.l_total:.9g}",
                            f"{r.imp_cv2:.9g}", f"{r.load_cv2:.9g}"]
                           + [f"{v:.9g}" for v in r.winner_expert_share])
        with open(out / "eval_dice.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["prompt", "modality", "n", "dice"])
            for prompt, ev in sorted(self.evals.items()):
                for m, d in sorted(ev.per_modality().items()):
                    w.writerow([prompt, m, int((ev.modality == m).sum()), f"{d:.9g}"])
                w.writerow([prompt, "all", len(ev.dice), f"{ev.mean_dice:.9g}"])
        n_tok = self.config.n_expert_tokens
        with open(out / "winner_hist.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["prompt", "modality"] + [f"token_{i}" for i in range(n_tok)])
            for prompt, ev in sorted(self.evals.items()):
                hist = winner_histogram(ev, n_tok)
                for m in sorted(hist):
                    w.writerow([prompt, m] + hist[m].tolist())
        (out / "timing.json").write_text(json.dumps({
            "wall_clock_s": self.wall_clock,
            "encoder_checksum_before": self.encoder_checksum_before,
            "encoder_checksum_after": self.encoder_checksum_after,
        }, indent=2))


# -- embedding cache -----------------------------------------------------------

def embed_samples(model: SegMoTE, samples: list[SegmentationSample], chunk: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(samples), chunk):
        imgs = np.stack([s.image for s in samples[i:i + chunk]])
        out.append(model.encode(imgs))
    return np.concatenate(out)


@dataclass
class SplitData:
    rows: list[ManifestRow]
    samples: list[SegmentationSample]
    embeddings: np.ndarray


def load_split(model: SegMoTE, corpus: Corpus, split: str) -> SplitData:
    rows = sorted(corpus.split(split), key=lambda r: r.sample_id)
    if not rows:
        raise ValueError(f"corpus has no {split!r} samples")
    samples = [corpus.load(r) for r in rows]
    return SplitData(rows, samples, embed_samples(model, samples))


# -- training -----------------------------------------------------------------

def _step_prompt(cfg: TrainConfig, rng: np.random.Generator, has_ppt: bool) -> tuple[str, str]:
    if has_ppt:
        return "none", draw_prior_kind(rng, True, cfg.ppt_prior_mix, cfg.ppt_prior_drop)
    return str(rng.choice(list(cfg.train_prompts))), "none"


def default_eval_prompts(model: SegMoTE) -> list[str]:
    return ["none"] if model.has_ppt else list(model.cfg.train_prompts)


def train(cfg: TrainConfig, corpus: Corpus, out_dir: str | Path | None = None,
          eval_prompts: list[str] | None = None, progress=None) -> tuple[SegMoTE, RunReport]:
    """Adam on every trainable decoder/PPT/expert parameter; the encoder never moves."""
    t0 = time.perf_counter()
    model = SegMoTE(cfg)
    report = RunReport(cfg, encoder_checksum_before=model.encoder.checksum())
    data = load_split(model, corpus, "train")
    params = model.parameters()
    opt = Adam(params, cfg.lr_init, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    n = len(data.samples)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_at(epoch)
        if not cfg.unfreeze_decoder and epoch == cfg.warm_start_epochs + 1:
            for p in model.head_params():
                p.requires_grad = False
                p.frozen = True
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(n)
        sums = defaultdict(float)
        winner_experts = np.zeros(cfg.n_experts)
        n_steps = 0
        for lo in range(0, n, cfg.batch):
            idx = order[lo:lo + cfg.batch]
            rng = np.random.default_rng([cfg.seed, 13, step])
            prompt_kind, prior_kind = _step_prompt(cfg, rng, model.has_ppt)
            batch = make_batch(model, [data.samples[i] for i in idx], data.embeddings[idx],
                               prompt_kind, rng, prior_kind)
            out = model.forward(batch, training=True, step=step)
            try:
                loss, seg = model.loss(out, batch)
            except FloatingPointError as exc:
                raise TrainingDiverged(_divergence_report(epoch, step, out, exc)) from exc
            if not np.isfinite(loss.data):
                raise TrainingDiverged(_divergence_report(epoch, step, out, None))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["seg"] += seg.item()
            sums["bal"] += out.balance.item()
            sums["tot"] += loss.item()
            sums["imp"] += float(np.mean([cv_squared(s.importance).item() for s in out.stats]))
            sums["load"] += float(np.mean([cv_squared(s.load).item() for s in out.stats]))
            last = out.routers[-1]
            winner_experts += np.bincount(last.expert_idx[np.arange(len(idx)), last.winner_token],
                                          minlength=cfg.n_experts)
            n_steps += 1
            step += 1
        rec = EpochRecord(epoch, opt.lr, sums["seg"] / n_steps, sums["bal"] / n_steps, sums["tot"] / n_steps,
                          sums["imp"] / n_steps, sums["load"] / n_steps,
                          tuple((winner_experts / winner_experts.sum()).tolist()))
        report.epochs.append(rec)
        log.info("epoch %d lr %.3g seg %.4f bal %.4f imp_cv2 %.4f", epoch, rec.lr, rec.l_seg,
                 rec.l_balance, rec.imp_cv2)
        if progress:
            progress(rec)
    report.encoder_checksum_after = model.encoder.checksum()
    test = load_split(model, corpus, "test")
    for prompt in eval_prompts or default_eval_prompts(model):
        report.evals[prompt] = evaluate(model, test, prompt)
    report.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        from .checkpoint import save_checkpoint

        out_dir = Path(out_dir)
        report.write(out_dir)
        save_checkpoint(model, out_dir / "model.sgmt")
    return model, report


def _divergence_report(epoch, step, out, exc) -> str:
    lines = [f"non-finite loss at epoch {epoch}, step {step}" + (f": {exc}" if exc else "")]
    for i, r in enumerate(out.routers):
        lines.append(f"  layer {i}: expert_idx={r.expert_idx.tolist()} winner={r.winner_token.tolist()} "
                     f"confidence={np.round(r.confidence.data, 4).tolist()}")
    return "\n".join(lines)


# -- evaluation -----------------------------------------------------------------

def evaluate(model: SegMoTE, data: SplitData, prompt: str) -> EvalResult:
    """Noise-free forward on every sample; prompts drawn from a fixed per-sample stream."""
    if prompt in ("none", "mask") and not model.has_ppt:
        raise ValueError(f"prompt={prompt!r} needs a PPT-enabled checkpoint")
    if prompt not in ("point", "box", "none", "mask"):
        raise ValueError(f"unknown prompt kind {prompt!r}")
    dice, winners, experts, conf, imps = [], [], [], [], []
    with T.no_grad():
        for lo in range(0, len(data.samples), EVAL_BATCH):
            samples = data.samples[lo:lo + EVAL_BATCH]
            rng = np.random.default_rng([EVAL_SEED, lo])
            kind = "none" if prompt == "mask" else prompt
            batch = make_batch(model, samples, data.embeddings[lo:lo + EVAL_BATCH], kind, rng,
                               prior_kind="mask" if prompt == "mask" else "none")
            out = model.forward(batch, training=False)
            logits = out.prediction.logits.data
            for i, s in enumerate(samples):
                dice.append(dice_metric(logits[i], s.gt_mask))
            r = out.routers[-1]
            w = r.winner_token
            winners.append(w)
            experts.append(r.expert_idx[np.arange(len(w)), w])
            conf.append(r.confidence.data[np.arange(len(w)), w])
            imps.append(r.dispatch_gates.data.reshape(-1, r.dispatch_gates.shape[-1]).sum(0))
    imp = np.sum(imps, axis=0)
    return EvalResult(prompt, [r.sample_id for r in data.rows],
                      np.array([s.modality_id for s in data.samples]), np.array(dice),
                      np.concatenate(winners), np.concatenate(experts), np.concatenate(conf),
                      float(imp.var() / (imp.mean() ** 2 + 1e-10)))


def winner_histogram(ev: EvalResult, n_tokens: int) -> dict[int, np.ndarray]:
    return {int(m): np.bincount(ev.winner[ev.modality == m], minlength=n_tokens)
            for m in np.unique(ev.modality)}


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """I(A; B) in bits from paired discrete samples."""
    a, b = np.asarray(a), np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log2(joint[nz] / (pa @ pb)[nz])).sum())


@dataclass
class RouteStats:
    histogram: dict[int, np.ndarray]
    mutual_information: float
    dominant_share: dict[int, float]
    expert_share: np.ndarray  # fraction of winners routed to each expert

    def write(self, path: Path, ev: EvalResult) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["modality_id", "sample_id", "winner_token", "expert_idx_of_winner", "confidence"])
            order = np.argsort(ev.sample_ids, kind="stable")
            for i in order:
                w.writerow([int(ev.modality[i]), ev.sample_ids[i], int(ev.winner[i]),
                            int(ev.winner_expert[i]), f"{float(ev.confidence[i]):.9g}"])


def route_stats(model: SegMoTE, ev: EvalResult) -> RouteStats:
    hist = winner_histogram(ev, model.cfg.n_expert_tokens)
    dom = {m: float(h.max() / h.sum()) for m, h in hist.items()}
    share = np.bincount(ev.winner_expert, minlength=model.cfg.n_experts) / len(ev.winner_expert)
    return RouteStats(hist, mutual_information(ev.modality, ev.winner), dom, share)


# -- parameter accounting -----------------------------------------------------

def param_group(name: str) -> str:
    if name == "expert_tokens":
        return "expert_tokens"
    if ".mote.router." in name:
        return "router"
    if ".mote.branches." in name:
        return "experts"
    if name.startswith("ppt."):
        return "ppt"
    if name.startswith("decoder.output_tokens"):
        return "output_tokens"
    if name.startswith("decoder.prompt_encoder"):
        return "prompt_encoder"
    if name.startswith("decoder.head"):
        return "head"
    return "decoder"


def count_params(model: SegMoTE) -> dict[str, int]:
    counts: dict[str, int] = defaultdict(int)
    for name, p in model.named_parameters():
        counts[param_group(name)] += p.data.size
    counts = dict(counts)
    counts["total_trainable"] = sum(counts.values())
    counts["encoder_frozen"] = model.encoder.count()
    return counts


def parameter_groups(model: SegMoTE) -> dict[str, list[Tensor]]:
    groups: dict[str, list[Tensor]] = defaultdict(list)
    for name, p in model.named_parameters():
        groups[param_group(name)].append(p)
    return dict(groups)
