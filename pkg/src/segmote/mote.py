"""Mixture of Token Experts: noisy top-k routing over a bank of expert tokens.

Shapes follow the router's view of the decoder: ``x`` is [B, T, D] with T
expert tokens per image, E expert branches, k experts kept per token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Init, Module
from .tensor import Tensor

NOISE_EPS = 1e-2
CV_EPS = 1e-10


class Router(Module):
    def __init__(self, init: Init, dim: int, n_experts: int, eps_noise: float = NOISE_EPS):
        if n_experts < 1:
            raise ValueError("need at least one expert")
        if eps_noise <= 0:
            raise ValueError("eps_noise must be positive")
        self.w_gate = init.fan_in(dim, n_experts)
        self.w_noise = init.fan_in(dim, n_experts)
        self.eps_noise = eps_noise

    @property
    def n_experts(self) -> int:
        return self.w_gate.shape[1]


class ExpertBranch(Module):
    """D -> 2D -> D with GELU; one per expert, nothing shared."""

    def __init__(self, init: Init, dim: int):
        self.mlp = MLP(init, [dim, 2 * dim, dim])

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)


@dataclass
class RouterOutput:
    clean_logits: Tensor  # [B, T, E]
    noisy_logits: Tensor  # [B, T, E]
    topk_scores: Tensor  # [B, T, k]
    topk_indices: np.ndarray  # [B, T, k]
    confidence: Tensor  # [B, T]
    expert_idx: np.ndarray  # [B, T]
    token_weight: Tensor  # [B, T]
    dispatch_gates: Tensor  # [B, T, E]
    winner_token: np.ndarray  # [B]
    noise_std: Tensor | None = None  # [B, T, E], training only


@dataclass
class LoadStats:
    importance: Tensor  # [E]
    load: Tensor  # [E]
    balance_loss: Tensor  # scalar


def compute_logits(x: Tensor, router: Router) -> Tensor:
    if x.shape[-1] != router.w_gate.shape[0]:
        raise ValueError(f"token dim {x.shape[-1]} != router dim {router.w_gate.shape[0]}")
    return T.matmul(x, router.w_gate)


def add_noise(logits: Tensor, x: Tensor, router: Router, rng: np.random.Generator | None,
              training: bool) -> tuple[Tensor, Tensor | None]:
    """Noisy logits plus the per-entry noise scale (None in eval mode)."""
    if not training:
        return logits, None
    if rng is None:
        raise ValueError("training-mode routing needs an rng")
    std = T.softplus(T.matmul(x, router.w_noise)) + router.eps_noise
    z = rng.standard_normal(logits.shape).astype(logits.dtype)
    return logits + std * z, std


def route(noisy: Tensor, k: int):
    """Top-k scores/indices, confidence (best score) and the argmax expert per token."""
    e = noisy.shape[-1]
    if not 1 <= k <= e:
        raise ValueError(f"k={k} must lie in [1, {e}]")
    scores, idx = T.topk(noisy, k, axis=-1)
    confidence = T.index(scores, (..., 0))
    return scores, idx, confidence, idx[..., 0]


def token_weights(confidence: Tensor) -> tuple[Tensor, np.ndarray]:
    """Softmax of confidence across each image's tokens, and the most confident token."""
    return T.softmax(confidence, axis=1), T.argmax(confidence, axis=1)


def apply_experts(x: Tensor, expert_idx: np.ndarray, a: Tensor, branches) -> Tensor:
    """z[b, t] = a[b, t] * h^(expert_idx[b, t])(x[b, t]); only used branches run."""
    b, t, d = x.shape
    flat = x.reshape(b * t, d)
    eidx = expert_idx.reshape(-1)
    outs, order = [], []
    for e, branch in enumerate(branches):
        rows = np.nonzero(eidx == e)[0]
        if rows.size:
            outs.append(branch(T.index(flat, rows)))
            order.append(rows)
    order = np.concatenate(order)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    h = T.index(T.concat(outs, axis=0), inverse).reshape(b, t, d)
    return h * a.reshape(b, t, 1)


def dispatch_gates(scores: Tensor, indices: np.ndarray, n_experts: int) -> Tensor:
    """Softmax over each token's k kept scores, scattered to an E-wide row."""
    onehot = np.eye(n_experts, dtype=scores.dtype)[indices]  # [B, T, k, E]
    w = T.softmax(scores, axis=-1)
    return T.tsum(T.mul(w.reshape(*w.shape, 1), Tensor(onehot)), axis=-2)


def cv_squared(x: Tensor) -> Tensor:
    """Population variance over squared mean (guarded)."""
    n = x.shape[0]
    if n <= 1:
        return T.tsum(x) * 0.0
    m = T.mean(x)
    var = T.mean((x - m) * (x - m))
    return var / (m * m + CV_EPS)


def smooth_load(clean: Tensor, noisy: Tensor, std: Tensor, k: int) -> Tensor:
    """Expected per-expert selection count under the routing noise.

    P(e in top-k) = Phi((clean_e - threshold_e) / std_e) where the threshold
    is the k-th largest noisy logit among the other experts.
    """
    b, t, e = noisy.shape
    if k >= e:
        return Tensor(np.full(e, float(b * t), dtype=noisy.dtype))
    top, idx = T.topk(noisy, k + 1, axis=-1)
    in_topk = (idx[..., :k, None] == np.arange(e)).any(axis=-2)  # [B, T, E]
    thr_in = T.index(top, (..., slice(k, k + 1)))  # (k+1)-th largest
    thr_out = T.index(top, (..., slice(k - 1, k)))  # k-th largest
    thr = T.where(in_topk, thr_in, thr_out)
    prob = T.normal_cdf((clean - thr) / std)
    return T.tsum(prob.reshape(b * t, e), axis=0)


def balance_loss(gates: Tensor, load: Tensor | None = None) -> LoadStats:
    """CV^2 of importance plus CV^2 of load.

    Without an explicit ``load`` the count of nonzero gates is used, with no
    gradient (the indicator is piecewise constant).
    """
    e = gates.shape[-1]
    imp = T.tsum(gates.reshape(-1, e), axis=0)
    if load is None:
        load = Tensor((gates.data > 0).reshape(-1, e).sum(axis=0).astype(gates.dtype))
    return LoadStats(imp, load, cv_squared(imp) + cv_squared(load))


class MoTE(Module):
    def __init__(self, init: Init, dim: int, n_experts: int = 4, k: int = 1,
                 smooth_load: bool = False):
        self.router = Router(init, dim, n_experts)
        self.branches = [ExpertBranch(init, dim) for _ in range(n_experts)]
        self.k = k
        self.smooth_load = smooth_load

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None):
        return mote_forward(x, self.router, self.branches, self.k, training, rng, self.smooth_load)


def mote_forward(x: Tensor, router: Router, branches, k: int, training: bool,
                 rng: np.random.Generator | None = None, use_smooth_load: bool = False):
    clean = compute_logits(x, router)
    noisy, std = add_noise(clean, x, router, rng, training)
    scores, idx, conf, expert_idx = route(noisy, k)
    a, winner = token_weights(conf)
    z = apply_experts(x, expert_idx, a, branches)
    gates = dispatch_gates(scores, idx, router.n_experts)
    load = None
    if use_smooth_load and training:
        load = smooth_load(clean, noisy, std, k)
    stats = balance_loss(gates, load)
    out = RouterOutput(clean, noisy, scores, idx, conf, expert_idx, a, gates, winner, std)
    return z, out, stats
