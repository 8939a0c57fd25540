"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints


@dataclass
class TrainConfig:
    # optimisation
    lr_init: float = 1e-4
    lr_halve_epochs: tuple[int, ...] = (7, 12)
    epochs: int = 15
    batch: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_balance: float = 0.01
    dice_smooth: float = 1e-6
    seed: int = 0
    dtype: str = "float32"
    # architecture
    dim: int = 256
    heads: int = 8
    mlp_dim: int = 512
    n_experts: int = 4
    n_expert_tokens: int = 4
    k: int = 1
    smooth_load: bool = False
    unfreeze_decoder: bool = False
    warm_start_epochs: int = 2
    ppt_enabled: bool = False
    ppt_num_queries: int = 2
    ppt_prior_mix: float = 0.5
    ppt_prior_drop: float = 0.0
    num_classes: int = 2
    # data / encoder
    encoder_seed: int = 0
    stride: int = 8
    image_size: int = 64
    channels: int = 1
    train_prompts: tuple[str, ...] = ("point", "box")
    box_jitter: float = 0.1
    # corpus used when training without an on-disk corpus
    n_modalities: int = 4
    samples_per_modality: int = 500
    data_seed: int = 7

    def __post_init__(self):
        self.lr_halve_epochs = tuple(int(e) for e in self.lr_halve_epochs)
        self.train_prompts = tuple(self.train_prompts)
        positive = ["lr_init", "epochs", "batch", "dim", "heads", "mlp_dim", "n_experts",
                    "n_expert_tokens", "k", "ppt_num_queries", "stride", "image_size", "channels",
                    "num_classes", "adam_eps"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(not 0 < e < self.epochs for e in self.lr_halve_epochs):
            raise ValueError("lr_halve_epochs must lie strictly inside (0, epochs)")
        if self.k > self.n_experts:
            raise ValueError("k cannot exceed n_experts")
        if self.lambda_balance < 0:
            raise ValueError("lambda_balance must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        for p in self.train_prompts:
            if p not in ("point", "box"):
                raise ValueError(f"train prompt {p!r} not in point/box")
        if self.image_size % self.stride:
            raise ValueError("image_size must be divisible by stride")

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during 1-based ``epoch``."""
        halvings = sum(1 for e in self.lr_halve_epochs if epoch > e)
        return self.lr_init * 0.5 ** halvings

    def replace(self, **kw) -> TrainConfig:
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _key(name: str) -> str:
    # "ppt.enabled" and "ppt_enabled" name the same field
    return name.strip().replace(".", "_").replace("-", "_")


def _parse(value: str, typ):
    value = value.strip()
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, float, str):
        return typ(value)
    # tuple[int, ...] / tuple[str, ...]
    inner = typ.__args__[0]
    return tuple(inner(v.strip()) for v in value.split(",") if v.strip())


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    hints = get_type_hints(TrainConfig)
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        name = _key(k)
        if name not in hints:
            raise ValueError(f"line {lineno}: unknown config key {k.strip()!r}")
        try:
            values[name] = _parse(v, hints[name])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: bad value for {k.strip()}: {exc}") from None
    base = base or TrainConfig()
    return dataclasses.replace(base, **values)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
