"""Desk-scale experiments: balance effect, modality specialization, PPT vs point prompts.

Shared by the ``scripts/`` runners and the acceptance tests so both measure
the same thing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import Corpus, in_memory_corpus
from .model import SegMoTE
from .train import RouteStats, RunReport, route_stats, train


@dataclass
class RunSummary:
    name: str
    config: TrainConfig
    report: RunReport
    model: SegMoTE = field(repr=False)
    routing: RouteStats | None = None  # on the first evaluated prompt

    @property
    def final_imp_cv2(self) -> float:
        return self.report.epochs[-1].imp_cv2

    @property
    def train_winner_share(self) -> np.ndarray:
        """Per-expert share of winner tokens over the last training epoch."""
        return np.asarray(self.report.epochs[-1].winner_expert_share)

    def dice(self, prompt: str) -> float:
        return self.report.evals[prompt].mean_dice

    def row(self) -> dict:
        r = {"run": self.name, "seed": self.config.seed, "lambda": self.config.lambda_balance,
             "final_imp_cv2": f"{self.final_imp_cv2:.6f}", "wall_clock_s": f"{self.report.wall_clock:.1f}"}
        for p, ev in sorted(self.report.evals.items()):
            r[f"dice_{p}"] = f"{ev.mean_dice:.6f}"
        if self.routing is not None:
            r["mi_bits"] = f"{self.routing.mutual_information:.6f}"
            r["min_dominant_share"] = f"{min(self.routing.dominant_share.values()):.6f}"
            r["eval_winner_share"] = " ".join(f"{s:.4f}" for s in self.routing.expert_share)
        r["train_winner_share"] = " ".join(f"{s:.4f}" for s in self.train_winner_share)
        return r


def default_corpus(cfg: TrainConfig | None = None) -> Corpus:
    cfg = cfg or TrainConfig()
    return in_memory_corpus(cfg.n_modalities, cfg.samples_per_modality, cfg.data_seed, size=cfg.image_size)


def run(name: str, cfg: TrainConfig, corpus: Corpus, out_dir: Path | None = None,
        eval_prompts: list[str] | None = None) -> RunSummary:
    model, report = train(cfg, corpus, out_dir / name if out_dir else None, eval_prompts)
    first = next(iter(report.evals.values()))
    return RunSummary(name, cfg, report, model, route_stats(model, first))


def balance_effect(corpus: Corpus, base: TrainConfig | None = None, seeds=(1, 2, 3),
                   lambdas=(0.0, 0.01), out_dir: Path | None = None) -> dict[float, list[RunSummary]]:
    """Same corpus and budget, varying only the balance weight and the seed.

    With k=1 the dispatch gate of every token is exactly 1 and the indicator
    load is piecewise constant, so the balance term only reaches the router
    through the smooth load estimator; it is switched on for every run here.
    """
    base = (base or TrainConfig()).replace(smooth_load=True)
    out: dict[float, list[RunSummary]] = {}
    for lam in lambdas:
        out[lam] = [run(f"balance_l{lam:g}_s{s}", base.replace(lambda_balance=lam, seed=s), corpus, out_dir)
                    for s in seeds]
    return out


def ppt_vs_point(corpus: Corpus, base: TrainConfig | None = None,
                 out_dir: Path | None = None) -> tuple[RunSummary, RunSummary]:
    """A PPT model evaluated without prompts and a point/box model, same budget."""
    base = base or TrainConfig()
    point = run("point_baseline", base.replace(ppt_enabled=False), corpus, out_dir, ["point", "box"])
    ppt = run("ppt", base.replace(ppt_enabled=True), corpus, out_dir, ["none"])
    return ppt, point


def write_summary(path: Path, runs: list[RunSummary]) -> None:
    rows = [r.row() for r in runs]
    keys = list(dict.fromkeys(k for r in rows for k in r))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
