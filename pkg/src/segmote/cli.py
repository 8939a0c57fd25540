"""Command-line entry point: ``segmote <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("segmote")


def _corpus(path: str | None, cfg):
    from .data import in_memory_corpus, open_corpus

    if path is None:
        return in_memory_corpus(cfg.n_modalities, cfg.samples_per_modality, cfg.data_seed,
                                size=cfg.image_size)
    return open_corpus(Path(path))


def cmd_gen_data(args) -> int:
    from .data import build_corpus, default_modalities, write_corpus

    mods = default_modalities(args.modalities)
    rows = build_corpus(mods, args.samples, args.split, args.seed, args.classes)
    manifest = write_corpus(Path(args.out), rows, mods, args.size, args.channels)
    n_train = sum(r.split == "train" for r in rows)
    print(f"wrote {len(rows)} samples ({n_train} train / {len(rows) - n_train} test) -> {manifest}")
    return 0


def cmd_train(args) -> int:
    from .config import TrainConfig, load_config
    from .train import train

    cfg = load_config(args.config) if args.config else TrainConfig()
    corpus = _corpus(args.data, cfg)
    out = Path(args.out)

    def progress(rec):
        print(f"epoch {rec.epoch:>2}  lr {rec.lr:.3g}  seg {rec.l_seg:.4f}  bal {rec.l_balance:.4f}  "
              f"total {rec.l_total:.4f}  imp_cv2 {rec.imp_cv2:.4f}", flush=True)

    _, report = train(cfg, corpus, out, progress=progress)
    for prompt, ev in sorted(report.evals.items()):
        print(f"test dice [{prompt}] {ev.mean_dice:.4f}  " +
              "  ".join(f"m{m}={d:.4f}" for m, d in ev.per_modality().items()))
    print(f"checkpoint -> {out / 'model.sgmt'}  ({report.wall_clock:.1f}s)")
    return 0


def _test_split(model, data_dir: str):
    from .data import open_corpus
    from .train import load_split

    return load_split(model, open_corpus(Path(data_dir)), "test")


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate

    model = load_checkpoint(args.ckpt)
    ev = evaluate(model, _test_split(model, args.data), args.prompt)
    print(f"prompt {args.prompt}  n {len(ev.dice)}  dice {ev.mean_dice:.6f}")
    for m, d in ev.per_modality().items():
        print(f"  modality {m}: {d:.6f}")
    return 0


def cmd_route_stats(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import default_eval_prompts, evaluate, route_stats

    model = load_checkpoint(args.ckpt)
    prompt = args.prompt or default_eval_prompts(model)[0]
    ev = evaluate(model, _test_split(model, args.data), prompt)
    rs = route_stats(model, ev)
    print(f"prompt {prompt}  I(modality; winner) = {rs.mutual_information:.4f} bits")
    print("modality  " + "  ".join(f"tok{i}" for i in range(model.cfg.n_expert_tokens)) + "  dominant")
    for m, h in rs.histogram.items():
        print(f"{m:>8}  " + "  ".join(f"{c:>4}" for c in h) + f"  {rs.dominant_share[m]:.3f}")
    print("expert share of winners: " + " ".join(f"{s:.3f}" for s in rs.expert_share))
    if args.csv:
        rs.write(Path(args.csv), ev)
        print(f"per-sample routing -> {args.csv}")
    return 0


def cmd_params(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import count_params

    counts = count_params(load_checkpoint(args.ckpt))
    width = max(len(k) for k in counts)
    for k, v in counts.items():
        print(f"{k:<{width}}  {v:>10,}")
    return 0


def cmd_grad_check(args) -> int:
    from .config import TrainConfig, load_config
    from .gradcheck import run

    cfg = load_config(args.config) if args.config else TrainConfig()
    ok, report = run(cfg)
    print(report)
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM, min-max scaled."""
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def cmd_attn_maps(args) -> int:
    from . import tensor as T
    from .checkpoint import load_checkpoint
    from .model import make_batch
    from .train import EVAL_SEED, default_eval_prompts

    model = load_checkpoint(args.ckpt)
    data = _test_split(model, args.data)
    prompt = args.prompt or default_eval_prompts(model)[0]
    kind = "none" if prompt == "mask" else prompt
    n = min(args.limit, len(data.samples)) if args.limit else len(data.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with T.no_grad():
        for lo in range(0, n, 32):
            hi = min(lo + 32, n)
            batch = make_batch(model, data.samples[lo:hi], data.embeddings[lo:hi], kind,
                               np.random.default_rng([EVAL_SEED, lo]),
                               prior_kind="mask" if prompt == "mask" else "none")
            fwd = model.forward(batch)
            maps = model.attention_maps(fwd)
            for i, s in enumerate(data.samples[lo:hi]):
                for t in range(maps.shape[1]):
                    name = f"{s.sample_id}_tok{t}.pgm"
                    write_pgm(out / name, maps[i, t])
                    flat = maps[i, t].reshape(-1)
                    rows.append([s.sample_id, s.modality_id, t, int(fwd.winner[i] == t),
                                 f"{flat.max():.6g}", f"{flat.min():.6g}", int(flat.argmax()), name])
    with open(out / "attention_maps.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "modality_id", "token", "is_winner", "max", "min", "argmax_cell", "file"])
        w.writerows(rows)
    print(f"wrote {len(rows)} maps for {n} samples -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segmote", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-modality corpus")
    g.add_argument("--modalities", type=int, default=4)
    g.add_argument("--samples", type=int, default=500, help="samples per modality")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--split", type=float, default=0.9, help="train fraction")
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--channels", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write report CSVs + checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", help="corpus directory; omitted -> regenerate from config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test-split Dice of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--prompt", choices=["point", "box", "mask", "none"], required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("route-stats", help="winner-token histogram per modality")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--prompt", choices=["point", "box", "mask", "none"])
    r.add_argument("--csv", help="write per-sample routing CSV here")
    r.set_defaults(func=cmd_route_stats)

    c = sub.add_parser("params", help="trainable parameter counts by module")
    c.add_argument("--ckpt", required=True)
    c.set_defaults(func=cmd_params)

    k = sub.add_parser("grad-check", help="finite-difference check of every parameter group")
    k.add_argument("--config")
    k.set_defaults(func=cmd_grad_check)

    a = sub.add_parser("attn-maps", help="per-token attention heatmaps (PGM + CSV)")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--prompt", choices=["point", "box", "mask", "none"])
    a.add_argument("--limit", type=int, default=0, help="only the first N test samples")
    a.set_defaults(func=cmd_attn_maps)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
