"""Train the desk-scale experiment runs and write one summary CSV per experiment.

    python3 scripts/run_experiments.py --out runs/            # everything (~50 min)
    python3 scripts/run_experiments.py --out runs/ --only prompts
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np

from segmote import experiments as X
from segmote.config import TrainConfig, load_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", help="base config file; defaults otherwise")
    ap.add_argument("--only", choices=["balance", "prompts"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = load_config(args.config) if args.config else TrainConfig()
    corpus = X.default_corpus(base)

    if args.only in (None, "prompts"):
        ppt, point = X.ppt_vs_point(corpus, base, args.out)
        X.write_summary(args.out / "prompts.csv", [point, ppt])
        rs = point.routing
        print(f"point {point.dice('point'):.4f}  box {point.dice('box'):.4f}  "
              f"ppt/none {ppt.dice('none'):.4f}")
        print(f"routing (point model): MI {rs.mutual_information:.3f} bits  "
              f"dominant {[round(v, 2) for v in rs.dominant_share.values()]}")

    if args.only in (None, "balance"):
        runs = X.balance_effect(corpus, base, seeds=tuple(args.seeds), out_dir=args.out)
        X.write_summary(args.out / "balance.csv", [r for rs in runs.values() for r in rs])
        for lam, rs in runs.items():
            med = np.median([r.final_imp_cv2 for r in rs])
            low = min(r.train_winner_share.min() for r in rs)
            print(f"lambda {lam:g}: median final importance CV^2 {med:.4f}  min expert winner share {low:.3f}")


if __name__ == "__main__":
    main()
