"""Run several pipeline configs over a range of seeds and print mean ΔMRR per config.

    python3 scripts/compare_attacks.py configs/synthetic_inference.yaml configs/synthetic_random.yaml --seeds 0 1 2
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from kgpoison.harness import load_config, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("configs", nargs="+")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    for path in args.configs:
        changes = []
        for seed in args.seeds:
            cfg = load_config(path)
            # the seed drives the synthetic KG, the trainer and the attack alike
            cfg.seed = cfg.train.seed = seed
            if cfg.dataset.synthetic is not None:
                cfg.dataset.synthetic = {**cfg.dataset.synthetic, "seed": seed}
            rep = run_pipeline(cfg, Path(args.out) / Path(path).stem / f"seed{seed}")
            changes.append(rep.delta.change)
        print(f"{Path(path).stem:30s} mean dMRR change {np.mean(changes):+.2f}% "
              f"(sd {np.std(changes):.2f}, {len(changes)} seeds)")


if __name__ == "__main__":
    main()
