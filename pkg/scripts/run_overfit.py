"""Memorise the 4-slice synthetic fixture and report steps-to-Dice-0.95.

    python scripts/run_overfit.py [--seed 1] [--steps 300]
"""

import argparse
import time

from d2aunet.config import load_config
from d2aunet.data import synthetic_samples
from d2aunet.train import overfit


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/overfit.cfg")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--steps", type=int, default=300)
    args = ap.parse_args()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    start = time.perf_counter()
    res = overfit(synthetic_samples(4, 64, seed=0), cfg, args.steps)
    print(f"seed {cfg.seed}: dice {res.dice:.4f} after {res.steps} steps "
          f"(loss {res.losses[0]:.3f} -> {res.losses[-1]:.3f}, {time.perf_counter() - start:.0f}s)")


if __name__ == "__main__":
    main()
