"""Write a synthetic images/ + masks/ dataset for trying the CLI end to end.

    python scripts/make_synthetic_dataset.py --out data/synthetic --slices 40 --subjects 10
"""

import argparse

from d2aunet.data import synthetic_samples, write_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/synthetic")
    ap.add_argument("--slices", type=int, default=40)
    ap.add_argument("--subjects", type=int, default=10)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bits", type=int, default=16, choices=[8, 16])
    args = ap.parse_args()
    samples = synthetic_samples(args.slices, args.size, args.seed, subjects=args.subjects)
    root = write_dataset(samples, args.out, args.bits)
    print(f"wrote {len(samples)} slices from {args.subjects} subjects to {root}")


if __name__ == "__main__":
    main()
