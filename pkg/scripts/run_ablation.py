#!/usr/bin/env python3
"""Train the full model and its two ablations on the same data and seed,
then print a small comparison table (full pipeline metrics on the train set)."""

import argparse

import torch

from deshadow.data import synth_dataset
from deshadow.train import TrainConfig, evaluate, train_loop

VARIANTS = (
    ("with condition", {}),
    ("w/o condition", {"ablate_condition": True}),
    ("w/o adjustment", {"ablate_adjustment": True}),
)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=8)
    parser.add_argument("--steps", type=int, default=1200)
    parser.add_argument("--resolution", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    torch.set_num_threads(1)
    data = synth_dataset(args.n, base_seed=args.seed, resolution=args.resolution)
    rows = []
    for label, flags in VARIANTS:
        cfg = TrainConfig(max_iters=args.steps, seed=args.seed,
                          resolution=args.resolution, **flags)
        print(f"--- training: {label}")
        state, _ = train_loop(cfg, data, eval_every=0, verbose=True)
        metrics = evaluate(state.model, data, seed=args.seed, eval_step=state.step)
        rows.append((label, metrics))

    print(f"\n{'variant':<16} {'psnr':>7} {'ssim':>7} {'rmse':>8}")
    for label, m in rows:
        print(f"{label:<16} {m['psnr']:>7.2f} {m['ssim']:>7.4f} {m['rmse']:>8.3f}")


if __name__ == "__main__":
    main()
