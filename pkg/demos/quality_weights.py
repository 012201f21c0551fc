"""Quality-aware frame weights over a rollout.

The base pattern gives every seventh frame (and the fifth) a larger weight.
Modulation shifts weight toward frames that follow a quality drop and away
from frames that just gained quality. A constant trace leaves the pattern
untouched.
"""

import argparse

import numpy as np

from adaptalign.mrqa import MrqaState, schedule_table, weight_bounds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lam", type=float, default=1024.0)
    ap.add_argument("--frames", type=int, default=15)
    args = ap.parse_args()

    flat = [32.0] * args.frames
    k = np.arange(args.frames)
    sawtooth = (32.0 - 0.25 * (k % 7) + np.where(k % 7 == 0, 1.0, 0.0)).tolist()

    for name, trace in (("constant", flat), ("decaying GOP", sawtooth)):
        state = MrqaState(args.lam, 2048.0)
        print(f"\n{name} trace, lambda {args.lam:g}")
        print(" idx   psnr    dQ    weight   bounds")
        for i, row in enumerate(schedule_table(trace, state)):
            lo, hi = weight_bounds(i, state)
            print(f" {row['frame_idx']:3d}  {row['psnr']:5.2f}  {row['delta_q']:+.2f}  {row['weight']:.4f}  [{lo:.2f}, {hi:.2f}]")


if __name__ == "__main__":
    main()
