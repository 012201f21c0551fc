"""Six-way component ablation (alignment, quality weights, scale search).

Trains two small checkpoints (finetune with and without quality-aware
weights) and evaluates the Ma-Mf toggle matrix on a fast-moving synthetic
sequence. The ordering is printed; at this scale it is informative only.
"""

import argparse

from adaptalign.harness.ablation import format_ordering, run_ablation
from adaptalign.harness.config import ExperimentConfig, TrainConfig
from adaptalign.imageio import SequenceSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--frames", type=int, default=12)
    ap.add_argument("--out", default="demo_runs/ablation")
    args = ap.parse_args()

    seq = SequenceSpec(128, 96, args.frames, generator="global_shift", params={"dx": 12.0, "dy": 3.0})
    cfg = ExperimentConfig(
        sequence=seq, frames=args.frames, gop=6, channels=(8, 16, 24), seed=7,
        train=TrainConfig(steps=args.steps, finetune_steps=max(1, args.steps // 4), log_every=0),
    )
    rows = run_ablation(cfg, args.out)
    print("config  tsmc mrqa sme   bpp       PSNR")
    for r in rows:
        print(f"{r.config:6s}  {int(r.tsmc):4d} {int(r.mrqa):4d} {int(r.sme):3d}  {r.bpp:.5f}  {r.psnr:.3f}")
    print("ordering:", format_ordering(rows))


if __name__ == "__main__":
    main()
