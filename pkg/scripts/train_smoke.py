#!/usr/bin/env python3
"""Smoke-scale training run: 32x32 stripes, center masks, 2000 steps.

Writes checkpoints, a loss CSV, and periodic sample grids; prints progress
and the generative-path visible-l1 trajectory at the end.
"""

import argparse
import sys
import time

from picnet import data
from picnet import networks as N
from picnet import training as T
from picnet.diffcore import Rng


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--images", type=int, default=500)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--log-every", type=int, default=100)
    args = ap.parse_args(argv)

    cfg = T.TrainConfig(
        net=N.NetConfig(image_size=args.size),
        mask=data.MaskSpec(kind="center"),
        total_steps=args.steps,
        seed=args.seed,
    )
    dataset = data.gen_dataset("stripes", args.images, args.size, Rng(7))
    t0 = time.perf_counter()
    _, reports, _ = T.train(cfg, dataset, out_dir=args.out, log_every=args.log_every)
    minutes = (time.perf_counter() - t0) / 60.0

    first = reports[0].app_g
    last = min(r.app_g for r in reports[-20:])
    print(f"done in {minutes:.1f} min; app_g step0 {first:.4f} -> "
          f"best-of-last-20 {last:.4f} ({100.0 * (1.0 - last / first):.1f}% drop)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
