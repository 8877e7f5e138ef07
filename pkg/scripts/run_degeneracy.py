#!/usr/bin/env python3
"""Run the prior-collapse degeneracy study and print its markdown summary."""

import argparse
import sys
import time

from picnet import degeneracy


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/degeneracy")
    ap.add_argument("--budget", type=int, default=2000)
    ap.add_argument("--seeds", default="1,2,3")
    args = ap.parse_args(argv)

    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    t0 = time.perf_counter()
    report = degeneracy.run_all(args.budget, seeds, out_dir=args.out)
    minutes = (time.perf_counter() - t0) / 60.0
    print(report.markdown)
    print(f"finished in {minutes:.1f} min; artifacts in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
