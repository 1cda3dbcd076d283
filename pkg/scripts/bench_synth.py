#!/usr/bin/env python3
"""Benchmark synthetic series generation throughput.

python scripts/bench_synth.py --len 32768 --n 200
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from patchlm import synth  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--len", type=int, default=32768)
    parser.add_argument("--n", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    for _ in range(10):
        synth.sample_series(args.len, rng)
    start = time.perf_counter()
    for _ in range(args.n):
        synth.sample_series(args.len, rng)
    per = (time.perf_counter() - start) / args.n * 1e3
    print(f"{per:.2f} ms/series at L={args.len} (n={args.n})")

    with synth.SeriesStream(length=args.len, seed=args.seed) as stream:
        start = time.perf_counter()
        for _ in range(args.n):
            stream.get()
        per = (time.perf_counter() - start) / args.n * 1e3
    print(f"{per:.2f} ms/series via background stream")
    return 0


if __name__ == "__main__":
    sys.exit(main())
