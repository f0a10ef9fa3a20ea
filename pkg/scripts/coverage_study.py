#!/usr/bin/env python3
"""Monte-Carlo coverage of the hierarchical BCa interval for a pooled mean.

Each simulation draws ``clusters`` cluster effects N(0, cluster_sd^2) and
``items`` items per cluster with N(0, item_sd^2) noise around them. The true
mean is 0. We report how often the interval covers it, per resampling mode.

Usage: python3 scripts/coverage_study.py [--sims 500] [--b 1000] [--modes two-level cluster]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from marrowbench.bootstrap import MODES, ClusteredSample, bootstrap_ci


def draw(rng: np.random.Generator, clusters: int, items: int, cluster_sd: float, item_sd: float) -> ClusteredSample:
    x = rng.normal(0.0, cluster_sd, clusters)[:, None] + rng.normal(0.0, item_sd, (clusters, items))
    ids = np.array([f"c{i:03d}" for i in range(clusters)], dtype=object)
    return ClusteredSample(x.ravel(), np.full(clusters, items), ids, lambda s: float(s.items.mean()))


def coverage(sims: int, B: int, mode: str, seed: int, clusters: int = 50, items: int = 10,
             cluster_sd: float = 1.0, item_sd: float = 1.0, alpha: float = 0.05) -> tuple[float, float]:
    """(coverage, mean interval width) over ``sims`` simulated data sets."""
    hits, widths = 0, []
    for s in range(sims):
        sample = draw(np.random.default_rng([seed, s]), clusters, items, cluster_sd, item_sd)
        res = bootstrap_ci(sample, B=B, alpha=alpha, seed=seed + s, mode=mode)
        hits += res.lower <= 0.0 <= res.upper
        widths.append(res.upper - res.lower)
    return hits / sims, float(np.mean(widths))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sims", type=int, default=500)
    ap.add_argument("--b", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--clusters", type=int, default=50)
    ap.add_argument("--items", type=int, default=10)
    ap.add_argument("--modes", nargs="+", default=list(MODES), choices=MODES)
    args = ap.parse_args()
    for mode in args.modes:
        t0 = time.perf_counter()
        cov, width = coverage(args.sims, args.b, mode, args.seed, args.clusters, args.items)
        se = np.sqrt(cov * (1 - cov) / args.sims)
        print(f"{mode:10s} coverage {cov:.3f} (MC se {se:.3f})  mean width {width:.4f}  "
              f"[{time.perf_counter() - t0:.1f}s]")


if __name__ == "__main__":
    main()
