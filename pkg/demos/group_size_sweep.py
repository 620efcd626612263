"""Collision rate against group size with and without D2D exceptions (table1 preset)."""

import argparse

import numpy as np

from mmtc_grouping import ExceptionModel, collision_probs, full_sharing_alloc, grouped_load, table1_preset


def curve(scenario, alloc, alpha, ks):
    exc = ExceptionModel(alpha)
    return np.array([collision_probs(grouped_load(scenario.classes, int(k), exc), alloc)[0] for k in ks])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n0", type=int, default=3600)
    ap.add_argument("--kmax", type=int, default=7000)
    args = ap.parse_args()

    sc = table1_preset(args.n0)
    alloc = full_sharing_alloc(sc.raos_per_second, sc.num_classes)
    ks = np.arange(1, args.kmax + 1)
    base = curve(sc, alloc, 0.0, [1])[0]
    print(f"ungrouped collision rate: {base:.6e}")
    for alpha in (0.0, 1e-6):
        p = curve(sc, alloc, alpha, ks)
        above = np.flatnonzero(p > base)
        cross = f"K={ks[above[0]]}" if above.size else "none"
        print(f"alpha={alpha:g}: min {p.min():.6e} at K={ks[p.argmin()]}, back above baseline at {cross}")
        for k in (1, 10, 100, 1000, 5000, args.kmax):
            if k <= args.kmax:
                print(f"    K={k:5d}  P={p[k - 1]:.6e}")


if __name__ == "__main__":
    main()
