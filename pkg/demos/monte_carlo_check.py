"""Simulated per-class collision rates next to the closed form for three allocations."""

import math

from mmtc_grouping import full_dedication_alloc, full_sharing_alloc, grouped_load, table1_mixed_alloc, table1_preset
from mmtc_grouping.netsim import analytic_rates, attempt_variances, clustered_standard_error, run_ra_sim


def main(k=10, attempts=200_000, seed=1):
    sc = table1_preset(3600)
    load = grouped_load(sc.classes, k)
    duration = math.ceil(attempts / load.total)
    allocs = {
        "sharing": full_sharing_alloc(3600, sc.num_classes),
        "dedication": full_dedication_alloc([514] * 6 + [516]),
        "mixed": table1_mixed_alloc(),
    }
    for name, alloc in allocs.items():
        stats = run_ra_sim(sc, k, alloc, duration_s=duration, seed=seed)
        want = analytic_rates(sc, k, alloc)
        var = attempt_variances(load, alloc)
        print(f"{name} (K={k}, {duration} s)")
        for i, (n, c) in enumerate(zip(stats.attempts_per_class, stats.collisions_per_class)):
            if n:
                z = (c / n - want[i]) / clustered_standard_error(var[i], n)
                print(f"  class {i}: {n:7d} attempts  sim {c / n:.3e}  closed form {want[i]:.3e}  z={z:+.2f}")


if __name__ == "__main__":
    main()
