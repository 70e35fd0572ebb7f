"""Compare pure data parallelism with the planner's per-layer group sizes.

For each shipped profile the planner picks a model-group size per layer;
fully connected layers with many parameters and small activations tend to
move to g > 1.  Both plans are then simulated.

    python3 demos/hybrid_plan.py [--world 16]
"""

import argparse
from collections import Counter

from gsync.backends.sim import SimOptions, sim_run
from gsync.costmodel import ClusterConfig, select_plan
from gsync.profiles import SHIPPED, shipped_profile


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--world", type=int, default=16)
    args = ap.parse_args()
    cluster = ClusterConfig(args.world, alpha=5e-6, beta=1.25e9, gamma=3e12, eta=0.9)
    opts = SimOptions(record_trace=False)

    print(f"{'profile':<10} {'MB':>3}  {'groups chosen':<24} {'data-parallel ms':>16} {'planned ms':>11}")
    for name in SHIPPED:
        prof = shipped_profile(name)
        MB = prof.default_minibatch
        plan = select_plan(prof, cluster, MB)
        counts = Counter(plan.groups.values())
        chosen = " ".join(f"g={g}:{n}" for g, n in sorted(counts.items()))
        flat = sim_run(prof, 1, cluster, MB, 3, 0, opts).iteration_s
        hybrid = sim_run(prof, plan, cluster, MB, 3, 0, opts).iteration_s
        print(f"{name:<10} {MB:>3}  {chosen:<24} {flat * 1e3:16.3f} {hybrid * 1e3:11.3f}")


if __name__ == "__main__":
    main()
