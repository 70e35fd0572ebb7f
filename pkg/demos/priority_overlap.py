"""Where does communication stay exposed, with and without priorities?

Runs a 16-node data-parallel VGG-16 iteration in the simulator twice, once
with the link scheduler ordering weight gradients by layer and once first
come first served, then prints the layers whose exchanges still stall the
next forward pass.

    python3 demos/priority_overlap.py [--profile resnet50] [--world 16]
"""

import argparse

from gsync.backends.sim import SimOptions, sim_run
from gsync.costmodel import ClusterConfig
from gsync.profiles import load_profile


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--profile", default="vgg16")
    ap.add_argument("--world", type=int, default=16)
    ap.add_argument("--mb", type=int, default=32)
    ap.add_argument("--top", type=int, default=8)
    args = ap.parse_args()

    prof = load_profile(args.profile)
    cluster = ClusterConfig(args.world, alpha=5e-6, beta=1.25e9, gamma=3e12, eta=0.9)
    runs = {}
    for arm in (True, False):
        runs[arm] = sim_run(prof, 1, cluster, args.mb, 3, 0, SimOptions(prioritize=arm, record_trace=False))

    on, off = runs[True], runs[False]
    print(f"{prof.name}, P={args.world}, MB={args.mb}/node")
    print(f"  iteration   on {on.iteration_s * 1e3:9.3f} ms   off {off.iteration_s * 1e3:9.3f} ms")
    print(f"  exposed     on {on.exposed_comm_s * 1e3:9.3f} ms   off {off.exposed_comm_s * 1e3:9.3f} ms"
          f"   ({off.exposed_comm_s / max(on.exposed_comm_s, 1e-30):.1f}x)")

    # without priorities the first layers block: their gradients queue behind everyone else's
    stall = {lid: (off.per_layer_exposed[lid], on.per_layer_exposed[lid]) for lid in off.per_layer_exposed}
    worst = sorted(stall.items(), key=lambda kv: -max(kv[1]))[:args.top]
    print("\n  layer                 exposed off (ms)   exposed on (ms)")
    for lid, (t_off, t_on) in worst:
        if max(t_off, t_on) <= 0:
            break
        print(f"  {lid:>3} {prof.layers[lid].name:<18} {t_off * 1e3:16.3f}   {t_on * 1e3:15.3f}")


if __name__ == "__main__":
    main()
