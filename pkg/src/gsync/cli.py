"""gsync command line: plan, simulate, sweep, bench, validate."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .backends.sim import SimOptions, sim_run, sim_sweep
from .collectives import CollectiveError, CollectiveKind, CommGroup, ReduceOp, allreduce_oracle
from .costmodel import (
    ClusterConfig,
    ConfigError,
    PlanMismatch,
    StrategyChoice,
    calibrated_cluster,
    compute_comm_ratio,
    scaling_sweep,
    select_plan,
)
from .profiles import Precision, ProfileError, load_profile
from .scheduler import Runtime, SchedulerError

DEFAULT_SWEEP = "1,2,4,8,16,32,64,128,256"
BENCH_SIZES = tuple(4096 * 4 ** i for i in range(8))   # 4 KiB .. 64 MiB


def _shared(p: argparse.ArgumentParser):
    p.add_argument("--profile", default="resnet50", help="profile JSON path or shipped name")
    p.add_argument("--world", type=int, default=16, help="number of nodes P")
    p.add_argument("--alpha", type=float, default=5e-6, help="per-message latency, seconds")
    p.add_argument("--beta", type=float, default=1.25e9, help="link bandwidth, bytes/s")
    p.add_argument("--gamma", type=float, default=3e12, help="node compute rate, flops/s")
    p.add_argument("--eta", type=float, default=0.9, help="overlap effectiveness in [0, 1]")
    p.add_argument("--mb", type=int, default=None, help="minibatch per node (default: profile's)")
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chunk-bytes", type=int, default=65536)
    p.add_argument("--wire", choices=[p.label for p in Precision], default="fp32")
    p.add_argument("--no-priority", action="store_true", help="serve requests first-come first-served")
    p.add_argument("--out", default=None, help="output file (default: stdout)")


def _cluster(args, P=None) -> ClusterConfig:
    return ClusterConfig(args.world if P is None else P, args.alpha, args.beta, args.gamma, args.eta, args.wire)


def _mb(args, profile) -> int:
    return args.mb if args.mb is not None else profile.default_minibatch


def _emit(text: str, path):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _load_plan(arg, profile, cluster, MB):
    if arg is None or arg == "auto":
        return select_plan(profile, cluster, MB)
    if arg.isdigit():
        return int(arg)
    data = json.loads(Path(arg).read_text())
    return {entry["id"]: entry["group_size"] for entry in data["layers"]}


# -- plan ----------------------------------------------------------------------


def cmd_plan(args) -> int:
    profile = load_profile(args.profile)
    cluster = _cluster(args)
    MB = _mb(args, profile)
    plan = select_plan(profile, cluster, MB)
    out = sys.stderr if args.out is None else sys.stdout
    print(f"{'id':>4} {'name':<22} {'kind':<15} {'ratio':>12} {'g':>4} {'compute_s':>11} {'exposed_s':>11}", file=out)
    for est in plan.layers:
        layer = profile.layers[est.id]
        ratio = compute_comm_ratio(layer, StrategyChoice(est.group_size), cluster, MB)
        print(f"{est.id:>4} {layer.name:<22} {layer.kind.value:<15} {ratio:>12.4g} {est.group_size:>4} "
              f"{est.compute_s:>11.4e} {est.exposed_s:>11.4e}", file=out)
    print(f"estimated iteration time {plan.total_s:.6e} s", file=out)
    _emit(json.dumps(plan.to_json(), indent=1) + "\n", args.out)
    return 0


# -- simulate ------------------------------------------------------------------


def _sim_once(args, profile, cluster, MB, plan, prioritize):
    opts = SimOptions(prioritize=prioritize, quantize=False, eta=args.eta, chunk_bytes=args.chunk_bytes,
                      record_trace=bool(args.trace))
    return sim_run(profile, plan, cluster, MB, args.iters, args.seed, opts)


def cmd_simulate(args) -> int:
    profile = load_profile(args.profile)
    cluster = _cluster(args)
    MB = _mb(args, profile)
    plan = _load_plan(args.plan, profile, cluster, MB)
    m = _sim_once(args, profile, cluster, MB, plan, not args.no_priority)
    _emit(m.metrics_csv(), args.out)
    if args.trace:
        Path(args.trace).write_text(m.trace_csv())
    arm = "off" if args.no_priority else "on"
    print(f"iteration_time_s={m.iteration_s:.9e} exposed_comm_s={m.exposed_comm_s:.9e} "
          f"link_utilization={m.link_utilization:.4f} priority={arm}", file=sys.stderr)
    if args.compare:
        other = _sim_once(args, profile, cluster, MB, plan, args.no_priority)
        on, off = (other, m) if args.no_priority else (m, other)
        factor = off.exposed_comm_s / on.exposed_comm_s if on.exposed_comm_s > 0 else float("inf")
        print(f"exposed_comm_s off={off.exposed_comm_s:.9e} on={on.exposed_comm_s:.9e} "
              f"reduction={factor:.3f}x", file=sys.stderr)
    return 0


# -- sweep ---------------------------------------------------------------------


def cmd_sweep(args) -> int:
    profile = load_profile(args.profile)
    MB = _mb(args, profile)
    P_list = [int(x) for x in args.P_list.split(",") if x.strip()]
    if not P_list:
        raise ConfigError("empty P list")
    cluster = calibrated_cluster(1) if args.calibrated else _cluster(args, 1)
    opts = SimOptions(prioritize=not args.no_priority, eta=None if args.calibrated else args.eta,
                      chunk_bytes=args.chunk_bytes, record_trace=False)
    rows = sim_sweep(profile, cluster, MB, P_list, opts, args.iters, args.seed, args.group_size)
    model = scaling_sweep(profile, cluster, MB, P_list, args.group_size)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["P", "iter_time_s", "efficiency", "model_iter_time_s", "model_efficiency"])
    for r, a in zip(rows, model):
        w.writerow([r.P, repr(r.iter_time_s), repr(r.efficiency), repr(a.iter_time_s), repr(a.efficiency)])
    _emit(buf.getvalue(), args.out)
    return 0


# -- bench ---------------------------------------------------------------------


def _bench_inputs(seed, world, size_bytes):
    n = size_bytes // 4
    return [np.random.default_rng([seed, r, size_bytes]).uniform(-1, 1, n).astype(np.float32)
            for r in range(world)]


def bench_rank(rank, world, transport, sizes, wire, chunk_bytes, seed, reps=3, out=sys.stdout) -> bool:
    """Allreduce each size ``reps`` times, verify against the oracle, print one row per size."""
    group = CommGroup.of(range(world), rank)
    ok = True
    tol = 1e-6
    with Runtime(transport, chunk_bytes=chunk_bytes, wire=wire) as rt:
        if rank == 0:
            print("size_bytes,median_s,max_err,bound,verified", file=out)
        for size in sizes:
            inputs = _bench_inputs(seed, world, size)
            ref = allreduce_oracle(inputs).astype(np.float64)
            times = []
            for _ in range(reps):
                buf = inputs[rank].copy()
                t0 = time.perf_counter()
                h = rt.submit(CollectiveKind.ALLREDUCE, buf, group)
                req = rt.request(h)
                rt.wait(h, timeout=600)
                times.append(time.perf_counter() - t0)
            err = float(np.max(np.abs(buf.astype(np.float64) - ref)))
            if wire is Precision.INT8:
                r = np.float32([req.executor.max_abs])
                if world > 1:
                    rt.wait(rt.submit(CollectiveKind.ALLREDUCE, r, group, ReduceOp.MAX), timeout=600)
                bound = world * float(r[0]) / 127
            else:
                bound = tol * max(float(np.max(np.abs(ref))), 1e-30)
            good = err <= bound
            ok &= good
            if rank == 0:
                print(f"{size},{float(np.median(times)):.6e},{err:.3e},{bound:.3e},{good}", file=out, flush=True)
    return ok


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else list(BENCH_SIZES)
    wire = Precision.parse(args.wire)
    if args.spawn:
        return _spawn_bench(args)
    if "GSYNC_RANK" in os.environ:
        from .backends.sockets import SocketTransport
        transport = SocketTransport.from_env()
    else:
        from .backends.loopback import LoopbackFabric, LoopbackTransport
        transport = LoopbackTransport(LoopbackFabric(1), 0)
    out = open(args.out, "w") if args.out and transport.rank == 0 else sys.stdout
    try:
        ok = bench_rank(transport.rank, transport.world_size, transport, sizes, wire, args.chunk_bytes,
                        args.seed, args.reps, out)
    finally:
        if out is not sys.stdout:
            out.close()
    if not ok:
        print(f"rank {transport.rank}: verification failed", file=sys.stderr)
    return 0 if ok else 1


def _spawn_bench(args) -> int:
    from .backends.sockets import free_ports
    world = args.spawn
    ports = free_ports(world)
    hostfile = Path(args.hostfile or Path(tempfile.gettempdir()) / f"gsync-hosts-{os.getpid()}")
    hostfile.write_text("".join(f"127.0.0.1:{p}\n" for p in ports))
    argv = [sys.executable, "-m", "gsync.cli", "bench", "--wire", args.wire, "--chunk-bytes",
            str(args.chunk_bytes), "--seed", str(args.seed), "--reps", str(args.reps)]
    if args.sizes:
        argv += ["--sizes", args.sizes]
    if args.out:
        argv += ["--out", args.out]
    procs = []
    try:
        for r in range(world):
            env = dict(os.environ, GSYNC_RANK=str(r), GSYNC_WORLD_SIZE=str(world), GSYNC_HOSTFILE=str(hostfile))
            procs.append(subprocess.Popen(argv, env=env))
        codes = [p.wait(timeout=args.timeout) for p in procs]
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
        if not args.hostfile:
            hostfile.unlink(missing_ok=True)
    return max(codes) if codes else 0


# -- validate ------------------------------------------------------------------


def cmd_validate(args) -> int:
    from .validate import flip_byte, run_all
    results = run_all(fault=flip_byte if args.inject_fault else None)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print("validate: " + ("all suites passed" if not failed else "failed: " + ", ".join(failed)))
    return 1 if failed else 0


# -- entry -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gsync", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="choose a per-layer model-group size")
    _shared(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run the discrete-event simulator")
    _shared(p)
    p.add_argument("--plan", default="1", help="group size, 'auto', or a plan JSON from 'gsync plan'")
    p.add_argument("--trace", default=None, help="write the event trace CSV here")
    p.add_argument("--compare", action="store_true", help="also run the other priority arm")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="weak-scaling sweep, simulated and analytical")
    _shared(p)
    p.add_argument("--P-list", default=DEFAULT_SWEEP)
    p.add_argument("--group-size", type=int, default=1)
    p.add_argument("--calibrated", action="store_true", help="use the calibrated cluster (README)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="socket allreduce benchmark (one process per rank)")
    _shared(p)
    p.add_argument("--sizes", default=None, help="comma-separated byte sizes (default 4 KiB .. 64 MiB)")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--spawn", type=int, default=0, help="launch this many local ranks")
    p.add_argument("--hostfile", default=None)
    p.add_argument("--timeout", type=float, default=1800)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="run the oracle and invariant suites")
    p.add_argument("--inject-fault", action="store_true", help="corrupt simulated chunk payloads")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ProfileError, ConfigError, PlanMismatch, CollectiveError, SchedulerError,
            ValueError, OSError, KeyError) as e:
        print(f"gsync: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
