"""Oracle-equivalence and invariant suites, shared by ``gsync validate`` and the tests."""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .backends.loopback import LoopbackFabric, LoopbackTransport
from .backends.sim import SimNetwork, SimOptions, sim_run
from .collectives import CollectiveKind, CommGroup, ReduceOp, allreduce_oracle
from .costmodel import ClusterConfig, StrategyChoice, comm_volume, estimate_collective_time
from .layer_api import Distribution, create_session
from .profiles import Precision, shipped_profile
from .scheduler import Priority, PriorityClass, Runtime

SIZES = (1, 7, 64, 1000)
GROUPS = (1, 2, 3, 4, 5, 8)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{self.name:<12} {'PASS' if self.passed else 'FAIL'}  {self.detail}"


def flip_byte(payload: bytes, transfer, request) -> bytes:
    """Fault hook: corrupt the exponent byte of the first element of every payload."""
    if not payload:
        return payload
    b = bytearray(payload)
    b[min(len(b), 4) - 1] ^= 0x40
    return bytes(b)


def rel_error(got, ref) -> float:
    got, ref = np.asarray(got, np.float64), np.asarray(ref, np.float64)
    if got.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(ref))), 1e-30)
    return float(np.max(np.abs(got - ref))) / scale


# -- simulated collectives ---------------------------------------------------


def sim_collective(kind, inputs, chunk_bytes=65536, wire=Precision.FP32, op=ReduceOp.SUM,
                   fault: Optional[Callable] = None, cluster: Optional[ClusterConfig] = None):
    """Run one collective over the simulated network with real payloads.

    Returns (outputs, requests, network).
    """
    n = len(inputs)
    net = SimNetwork(n, cluster or ClusterConfig(n), chunk_bytes, fault=fault)
    reqs = []
    for r in range(n):
        reqs.append(net.submit(r, kind, CommGroup.of(range(n), r), 0, Priority.bulk(), op, wire,
                               buffer=inputs[r]))
    net.run()
    return [req.executor.buffer for req in reqs], reqs, net


def sim_allreduce(inputs, chunk_bytes=65536, wire=Precision.FP32, op=ReduceOp.SUM, fault=None):
    outs, reqs, _ = sim_collective(CollectiveKind.ALLREDUCE, inputs, chunk_bytes, wire, op, fault)
    return outs, max(r.executor.max_abs for r in reqs)


def random_inputs(seed, n, length):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1.0, 1.0, length).astype(np.float32) for _ in range(n)]


def check_allreduce_matrix(runner, groups=GROUPS, sizes=SIZES, seed=0, tol=1e-6):
    """Max relative error of ``runner(inputs)`` against the sequential oracle."""
    worst = 0.0
    for n in groups:
        for length in sizes:
            inputs = random_inputs([seed, n, length], n, length)
            ref = allreduce_oracle(inputs)
            for out in runner(inputs):
                worst = max(worst, rel_error(out, ref))
    return worst, worst <= tol


def chunk_size_identity(fault=None, seed=0) -> bool:
    """Results must not depend on chunk size, bit for bit."""
    for n in GROUPS:
        for length in SIZES:
            inputs = random_inputs([seed, n, length, 1], n, length)
            outs = [sim_allreduce(inputs, cb, fault=fault)[0] for cb in (1024, 65536, max(4, length * 4))]
            for other in outs[1:]:
                if not all(np.array_equal(a, b) for a, b in zip(outs[0], other)):
                    return False
    return True


def int8_bound_check(seed, n, length=1000):
    inputs = random_inputs([seed, n, 8], n, length)
    outs, R = sim_allreduce(inputs, wire=Precision.INT8)
    ref = allreduce_oracle(inputs).astype(np.float64)
    err = max(float(np.max(np.abs(o.astype(np.float64) - ref))) for o in outs)
    bound = n * R / 127
    return err, bound, err <= bound


# -- randomized request sets (preemption) -------------------------------------


@dataclass
class PreemptionReport:
    seed: int
    requests: int
    preemptions: int
    identical: bool
    latency_ok: bool
    priority_ok: bool
    worst_latency: float
    chunk_time: float


def _random_request_set(seed):
    rng = random.Random(seed)
    n = rng.choice((2, 3, 4))
    specs = []
    for _ in range(rng.randint(3, 7)):
        kind = rng.choice((CollectiveKind.ALLREDUCE, CollectiveKind.REDUCE_SCATTER, CollectiveKind.ALLGATHER))
        cls = rng.choice(list(PriorityClass))
        specs.append(dict(kind=kind, length=rng.randint(1, 6000), cls=cls, key=rng.randint(0, 50),
                          t=rng.uniform(0.0, 2e-4), seed=rng.randrange(1 << 30)))
    return n, specs


def preemption_trial(seed: int, chunk_bytes: int = 1024) -> PreemptionReport:
    """Random overlapping collectives on a contended ring.

    Every request's final buffers are compared bitwise with the same
    collective run alone.  From the event trace, a request that outranks
    everything already queued on a rank must start sending within one chunk
    transfer time, and every link decision must pick the best runnable request.
    """
    n, specs = _random_request_set(seed)
    cluster = ClusterConfig(n, alpha=5e-6, beta=1.25e9)
    net = SimNetwork(n, cluster, chunk_bytes, prioritize=True, record_decisions=True)
    inputs = []
    for i, s in enumerate(specs):
        data = random_inputs(s["seed"], n, s["length"])
        inputs.append(data)
        for r in range(n):
            net.submit_at(s["t"], r, kind=s["kind"], group=CommGroup.of(range(n), r), length=s["length"],
                          priority=Priority(s["cls"], s["key"]), buffer=data[r], cid=i)
    net.run()

    by_rank = {}
    for rank, req in net.requests:
        by_rank.setdefault(rank, {})[req.tag] = req
    identical = True
    for i, s in enumerate(specs):
        alone, _, _ = sim_collective(s["kind"], inputs[i], chunk_bytes, cluster=cluster)
        for r in range(n):
            if not np.array_equal(by_rank[r][i].executor.buffer, alone[r]):
                identical = False

    chunk_time = cluster.alpha + chunk_bytes / cluster.beta
    first_send = {}
    for ev in net.trace:
        if ev.event == "send":
            rank = int(ev.link.split("->")[0])
            first_send.setdefault((rank, ev.request_id), ev.time_s)
    latency_ok, worst = True, 0.0
    for rank, reqs in by_rank.items():
        sched = net.nodes[rank].sched
        ordered = sorted(reqs.values(), key=lambda q: q.submit_time)
        for req in ordered:
            start = first_send[(rank, req.id)]
            others = [q for q in ordered if q is not req and q.submit_time <= req.submit_time
                      and (q.done_time is None or q.done_time > req.submit_time)]
            if not others or not all(sched.order_key(req) < sched.order_key(q) for q in others):
                continue
            later = [q for q in ordered if req.submit_time < q.submit_time <= start
                     and sched.order_key(q) < sched.order_key(req)]
            if later:
                continue
            delay = start - req.submit_time
            worst = max(worst, delay)
            if delay > chunk_time * (1 + 1e-9):
                latency_ok = False

    ids = {(rank, req.id): req for rank, req in net.requests}
    priority_ok = True
    for _, rank, chosen, runnable in net.decisions:
        sched = net.nodes[rank].sched
        best = min((ids[(rank, i)] for i in runnable), key=sched.order_key)
        if best.id != chosen:
            priority_ok = False
    preempts = sum(1 for ev in net.trace if ev.event == "preempt")
    return PreemptionReport(seed, len(specs), preempts, identical, latency_ok, priority_ok, worst, chunk_time)


# -- threaded runtime harness -------------------------------------------------


def run_ranks(world: int, body, transport_factory=None, **runtime_kw):
    """Run ``body(rank, runtime)`` on ``world`` threads over loopback transports."""
    if transport_factory is None:
        fabric = LoopbackFabric(world)
        transport_factory = lambda r: LoopbackTransport(fabric, r)  # noqa: E731
    results, errors = [None] * world, []

    def worker(r):
        try:
            with Runtime(transport_factory(r), **runtime_kw) as rt:
                results[r] = body(r, rt)
        except BaseException as e:  # surfaced in the caller
            errors.append((r, e))

    threads = [threading.Thread(target=worker, args=(r,)) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(120)
    if errors:
        raise errors[0][1]
    return results


def runtime_allreduce(inputs, chunk_bytes=65536, wire=Precision.FP32, transport_factory=None):
    n = len(inputs)

    def body(r, rt):
        buf = inputs[r].copy()
        rt.wait(rt.submit(CollectiveKind.ALLREDUCE, buf, CommGroup.of(range(n), r)))
        return buf

    return run_ranks(n, body, transport_factory, chunk_bytes=chunk_bytes, wire=wire)


# -- suites -------------------------------------------------------------------


def suite_collectives(fault=None) -> SuiteResult:
    with np.errstate(all="ignore"):     # corrupted payloads may decode to inf/nan
        worst, ok = check_allreduce_matrix(lambda xs: sim_allreduce(xs, fault=fault)[0])
        same = chunk_size_identity(fault)
        rs, _, _ = sim_collective(CollectiveKind.REDUCE_SCATTER, [np.float32([1, 2]), np.float32([3, 4])],
                                  fault=fault)
    rs_ok = rs[0][0] == 4 and rs[1][1] == 6
    bounds = [int8_bound_check(s, n)[2] for s in range(5) for n in (2, 4, 8)]
    passed = ok and same and rs_ok and all(bounds)
    return SuiteResult("collectives", passed,
                       f"max rel err {worst:.2e}, chunk-size identical={same}, int8 bound {sum(bounds)}/{len(bounds)}")


def suite_scheduler(seeds=range(10)) -> SuiteResult:
    reps = [preemption_trial(s) for s in seeds]
    passed = all(r.identical and r.latency_ok and r.priority_ok for r in reps)
    return SuiteResult("scheduler", passed,
                       f"{len(reps)} random request sets, {sum(r.preemptions for r in reps)} preemptions, "
                       f"worst start delay {max(r.worst_latency for r in reps):.2e}s")


def suite_layer_api() -> SuiteResult:
    d = Distribution(8, 2, 5)
    groups_ok = d.model_group.ranks == (4, 5) and d.data_peers.ranks == (1, 3, 5, 7)
    layer = shipped_profile("mlp").layers[1]

    def body(r, rt):
        s = create_session(layer, Distribution(2, 2, r), rt)
        s.forward_activations_begin(np.float32([[10.0], [20.0]][r]))
        act = s.forward_activations_wait(30)
        s.backward_inputgrad_begin(np.float32([[1, 2], [3, 4]][r]))
        seg = s.backward_inputgrad_wait(30)
        return act, seg

    (a0, s0), (a1, s1) = run_ranks(2, body)
    ag_ok = list(a0) == [10, 20] and list(a1) == [10, 20]
    rs_ok = list(s0) == [4] and list(s1) == [6]
    passed = groups_ok and ag_ok and rs_ok
    return SuiteResult("layer-api", passed, f"groups={groups_ok} allgather={ag_ok} reduce-scatter={rs_ok}")


def suite_backends() -> SuiteResult:
    prof = shipped_profile("mlp")
    opts = SimOptions(mode="full")
    a = sim_run(prof, 2, ClusterConfig(4), 8, 3, 0, opts)
    b = sim_run(prof, 2, ClusterConfig(4), 8, 3, 0, opts)
    deterministic = a.trace_csv() == b.trace_csv()
    c = ClusterConfig(4)
    vol = sum(comm_volume(layer, StrategyChoice(2), c, 8).total for layer in prof.layers) * 4
    conserved = all(x == vol for x in a.bytes_per_iteration)
    n, N = 4, 4096
    _, reqs, _ = sim_collective(CollectiveKind.ALLREDUCE, random_inputs(0, n, N), chunk_bytes=N * 4)
    t_est = estimate_collective_time(CollectiveKind.ALLREDUCE, N * 4, n, ClusterConfig(n))
    consistent = abs(reqs[0].done_time - t_est) <= 1e-9 * t_est
    inputs = random_inputs(1, 3, 1000)
    loop = runtime_allreduce(inputs, chunk_bytes=1024)
    sim_out = sim_allreduce(inputs, chunk_bytes=1024)[0]
    equivalent = all(np.array_equal(x, y) for x, y in zip(loop, sim_out))
    passed = deterministic and conserved and consistent and equivalent
    return SuiteResult("backends", passed,
                       f"deterministic={deterministic} conservation={conserved} "
                       f"alpha-beta={consistent} runtime==sim={equivalent}")


SUITES = {
    "collectives": suite_collectives,
    "scheduler": suite_scheduler,
    "layer-api": suite_layer_api,
    "backends": suite_backends,
}


def run_all(fault=None) -> list:
    out = []
    for name, fn in SUITES.items():
        try:
            out.append(fn(fault) if name == "collectives" else fn())
        except Exception as e:  # a crashing suite is a failing suite
            out.append(SuiteResult(name, False, f"{type(e).__name__}: {e}"))
    return out
