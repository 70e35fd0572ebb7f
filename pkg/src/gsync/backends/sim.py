"""Deterministic discrete-event network simulator and training-iteration driver.

Link model: every node has one full-duplex NIC.  A chunk of ``b`` bytes
occupies the sender's outgoing direction for ``alpha + b/beta`` seconds; the
receiving direction serializes the ``b/beta`` part of concurrent arrivals.
While a node is computing, its in-flight transfer progresses at rate ``eta``
(overlap effectiveness) instead of 1.

Two execution modes:

* ``full``: every node is simulated, chunks carry real payloads if asked.
* ``symmetric``: for homogeneous clusters every node behaves identically, so
  only one representative node is simulated; the chunk it sends to its right
  neighbour is mirrored back as the chunk it receives from its left
  neighbour.  Segments are equal-sized (fractional bytes allowed), which is
  exactly the ring volume ``2(n-1)/n * N`` per node.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..collectives import (
    DEFAULT_CHUNK_BYTES,
    CollectiveKind,
    CommGroup,
    ReduceOp,
    RingExecutor,
    build_ring_schedule,
)
from ..costmodel import ClusterConfig, ConfigError, SweepRow, _groups_of, compute_times
from ..layer_api import Distribution
from ..profiles import ModelProfile, Precision
from ..scheduler import (
    CollectiveRequest,
    LinkScheduler,
    Priority,
    RequestState,
    TraceEvent,
    group_tag,
    trace_csv,
)


@dataclass(frozen=True)
class Compute:
    seconds: float
    label: object = None


@dataclass(frozen=True)
class Submit:
    kind: CollectiveKind
    group: CommGroup
    length: int
    priority: Priority
    label: object = None
    op: ReduceOp = ReduceOp.SUM
    buffer: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Wait:
    request: CollectiveRequest


class _Tx:
    __slots__ = ("node", "dst", "req", "transfer", "payload", "start", "work", "rate", "last", "version")

    def __init__(self, node, dst, req, transfer, payload, start, work, rate):
        self.node = node
        self.dst = dst
        self.req = req
        self.transfer = transfer
        self.payload = payload
        self.start = start
        self.work = work
        self.rate = rate
        self.last = start
        self.version = 0


class _Node:
    def __init__(self, rank, prioritize):
        self.rank = rank
        self.sched = LinkScheduler(prioritize)
        self.tx: Optional[_Tx] = None
        self.computing = False
        self.rx_free = 0.0
        self.by_cid = {}
        self.early = {}
        self.counters = {}
        self.driver = None
        self.waiting = None
        self.bytes_sent = 0.0
        self.busy_log = []    # (start, end, label)


class SimNetwork:
    """Event loop over simulated nodes, links and collective requests."""

    def __init__(self, world_size: int, cluster: ClusterConfig, chunk_bytes: int = DEFAULT_CHUNK_BYTES,
                 prioritize: bool = True, eta: Optional[float] = None, symmetric: bool = False,
                 record_trace: bool = True, record_decisions: bool = False,
                 fault: Optional[Callable] = None):
        if world_size < 1:
            raise ConfigError("world_size must be >= 1")
        self.world_size = world_size
        self.alpha = cluster.alpha
        self.beta = cluster.beta
        self.eta = cluster.eta if eta is None else eta
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        self.chunk_bytes = chunk_bytes
        self.symmetric = symmetric
        self.record_trace = record_trace
        self.record_decisions = record_decisions
        self.fault = fault
        self.nodes = [_Node(r, prioritize) for r in range(1 if symmetric else world_size)]
        self.now = 0.0
        self.trace = []
        self.decisions = []
        self.requests = []
        self._heap = []
        self._seq = itertools.count()
        self._ids = itertools.count()

    # -- bookkeeping -----------------------------------------------------

    # same-instant ordering: chunk arrivals first, then departures / compute / submissions,
    # then link decisions, so a freed link sees everything that landed at that instant
    _CLASS = {"arrival": 0, "departure": 1, "compute_done": 1, "submit": 1, "link_free": 2}

    def _push(self, t, kind, *data):
        heapq.heappush(self._heap, (t, self._CLASS[kind], next(self._seq), kind, data))

    def _log(self, event, req="", chunk="", link=""):
        if self.record_trace:
            self.trace.append(TraceEvent(self.now, event, req, chunk, link))

    @property
    def nodes_simulated(self):
        return len(self.nodes)

    # -- requests --------------------------------------------------------

    def submit(self, rank: int, kind, group: CommGroup, length: int, priority: Priority,
               op=ReduceOp.SUM, wire: Precision = Precision.FP32, buffer=None, label=None,
               cid: Optional[int] = None, root: int = 0) -> CollectiveRequest:
        kind = CollectiveKind(kind)
        node = self.nodes[rank]
        if self.symmetric and kind is CollectiveKind.BROADCAST:
            raise ConfigError("broadcast is not rank-symmetric; use full mode")
        if buffer is not None:
            buffer = np.array(buffer, dtype=np.float32, copy=True).ravel()
            length = buffer.size
        plan = build_ring_schedule(kind, group.size, length * wire.itemsize, self.chunk_bytes,
                                   wire.itemsize, root, uniform=self.symmetric)
        ex = RingExecutor(plan, group.my_index, buffer, op, wire)
        if cid is None:
            count = node.counters.get(group.ranks, 0)
            node.counters[group.ranks] = count + 1
            cid = group_tag(group, count)
        req = CollectiveRequest(next(self._ids), cid, kind, group, length, wire, ReduceOp(op),
                                priority, ex, submit_time=self.now, work=buffer)
        req.buffer = label
        node.by_cid[cid] = req
        node.sched.add(req)
        self.requests.append((rank, req))
        self._log("submit", req.id, "", f"{rank}")
        for tag, payload in node.early.pop(cid, []):
            ex.on_receive(tag, payload)
        self._check_done(node, req)
        self._try_send(node)
        return req

    def submit_at(self, t: float, rank: int, **kw):
        """Schedule a submission (test harness for arbitrary request sets)."""
        self._push(t, "submit", rank, kw)

    def spawn(self, rank: int, driver):
        """Attach a generator driver (yields Compute / Submit / Wait) to a node."""
        node = self.nodes[rank]
        node.driver = driver
        self._advance(node, None)

    # -- link ------------------------------------------------------------

    def _try_send(self, node: _Node):
        if node.tx is not None:
            return
        if self.record_decisions:
            runnable = [r.id for r in node.sched.runnable()]
        req, displaced = node.sched.select()
        if req is None:
            return
        if displaced is not None:
            self._log("preempt", displaced.id, "", f"{node.rank}")
        if self.record_decisions:
            self.decisions.append((self.now, node.rank, req.id, runnable))
        t, payload = req.executor.next_send()
        if self.fault is not None and payload is not None:
            payload = self.fault(payload, t, req)
        dst = req.group.right
        work = self.alpha + t.nbytes / self.beta
        rate = self.eta if node.computing else 1.0
        tx = _Tx(node, dst, req, t, payload, self.now, work, rate)
        node.tx = tx
        self._log("send", req.id, t.tag, f"{node.rank}->{dst}")
        if rate > 0:
            self._push(self.now + work / rate, "departure", tx, 0)

    def _set_computing(self, node: _Node, flag: bool):
        if node.computing == flag:
            return
        node.computing = flag
        tx = node.tx
        new_rate = self.eta if flag else 1.0
        if tx is None or tx.rate == new_rate:
            return
        tx.work = max(0.0, tx.work - (self.now - tx.last) * tx.rate)
        tx.last = self.now
        tx.rate = new_rate
        tx.version += 1
        if new_rate > 0:
            self._push(self.now + tx.work / new_rate, "departure", tx, tx.version)

    def _departure(self, tx: _Tx, version: int):
        if version != tx.version:
            return
        node = tx.node
        node.tx = None
        req, t = tx.req, tx.transfer
        node.bytes_sent += t.nbytes
        node.busy_log.append((tx.start, self.now, req.buffer, t.nbytes))
        req.executor.send_completed()
        self._log("depart", req.id, t.tag, f"{node.rank}->{tx.dst}")
        dst_node = self.nodes[0] if self.symmetric else self.nodes[tx.dst]
        arrival = max(self.now, dst_node.rx_free + t.nbytes / self.beta)
        dst_node.rx_free = arrival
        self._push(arrival, "arrival", dst_node, req.tag, t.tag, tx.payload, f"{node.rank}->{tx.dst}")
        self._check_done(node, req)
        self._push(self.now, "link_free", node)

    def _arrival(self, node: _Node, cid, tag, payload, link):
        req = node.by_cid.get(cid)
        if req is None:
            node.early.setdefault(cid, []).append((tag, payload))
            return
        req.executor.on_receive(tag, payload)
        self._log("arrive", req.id, tag, link)
        self._check_done(node, req)
        self._try_send(node)

    def _check_done(self, node: _Node, req: CollectiveRequest):
        if req.state is RequestState.DONE or not req.executor.done:
            return
        req.transition(RequestState.DONE)
        req.done_time = self.now
        node.sched.retire(req)
        node.by_cid.pop(req.tag, None)
        self._log("done", req.id, "", f"{node.rank}")
        if node.waiting is req:
            node.waiting = None
            self._advance(node, None)

    # -- drivers ---------------------------------------------------------

    def _advance(self, node: _Node, value):
        while node.driver is not None:
            try:
                cmd = node.driver.send(value)
            except StopIteration:
                node.driver = None
                return
            value = None
            if isinstance(cmd, Compute):
                if cmd.seconds <= 0:
                    continue
                self._set_computing(node, True)
                self._push(self.now + cmd.seconds, "compute_done", node)
                return
            if isinstance(cmd, Submit):
                value = self.submit(node.rank, cmd.kind, cmd.group, cmd.length, cmd.priority,
                                    cmd.op, self.wire_for(cmd), cmd.buffer, cmd.label)
                continue
            if isinstance(cmd, Wait):
                req = cmd.request
                if req.state is RequestState.DONE:
                    continue
                node.sched.promote(req)
                node.waiting = req
                return
            raise TypeError(f"driver yielded {cmd!r}")

    wire = Precision.FP32

    def wire_for(self, cmd):
        return self.wire

    def run(self, until: Optional[float] = None):
        heap = self._heap
        while heap:
            if until is not None and heap[0][0] > until:
                break
            t, _, _, kind, data = heapq.heappop(heap)
            self.now = t
            if kind == "departure":
                self._departure(*data)
            elif kind == "arrival":
                self._arrival(*data)
            elif kind == "compute_done":
                node = data[0]
                self._set_computing(node, False)
                self._advance(node, None)
            elif kind == "link_free":
                self._try_send(data[0])
            elif kind == "submit":
                rank, kw = data
                self.submit(rank, **kw)
        stuck = [(r, req.id) for r, req in self.requests if req.state is not RequestState.DONE]
        if until is None and stuck:
            raise RuntimeError(f"simulation ended with incomplete requests {stuck[:8]}")
        return self

    @property
    def total_bytes(self) -> float:
        b = sum(n.bytes_sent for n in self.nodes)
        return b * self.world_size if self.symmetric else b


# -- training iteration driver ---------------------------------------------


@dataclass
class SimOptions:
    prioritize: bool = True
    quantize: bool = False
    eta: Optional[float] = None
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    mode: str = "auto"          # auto | full | symmetric
    carry_data: bool = False
    record_trace: bool = True


@dataclass
class SimMetrics:
    world_size: int
    mode: str
    iteration_times: list
    iteration_s: float
    exposed_comm_s: float
    per_layer_exposed: dict
    per_layer_comm: dict
    per_layer_compute: dict
    link_utilization: float
    bytes_per_iteration: list
    trace: list = field(default_factory=list, repr=False)
    results: dict = field(default_factory=dict, repr=False)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "exposed_comm_s", "comm_s", "compute_s"])
        for lid in sorted(self.per_layer_compute):
            w.writerow([lid, repr(self.per_layer_exposed.get(lid, 0.0)),
                        repr(self.per_layer_comm.get(lid, 0.0)), repr(self.per_layer_compute[lid])])
        w.writerow(["total", repr(sum(self.per_layer_exposed.values())),
                    repr(sum(self.per_layer_comm.values())), repr(sum(self.per_layer_compute.values()))])
        return buf.getvalue()

    def trace_csv(self) -> str:
        return trace_csv(self.trace)


def _iteration_driver(net, rank, profile, groups, cluster, MB, iterations, seed, carry, rec):
    """Forward 0..L-1 (waiting on last iteration's wgrad first), backward L-1..0."""
    P = net.world_size
    dists = {}
    for layer in profile.param_layers:
        g = groups[layer.id]
        if g not in dists:
            dists[g] = Distribution(P, g, rank)
    pending = {}
    for it in range(iterations):
        for layer in profile.layers:
            g = groups.get(layer.id, 1)
            if layer.id in pending:
                t0 = net.now
                yield Wait(pending.pop(layer.id))
                rec.exposed[it][layer.id] = rec.exposed[it].get(layer.id, 0.0) + net.now - t0
            fwd, _ = compute_times(layer, g, cluster, MB)
            yield Compute(fwd, ("fwd", it, layer.id))
            if layer.parameterized and g > 1:
                d = dists[g]
                n_act = MB * layer.activation_elements
                buf = _data(carry, seed, rank, it, layer.id, 1, n_act)
                req = yield Submit(CollectiveKind.ALLGATHER, d.model_group, n_act,
                                   Priority.activation(layer.id), (it, layer.id), buffer=buf)
                t0 = net.now
                yield Wait(req)
                rec.exposed[it][layer.id] = rec.exposed[it].get(layer.id, 0.0) + net.now - t0
                rec.keep(rank, ("act", it, layer.id), req)
        for layer in reversed(profile.layers):
            g = groups.get(layer.id, 1)
            _, bwd = compute_times(layer, g, cluster, MB)
            yield Compute(bwd, ("bwd", it, layer.id))
            if not layer.parameterized:
                continue
            d = dists[g]
            if d.D > 1:
                n = layer.param_count // g
                buf = _data(carry, seed, rank, it, layer.id, 2, n)
                req = yield Submit(CollectiveKind.ALLREDUCE, d.data_peers, n,
                                   Priority.wgrad(layer.id), (it, layer.id), buffer=buf)
                pending[layer.id] = req
                rec.keep(rank, ("wgrad", it, layer.id), req)
            if g > 1:
                n_act = MB * layer.activation_elements
                buf = _data(carry, seed, rank, it, layer.id, 3, n_act)
                req = yield Submit(CollectiveKind.REDUCE_SCATTER, d.model_group, n_act,
                                   Priority.activation(layer.id), (it, layer.id), buffer=buf)
                t0 = net.now
                yield Wait(req)
                rec.exposed[it][layer.id] = rec.exposed[it].get(layer.id, 0.0) + net.now - t0
                rec.keep(rank, ("igrad", it, layer.id), req)
        rec.iter_end[rank].append(net.now)
    for lid in sorted(pending):
        yield Wait(pending[lid])


def _data(carry, seed, rank, it, lid, salt, n):
    if not carry:
        return None
    rng = np.random.default_rng([seed, rank, it, lid, salt])
    return rng.uniform(-1.0, 1.0, n).astype(np.float32)


class _Recorder:
    def __init__(self, iterations, nodes, carry):
        self.exposed = [dict() for _ in range(iterations)]
        self.iter_end = [[] for _ in range(nodes)]
        self.carry = carry
        self.results = {}

    def keep(self, rank, key, req):
        if self.carry:
            self.results[(rank,) + key] = req


class _SimNet(SimNetwork):
    def __init__(self, *a, wire=Precision.FP32, **kw):
        super().__init__(*a, **kw)
        self.wire = wire


def sim_run(profile: ModelProfile, plan, cluster: ClusterConfig, MB: int, iterations: int = 3,
            seed: int = 0, options: Optional[SimOptions] = None) -> SimMetrics:
    """Simulate ``iterations`` training iterations and report steady-state metrics.

    Iteration 0 has no earlier weight gradients to overlap with and is left
    out of the averages.  ``plan`` is a ParallelismPlan, ``{layer_id: g}`` or
    a single group size.
    """
    opts = options or SimOptions()
    if iterations < 2:
        raise ConfigError("iterations must be >= 2 (the first iteration is excluded)")
    if MB < 1:
        raise ConfigError("MB must be >= 1")
    try:
        groups = _groups_of(plan, profile)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    P = cluster.P
    for lid, g in groups.items():
        layer = profile.layers[lid]
        if P % g or layer.out_channels % g:
            raise ConfigError(f"layer {lid}: group size {g} incompatible with P={P}, K={layer.out_channels}")
    mode = opts.mode
    if mode == "auto":
        mode = "full" if opts.carry_data else "symmetric"
    if mode not in ("full", "symmetric"):
        raise ConfigError(f"unknown simulation mode {opts.mode!r}")
    if mode == "symmetric" and opts.carry_data:
        raise ConfigError("symmetric mode carries no data")
    wire = Precision.INT8 if opts.quantize else cluster.wire_precision
    net = _SimNet(P, cluster, opts.chunk_bytes, opts.prioritize, opts.eta, mode == "symmetric",
                  opts.record_trace, wire=wire)
    rec = _Recorder(iterations, len(net.nodes), opts.carry_data)
    for node in net.nodes:
        net.spawn(node.rank, _iteration_driver(net, node.rank, profile, groups, cluster, MB,
                                               iterations, seed, opts.carry_data, rec))
    net.run()

    ends = rec.iter_end[0]
    times = [ends[0]] + [ends[i] - ends[i - 1] for i in range(1, iterations)]
    steady = iterations - 1
    per_layer_exposed = {}
    for lid in (layer.id for layer in profile.layers):
        total = sum(rec.exposed[it].get(lid, 0.0) for it in range(1, iterations))
        per_layer_exposed[lid] = total / steady / len(net.nodes)

    rep = net.nodes[0]
    comm = {}
    busy = 0.0
    t_lo, t_hi = ends[0], ends[-1]
    per_iter_bytes = [0.0] * iterations
    for node in net.nodes:
        for start, end, label, nbytes in node.busy_log:
            per_iter_bytes[label[0]] += nbytes
    if net.symmetric:
        per_iter_bytes = [b * P for b in per_iter_bytes]
    for start, end, label, nbytes in rep.busy_log:
        comm[label[1]] = comm.get(label[1], 0.0) + (end - start) / iterations
        busy += max(0.0, min(end, t_hi) - max(start, t_lo))
    compute = {}
    for layer in profile.layers:
        fwd, bwd = compute_times(layer, groups.get(layer.id, 1), cluster, MB)
        compute[layer.id] = fwd + bwd
    return SimMetrics(
        world_size=P,
        mode=mode,
        iteration_times=times,
        iteration_s=sum(times[1:]) / steady,
        exposed_comm_s=sum(per_layer_exposed.values()),
        per_layer_exposed=per_layer_exposed,
        per_layer_comm=comm,
        per_layer_compute=compute,
        link_utilization=busy / (t_hi - t_lo) if t_hi > t_lo else 0.0,
        bytes_per_iteration=per_iter_bytes,
        trace=net.trace,
        results=rec.results,
    )


def sim_sweep(profile: ModelProfile, cluster: ClusterConfig, MB: int, P_list, options: Optional[SimOptions] = None,
              iterations: int = 3, seed: int = 0, group_size: int = 1) -> list:
    """Weak-scaling sweep through the simulator: efficiency = T(1) / T(P)."""
    opts = options or SimOptions(record_trace=False)
    base = sim_run(profile, 1, cluster.with_nodes(1), MB, iterations, seed, opts).iteration_s
    rows = []
    for P in P_list:
        if P == 1:
            rows.append(SweepRow(1, base, 1.0))
            continue
        g = group_size if P % group_size == 0 else 1
        t = sim_run(profile, g, cluster.with_nodes(P), MB, iterations, seed, opts).iteration_s
        rows.append(SweepRow(P, t, base / t))
    return rows
