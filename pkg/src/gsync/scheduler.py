"""Request submission, priority policy, chunk-boundary preemption and progress.

The policy core (:class:`LinkScheduler`) is shared by the threaded
:class:`Runtime` and by the discrete-event simulator.  It decides, each time
a rank's outgoing link is free, which request sends the next chunk.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import threading
import time
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Optional

import numpy as np

from .collectives import (
    DEFAULT_CHUNK_BYTES,
    CollectiveKind,
    CommGroup,
    InvalidGroup,
    ReduceOp,
    RingExecutor,
    build_ring_schedule,
)
from .backends.wire import MSG_DATA, WireHeader
from .profiles import Precision

log = logging.getLogger(__name__)


class SchedulerError(Exception):
    pass


class NotStarted(SchedulerError):
    pass


class InvalidHandle(SchedulerError):
    pass


class TransportFailure(SchedulerError):
    pass


class DrainTimeout(SchedulerError):
    pass


class PriorityClass(IntEnum):
    ACTIVATION = 0
    WEIGHT_GRADIENT = 1
    BULK = 2


@dataclass(frozen=True, order=True)
class Priority:
    """Total order: class, then key ascending, then submission sequence."""

    cls: PriorityClass = PriorityClass.BULK
    key: int = 0
    seq: int = 0

    @classmethod
    def activation(cls, key=0):
        return cls(PriorityClass.ACTIVATION, key)

    @classmethod
    def wgrad(cls, layer_id):
        return cls(PriorityClass.WEIGHT_GRADIENT, layer_id)

    @classmethod
    def bulk(cls):
        return cls(PriorityClass.BULK, 0)


class RequestState(Enum):
    QUEUED = "Queued"
    IN_FLIGHT = "InFlight"
    PREEMPTED = "Preempted"
    DONE = "Done"
    FAILED = "Failed"


_ALLOWED = {
    RequestState.QUEUED: {RequestState.IN_FLIGHT, RequestState.DONE, RequestState.FAILED},
    RequestState.IN_FLIGHT: {RequestState.PREEMPTED, RequestState.DONE, RequestState.FAILED},
    RequestState.PREEMPTED: {RequestState.IN_FLIGHT, RequestState.FAILED},
    RequestState.DONE: set(),
    RequestState.FAILED: set(),
}


@dataclass
class CollectiveRequest:
    id: int
    tag: int
    kind: CollectiveKind
    group: CommGroup
    length: float
    precision: Precision
    op: ReduceOp
    priority: Priority
    executor: RingExecutor
    state: RequestState = RequestState.QUEUED
    promoted: Optional[int] = None
    error: Optional[str] = None
    submit_time: float = 0.0
    done_time: Optional[float] = None
    preemptions: int = 0
    buffer: object = None      # caller's array, receives the result
    work: object = None        # float32 working copy driven by the executor
    event: Optional[threading.Event] = field(default=None, repr=False)

    @property
    def plan(self):
        return self.executor.plan

    @property
    def chunks_done(self) -> int:
        return self.executor.chunks_done

    @property
    def total_chunks(self) -> int:
        return self.executor.total_chunks

    def transition(self, new: RequestState):
        if new is self.state:
            return
        if new not in _ALLOWED[self.state]:
            raise SchedulerError(f"request {self.id}: illegal transition {self.state.value} -> {new.value}")
        self.state = new


@dataclass(frozen=True)
class Handle:
    request_id: int
    rank: int


@dataclass(frozen=True)
class TraceEvent:
    time_s: float
    event: str
    request_id: object = ""
    chunk_index: object = ""
    link: str = ""


def trace_csv(events) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s", "event", "request_id", "chunk_index", "link"])
    for ev in events:
        w.writerow([repr(float(ev.time_s)), ev.event, ev.request_id, ev.chunk_index, ev.link])
    return buf.getvalue()


class LinkScheduler:
    """Chooses which request uses a rank's outgoing link for the next chunk.

    With ``prioritize`` the runnable request with the smallest effective
    priority wins; a request being waited on jumps to the front of its class.
    Without it, requests are served first-come first-served.  A request that
    still had a ready chunk when a different one took the link is marked
    Preempted; its progress is kept and it resumes where it stopped.
    """

    def __init__(self, prioritize: bool = True):
        self.prioritize = prioritize
        self.active = []
        self.current: Optional[CollectiveRequest] = None
        self._seq = itertools.count()
        self._promo = itertools.count()

    def add(self, req: CollectiveRequest):
        req.priority = replace(req.priority, seq=next(self._seq))
        self.active.append(req)

    def order_key(self, req: CollectiveRequest):
        p = req.priority
        if not self.prioritize:
            return (p.seq,)
        if req.promoted is not None:
            return (int(p.cls), 0, req.promoted, p.seq)
        return (int(p.cls), 1, p.key, p.seq)

    def promote(self, req: CollectiveRequest):
        if self.prioritize and req.promoted is None:
            req.promoted = next(self._promo)

    def runnable(self) -> list:
        return [r for r in self.active if r.executor.can_send()]

    def select(self):
        """Pick the request for the next chunk, applying preemption bookkeeping.

        Returns (request, preempted) where ``preempted`` is the request that was
        displaced at this chunk boundary, or None.
        """
        cands = self.runnable()
        if not cands:
            return None, None
        best = min(cands, key=self.order_key)
        displaced = None
        cur = self.current
        if (cur is not None and cur is not best and cur.state is RequestState.IN_FLIGHT
                and cur.executor.can_send()):
            cur.transition(RequestState.PREEMPTED)
            cur.preemptions += 1
            displaced = cur
        best.transition(RequestState.IN_FLIGHT)
        self.current = best
        return best, displaced

    def retire(self, req: CollectiveRequest):
        if req in self.active:
            self.active.remove(req)
        if self.current is req:
            self.current = None


def group_tag(group: CommGroup, counter: int) -> int:
    """64-bit request tag shared by every member of a group for its n-th collective."""
    gid = zlib.crc32(",".join(map(str, group.ranks)).encode())
    return (gid << 32) | (counter & 0xFFFFFFFF)


@dataclass
class DrainReport:
    completed: list = field(default_factory=list)
    aborted: list = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.completed and not self.aborted


class Runtime:
    """Per-rank communication runtime with asynchronous progress.

    ``transport`` must provide ``rank``, ``world_size``,
    ``send(dest, header, payload)``, ``poll(timeout) -> [(src, header, payload)]``
    and ``close()``.  ``engines`` progress threads are started by
    :meth:`start`; with ``engines=0`` the caller drives :meth:`progress_step`.
    """

    def __init__(self, transport, chunk_bytes: int = DEFAULT_CHUNK_BYTES,
                 wire: Precision = Precision.FP32, prioritize: bool = True,
                 engines: int = 1, trace: bool = False, idle_wait: float = 0.0005):
        self.transport = transport
        self.rank = transport.rank
        self.world_size = transport.world_size
        self.chunk_bytes = chunk_bytes
        self.wire = Precision.parse(wire)
        self.sched = LinkScheduler(prioritize)
        self.engines = engines
        self.idle_wait = idle_wait
        self.record_trace = trace
        self.trace = []
        self.bytes_sent = 0
        self._lock = threading.RLock()
        self._requests = {}
        self._by_tag = {}
        self._early = {}
        self._counters = {}
        self._ids = itertools.count()
        self._threads = []
        self._running = False
        self._started = False
        self._failed: Optional[str] = None
        self._t0 = time.perf_counter()

    # -- lifecycle -------------------------------------------------------

    def start(self):
        if self._started:
            return self
        self._started = True
        self._running = True
        for i in range(self.engines):
            t = threading.Thread(target=self._engine, name=f"gsync-progress-{self.rank}-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown(drain=exc[0] is None)

    def _now(self):
        return time.perf_counter() - self._t0

    def _log(self, event, req="", chunk="", link=""):
        if self.record_trace:
            self.trace.append(TraceEvent(self._now(), event, req, chunk, link))

    def _engine(self):
        while self._running:
            try:
                advanced = self.progress_step()
            except Exception as e:  # any transport failure takes the runtime down
                self._fail(f"rank {self.rank}: {type(e).__name__}: {e}")
                return
            if not advanced:
                self._poll(self.idle_wait)

    # -- submission ------------------------------------------------------

    def submit(self, kind, buffer, group: CommGroup, op=ReduceOp.SUM, priority: Optional[Priority] = None,
               root: int = 0, wire: Optional[Precision] = None, tag: Optional[int] = None) -> Handle:
        """Non-blocking collective.  The result lands in ``buffer`` when done.

        For reduce-scatter the local segment of ``buffer`` holds the result;
        for allgather ``buffer`` is the full output with the local block
        already in place.
        """
        if not self._started:
            raise NotStarted("runtime not started")
        if self._failed:
            raise TransportFailure(self._failed)
        kind = CollectiveKind(kind)
        if group.rank != self.rank:
            raise InvalidGroup(f"group member {group.rank} at my_index is not this rank ({self.rank})")
        if any(r < 0 or r >= self.world_size for r in group.ranks):
            raise InvalidGroup(f"group {group.ranks} has ranks outside world of {self.world_size}")
        wire = self.wire if wire is None else Precision.parse(wire)
        if kind is CollectiveKind.BARRIER:
            work = np.zeros(0, np.float32)
        else:
            if buffer is None or np.asarray(buffer).size == 0:
                raise ValueError("buffer must be non-empty")
            work = np.array(buffer, dtype=np.float32, copy=True).ravel()
        # chunk_bytes counts wire bytes (scale prefix of int8 chunks excluded), same as the simulator
        e = wire.itemsize
        plan = build_ring_schedule(kind, group.size, work.size * e, self.chunk_bytes, e, root)
        ex = RingExecutor(plan, group.my_index, work, op, wire)
        with self._lock:
            if tag is None:
                count = self._counters.get(group.ranks, 0)
                self._counters[group.ranks] = count + 1
                tag = group_tag(group, count)
            req = CollectiveRequest(next(self._ids), tag, kind, group, work.size, wire, ReduceOp(op),
                                    priority or Priority.bulk(), ex, submit_time=self._now(),
                                    buffer=buffer, work=work, event=threading.Event())
            self._requests[req.id] = req
            self._by_tag[tag] = req
            self.sched.add(req)
            self._log("submit", req.id)
            for src, hdr, payload in self._early.pop(tag, []):
                self._deliver(req, hdr, payload)
            self._check_done(req)
        return Handle(req.id, self.rank)

    # -- completion ------------------------------------------------------

    def _request(self, handle: Handle) -> CollectiveRequest:
        req = self._requests.get(handle.request_id) if handle.rank == self.rank else None
        if req is None:
            raise InvalidHandle(f"unknown or already-consumed handle {handle}")
        return req

    def test(self, handle: Handle) -> bool:
        with self._lock:
            req = self._request(handle)
            if req.state is RequestState.FAILED:
                raise TransportFailure(req.error)
            return req.state is RequestState.DONE

    def wait(self, handle: Handle, timeout: Optional[float] = None) -> RequestState:
        """Block until done; the awaited request jumps to the front of its class."""
        with self._lock:
            req = self._request(handle)
            self.sched.promote(req)
        if self.engines == 0:
            deadline = None if timeout is None else time.monotonic() + timeout
            while not req.event.is_set():
                if not self.progress_step():
                    self._poll(self.idle_wait)
                if deadline is not None and time.monotonic() > deadline:
                    raise TimeoutError(f"request {req.id} did not complete in {timeout}s")
        elif not req.event.wait(timeout):
            raise TimeoutError(f"request {req.id} did not complete in {timeout}s")
        with self._lock:
            self._requests.pop(req.id, None)
        if req.state is RequestState.FAILED:
            raise TransportFailure(req.error)
        return req.state

    def state(self, handle: Handle) -> RequestState:
        with self._lock:
            return self._request(handle).state

    def request(self, handle: Handle) -> CollectiveRequest:
        """The request behind a live handle (valid until it is waited on)."""
        with self._lock:
            return self._request(handle)

    # -- progress --------------------------------------------------------

    def _poll(self, timeout):
        if self.engines == 1:
            # the single engine thread owns the transport and may block in poll
            msgs = self.transport.poll(timeout)
            if msgs:
                with self._lock:
                    for src, hdr, payload in msgs:
                        self._on_message(src, hdr, payload)
            return bool(msgs)
        # several pollers: receive and deliver atomically so per-link order is kept
        with self._lock:
            msgs = self.transport.poll(0)
            for src, hdr, payload in msgs:
                self._on_message(src, hdr, payload)
        if not msgs and timeout > 0:
            time.sleep(timeout)
        return bool(msgs)

    def _on_message(self, src, hdr, payload):
        req = self._by_tag.get(hdr.request_tag)
        if req is None:
            self._early.setdefault(hdr.request_tag, []).append((src, hdr, payload))
            return
        self._deliver(req, hdr, payload)
        self._check_done(req)

    def _deliver(self, req, hdr, payload):
        req.executor.on_receive(hdr.chunk_index, payload)
        self._log("arrive", req.id, hdr.chunk_index, f"{req.group.left}->{self.rank}")

    def progress_step(self) -> bool:
        """Advance at most one chunk on this rank's link.  Returns True if anything moved."""
        got = self._poll(0)
        with self._lock:
            if self._failed:
                return False
            req, displaced = self.sched.select()
            if req is None:
                return got
            if displaced is not None:
                self._log("preempt", displaced.id, "", f"{self.rank}->{displaced.group.right}")
            t, payload = req.executor.next_send()
            dest = req.group.right
            hdr = WireHeader(MSG_DATA, req.tag, t.tag, len(req.executor.sends), req.precision.code,
                             len(payload))
            self._log("send", req.id, t.tag, f"{self.rank}->{dest}")
            self.transport.send(dest, hdr, payload)
            self.bytes_sent += int(t.nbytes)
            req.executor.send_completed()
            self._check_done(req)
            return True

    def _check_done(self, req):
        if req.state in (RequestState.DONE, RequestState.FAILED) or not req.executor.done:
            return
        if req.buffer is not None and req.kind is not CollectiveKind.BARRIER:
            out = np.asarray(req.buffer)
            if isinstance(req.buffer, np.ndarray):
                out.reshape(-1)[:] = req.work.astype(out.dtype, copy=False)
        req.transition(RequestState.DONE)
        req.done_time = self._now()
        self.sched.retire(req)
        self._by_tag.pop(req.tag, None)
        self._log("done", req.id)
        req.event.set()

    def _fail(self, message):
        with self._lock:
            if self._failed:
                return
            self._failed = message
            log.error("runtime failed: %s", message)
            for req in list(self._requests.values()):
                if req.state not in (RequestState.DONE, RequestState.FAILED):
                    req.error = message
                    req.transition(RequestState.FAILED)
                    self.sched.retire(req)
                    req.event.set()

    @property
    def failed(self) -> Optional[str]:
        return self._failed

    def pending(self) -> list:
        with self._lock:
            return [r.id for r in self._requests.values()
                    if r.state not in (RequestState.DONE, RequestState.FAILED)]

    def shutdown(self, drain: bool = True, timeout: float = 30.0) -> DrainReport:
        """Stop the runtime.  Pending requests are completed (drain) or aborted."""
        if not self._started:
            raise NotStarted("runtime not started")
        report = DrainReport()
        pending = self.pending()
        if drain and pending:
            deadline = time.monotonic() + timeout
            while True:
                with self._lock:
                    left = [i for i in pending if self._requests[i].state
                            not in (RequestState.DONE, RequestState.FAILED)]
                if not left:
                    break
                if time.monotonic() > deadline:
                    self._stop()
                    raise DrainTimeout(f"{len(left)} request(s) still pending after {timeout}s: {left}")
                if self.engines == 0:
                    if not self.progress_step():
                        self._poll(self.idle_wait)
                else:
                    time.sleep(self.idle_wait)
            with self._lock:
                for i in pending:
                    (report.completed if self._requests[i].state is RequestState.DONE
                     else report.aborted).append(i)
        else:
            with self._lock:
                for i in pending:
                    req = self._requests[i]
                    req.error = "aborted by shutdown"
                    req.transition(RequestState.FAILED)
                    self.sched.retire(req)
                    req.event.set()
                    report.aborted.append(i)
        self._stop()
        return report

    def _stop(self):
        self._running = False
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=5)
        self._threads = []
        self.transport.close()
