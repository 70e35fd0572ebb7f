"""Chunked ring collectives, elementwise reduction and int8 chunk quantization.

Everything here is transport agnostic.  A :class:`ChunkPlan` describes the
ring schedule for a whole group; :class:`RingExecutor` is the per-rank state
machine that the scheduler (threaded runtime or simulator) drives one chunk
at a time.

Segment layout is fixed by the group size and buffer length only.  Chunking
subdivides segments, so changing ``chunk_bytes`` changes message boundaries
but never the order in which partial sums are combined.
"""

from __future__ import annotations

import math
import random
import struct
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .profiles import Precision

DEFAULT_CHUNK_BYTES = 64 * 1024
# chunk_index on the wire packs (step, chunk) as step << CHUNK_BITS | chunk
CHUNK_BITS = 20


class CollectiveError(Exception):
    pass


class LengthMismatch(CollectiveError, ValueError):
    pass


class NonFinite(CollectiveError, ValueError):
    pass


class InvalidGroup(CollectiveError, ValueError):
    pass


class ProtocolError(CollectiveError):
    pass


class CollectiveKind(Enum):
    ALLREDUCE = "allreduce"
    REDUCE_SCATTER = "reduce_scatter"
    ALLGATHER = "allgather"
    BROADCAST = "broadcast"
    BARRIER = "barrier"


class ReduceOp(Enum):
    SUM = "sum"
    MAX = "max"
    MIN = "min"


_UFUNC = {ReduceOp.SUM: np.add, ReduceOp.MAX: np.maximum, ReduceOp.MIN: np.minimum}


@dataclass(frozen=True)
class CommGroup:
    ranks: tuple
    my_index: int = 0

    def __post_init__(self):
        ranks = tuple(int(r) for r in self.ranks)
        object.__setattr__(self, "ranks", ranks)
        if not ranks:
            raise InvalidGroup("group has no ranks")
        if len(set(ranks)) != len(ranks):
            raise InvalidGroup(f"duplicate ranks in group {ranks}")
        if not 0 <= self.my_index < len(ranks):
            raise InvalidGroup(f"my_index {self.my_index} out of range for group of {len(ranks)}")

    @classmethod
    def of(cls, ranks, rank):
        ranks = tuple(ranks)
        if rank not in ranks:
            raise InvalidGroup(f"rank {rank} is not a member of {ranks}")
        return cls(ranks, ranks.index(rank))

    @property
    def size(self) -> int:
        return len(self.ranks)

    @property
    def rank(self) -> int:
        return self.ranks[self.my_index]

    @property
    def right(self) -> int:
        return self.ranks[(self.my_index + 1) % self.size]

    @property
    def left(self) -> int:
        return self.ranks[(self.my_index - 1) % self.size]


@dataclass(frozen=True)
class Transfer:
    """One chunk message as seen by one rank (either a send or a receive)."""

    step: int
    chunk: int
    segment: int
    offset: int
    length: float
    nbytes: float
    dep: int = -1       # sends: receive index that must have arrived first
    mode: str = ""      # sends: partial|origin|forward; receives: combine|replace

    @property
    def tag(self) -> int:
        return (self.step << CHUNK_BITS) | self.chunk


@dataclass(frozen=True)
class ScheduleEntry:
    step: int
    chunk: int
    send_to: int
    recv_from: int
    offset: int   # bytes
    length: int   # bytes


@dataclass(frozen=True)
class ChunkPlan:
    kind: CollectiveKind
    n: int
    length: int            # elements in the full buffer
    itemsize: int
    chunk_bytes: int
    segments: tuple        # (offset, length) in elements
    root: int = 0
    uniform: bool = False  # timing-only plan: equal fractional segments, no data

    @property
    def buffer_bytes(self):
        return self.length * self.itemsize

    @property
    def chunk_elems(self) -> int:
        return max(1, self.chunk_bytes // self.itemsize)

    @property
    def steps(self) -> int:
        if self.n == 1:
            return 0
        if self.kind in (CollectiveKind.ALLREDUCE, CollectiveKind.BARRIER):
            return 2 * (self.n - 1)
        if self.kind is CollectiveKind.BROADCAST:
            return 1
        return self.n - 1

    def segment_chunks(self, seg: int) -> list:
        """(offset, length, nbytes) of each chunk tiling segment ``seg``."""
        off, length = self.segments[seg]
        if self.uniform:
            nbytes = length * self.itemsize
            count = max(1, math.ceil(nbytes / self.chunk_bytes))
            out = []
            for c in range(count):
                b = min(self.chunk_bytes, nbytes - c * self.chunk_bytes)
                out.append((0, b / self.itemsize, b))
            return out
        ce = self.chunk_elems
        count = max(1, -(-length // ce))
        out = []
        for c in range(count):
            lo = c * ce
            ln = max(0, min(ce, length - lo))
            out.append((off + lo, ln, ln * self.itemsize))
        return out

    @property
    def num_chunks(self) -> int:
        return sum(len(self.segment_chunks(s)) for s in range(len(self.segments)))

    def rank_schedule(self, index: int):
        """Send and receive lists for the rank at ``index`` in the group, in order."""
        n = self.n
        sends, recvs = [], []
        if n == 1:
            return sends, recvs
        chunks = {}

        def seg_chunks(seg):
            if seg not in chunks:
                chunks[seg] = self.segment_chunks(seg)
            return chunks[seg]

        def ring_phase(first_step, nsteps, send_seg, recv_seg, send_mode, recv_mode, first_dep):
            for s in range(nsteps):
                step = first_step + s
                seg = send_seg(s)
                dep_base = len(recvs) - len(seg_chunks(seg)) if (s > 0 or first_dep) else None
                for c, (off, ln, nb) in enumerate(seg_chunks(seg)):
                    dep = -1 if dep_base is None else dep_base + c
                    mode = send_mode(s)
                    sends.append(Transfer(step, c, seg, off, ln, nb, dep, mode))
                rseg = recv_seg(s)
                for c, (off, ln, nb) in enumerate(seg_chunks(rseg)):
                    recvs.append(Transfer(step, c, rseg, off, ln, nb, -1, recv_mode))

        i = index
        if self.kind in (CollectiveKind.ALLREDUCE, CollectiveKind.BARRIER, CollectiveKind.REDUCE_SCATTER):
            ring_phase(0, n - 1,
                       lambda s: (i - s - 1) % n, lambda s: (i - s - 2) % n,
                       lambda s: "partial", "combine", False)
            if self.kind is not CollectiveKind.REDUCE_SCATTER:
                ring_phase(n - 1, n - 1,
                           lambda t: (i - t) % n, lambda t: (i - t - 1) % n,
                           lambda t: "origin" if t == 0 else "forward", "replace", True)
        elif self.kind is CollectiveKind.ALLGATHER:
            ring_phase(0, n - 1,
                       lambda t: (i - t) % n, lambda t: (i - t - 1) % n,
                       lambda t: "origin" if t == 0 else "forward", "replace", False)
        elif self.kind is CollectiveKind.BROADCAST:
            d = (i - self.root) % n
            parts = seg_chunks(0)
            if d > 0:
                for c, (off, ln, nb) in enumerate(parts):
                    recvs.append(Transfer(0, c, 0, off, ln, nb, -1, "replace"))
            if d < n - 1:
                for c, (off, ln, nb) in enumerate(parts):
                    sends.append(Transfer(0, c, 0, off, ln, nb, c if d > 0 else -1,
                                          "forward" if d > 0 else "origin"))
        return sends, recvs

    @property
    def entries(self) -> list:
        """Every chunk message of the collective, across all ranks (small groups only)."""
        out = []
        for i in range(self.n):
            sends, _ = self.rank_schedule(i)
            to = (i + 1) % self.n
            frm = (i - 1) % self.n
            for t in sends:
                out.append(ScheduleEntry(t.step, t.chunk, to, frm,
                                         int(t.offset * self.itemsize), int(t.nbytes)))
        return out


def split_segments(length: int, n: int) -> tuple:
    base, extra = divmod(length, n)
    segs, off = [], 0
    for j in range(n):
        ln = base + (1 if j < extra else 0)
        segs.append((off, ln))
        off += ln
    return tuple(segs)


def build_ring_schedule(kind, n: int, buffer_bytes, chunk_bytes: int = DEFAULT_CHUNK_BYTES,
                        itemsize: int = 4, root: int = 0, uniform: bool = False) -> ChunkPlan:
    """Deterministic ring schedule for ``n`` ranks over a buffer of ``buffer_bytes``.

    Allreduce is a reduce-scatter phase (n-1 steps) followed by an allgather
    phase (n-1 steps); rank ``i`` ends the reduce-scatter owning segment ``i``.
    Segments differ by at most one element and the last chunk of a segment may
    be short.  ``uniform=True`` builds a timing-only plan with equal
    fractional segments, used by the symmetric simulator.
    """
    kind = CollectiveKind(kind)
    if n < 1:
        raise InvalidGroup("group size must be >= 1")
    if chunk_bytes <= 0:
        raise ValueError("chunk_bytes must be > 0")
    if buffer_bytes < 0:
        raise ValueError("buffer_bytes must be >= 0")
    if kind is CollectiveKind.BARRIER:
        buffer_bytes = 0
    if uniform:
        length = buffer_bytes / itemsize
        nseg = 1 if kind is CollectiveKind.BROADCAST else n
        segs = tuple((0, length / nseg) for _ in range(nseg))
        return ChunkPlan(kind, n, length, itemsize, chunk_bytes, segs, root, True)
    if buffer_bytes % itemsize:
        raise ValueError(f"buffer_bytes {buffer_bytes} is not a multiple of itemsize {itemsize}")
    length = buffer_bytes // itemsize
    if kind is CollectiveKind.BROADCAST:
        segs = ((0, length),)
    else:
        segs = split_segments(length, n)
    return ChunkPlan(kind, n, length, itemsize, chunk_bytes, segs, root % n)


def reduce_elementwise(op, accumulator, incoming):
    """Combine ``incoming`` into ``accumulator`` elementwise, in FP32, in place."""
    op = ReduceOp(op)
    acc = accumulator if isinstance(accumulator, np.ndarray) else np.asarray(accumulator, np.float32)
    if acc.dtype != np.float32:
        acc = acc.astype(np.float32)
    inc = np.asarray(incoming, dtype=np.float32)
    if acc.shape != inc.shape:
        raise LengthMismatch(f"cannot combine lengths {acc.size} and {inc.size}")
    _UFUNC[op](acc, inc, out=acc)
    return acc


def allreduce_oracle(inputs: Sequence, op=ReduceOp.SUM) -> np.ndarray:
    """Sequential FP32 reduction of the per-rank inputs in rank order."""
    if len(inputs) == 0:
        raise ValueError("need at least one input")
    acc = np.array(inputs[0], dtype=np.float32, copy=True)
    for x in inputs[1:]:
        reduce_elementwise(op, acc, x)
    return acc


@dataclass
class QuantChunk:
    payload: np.ndarray   # int8
    scale: float          # FP32
    element_count: int

    def to_bytes(self) -> bytes:
        return struct.pack("<f", self.scale) + self.payload.astype(np.int8).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantChunk":
        (scale,) = struct.unpack_from("<f", data, 0)
        q = np.frombuffer(data, dtype=np.int8, offset=4)
        return cls(q, scale, q.size)


def quantize_chunk(values) -> QuantChunk:
    """Symmetric linear int8: scale = max|x|/127, q = round(x/scale)."""
    x = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise NonFinite("cannot quantize NaN/Inf values")
    if x.size == 0:
        return QuantChunk(np.zeros(0, np.int8), 0.0, 0)
    scale = np.float32(np.max(np.abs(x)) / np.float32(127.0))
    if scale == 0:
        return QuantChunk(np.zeros(x.size, np.int8), 0.0, x.size)
    r = x.astype(np.float64) / float(scale)
    q = np.clip(np.sign(r) * np.floor(np.abs(r) + 0.5), -127, 127).astype(np.int8)
    return QuantChunk(q, float(scale), x.size)


def dequantize_chunk(chunk: QuantChunk) -> np.ndarray:
    return chunk.payload.astype(np.float32) * np.float32(chunk.scale)


def encode_values(values: np.ndarray, wire: Precision) -> bytes:
    if wire is Precision.FP32:
        return np.ascontiguousarray(values, dtype=np.float32).tobytes()
    if wire is Precision.FP16:
        return np.asarray(values, dtype=np.float32).astype(np.float16).tobytes()
    return quantize_chunk(values).to_bytes()


def decode_values(payload: bytes, wire: Precision) -> np.ndarray:
    if wire is Precision.FP32:
        return np.frombuffer(payload, dtype=np.float32)
    if wire is Precision.FP16:
        return np.frombuffer(payload, dtype=np.float16).astype(np.float32)
    return dequantize_chunk(QuantChunk.from_bytes(payload))


class RingExecutor:
    """Drives one rank's part of a collective, one chunk at a time.

    ``buffer`` is worked on in place (float32, full collective length).  With
    ``buffer=None`` the executor only tracks progress, which is what the
    timing simulator needs.  Sends are issued in schedule order; a send is
    ready once the receive it depends on has been applied.
    """

    def __init__(self, plan: ChunkPlan, index: int, buffer: Optional[np.ndarray] = None,
                 op=ReduceOp.SUM, wire: Precision = Precision.FP32):
        self.plan = plan
        self.index = index
        self.op = ReduceOp(op)
        self.wire = wire
        if buffer is not None and plan.uniform:
            raise ValueError("uniform plans carry no data")
        if buffer is not None:
            buffer = np.asarray(buffer)
            if buffer.dtype != np.float32 or buffer.ndim != 1:
                raise TypeError("executor buffers must be 1-D float32")
            if buffer.size != plan.length:
                raise LengthMismatch(f"buffer has {buffer.size} elements, plan expects {plan.length}")
        self.buffer = buffer
        self.sends, self.recvs = plan.rank_schedule(index)
        self.sent = 0
        self.sends_completed = 0
        self.received = 0
        self.max_abs = 0.0       # largest magnitude quantized by this rank (int8 wire)
        self._forward = {}

    @property
    def total_chunks(self) -> int:
        return len(self.sends) + len(self.recvs)

    @property
    def chunks_done(self) -> int:
        return self.sends_completed + self.received

    @property
    def done(self) -> bool:
        return self.sends_completed == len(self.sends) and self.received == len(self.recvs)

    def can_send(self) -> bool:
        if self.sent >= len(self.sends):
            return False
        dep = self.sends[self.sent].dep
        return dep < 0 or dep < self.received

    def peek(self) -> Transfer:
        return self.sends[self.sent]

    def next_send(self):
        """Issue the next chunk: returns (Transfer, payload bytes or None)."""
        if not self.can_send():
            raise ProtocolError("no send is ready")
        t = self.sends[self.sent]
        self.sent += 1
        if self.buffer is None:
            return t, None
        key = (t.segment, t.chunk)
        if t.mode == "forward":
            payload = self._forward.pop(key)
        else:
            vals = self.buffer[t.offset:t.offset + t.length]
            if self.wire is Precision.INT8 and vals.size:
                self.max_abs = max(self.max_abs, float(np.max(np.abs(vals))))
            payload = encode_values(vals, self.wire)
            if t.mode == "origin" and self.wire is not Precision.FP32:
                # owner adopts the wire-rounded values so every rank ends identical
                vals[:] = decode_values(payload, self.wire)
        return t, payload

    def send_completed(self):
        self.sends_completed += 1

    def on_receive(self, tag: int, payload: Optional[bytes]):
        if self.received >= len(self.recvs):
            raise ProtocolError(f"unexpected chunk tag {tag}: all receives done")
        t = self.recvs[self.received]
        if t.tag != tag:
            raise ProtocolError(f"expected chunk tag {t.tag} (step {t.step}, chunk {t.chunk}), got {tag}")
        self.received += 1
        if self.buffer is None:
            return
        vals = decode_values(payload, self.wire)
        if vals.size != t.length:
            raise ProtocolError(f"chunk carries {vals.size} elements, expected {t.length}")
        dst = self.buffer[t.offset:t.offset + t.length]
        if t.mode == "combine":
            reduce_elementwise(self.op, dst, vals)
        else:
            dst[:] = vals
            self._forward[(t.segment, t.chunk)] = payload


def run_ring(plan: ChunkPlan, inputs: Sequence, op=ReduceOp.SUM, wire: Precision = Precision.FP32,
             seed: Optional[int] = None):
    """Execute ``plan`` over an in-memory FIFO message exchange.

    Returns (outputs, max_abs) where ``max_abs`` is the largest magnitude
    quantized anywhere (int8 wire).  With ``seed`` the interleaving of sends
    and deliveries is randomized; any interleaving must give the same result.
    """
    n = plan.n
    if len(inputs) != n:
        raise LengthMismatch(f"{len(inputs)} inputs for a group of {n}")
    bufs = [np.array(x, dtype=np.float32, copy=True) for x in inputs]
    execs = [RingExecutor(plan, i, bufs[i], op, wire) for i in range(n)]
    links = [deque() for _ in range(n)]   # links[i]: messages in flight from i to i+1
    rng = random.Random(seed) if seed is not None else None
    turn = 0
    while not all(e.done for e in execs):
        actions = []
        for i, e in enumerate(execs):
            if e.can_send():
                actions.append(("send", i))
            if links[i]:
                actions.append(("deliver", i))
        if not actions:
            raise ProtocolError("ring schedule deadlocked")
        if rng is not None:
            kind, i = rng.choice(actions)
        else:
            kind, i = actions[turn % len(actions)]
            turn += 1
        if kind == "send":
            t, payload = execs[i].next_send()
            execs[i].send_completed()
            links[i].append((t.tag, payload))
        else:
            tag, payload = links[i].popleft()
            execs[(i + 1) % n].on_receive(tag, payload)
    return bufs, max(e.max_abs for e in execs)
