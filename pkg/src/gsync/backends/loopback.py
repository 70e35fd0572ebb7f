"""In-process transport: one queue per rank, messages framed exactly as on the wire."""

from __future__ import annotations

import queue

from .wire import HEADER_LEN, PeerClosed, WireHeader


class LoopbackFabric:
    def __init__(self, world_size: int):
        self.world_size = world_size
        self.inboxes = [queue.Queue() for _ in range(world_size)]
        self.closed = [False] * world_size
        self.transports = [LoopbackTransport(self, r) for r in range(world_size)]

    def __getitem__(self, rank):
        return self.transports[rank]

    def __iter__(self):
        return iter(self.transports)


class LoopbackTransport:
    def __init__(self, fabric: LoopbackFabric, rank: int):
        self.fabric = fabric
        self.rank = rank
        self.world_size = fabric.world_size
        self.bytes_on_wire = 0

    def send(self, dest: int, header: WireHeader, payload: bytes):
        if self.fabric.closed[dest]:
            raise PeerClosed(f"rank {dest} has closed")
        frame = header.pack() + payload
        self.bytes_on_wire += len(frame)
        self.fabric.inboxes[dest].put((self.rank, frame))

    def poll(self, timeout: float = 0.0) -> list:
        box = self.fabric.inboxes[self.rank]
        out = []
        try:
            item = box.get(timeout=timeout) if timeout > 0 else box.get_nowait()
        except queue.Empty:
            return out
        while True:
            src, frame = item
            hdr = WireHeader.unpack(frame)
            out.append((src, hdr, frame[HEADER_LEN:HEADER_LEN + hdr.payload_len]))
            try:
                item = box.get_nowait()
            except queue.Empty:
                return out

    def close(self):
        self.fabric.closed[self.rank] = True
