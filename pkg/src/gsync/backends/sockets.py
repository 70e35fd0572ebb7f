"""TCP transport for small multi-process runs on one host (P <= 8).

Rank ``r`` listens on its own endpoint, accepts connections from lower ranks
and connects to higher ranks.  Both sides exchange a 9-byte handshake
(magic, version, rank) before any chunk traffic.
"""

from __future__ import annotations

import os
import selectors
import socket
import struct
import time
from dataclasses import dataclass, field
from .wire import HEADER_LEN, MAGIC, WIRE_VERSION, HeaderCorrupt, PeerClosed, TransportError, WireHeader

HANDSHAKE = struct.Struct("<4sBI")
RECV_BYTES = 1 << 20


class HandshakeError(TransportError):
    pass


class ConnectTimeout(TransportError):
    pass


def read_hostfile(path) -> list:
    endpoints = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            host, _, port = line.rpartition(":")
            endpoints.append((host or "127.0.0.1", int(port)))
    return endpoints


def endpoints_for(world_size, hostfile=None, base_port=None, host="127.0.0.1") -> list:
    if hostfile:
        eps = read_hostfile(hostfile)
        if len(eps) < world_size:
            raise TransportError(f"hostfile {hostfile} lists {len(eps)} endpoints, need {world_size}")
        return eps[:world_size]
    if base_port is None:
        raise TransportError("need a hostfile or a base port")
    return [(host, int(base_port) + r) for r in range(world_size)]


def free_ports(n: int) -> list:
    socks, ports = [], []
    for _ in range(n):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def _recv_exact(conn, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        part = conn.recv(n - len(buf))
        if not part:
            raise PeerClosed(f"peer closed after {len(buf)} of {n} bytes")
        buf += part
    return bytes(buf)


@dataclass
class Mesh:
    rank: int
    world_size: int
    conns: dict = field(default_factory=dict)

    @property
    def connection_count(self):
        return len(self.conns)

    def close(self):
        for c in self.conns.values():
            try:
                c.close()
            except OSError:
                pass
        self.conns.clear()


def sock_connect_all(rank: int, world_size: int, hostfile=None, base_port=None,
                     timeout: float = 30.0, version: int = WIRE_VERSION) -> Mesh:
    """Build the full connection mesh for ``rank``.  world_size=1 returns an empty mesh."""
    mesh = Mesh(rank, world_size)
    if world_size == 1:
        return mesh
    eps = endpoints_for(world_size, hostfile, base_port)
    deadline = time.monotonic() + timeout
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind(eps[rank])
        listener.listen(world_size)
        hello = HANDSHAKE.pack(MAGIC, version, rank)
        for peer in range(rank + 1, world_size):
            conn = _connect(eps[peer], deadline, peer)
            conn.sendall(hello)
            _check_hello(_recv_hello(conn, deadline, f"rank {peer}"), f"rank {peer}", expect=peer)
            mesh.conns[peer] = conn
        while len(mesh.conns) < world_size - 1:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ConnectTimeout(f"rank {rank}: only {len(mesh.conns)} of {world_size - 1} peers connected")
            listener.settimeout(remaining)
            try:
                conn, addr = listener.accept()
            except socket.timeout:
                continue
            who = f"peer at {addr[0]}:{addr[1]}"
            peer = _check_hello(_recv_hello(conn, deadline, who), who)
            if peer >= rank or peer in mesh.conns:
                conn.close()
                raise HandshakeError(f"{who}: unexpected rank {peer} connecting to rank {rank}")
            conn.sendall(hello)
            mesh.conns[peer] = conn
    except BaseException:
        mesh.close()
        raise
    finally:
        listener.close()
    for c in mesh.conns.values():
        c.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        c.settimeout(None)
    return mesh


def _connect(ep, deadline, peer):
    while True:
        try:
            return socket.create_connection(ep, timeout=max(0.1, deadline - time.monotonic()))
        except OSError:
            if time.monotonic() > deadline:
                raise ConnectTimeout(f"could not reach rank {peer} at {ep[0]}:{ep[1]}") from None
            time.sleep(0.02)


def _recv_hello(conn, deadline, who):
    conn.settimeout(max(0.1, deadline - time.monotonic()))
    try:
        return _recv_exact(conn, HANDSHAKE.size)
    except (socket.timeout, PeerClosed) as e:
        raise HandshakeError(f"{who}: no handshake ({e})") from None


def _check_hello(data, who, expect=None) -> int:
    magic, version, peer = HANDSHAKE.unpack(data)
    if magic != MAGIC:
        raise HandshakeError(f"{who}: bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise HandshakeError(f"{who} (rank {peer}): wire version {version}, expected {WIRE_VERSION}")
    if expect is not None and peer != expect:
        raise HandshakeError(f"{who}: announced rank {peer}, expected {expect}")
    return peer


def sock_send_chunk(conn, header: WireHeader, payload: bytes = b""):
    """Blocking send of one framed chunk; sendall resumes partial writes."""
    if header.payload_len != len(payload):
        raise HeaderCorrupt(f"payload_len {header.payload_len} != payload size {len(payload)}")
    conn.sendall(header.pack() + payload)


def sock_recv_chunk(conn):
    """Blocking receive of one framed chunk -> (header, payload)."""
    hdr = WireHeader.unpack(_recv_exact(conn, HEADER_LEN))
    return hdr, _recv_exact(conn, hdr.payload_len)


class SocketTransport:
    """Non-blocking transport over a connected mesh.

    Only the runtime's progress engine touches the sockets: ``send`` queues
    bytes and flushes what the kernel accepts, ``poll`` reads, flushes the
    rest and returns complete frames.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.rank = mesh.rank
        self.world_size = mesh.world_size
        self.bytes_on_wire = 0
        self._sel = selectors.DefaultSelector()
        self._in = {}
        self._out = {}
        self._peer = {}
        self._closed = set()
        for peer, conn in mesh.conns.items():
            conn.setblocking(False)
            self._in[peer] = bytearray()
            self._out[peer] = bytearray()
            self._peer[conn.fileno()] = peer
            self._sel.register(conn, selectors.EVENT_READ, peer)

    @classmethod
    def from_env(cls, timeout: float = 30.0) -> "SocketTransport":
        rank = int(os.environ["GSYNC_RANK"])
        world = int(os.environ["GSYNC_WORLD_SIZE"])
        hostfile = os.environ.get("GSYNC_HOSTFILE") or None
        base = os.environ.get("GSYNC_BASE_PORT")
        return cls(sock_connect_all(rank, world, hostfile, int(base) if base else None, timeout))

    def send(self, dest: int, header: WireHeader, payload: bytes):
        if dest not in self.mesh.conns or dest in self._closed:
            raise PeerClosed(f"no open connection to rank {dest}")
        out = self._out[dest]
        was_empty = not out
        out += header.pack()
        out += payload
        self.bytes_on_wire += HEADER_LEN + len(payload)
        self._flush(dest)
        if was_empty and out:
            self._sel.modify(self.mesh.conns[dest], selectors.EVENT_READ | selectors.EVENT_WRITE, dest)

    def _flush(self, peer):
        out = self._out[peer]
        conn = self.mesh.conns[peer]
        while out:
            try:
                n = conn.send(out)
            except BlockingIOError:
                return
            except OSError as e:
                raise PeerClosed(f"rank {peer}: {e}") from e
            del out[:n]
        if peer not in self._closed:
            self._sel.modify(conn, selectors.EVENT_READ, peer)

    def poll(self, timeout: float = 0.0) -> list:
        msgs = []
        if len(self._closed) == len(self.mesh.conns):
            if timeout > 0:
                time.sleep(timeout)
            return msgs
        for key, events in self._sel.select(timeout):
            peer = key.data
            if events & selectors.EVENT_WRITE:
                self._flush(peer)
            if events & selectors.EVENT_READ:
                try:
                    data = key.fileobj.recv(RECV_BYTES)
                except BlockingIOError:
                    continue
                except OSError as e:
                    raise PeerClosed(f"rank {peer}: {e}") from e
                if not data:
                    # orderly close: everything the peer sent has been read already
                    self._sel.unregister(key.fileobj)
                    self._closed.add(peer)
                    continue
                buf = self._in[peer]
                buf += data
                while len(buf) >= HEADER_LEN:
                    hdr = WireHeader.unpack(buf)
                    end = HEADER_LEN + hdr.payload_len
                    if len(buf) < end:
                        break
                    msgs.append((peer, hdr, bytes(buf[HEADER_LEN:end])))
                    del buf[:end]
        return msgs

    def close(self, timeout: float = 10.0):
        deadline = time.monotonic() + timeout
        for peer, conn in list(self.mesh.conns.items()):
            out = self._out.get(peer)
            if out:
                conn.setblocking(True)
                conn.settimeout(max(0.1, deadline - time.monotonic()))
                try:
                    conn.sendall(out)
                except OSError:
                    pass
                out.clear()
        try:
            self._sel.close()
        except Exception:
            pass
        self.mesh.close()
