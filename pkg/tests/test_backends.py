import socket
import subprocess
import sys
import tempfile
import threading

import numpy as np
import pytest

from gsync.backends.loopback import LoopbackFabric, LoopbackTransport
from gsync.backends.sim import SimNetwork, SimOptions, sim_run, sim_sweep
from gsync.backends.sockets import (
    HandshakeError,
    SocketTransport,
    free_ports,
    read_hostfile,
    sock_connect_all,
    sock_recv_chunk,
    sock_send_chunk,
)
from gsync.backends.wire import HEADER_LEN, MSG_DATA, HeaderCorrupt, WireHeader
from gsync.collectives import CollectiveKind, CommGroup, allreduce_oracle
from gsync.costmodel import ClusterConfig, ConfigError, StrategyChoice, comm_volume, compute_times, estimate_collective_time
from gsync.profiles import Precision, profile_from_dict, shipped_profile
from gsync.scheduler import Priority, Runtime
from gsync.validate import random_inputs, run_ranks, runtime_allreduce, sim_allreduce, sim_collective

MLP = shipped_profile("mlp")


def hostfile(ports):
    f = tempfile.NamedTemporaryFile("w", suffix=".hosts", delete=False)
    f.write("".join(f"127.0.0.1:{p}\n" for p in ports))
    f.close()
    return f.name


def socket_factory(world):
    hf = hostfile(free_ports(world))
    return lambda r: SocketTransport(sock_connect_all(r, world, hostfile=hf, timeout=20))


def in_threads(world, fn):
    out, errs = [None] * world, []

    def run(r):
        try:
            out[r] = fn(r)
        except BaseException as e:
            errs.append(e)

    ts = [threading.Thread(target=run, args=(r,)) for r in range(world)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(60)
    return out, errs


# -- wire format -----------------------------------------------------------

def test_header_is_27_bytes_little_endian():
    h = WireHeader(MSG_DATA, 0x0102030405060708, 3, 9, Precision.FP32.code, 65536)
    raw = h.pack()
    assert HEADER_LEN == len(raw) == 27
    assert raw[:4] == b"GSYN" and raw[4] == 1 and raw[5] == MSG_DATA
    assert raw[6:14] == bytes([8, 7, 6, 5, 4, 3, 2, 1])
    assert raw[18:22] == (9).to_bytes(4, "little")
    assert raw[22] == 0
    assert raw[23:27] == (65536).to_bytes(4, "little")
    assert WireHeader.unpack(raw) == h


def test_header_rejects_bad_version_and_magic():
    raw = bytearray(WireHeader(MSG_DATA, 1, 0, 1, 0, 0).pack())
    raw[4] = 2
    with pytest.raises(HeaderCorrupt, match="version"):
        WireHeader.unpack(bytes(raw))
    with pytest.raises(HeaderCorrupt, match="magic"):
        WireHeader.unpack(b"XXXX" + bytes(23))
    with pytest.raises(HeaderCorrupt):
        WireHeader.unpack(b"GSYN")


def test_chunk_framing_over_socketpair():
    a, b = socket.socketpair()
    try:
        sock_send_chunk(a, WireHeader(MSG_DATA, 5, 0, 1, 0, 0))
        payload = np.arange(16384, dtype=np.float32).tobytes()
        sock_send_chunk(a, WireHeader(MSG_DATA, 5, 1, 2, Precision.FP32.code, len(payload)), payload)
        h0, p0 = sock_recv_chunk(b)
        assert h0.payload_len == 0 and p0 == b""
        h1, p1 = sock_recv_chunk(b)
        assert h1.payload_len == 65536 and h1.dtype == Precision.FP32.code and p1 == payload
        with pytest.raises(HeaderCorrupt):
            sock_send_chunk(a, WireHeader(MSG_DATA, 5, 0, 1, 0, 10), b"short")
    finally:
        a.close()
        b.close()


def test_barrier_frame_is_27_bytes_on_the_wire():
    world = 2
    factory = socket_factory(world)

    def body(r):
        t = factory(r)
        with Runtime(t) as rt:
            rt.wait(rt.submit(CollectiveKind.BARRIER, np.zeros(0, np.float32), CommGroup.of(range(world), r)), 30)
        return t.bytes_on_wire

    sent, errs = in_threads(world, body)
    assert not errs
    # a 2-rank barrier is a zero-length ring allreduce: 2 steps of one empty chunk each
    assert sent == [2 * HEADER_LEN, 2 * HEADER_LEN]


# -- connection mesh -------------------------------------------------------

def test_world_of_one_is_an_empty_mesh():
    mesh = sock_connect_all(0, 1)
    assert mesh.connection_count == 0


def test_four_ranks_build_six_connections(tmp_path):
    ports = free_ports(4)
    hf = tmp_path / "hosts"
    hf.write_text("".join(f"127.0.0.1:{p}\n" for p in ports))
    assert read_hostfile(hf) == [("127.0.0.1", p) for p in ports]
    meshes, errs = in_threads(4, lambda r: sock_connect_all(r, 4, hostfile=hf, timeout=20))
    assert not errs
    try:
        assert [m.connection_count for m in meshes] == [3, 3, 3, 3]
        assert sum(m.connection_count for m in meshes) // 2 == 6
        assert all(sorted(m.conns) == [q for q in range(4) if q != m.rank] for m in meshes)
    finally:
        for m in meshes:
            m.close()


def test_version_mismatch_names_the_peer():
    hf = hostfile(free_ports(2))
    errors = {}

    def run(r):
        try:
            sock_connect_all(r, 2, hostfile=hf, timeout=5, version=2 if r == 0 else 1).close()
        except HandshakeError as e:
            errors[r] = str(e)

    _, errs = in_threads(2, run)
    assert not errs
    # rank 1 rejects rank 0's hello and says who sent it
    assert "rank 0" in errors[1] and "version 2" in errors[1]
    assert "rank 1" in errors[0]


# -- socket runtime --------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 4])
def test_socket_allreduce_matches_oracle_and_sim_bitwise(n):
    inputs = random_inputs(n, n, 5000)
    outs = runtime_allreduce(inputs, chunk_bytes=4096, transport_factory=socket_factory(n))
    ref = allreduce_oracle(inputs)
    sim_out, _ = sim_allreduce(inputs, chunk_bytes=4096)
    for o, s in zip(outs, sim_out):
        np.testing.assert_allclose(o, ref, rtol=1e-6, atol=1e-6)
        np.testing.assert_array_equal(o, s)


def test_four_process_socket_bench():
    proc = subprocess.run([sys.executable, "-m", "gsync.cli", "bench", "--spawn", "4", "--sizes", "1000,65536",
                           "--reps", "1"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    rows = proc.stdout.strip().splitlines()
    assert rows[0] == "size_bytes,median_s,max_err,bound,verified"
    assert [r.split(",")[-1] for r in rows[1:]] == ["True", "True"]


def test_loopback_matches_sim_for_request_mix():
    n = 3
    rng = np.random.default_rng(7)
    a = [rng.uniform(-1, 1, 777).astype(np.float32) for _ in range(n)]
    b = [rng.uniform(-1, 1, 1500).astype(np.float32) for _ in range(n)]
    fabric = LoopbackFabric(n)

    def body(r, rt):
        x, y = a[r].copy(), b[r].copy()
        g = CommGroup.of(range(n), r)
        h1 = rt.submit(CollectiveKind.ALLREDUCE, x, g, priority=Priority.wgrad(5))
        h2 = rt.submit(CollectiveKind.ALLREDUCE, y, g, priority=Priority.activation(0))
        rt.wait(h2, 30)
        rt.wait(h1, 30)
        return x, y

    outs = run_ranks(n, body, lambda r: LoopbackTransport(fabric, r), chunk_bytes=512)
    sa, _ = sim_allreduce(a, chunk_bytes=512)
    sb, _ = sim_allreduce(b, chunk_bytes=512)
    for r in range(n):
        np.testing.assert_array_equal(outs[r][0], sa[r])
        np.testing.assert_array_equal(outs[r][1], sb[r])


# -- simulator -------------------------------------------------------------

def test_single_node_iteration_is_pure_compute():
    cluster = ClusterConfig(1, gamma=3e12)
    m = sim_run(MLP, 1, cluster, 8, iterations=3, seed=0, options=SimOptions(mode="full"))
    expect = 0.0
    for layer in MLP.layers:
        fwd, _ = compute_times(layer, 1, cluster, 8)
        expect += fwd
    for layer in reversed(MLP.layers):
        _, bwd = compute_times(layer, 1, cluster, 8)
        expect += bwd
    assert m.iteration_s == pytest.approx(expect, rel=1e-12)
    assert m.exposed_comm_s == 0 and m.bytes_per_iteration == [0, 0, 0]
    assert not [e for e in m.trace if e.event in ("send", "arrive")]


def test_simulation_is_deterministic():
    opts = SimOptions(mode="full")
    a = sim_run(MLP, 2, ClusterConfig(4), 8, 3, 1, opts)
    b = sim_run(MLP, 2, ClusterConfig(4), 8, 3, 1, opts)
    assert a.trace_csv() == b.trace_csv()
    assert a.metrics_csv() == b.metrics_csv()


@pytest.mark.parametrize("g", [1, 2, 4])
def test_bytes_on_links_equal_cost_model_volume(g):
    c = ClusterConfig(4)
    vol = sum(comm_volume(layer, StrategyChoice(g), c, 8).total for layer in MLP.layers) * 4
    for mode in ("full", "symmetric"):
        m = sim_run(MLP, g, c, 8, 3, 0, SimOptions(mode=mode))
        assert m.bytes_per_iteration == [vol] * 3


def test_symmetric_mode_matches_full_mode():
    c = ClusterConfig(4, alpha=5e-6, beta=1.25e9, gamma=3e12)
    for g in (1, 2):
        full = sim_run(MLP, g, c, 8, 3, 0, SimOptions(mode="full"))
        sym = sim_run(MLP, g, c, 8, 3, 0, SimOptions(mode="symmetric"))
        assert sym.iteration_s == pytest.approx(full.iteration_s, rel=1e-9)
        assert sym.exposed_comm_s == pytest.approx(full.exposed_comm_s, rel=1e-9, abs=1e-15)


@pytest.mark.parametrize("n", [2, 3, 4, 8])
def test_isolated_allreduce_matches_alpha_beta(n):
    N = 4800    # divisible by every n, so ring segments are equal
    c = ClusterConfig(n, alpha=5e-6, beta=1.25e9)
    _, reqs, _ = sim_collective(CollectiveKind.ALLREDUCE, random_inputs(0, n, N), chunk_bytes=N * 4, cluster=c)
    t = estimate_collective_time(CollectiveKind.ALLREDUCE, N * 4, n, c)
    for r in reqs:
        assert abs(r.done_time - t) <= 1e-9 * t


def test_carried_data_matches_oracle():
    P = 4
    small = profile_from_dict({"name": "s", "default_minibatch": 2, "layers": [
        dict(id=i, name=f"fc{i}", kind="FullyConnected", C=64, K=64, OH=1, OW=1, KH=1, KW=1, stride=1,
             has_bias=True) for i in range(3)]})
    m = sim_run(small, 1, ClusterConfig(P), 2, 2, 3, SimOptions(mode="full", carry_data=True, chunk_bytes=1024))
    for lid in range(3):
        # the driver seeds each rank's gradient from (seed, rank, iteration, layer, salt=2)
        inputs = [np.random.default_rng([3, r, 0, lid, 2]).uniform(-1.0, 1.0, small.layers[lid].param_count)
                  .astype(np.float32) for r in range(P)]
        ref = allreduce_oracle(inputs)
        for r in range(P):
            np.testing.assert_allclose(m.results[(r, "wgrad", 0, lid)].work, ref, rtol=1e-6, atol=1e-6)


def test_metrics_csv_has_totals_row():
    m = sim_run(MLP, 1, ClusterConfig(2), 8)
    rows = m.metrics_csv().strip().splitlines()
    assert rows[0] == "layer_id,exposed_comm_s,comm_s,compute_s"
    assert rows[-1].startswith("total,") and len(rows) == len(MLP.layers) + 2


def test_sim_run_rejects_bad_config():
    with pytest.raises(ConfigError):
        sim_run(MLP, 1, ClusterConfig(2), 8, iterations=1)
    with pytest.raises(ConfigError):
        sim_run(MLP, 3, ClusterConfig(4), 8)
    with pytest.raises(ConfigError):
        sim_run(MLP, 1, ClusterConfig(2), 8, options=SimOptions(mode="symmetric", carry_data=True))
    with pytest.raises(ConfigError):
        SimNetwork(2, ClusterConfig(2), eta=1.5)


def test_sweep_single_point_and_prioritization_pairing():
    c = ClusterConfig(1, alpha=5e-6, beta=1.25e9, gamma=3e12)
    rows = sim_sweep(MLP, c, 8, [1])
    assert len(rows) == 1 and rows[0].efficiency == 1.0
    on = sim_sweep(MLP, c, 8, [1, 2, 4, 8], SimOptions(record_trace=False))
    off = sim_sweep(MLP, c, 8, [1, 2, 4, 8], SimOptions(prioritize=False, record_trace=False))
    for a, b in zip(on, off):
        assert a.efficiency >= b.efficiency


def test_quantized_wire_shrinks_traffic():
    c = ClusterConfig(4)
    fp = sim_run(MLP, 1, c, 8, options=SimOptions(mode="symmetric"))
    q = sim_run(MLP, 1, c, 8, options=SimOptions(mode="symmetric", quantize=True))
    assert q.bytes_per_iteration[0] == pytest.approx(fp.bytes_per_iteration[0] / 4)
