import numpy as np
import pytest

from gsync.backends.loopback import LoopbackFabric, LoopbackTransport
from gsync.backends.sim import Compute, SimNetwork, Submit, Wait, _iteration_driver, _Recorder
from gsync.collectives import CollectiveKind, CommGroup, InvalidGroup, allreduce_oracle, split_segments
from gsync.costmodel import ClusterConfig, StrategyChoice, comm_volume
from gsync.layer_api import DONE, Distribution, IndivisibleShard, SessionBusy, create_session
from gsync.profiles import profile_from_dict, shipped_profile
from gsync.scheduler import Priority, PriorityClass, group_tag
from gsync.validate import run_ranks


def fc(C, K, bias=True, name="fc"):
    return dict(name=name, kind="FullyConnected", C=C, K=K, OH=1, OW=1, KH=1, KW=1, stride=1, has_bias=bias)


def small_profile(*layers, mb=2):
    return profile_from_dict({"name": "small", "default_minibatch": mb,
                              "layers": [dict(id=i, **d) for i, d in enumerate(layers)]})


LAYER = small_profile(fc(8, 4)).layers[0]      # 36 parameters, K=4


class CountingTransport(LoopbackTransport):
    def __init__(self, fabric, rank, sent):
        super().__init__(fabric, rank)
        self.sent = sent

    def send(self, dest, header, payload):
        self.sent[self.rank] += len(payload)
        super().send(dest, header, payload)


def counting_factory(world):
    fabric = LoopbackFabric(world)
    sent = [0] * world
    return (lambda r: CountingTransport(fabric, r, sent)), sent


@pytest.mark.parametrize("P,g,rank,model,data", [
    (4, 1, 2, (2,), (0, 1, 2, 3)),
    (4, 4, 2, (0, 1, 2, 3), (2,)),
    (8, 2, 5, (4, 5), (1, 3, 5, 7)),
    (8, 4, 6, (4, 5, 6, 7), (2, 6)),
])
def test_distribution_groups(P, g, rank, model, data):
    d = Distribution(P, g, rank)
    assert d.model_group.ranks == model
    assert d.data_peers.ranks == data
    assert d.D * d.g == P
    assert set(model) & set(data) == {rank}


def test_distribution_rejects_bad_sizes():
    with pytest.raises(InvalidGroup):
        Distribution(6, 4, 0)
    with pytest.raises(InvalidGroup):
        Distribution(4, 2, 4)


def test_indivisible_shard():
    odd = small_profile(fc(3, 3, bias=False)).layers[0]     # 9 params, K=3
    with pytest.raises(IndivisibleShard):
        create_session(odd, Distribution(4, 2, 0), runtime=None)
    s = create_session(odd, Distribution(3, 3, 0), runtime=None)
    assert s.shard_params == 3


def test_degenerate_groups_complete_immediately():
    s = create_session(LAYER, Distribution(1, 1, 0), runtime=None)
    assert s.forward_activations_begin(np.ones(3)) is DONE
    np.testing.assert_array_equal(s.forward_activations_wait(), np.ones(3))
    assert s.backward_wgrad_begin(np.arange(36)) is DONE
    np.testing.assert_array_equal(s.wgrad_wait(), np.arange(36, dtype=np.float32))
    assert s.backward_inputgrad_begin([1, 2]) is DONE
    np.testing.assert_array_equal(s.backward_inputgrad_wait(), [1, 2])


def test_one_outstanding_operation_per_kind():
    s = create_session(LAYER, Distribution(1, 1, 0), runtime=None)
    s.backward_wgrad_begin(np.zeros(36))
    with pytest.raises(SessionBusy):
        s.backward_wgrad_begin(np.zeros(36))
    s.wgrad_wait()
    with pytest.raises(SessionBusy):
        s.wgrad_wait()
    with pytest.raises(ValueError):
        s.backward_wgrad_begin(np.zeros(35))


def test_allgather_two_ranks():
    a, b = np.float32([1.5, -2.0, 3.0]), np.float32([4.0, 5.0, -6.25])

    def body(r, rt):
        s = create_session(LAYER, Distribution(2, 2, r), rt)
        s.forward_activations_begin([a, b][r])
        return s.forward_activations_wait(30)

    for out in run_ranks(2, body):
        np.testing.assert_array_equal(out, np.concatenate([a, b]))


def test_inputgrad_reduce_scatter_two_ranks():
    def body(r, rt):
        s = create_session(LAYER, Distribution(2, 2, r), rt)
        s.backward_inputgrad_begin([[1, 2], [3, 4]][r])
        return s.backward_inputgrad_wait(30)

    r0, r1 = run_ranks(2, body)
    assert list(r0) == [4] and list(r1) == [6]


def test_inputgrad_matches_oracle_then_slice():
    n, length = 4, 103
    rng = np.random.default_rng(3)
    grads = [rng.uniform(-1, 1, length).astype(np.float32) for _ in range(n)]
    ref = allreduce_oracle(grads)

    def body(r, rt):
        s = create_session(LAYER, Distribution(n, n, r), rt)
        s.backward_inputgrad_begin(grads[r])
        return s.backward_inputgrad_wait(30)

    segs = split_segments(length, n)
    for r, out in enumerate(run_ranks(n, body, chunk_bytes=64)):
        off, ln = segs[r]
        np.testing.assert_allclose(out, ref[off:off + ln], rtol=1e-6, atol=1e-7)


def test_wgrad_ones_become_fours():
    def body(r, rt):
        s = create_session(LAYER, Distribution(4, 1, r), rt)
        s.backward_wgrad_begin(np.ones(36))
        return s.wgrad_wait(30)

    for out in run_ranks(4, body):
        np.testing.assert_array_equal(out, np.full(36, 4.0, np.float32))


@pytest.mark.parametrize("g", [1, 2, 4])
def test_hybrid_sharded_allreduce_equals_full(g):
    P = 4
    rng = np.random.default_rng(g)
    grads = [rng.uniform(-1, 1, 36).astype(np.float32) for _ in range(P)]
    ref = allreduce_oracle(grads)
    shard = 36 // g

    # rank r holds shard (r mod g) of every data peer's gradient; summing over the data peers
    # of all model blocks and concatenating the shards must reproduce the full reduction
    def body(r, rt):
        d = Distribution(P, g, r)
        s = create_session(LAYER, d, rt)
        k = d.model_group.my_index
        s.backward_wgrad_begin(sum(grads[q][k * shard:(k + 1) * shard] for q in d.model_group.ranks))
        return s.wgrad_wait(30)

    outs = run_ranks(P, body, chunk_bytes=32)
    for block in range(P // g):
        full = np.concatenate([outs[block * g + k] for k in range(g)])
        np.testing.assert_allclose(full, ref, rtol=1e-6, atol=1e-6)


def test_endpoint_degeneracy_moves_no_bytes():
    P, MB = 4, 2
    cluster = ClusterConfig(P)
    act = np.ones(MB * LAYER.activation_elements // P, np.float32)

    # g = 1: activations stay local, only weight gradients move
    factory, sent = counting_factory(P)

    def data_parallel(r, rt):
        s = create_session(LAYER, Distribution(P, 1, r), rt)
        assert s.forward_activations_begin(act) is DONE
        s.forward_activations_wait()
        return 0

    run_ranks(P, data_parallel, factory)
    assert sum(sent) == 0 == comm_volume(LAYER, StrategyChoice(1), cluster, MB).activation_bytes

    # g = P: the whole layer is one model group, weight gradients stay local
    factory, sent = counting_factory(P)

    def model_parallel(r, rt):
        s = create_session(LAYER, Distribution(P, P, r), rt)
        assert s.backward_wgrad_begin(np.ones(36 // P)) is DONE
        s.wgrad_wait()
        return 0

    run_ranks(P, model_parallel, factory)
    assert sum(sent) == 0 == comm_volume(LAYER, StrategyChoice(P), cluster, MB).wgrad_bytes


def test_activation_outranks_weight_gradient():
    assert Priority.activation(50).cls < Priority.wgrad(0).cls
    net = SimNetwork(2, ClusterConfig(2), chunk_bytes=4096, record_decisions=True)
    group = CommGroup.of([0, 1], 0)
    wg = net.submit(0, "allreduce", group, 100_000, Priority.wgrad(0), cid=1)
    act = None

    def late_activation():
        nonlocal act
        yield Compute(1e-5)
        act = yield Submit(CollectiveKind.ALLGATHER, group, 1000, Priority.activation(3))
        yield Wait(act)

    net.spawn(0, late_activation())
    # peer rank 1 mirrors both requests so they can complete
    peer = CommGroup.of([0, 1], 1)
    net.submit(1, "allreduce", peer, 100_000, Priority.wgrad(0), cid=1)
    net.submit_at(1e-5, 1, kind="allgather", group=peer, length=1000, priority=Priority.activation(3),
                  cid=group_tag(group, 0))
    net.run()
    assert act.done_time < wg.done_time
    # from its submission on, every link decision on rank 0 picks the activation request
    after = [(t, chosen) for t, rank, chosen, _ in net.decisions if rank == 0 and act.submit_time <= t < act.done_time]
    assert after and all(chosen == act.id for _, chosen in after)
    assert act.priority.cls is PriorityClass.ACTIVATION


def test_layer0_wgrad_beats_layer40_on_contended_link():
    net = SimNetwork(2, ClusterConfig(2), chunk_bytes=8192)
    reqs = {}
    for rank in (0, 1):
        g = CommGroup.of([0, 1], rank)
        # layer 40 is submitted first (backward order), layer 0 last
        reqs[rank, 40] = net.submit(rank, "allreduce", g, 200_000, Priority.wgrad(40), cid=40)
        reqs[rank, 0] = net.submit(rank, "allreduce", g, 200_000, Priority.wgrad(0), cid=0)
    net.run()
    for rank in (0, 1):
        assert reqs[rank, 0].done_time < reqs[rank, 40].done_time


def test_forward_waits_for_previous_wgrad():
    prof = small_profile(fc(64, 32, name="a"), fc(32, 32, name="b"), fc(32, 16, name="c"), mb=4)
    P, iterations = 4, 3
    cluster = ClusterConfig(P, alpha=2e-5, beta=1e8, gamma=1e9)
    net = SimNetwork(P, cluster, chunk_bytes=256)
    rec = _Recorder(iterations, P, False)
    log = []

    def watched(rank):
        gen = _iteration_driver(net, rank, prof, {i: 1 for i in range(3)}, cluster, 4, iterations, 0, False, rec)
        value = None
        while True:
            try:
                cmd = gen.send(value)
            except StopIteration:
                return
            if isinstance(cmd, Compute):
                log.append((net.now, rank, cmd.label))
            value = yield cmd

    for r in range(P):
        net.spawn(r, watched(r))
    net.run()
    done = {(rank, req.buffer): req.done_time for rank, req in net.requests
            if req.kind is CollectiveKind.ALLREDUCE}
    checked = 0
    for t, rank, (phase, it, lid) in log:
        if phase == "fwd" and it >= 1:
            assert t >= done[rank, (it - 1, lid)]
            checked += 1
    assert checked == P * (iterations - 1) * 3


def test_mlp_session_blocks_are_sized_per_group():
    layer = shipped_profile("mlp").layers[1]
    s = create_session(layer, Distribution(8, 4, 1), runtime=None)
    assert s.shard_params == layer.param_count // 4
    assert s.activation_block(8) == 8 * 4096 // 4
