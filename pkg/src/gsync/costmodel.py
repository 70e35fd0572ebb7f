"""Compute-to-communication cost model and per-layer parallelism planner.

Concrete formulas used throughout:

* conv forward flops per sample ``2*C*K*KH*KW*OH*OW`` (FC: ``2*C*K``),
  backward costs twice the forward;
* ring collectives under an alpha-beta link model: allreduce
  ``2(n-1)(alpha + nbytes/n/beta)``, allgather / reduce-scatter
  ``(n-1)(alpha + nbytes/n/beta)``;
* a layer with model-group size ``g`` on ``P`` nodes keeps ``param_count/g``
  parameters per node and allreduces them over the ``D = P/g`` replicas.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional

from .collectives import CollectiveKind, InvalidGroup
from .profiles import LayerDescriptor, ModelProfile, Precision

UNBOUNDED = math.inf


class ConfigError(ValueError):
    pass


class PlanMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    P: int
    alpha: float = 5e-6
    beta: float = 1.25e9
    gamma: float = 3e12
    eta: float = 0.9
    wire_precision: Precision = Precision.FP32

    def __post_init__(self):
        object.__setattr__(self, "wire_precision", Precision.parse(self.wire_precision))
        if not isinstance(self.P, int) or self.P < 1:
            raise ConfigError(f"P must be an integer >= 1, got {self.P!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")

    def with_nodes(self, P: int) -> "ClusterConfig":
        return replace(self, P=P)

    @property
    def itemsize(self) -> int:
        return self.wire_precision.itemsize


def calibrated_cluster(P: int) -> ClusterConfig:
    """Cluster used for the 256-node weak-scaling check (see README, Calibration)."""
    return ClusterConfig(P, alpha=3e-6, beta=1.25e9, gamma=3e12, eta=0.9)


@dataclass(frozen=True)
class StrategyChoice:
    group_size: int = 1

    def data_groups(self, P: int) -> int:
        return P // self.group_size


@dataclass(frozen=True)
class CommVolume:
    wgrad_bytes: float
    activation_bytes: float

    @property
    def total(self) -> float:
        return self.wgrad_bytes + self.activation_bytes


def check_group(layer: LayerDescriptor, g: int, P: int):
    if g < 1 or P % g:
        raise InvalidGroup(f"group size {g} does not divide P={P}")
    if layer.parameterized and layer.out_channels % g:
        raise InvalidGroup(f"layer {layer.id} ({layer.name}): K={layer.out_channels} "
                           f"is not divisible by group size {g}")


def layer_flops(layer: LayerDescriptor, MB: int) -> float:
    """Forward plus backward flops for a minibatch of ``MB`` samples."""
    if layer.parameterized:
        return 3 * MB * layer.fwd_flops_per_sample
    return MB * layer.fwd_flops_per_sample


def comm_volume(layer: LayerDescriptor, choice: StrategyChoice, cluster: ClusterConfig, MB: int) -> CommVolume:
    g = choice.group_size
    check_group(layer, g, cluster.P)
    if not layer.parameterized:
        return CommVolume(0.0, 0.0)
    D = cluster.P // g
    e = cluster.itemsize
    wgrad = 0.0 if D == 1 else 2 * (D - 1) * (layer.param_count // g) * e / D
    act = 0.0 if g == 1 else 2 * (g - 1) * MB * layer.activation_elements * e / g
    return CommVolume(float(wgrad), float(act))


def compute_comm_ratio(layer, choice, cluster, MB) -> float:
    vol = comm_volume(layer, choice, cluster, MB).total
    if vol == 0:
        return UNBOUNDED
    return layer_flops(layer, MB) / vol


def estimate_collective_time(kind, nbytes: float, n: int, cluster: ClusterConfig) -> float:
    kind = CollectiveKind(kind)
    if n < 1:
        raise InvalidGroup("group size must be >= 1")
    if n == 1:
        return 0.0
    step = cluster.alpha + (nbytes / n) / cluster.beta
    if kind is CollectiveKind.ALLREDUCE:
        return 2 * (n - 1) * step
    if kind in (CollectiveKind.ALLGATHER, CollectiveKind.REDUCE_SCATTER):
        return (n - 1) * step
    raise ValueError(f"no cost formula for {kind.value}")


def compute_times(layer: LayerDescriptor, g: int, cluster: ClusterConfig, MB: int):
    """(forward seconds, backward seconds) of one layer on one node."""
    if not layer.parameterized:
        return MB * layer.fwd_flops_per_sample / cluster.gamma, 0.0
    fwd = MB * layer.fwd_flops_per_sample / (cluster.gamma * g)
    return fwd, 2 * fwd


def comm_times(layer: LayerDescriptor, g: int, cluster: ClusterConfig, MB: int):
    """(wgrad allreduce seconds, activation exchange seconds) for one layer."""
    check_group(layer, g, cluster.P)
    if not layer.parameterized:
        return 0.0, 0.0
    e = cluster.itemsize
    D = cluster.P // g
    wgrad = estimate_collective_time(CollectiveKind.ALLREDUCE, layer.param_count // g * e, D, cluster)
    act_bytes = MB * layer.activation_elements * e
    act = (estimate_collective_time(CollectiveKind.ALLGATHER, act_bytes, g, cluster)
           + estimate_collective_time(CollectiveKind.REDUCE_SCATTER, act_bytes, g, cluster))
    return wgrad, act


@dataclass(frozen=True)
class LayerEstimate:
    id: int
    group_size: int
    compute_s: float
    comm_s: float
    exposed_s: float


@dataclass(frozen=True)
class ParallelismPlan:
    layers: tuple
    total_s: float

    def group_size(self, layer_id: int) -> int:
        for est in self.layers:
            if est.id == layer_id:
                return est.group_size
        return 1

    @property
    def groups(self) -> dict:
        return {est.id: est.group_size for est in self.layers}

    def to_json(self) -> dict:
        return {
            "layers": [
                {"id": e.id, "group_size": e.group_size, "est_compute_s": e.compute_s,
                 "est_comm_s": e.comm_s, "est_exposed_s": e.exposed_s}
                for e in self.layers
            ],
            "total_s": self.total_s,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


@dataclass(frozen=True)
class IterationEstimate:
    total_s: float
    exposed_s: dict        # parameterized layer id -> exposed comm seconds
    compute_s: dict        # every layer id -> compute seconds
    comm_s: dict           # parameterized layer id -> comm seconds


def _groups_of(plan, profile: ModelProfile) -> dict:
    if isinstance(plan, ParallelismPlan):
        groups = plan.groups
    elif isinstance(plan, int):
        groups = {layer.id: plan for layer in profile.param_layers}
    else:
        groups = dict(plan)
    want = {layer.id for layer in profile.param_layers}
    if set(groups) != want:
        raise PlanMismatch(f"plan covers layers {sorted(groups)} but profile has "
                           f"parameterized layers {sorted(want)}")
    return groups


def estimate_iteration_time(profile: ModelProfile, plan, cluster: ClusterConfig, MB: int) -> IterationEstimate:
    """Analytical steady-state iteration time.

    Weight-gradient traffic of layer ``l`` hides behind ``eta`` times the
    backward compute of layers below ``l`` plus the next forward pass up to
    ``l``.  Activation exchanges block and are always exposed.  ``plan`` may
    be a ParallelismPlan, a ``{layer_id: g}`` mapping, or a single ``g``.
    """
    groups = _groups_of(plan, profile)
    compute, exposed, comm = {}, {}, {}
    window = 0.0
    for layer in profile.layers:
        g = groups.get(layer.id, 1)
        fwd, bwd = compute_times(layer, g, cluster, MB)
        compute[layer.id] = fwd + bwd
        if layer.parameterized:
            wgrad, act = comm_times(layer, g, cluster, MB)
            comm[layer.id] = wgrad + act
            exposed[layer.id] = act + max(0.0, wgrad - cluster.eta * window)
        window += fwd + bwd
    total = sum(compute.values()) + sum(exposed.values())
    return IterationEstimate(total, exposed, compute, comm)


def make_plan(profile: ModelProfile, cluster: ClusterConfig, MB: int, groups=1) -> ParallelismPlan:
    groups = _groups_of(groups, profile)
    est = estimate_iteration_time(profile, groups, cluster, MB)
    layers = tuple(
        LayerEstimate(layer.id, groups[layer.id], est.compute_s[layer.id],
                      est.comm_s[layer.id], est.exposed_s[layer.id])
        for layer in profile.param_layers
    )
    return ParallelismPlan(layers, est.total_s)


def divisors(P: int) -> list:
    return [g for g in range(1, P + 1) if P % g == 0]


def select_plan(profile: ModelProfile, cluster: ClusterConfig, MB: int,
                candidates: Optional[Iterable[int]] = None) -> ParallelismPlan:
    """Pick a model-group size per parameterized layer.

    Layers are visited in forward order.  Each layer takes the candidate
    minimizing its own compute + exposed communication, where the overlap
    window comes from the already-chosen layers below it; ties go to the
    smaller group.  Candidates that do not divide the layer's K are skipped.
    """
    cands = sorted(set(divisors(cluster.P) if candidates is None else candidates))
    if not cands:
        raise InvalidGroup("candidate group-size set is empty")
    for g in cands:
        if g < 1 or cluster.P % g:
            raise InvalidGroup(f"candidate group size {g} does not divide P={cluster.P}")
    groups = {}
    window = 0.0
    for layer in profile.layers:
        if not layer.parameterized:
            fwd, bwd = compute_times(layer, 1, cluster, MB)
            window += fwd + bwd
            continue
        best = None
        for g in cands:
            if layer.out_channels % g:
                continue
            fwd, bwd = compute_times(layer, g, cluster, MB)
            wgrad, act = comm_times(layer, g, cluster, MB)
            cost = fwd + bwd + act + max(0.0, wgrad - cluster.eta * window)
            if best is None or cost < best[0]:
                best = (cost, g, fwd + bwd)
        if best is None:
            raise InvalidGroup(f"layer {layer.id} ({layer.name}): no candidate group size divides "
                               f"K={layer.out_channels}")
        groups[layer.id] = best[1]
        window += best[2]
    return make_plan(profile, cluster, MB, groups)


@dataclass(frozen=True)
class SweepRow:
    P: int
    iter_time_s: float
    efficiency: float


def scaling_sweep(profile: ModelProfile, cluster: ClusterConfig, MB: int, P_list, group_size: int = 1) -> list:
    """Weak-scaling table from the analytical model (fixed ``MB`` per node)."""
    base = estimate_iteration_time(profile, 1, cluster.with_nodes(1), MB).total_s
    rows = []
    for P in P_list:
        c = cluster.with_nodes(P)
        g = group_size if P % group_size == 0 else 1
        t = base if P == 1 else estimate_iteration_time(profile, g, c, MB).total_s
        rows.append(SweepRow(P, t, 1.0 if P == 1 else base / t))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["P", "iter_time_s", "efficiency"])
    for r in rows:
        w.writerow([r.P, repr(r.iter_time_s), repr(r.efficiency)])
    return buf.getvalue()
