"""Per-layer communication sessions over data, model and hybrid parallelism.

A layer split over a model group of ``g`` ranks exchanges activations inside
the group (allgather forward, reduce-scatter backward) and allreduces its
``param_count/g`` weight-gradient shard across the ``D = P/g`` groups.  With
``g = 1`` this is plain data parallelism, with ``g = P`` plain model
parallelism.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .collectives import CollectiveKind, CommGroup, InvalidGroup, ReduceOp, split_segments
from .profiles import LayerDescriptor
from .scheduler import Handle, Priority


class IndivisibleShard(InvalidGroup):
    pass


class SessionBusy(RuntimeError):
    pass


@dataclass(frozen=True)
class Distribution:
    """Contiguous-block groups: rank r sits in model block r // g."""

    P: int
    g: int
    rank: int

    def __post_init__(self):
        if self.P < 1 or self.g < 1 or self.P % self.g:
            raise InvalidGroup(f"group size {self.g} does not divide P={self.P}")
        if not 0 <= self.rank < self.P:
            raise InvalidGroup(f"rank {self.rank} outside world of {self.P}")

    @property
    def D(self) -> int:
        return self.P // self.g

    @property
    def model_group(self) -> CommGroup:
        base = self.rank // self.g * self.g
        return CommGroup.of(range(base, base + self.g), self.rank)

    @property
    def data_peers(self) -> CommGroup:
        return CommGroup.of(range(self.rank % self.g, self.P, self.g), self.rank)


class _Done:
    """Handle stand-in for operations that move no bytes."""

    def __repr__(self):
        return "<done>"


DONE = _Done()


@dataclass
class LayerSession:
    layer: LayerDescriptor
    dist: Distribution
    runtime: object
    wgrad: Optional[object] = None
    activation: Optional[object] = None
    results: dict = field(default_factory=dict)

    @property
    def shard_params(self) -> int:
        return self.layer.param_count // self.dist.g

    def activation_block(self, MB: int) -> int:
        """Elements of this rank's slice of the layer output."""
        return MB * self.layer.activation_elements // self.dist.g

    # -- helpers ---------------------------------------------------------

    def _begin(self, slot, kind, buf, group, priority):
        if getattr(self, slot) is not None:
            raise SessionBusy(f"layer {self.layer.id}: {slot} operation already outstanding")
        if group.size == 1:
            setattr(self, slot, DONE)
            return DONE
        h = self.runtime.submit(kind, buf, group, ReduceOp.SUM, priority)
        setattr(self, slot, h)
        self.results[slot] = buf
        return h

    def _wait(self, slot, timeout=None):
        h = getattr(self, slot)
        if h is None:
            raise SessionBusy(f"layer {self.layer.id}: no outstanding {slot} operation")
        setattr(self, slot, None)
        if h is not DONE:
            self.runtime.wait(h, timeout)
        return self.results.pop(slot, None)

    # -- forward ---------------------------------------------------------

    def forward_activations_begin(self, block) -> Handle:
        """Allgather this rank's output block; the full activation is returned by the wait."""
        block = np.asarray(block, dtype=np.float32).ravel()
        g = self.dist.g
        if g == 1:
            self.results["activation"] = block.copy()
            return self._begin("activation", CollectiveKind.ALLGATHER, None, self.dist.model_group, None)
        full = np.zeros(block.size * g, np.float32)
        idx = self.dist.model_group.my_index
        full[idx * block.size:(idx + 1) * block.size] = block
        return self._begin("activation", CollectiveKind.ALLGATHER, full, self.dist.model_group,
                           Priority.activation(self.layer.id))

    def forward_activations_wait(self, timeout=None):
        return self._wait("activation", timeout)

    # -- backward --------------------------------------------------------

    def backward_wgrad_begin(self, partial) -> Handle:
        """Allreduce the local ``param_count/g`` gradient shard across data peers."""
        buf = np.array(partial, dtype=np.float32).ravel()
        if buf.size != self.shard_params:
            raise ValueError(f"layer {self.layer.id}: gradient shard has {buf.size} elements, "
                             f"expected {self.shard_params}")
        if self.dist.D == 1:
            self.results["wgrad"] = buf
        return self._begin("wgrad", CollectiveKind.ALLREDUCE, buf, self.dist.data_peers,
                           Priority.wgrad(self.layer.id))

    def wgrad_wait(self, timeout=None):
        return self._wait("wgrad", timeout)

    def backward_inputgrad_begin(self, grads) -> Handle:
        """Reduce-scatter activation gradients; the wait returns this rank's summed segment."""
        buf = np.array(grads, dtype=np.float32).ravel()
        if self.dist.g == 1:
            self.results["activation"] = buf
        return self._begin("activation", CollectiveKind.REDUCE_SCATTER, buf, self.dist.model_group,
                           Priority.activation(self.layer.id))

    def backward_inputgrad_wait(self, timeout=None):
        full = self._wait("activation", timeout)
        if self.dist.g == 1 or full is None:
            return full
        off, ln = split_segments(full.size, self.dist.g)[self.dist.model_group.my_index]
        return full[off:off + ln]


def create_session(layer: LayerDescriptor, dist: Distribution, runtime) -> LayerSession:
    g = dist.g
    if layer.parameterized and (layer.param_count % g or layer.out_channels % g):
        raise IndivisibleShard(f"layer {layer.id} ({layer.name}): param_count={layer.param_count}, "
                               f"K={layer.out_channels} not divisible by g={g}")
    return LayerSession(layer, dist, runtime)
