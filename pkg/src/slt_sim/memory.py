"""Analytical peak training memory.

Counting rules (4-byte elements, batch-multiplied for activations):

* weights: every tensor in the block's state (weight, bias, norm affine and
  running statistics), at the width actually held on the device;
* activations: for trainable blocks, the outputs of conv/dense, norm, skip-add
  and ReLU ops, plus the pooled input of dense blocks fed by a spatial map;
* gradients: one per trainable parameter (running statistics excluded);
* boundary: the input of the first trainable block, counted once. With nothing
  frozen this is the input batch itself.

Frozen blocks contribute weights only. Transient buffers are not modelled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import PlanningError
from .subset import SubsetSpec, indices_small, slt_head_subset
from .topology import TopologySpec

BYTES = 4


@dataclass(frozen=True)
class BlockMemory:
    block: int
    role: str  # frozen | trained | head | boundary
    weights: int
    activations: int
    gradients: int
    optimizer: int = 0

    @property
    def total(self) -> int:
        return self.weights + self.activations + self.gradients + self.optimizer


@dataclass(frozen=True)
class MemoryReport:
    weights_bytes: int
    activations_bytes: int
    gradients_bytes: int
    total_bytes: int
    blocks: tuple[BlockMemory, ...] = field(default=())
    optimizer_bytes: int = 0

    @property
    def boundary_bytes(self) -> int:
        return sum(b.activations for b in self.blocks if b.role == "boundary")

    def as_rows(self) -> list[dict]:
        return [{"block": b.block, "role": b.role, "weights": b.weights,
                 "activations": b.activations, "gradients": b.gradients,
                 "optimizer": b.optimizer, "total": b.total} for b in self.blocks]


@dataclass(frozen=True)
class MemoryBudget:
    limit_bytes: int
    s_ref: float | None = None

    def __post_init__(self):
        if self.limit_bytes <= 0:
            raise PlanningError("memory budget must be positive")

    @classmethod
    def from_reference(cls, topology: TopologySpec, s_ref: float, batch: int = 32,
                       input_shape=None) -> "MemoryBudget":
        """Budget equal to training an ``s_ref``-scaled submodel end to end."""
        rep = memory_of_subset(topology, indices_small(topology, s_ref), batch, input_shape)
        return cls(rep.total_bytes, s_ref)

    @classmethod
    def unlimited(cls) -> "MemoryBudget":
        return cls(2 ** 62)


def _ledger(topology, out_widths, first_trainable, batch, input_shape, include_optimizer,
            roles):
    spatial = topology.spatial_shapes(input_shape)
    in_ch = (input_shape or topology.input_shape)[0]
    rows = []
    kb = first_trainable - 1
    bw = in_ch if kb == 0 else out_widths[kb - 1]
    bh, bwid = spatial[kb]
    rows.append(BlockMemory(kb, "boundary", 0, BYTES * batch * bw * bh * bwid, 0))
    prev = in_ch
    for b, m in zip(topology.blocks, out_widths):
        kh, kw = b.kernel
        n_w = m * prev * kh * kw + m
        n_g = n_w
        if b.norm == "batch":
            n_w += 4 * m
            n_g += 2 * m
        h, w = spatial[b.index]
        if b.index < first_trainable:
            rows.append(BlockMemory(b.index, "frozen", BYTES * n_w, 0, 0))
        else:
            hw = h * w
            maps = 1 + (b.norm == "batch") + (b.skip_from is not None) + (b.activation == "relu")
            acts = maps * m * hw
            ih, iw = spatial[b.index - 1]
            if b.is_dense and ih * iw > 1:
                acts += prev
            rows.append(BlockMemory(
                b.index, roles(b.index), BYTES * n_w, BYTES * batch * acts, BYTES * n_g,
                BYTES * n_g if include_optimizer else 0))
        prev = m
    return _report(rows)


def _report(rows) -> MemoryReport:
    w = sum(r.weights for r in rows)
    a = sum(r.activations for r in rows)
    g = sum(r.gradients for r in rows)
    o = sum(r.optimizer for r in rows)
    return MemoryReport(w, a, g, w + a + g + o, tuple(rows), o)


def memory_of_config(topology: TopologySpec, config, batch: int = 32, input_shape=None,
                     include_optimizer: bool = False) -> MemoryReport:
    """Memory of an SLT configuration (frozen prefix, full-width middle, scaled head)."""
    config.validate(topology)
    spec = slt_head_subset(topology, config)

    def role(k):
        return "trained" if k <= config.k_t else "head"

    return _ledger(topology, spec.widths(), config.k_f + 1, batch, input_shape,
                   include_optimizer, role)


def memory_of_subset(topology: TopologySpec, spec: SubsetSpec, batch: int = 32,
                     input_shape=None, include_optimizer: bool = False) -> MemoryReport:
    """Memory of training a submodel end to end (FD, FedRolex, small model, ...)."""
    return _ledger(topology, spec.widths(), 1, batch, input_shape, include_optimizer,
                   lambda k: "trained")


def activation_dominance(topology: TopologySpec, batch: int = 32, input_shape=None) -> float:
    from .subset import full_subset
    rep = memory_of_subset(topology, full_subset(topology), batch, input_shape)
    return rep.activations_bytes / rep.total_bytes
