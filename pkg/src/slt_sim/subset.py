"""Submodel index algebra.

A :class:`SubsetSpec` holds, per block, the sorted output-channel indices kept
in a submodel. Input indices are implied: block k consumes the outputs of block
k-1, and block 1 always sees every input channel.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import SubsetError
from .nn import ParameterStore
from .topology import TopologySpec, is_clamped, width

log = logging.getLogger(__name__)

PROVENANCES = ("full", "small", "fedrolex", "fd", "heterofl", "slt_head")


@dataclass(frozen=True)
class SubsetSpec:
    indices: tuple[np.ndarray, ...]
    provenance: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "indices",
                           tuple(np.asarray(i, dtype=np.int64) for i in self.indices))

    def out(self, k: int) -> np.ndarray:
        return self.indices[k - 1]

    def inp(self, k: int, topology: TopologySpec) -> np.ndarray:
        if k == 1:
            return np.arange(topology.input_shape[0])
        return self.indices[k - 2]

    def widths(self) -> list[int]:
        return [len(i) for i in self.indices]

    def view(self, topology: TopologySpec) -> TopologySpec:
        return topology.view(self.widths())

    def is_full(self, topology: TopologySpec) -> bool:
        return all(len(i) == b.out_channels for i, b in zip(self.indices, topology.blocks))

    def __eq__(self, other):
        return (isinstance(other, SubsetSpec) and len(self.indices) == len(other.indices)
                and all(np.array_equal(a, b) for a, b in zip(self.indices, other.indices)))

    def __hash__(self):
        return hash(tuple(tuple(i.tolist()) for i in self.indices))

    def to_json(self) -> str:
        return json.dumps({"provenance": self.provenance,
                           "blocks": {str(k): i.tolist()
                                      for k, i in enumerate(self.indices, start=1)}})

    @classmethod
    def from_json(cls, text: str) -> "SubsetSpec":
        d = json.loads(text)
        blocks = d["blocks"]
        return cls(tuple(blocks[str(k)] for k in range(1, len(blocks) + 1)),
                   d.get("provenance", "full"))


def validate(topology: TopologySpec, spec: SubsetSpec, strict_groups: bool = True):
    """Structural checks: bounds, sortedness, unscaled classifier, skip compatibility."""
    if len(spec.indices) != topology.K:
        raise SubsetError(f"spec has {len(spec.indices)} blocks, topology {topology.K}")
    group_sets: dict[str, np.ndarray] = {}
    for b, idx in zip(topology.blocks, spec.indices):
        if idx.size == 0 or idx.min() < 0 or idx.max() >= b.out_channels:
            raise SubsetError(f"block {b.index}: index out of range [0, {b.out_channels})")
        if np.any(np.diff(idx) <= 0):
            raise SubsetError(f"block {b.index}: indices must be sorted and unique")
        if not b.scalable_out and idx.size != b.out_channels:
            raise SubsetError(f"block {b.index}: output is not scalable")
        if strict_groups:
            prev = group_sets.setdefault(b.width_group, idx)
            if not np.array_equal(prev, idx):
                raise SubsetError(f"block {b.index}: width group {b.width_group!r} disagrees")
        if b.skip_from is not None:
            src = spec.out(b.skip_from)
            # the destination must occupy the leading positions of the source
            if idx.size > src.size or not np.array_equal(src[: idx.size], idx):
                raise SubsetError(f"block {b.index}: indices are not a prefix of skip source")


def _note_clamps(topology, s, provenance):
    for b in topology.blocks:
        if b.scalable_out and is_clamped(b.out_channels, s):
            log.info("clamped block %d to one channel (s=%g, M=%d, %s)",
                     b.index, s, b.out_channels, provenance)


def clamped_blocks(topology: TopologySpec, s: float) -> list[int]:
    return [b.index for b in topology.blocks if b.scalable_out and is_clamped(b.out_channels, s)]


def _check_scale(s):
    if not 0 < s <= 1:
        raise SubsetError(f"scale must lie in (0, 1], got {s}")


def full_subset(topology: TopologySpec) -> SubsetSpec:
    return SubsetSpec(tuple(np.arange(b.out_channels) for b in topology.blocks), "full")


def _prefix(topology, s, provenance, first_scaled=1):
    _check_scale(s)
    _note_clamps(topology, s, provenance)
    out = []
    for b in topology.blocks:
        m = b.out_channels
        n = width(m, s) if b.scalable_out and b.index >= first_scaled else m
        out.append(np.arange(n))
    return SubsetSpec(tuple(out), provenance)


def indices_small(topology: TopologySpec, s: float) -> SubsetSpec:
    return _prefix(topology, s, "small")


def indices_heterofl(topology: TopologySpec, s_e: float) -> SubsetSpec:
    return _prefix(topology, s_e, "heterofl")


def rolling_window(m: int, n: int, r: int) -> np.ndarray:
    """Contiguous window of ``n`` out of ``m`` indices starting at ``r mod m``, wrapping."""
    start = r % m
    return np.sort((start + np.arange(n)) % m)


def indices_fedrolex(topology: TopologySpec, s: float, r: int) -> SubsetSpec:
    _check_scale(s)
    if r < 0:
        raise SubsetError("round must be non-negative")
    _note_clamps(topology, s, "fedrolex")
    out = []
    for b in topology.blocks:
        m = b.out_channels
        out.append(rolling_window(m, width(m, s), r) if b.scalable_out else np.arange(m))
    return SubsetSpec(tuple(out), "fedrolex")


def indices_fd(topology: TopologySpec, s: float, rng: np.random.Generator) -> SubsetSpec:
    """Uniform random channels per block; blocks in a width group share one draw."""
    _check_scale(s)
    drawn: dict[str, np.ndarray] = {}
    out = []
    for b in topology.blocks:
        m = b.out_channels
        if not b.scalable_out:
            out.append(np.arange(m))
            continue
        if b.width_group not in drawn:
            n = width(m, s)
            drawn[b.width_group] = np.arange(m) if n == m else np.sort(
                rng.choice(m, size=n, replace=False))
        out.append(drawn[b.width_group])
    return SubsetSpec(tuple(out), "fd")


def slt_head_subset(topology: TopologySpec, config) -> SubsetSpec:
    """Full width up to block ``k_t``, prefix of ``s`` afterwards (classifier unscaled)."""
    k_t, s = config.k_t, config.s
    if not 0 <= k_t <= topology.K:
        raise SubsetError(f"k_t={k_t} outside [0, {topology.K}]")
    return _prefix(topology, s, "slt_head", first_scaled=k_t + 1)


# -- moving parameters between server and submodels ----------------------


def _block_index_pairs(topology, spec, k):
    return spec.out(k), spec.inp(k, topology)


def slice_params(server: ParameterStore, spec: SubsetSpec, topology: TopologySpec) -> ParameterStore:
    """Dense submodel: rows ``I_k`` and input columns ``I_{k-1}`` of every block."""
    blocks = []
    for b in topology.blocks:
        p = server.blocks[b.index - 1]
        out_idx, in_idx = _block_index_pairs(topology, spec, b.index)
        if out_idx.max() >= b.out_channels or in_idx.max() >= b.in_channels:
            raise SubsetError(f"block {b.index}: index out of range")
        sub = {"weight": p["weight"][np.ix_(out_idx, in_idx)].copy()}
        for key, a in p.items():
            if key != "weight":
                sub[key] = a[out_idx].copy()
        blocks.append(sub)
    return ParameterStore(blocks)


def embed(sub: ParameterStore, spec: SubsetSpec, server: ParameterStore,
          topology: TopologySpec, blocks=None) -> ParameterStore:
    """Copy of ``server`` with the submodel's entries written back (last write wins)."""
    result = server.copy()
    ks = range(1, topology.K + 1) if blocks is None else blocks
    for k in ks:
        out_idx, in_idx = _block_index_pairs(topology, spec, k)
        p, q = result.blocks[k - 1], sub.blocks[k - 1]
        expected = (len(out_idx), len(in_idx), *topology.block(k).kernel)
        if q["weight"].shape != expected:
            raise SubsetError(f"block {k}: submodel weight {q['weight'].shape} != {expected}")
        p["weight"][np.ix_(out_idx, in_idx)] = q["weight"]
        for key in p:
            if key != "weight":
                p[key][out_idx] = q[key]
    return result


@dataclass
class Update:
    """A device upload: trained submodel, its index map, and which blocks it carries."""

    device_id: int
    params: ParameterStore
    spec: SubsetSpec
    blocks: tuple[int, ...] | None = None


def aggregate_indexed(updates: list[Update], server: ParameterStore,
                      topology: TopologySpec) -> ParameterStore:
    """Per-entry mean over the updates covering that entry; uncovered entries kept.

    Sums run in float64 in ascending device-id order, so the result does not
    depend on the order updates arrive in.
    """
    if not updates:
        raise SubsetError("aggregate_indexed needs at least one update")
    ordered = sorted(updates, key=lambda u: u.device_id)
    result = server.copy()
    for k in range(1, topology.K + 1):
        covering = [u for u in ordered if u.blocks is None or k in u.blocks]
        if not covering:
            continue
        p = result.blocks[k - 1]
        for key, target in p.items():
            total = np.zeros(target.shape, dtype=np.float64)
            count = np.zeros(target.shape, dtype=np.int64)
            for u in covering:
                out_idx, in_idx = _block_index_pairs(topology, u.spec, k)
                ix = np.ix_(out_idx, in_idx) if key == "weight" else out_idx
                total[ix] += u.params.blocks[k - 1][key]
                count[ix] += 1
            hit = count > 0
            target[hit] = (total[hit] / count[hit]).astype(target.dtype)
    return result
