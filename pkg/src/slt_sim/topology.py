"""Declarative network descriptions.

A topology is an ordered chain of blocks. Each block is one "layer" in the
sense used throughout the simulator: conv (or dense) + optional batch norm +
optional skip merge + optional ReLU. Channel counts, spatial sizes and the
scaling rules for submodels all derive from this description.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import TopologyError

BLOCK_KINDS = ("conv", "linear", "classifier")


def width(m: int, s: float) -> int:
    """Number of retained channels out of ``m`` at scale ``s`` (never below one)."""
    # small epsilon so that s = j/m lands exactly on j despite float rounding
    return max(1, min(m, math.floor(s * m + 1e-9)))


def is_clamped(m: int, s: float) -> bool:
    return math.floor(s * m + 1e-9) < 1


@dataclass(frozen=True)
class BlockSpec:
    index: int
    kind: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    norm: str = "none"
    activation: str = "none"
    skip_from: int | None = None
    width_group: str = ""
    scalable_in: bool = True
    scalable_out: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(self.kernel))
        if not self.width_group:
            object.__setattr__(self, "width_group", f"b{self.index}")

    @property
    def is_dense(self) -> bool:
        return self.kind in ("linear", "classifier")

    @property
    def padding(self) -> tuple[int, int]:
        return ((self.kernel[0] - 1) // 2, (self.kernel[1] - 1) // 2)

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)


@dataclass(frozen=True)
class TopologySpec:
    blocks: tuple[BlockSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    name: str = ""
    description: str = ""
    # views are dense submodel shapes; they relax the width-group equalities
    is_view: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self._validate()

    @property
    def K(self) -> int:
        return len(self.blocks)

    def block(self, k: int) -> BlockSpec:
        """1-based block access."""
        return self.blocks[k - 1]

    def _validate(self):
        if not self.blocks:
            raise TopologyError("topology has no blocks")
        if self.num_classes < 1:
            raise TopologyError("num_classes must be positive")
        prev = self.input_shape[0]
        for pos, b in enumerate(self.blocks, start=1):
            if b.index != pos:
                raise TopologyError(f"block at position {pos} has index {b.index}")
            if b.kind not in BLOCK_KINDS:
                raise TopologyError(f"block {pos}: unknown kind {b.kind!r}")
            if b.in_channels != prev:
                raise TopologyError(
                    f"block {pos}: in_channels {b.in_channels} != previous output {prev}")
            if b.norm not in ("batch", "none") or b.activation not in ("relu", "none"):
                raise TopologyError(f"block {pos}: bad norm/activation")
            if b.stride < 1 or min(b.kernel) < 1 or b.out_channels < 1:
                raise TopologyError(f"block {pos}: non-positive dims")
            if b.kind == "classifier" and pos != self.K:
                raise TopologyError("classifier must be the last block")
            prev = b.out_channels
        last = self.blocks[-1]
        if last.kind != "classifier":
            raise TopologyError("last block must be a classifier")
        if last.out_channels != self.num_classes:
            raise TopologyError("classifier output must equal num_classes")
        if last.scalable_out:
            raise TopologyError("classifier block must have scalable_out = false")
        if self.blocks[0].scalable_in:
            raise TopologyError("block 1 must have scalable_in = false")

        groups: dict[str, int] = {}
        spatial = self.spatial_shapes()
        for b in self.blocks:
            if not self.is_view:
                m = groups.setdefault(b.width_group, b.out_channels)
                if m != b.out_channels:
                    raise TopologyError(f"width group {b.width_group!r} mixes channel counts")
            if b.skip_from is None:
                continue
            src = self.block(b.skip_from) if 1 <= b.skip_from < b.index else None
            if src is None:
                raise TopologyError(f"block {b.index}: skip_from must reference an earlier block")
            if not self.is_view and src.width_group != b.width_group:
                raise TopologyError(f"block {b.index}: skip link crosses width groups")
            if src.out_channels < b.out_channels:
                raise TopologyError(f"block {b.index}: skip source is narrower")
            if spatial[src.index] != spatial[b.index]:
                raise TopologyError(f"block {b.index}: skip source has different spatial size")

    def spatial_shapes(self, input_shape=None) -> dict[int, tuple[int, int]]:
        """Output (H, W) per block, with block 0 denoting the input."""
        _, h, w = input_shape if input_shape is not None else self.input_shape
        out = {0: (h, w)}
        for b in self.blocks:
            if b.is_dense:
                h, w = 1, 1
            else:
                (ph, pw), (kh, kw) = b.padding, b.kernel
                h = (h + 2 * ph - kh) // b.stride + 1
                w = (w + 2 * pw - kw) // b.stride + 1
                if h < 1 or w < 1:
                    raise TopologyError(f"block {b.index}: spatial size collapsed")
            out[b.index] = (h, w)
        return out

    def view(self, out_widths) -> "TopologySpec":
        """Dense topology of a submodel whose block k keeps ``out_widths[k-1]`` channels."""
        blocks = []
        prev = self.input_shape[0]
        for b, m in zip(self.blocks, out_widths):
            blocks.append(replace(b, in_channels=prev, out_channels=int(m)))
            prev = int(m)
        return TopologySpec(tuple(blocks), self.input_shape, self.num_classes,
                            name=self.name, is_view=True)

    def with_input(self, input_shape) -> "TopologySpec":
        b0 = replace(self.blocks[0], in_channels=input_shape[0])
        return replace(self, blocks=(b0, *self.blocks[1:]), input_shape=tuple(input_shape))

    def num_params(self) -> int:
        total = 0
        for b in self.blocks:
            kh, kw = b.kernel
            total += b.out_channels * (b.in_channels * kh * kw + 1)
            if b.norm == "batch":
                total += 4 * b.out_channels
        return total

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "blocks": [
                {**asdict(b), "kernel": list(b.kernel)} for b in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TopologySpec":
        try:
            blocks = tuple(BlockSpec(**{**b, "kernel": tuple(b.get("kernel", (1, 1)))})
                           for b in d["blocks"])
            return cls(blocks, tuple(d["input_shape"]), int(d["num_classes"]),
                       name=d.get("name", ""), description=d.get("description", ""))
        except (KeyError, TypeError) as exc:
            raise TopologyError(f"malformed topology description: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def load_topology(path) -> TopologySpec:
    with open(path) as f:
        return TopologySpec.from_dict(json.load(f))


def builtin_names() -> list[str]:
    root = resources.files("slt_sim") / "topologies"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def builtin(name: str) -> TopologySpec:
    ref = resources.files("slt_sim") / "topologies" / f"{name}.json"
    if not ref.is_file():
        raise TopologyError(f"no built-in topology {name!r}; have {builtin_names()}")
    return TopologySpec.from_dict(json.loads(ref.read_text()))


def resolve_topology(ref) -> TopologySpec:
    """Accept a TopologySpec, a built-in name, or a path to a JSON description."""
    if isinstance(ref, TopologySpec):
        return ref
    if Path(ref).suffix == ".json" or Path(ref).exists():
        return load_topology(ref)
    return builtin(str(ref))


# -- reference architectures ---------------------------------------------


class _Chain:
    def __init__(self, in_channels):
        self.blocks = []
        self.prev = in_channels

    def add(self, kind, out, kernel=(3, 3), stride=1, norm="batch", act="relu",
            skip_from=None, group=None):
        k = len(self.blocks) + 1
        if group is None and skip_from is not None:
            group = self.blocks[skip_from - 1].width_group
        b = BlockSpec(k, kind, self.prev, out, kernel=kernel, stride=stride, norm=norm,
                      activation=act, skip_from=skip_from, width_group=group or "",
                      scalable_in=k > 1, scalable_out=kind != "classifier")
        self.blocks.append(b)
        self.prev = out
        return k


def resnet_cifar(depth: int, num_classes: int, input_shape=(3, 32, 32), name=None):
    """CIFAR-style ResNet (6n+2 layers): stem, three stages of basic blocks, dense head.

    Each basic block contributes two layers; the second merges the block input.
    Stage-transition blocks use a strided projection shortcut in the original
    network, which is not a width-preserving skip, so no skip link is declared.
    """
    n = (depth - 2) // 6
    c = _Chain(input_shape[0])
    stream = c.add("conv", 16, group="s0")
    for stage, m in enumerate((16, 32, 64)):
        for i in range(n):
            down = stage > 0 and i == 0
            c.add("conv", m, stride=2 if down else 1)
            stream = c.add("conv", m, skip_from=None if down else stream, group=f"s{stage}")
    c.add("classifier", num_classes, kernel=(1, 1), norm="none", act="none")
    return TopologySpec(tuple(c.blocks), input_shape, num_classes,
                        name=name or f"ResNet{depth}",
                        description=f"CIFAR ResNet-{depth}; {depth} layers incl. dense head")


def densenet(depth: int = 40, growth: int = 12, num_classes: int = 100,
             input_shape=(3, 32, 32), name=None):
    """DenseNet (basic, no bottleneck) flattened into a chain.

    A dense layer concatenates ``growth`` new maps onto its input; here it is a
    block whose output width is the concatenated width, so activation sizes
    follow the real network. Transitions keep the width and halve resolution.
    """
    per_stage = (depth - 4) // 3
    c = _Chain(input_shape[0])
    ch = 2 * growth
    c.add("conv", ch)
    for stage in range(3):
        for _ in range(per_stage):
            ch += growth
            c.add("conv", ch)
        if stage < 2:
            c.add("conv", ch, kernel=(1, 1), stride=2)
    c.add("classifier", num_classes, kernel=(1, 1), norm="none", act="none")
    return TopologySpec(tuple(c.blocks), input_shape, num_classes,
                        name=name or f"DenseNet{depth}",
                        description=f"DenseNet-{depth} (k={growth}) as a chain; planner-only")


def micro_conv8(num_classes: int = 10, input_shape=(3, 32, 32), base: int = 16,
                stem: int = 12):
    """Eight conv blocks and a dense classifier.

    The first block is a linear 4x4 stride-4 patch embedding (no norm, no
    activation), so the network works on an 8x8 grid while the input batch
    stays a visible share of the training footprint, as it is for
    ImageNet-style stems. Being linear, the stem keeps a single activation map,
    which lets it be wide enough for rolling windows to overlap between rounds
    while SLT can still train it at full width under tight budgets.
    """
    c = _Chain(input_shape[0])
    c.add("conv", stem, kernel=(4, 4), stride=4, norm="none", act="none")
    for m, stride in [(base, 1), (base, 1), (base, 2), (2 * base, 1), (2 * base, 1),
                      (2 * base, 2), (4 * base, 1)]:
        c.add("conv", m, stride=stride)
    c.add("classifier", num_classes, kernel=(1, 1), norm="none", act="none")
    return TopologySpec(tuple(c.blocks), input_shape, num_classes, name="MicroConv8",
                        description="8 conv blocks + classifier; desk-scale trainable")


def micro_res10(num_classes: int = 10, input_shape=(3, 32, 32), base: int = 16):
    """Thin patch stem, three residual stages and a dense classifier (10 blocks)."""
    c = _Chain(input_shape[0])
    c.add("conv", 4, kernel=(4, 4), stride=4)
    for stage, (m, stride, depth) in enumerate([(base, 1, 3), (2 * base, 2, 3),
                                                (2 * base, 1, 2)]):
        head = c.add("conv", m, stride=stride, group=f"g{stage}")
        for _ in range(depth - 2):
            c.add("conv", m)
        c.add("conv", m, skip_from=head)
    c.add("classifier", num_classes, kernel=(1, 1), norm="none", act="none")
    return TopologySpec(tuple(c.blocks), input_shape, num_classes, name="MicroRes10",
                        description="10 blocks (9 conv + classifier) with width-preserving skips")


def reference_topologies() -> dict[str, TopologySpec]:
    return {
        "MicroConv8": micro_conv8(),
        "MicroRes10": micro_res10(),
        "ResNet20": resnet_cifar(20, 10),
        "ResNet44": resnet_cifar(44, 200, input_shape=(3, 64, 64)),
        "DenseNet40": densenet(40, 12, 100),
    }
