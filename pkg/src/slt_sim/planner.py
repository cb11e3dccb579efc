"""Offline construction of the SLT configuration schedule.

Step n trains block n at full width on top of ``n-1`` frozen blocks, with the
rest of the network (the head) scaled to ``s_n``. The planner picks the
largest feasible ``s_n`` per step, makes the sequence nondecreasing, and maps
steps to rounds in proportion to the parameters each step adds.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .errors import InfeasibleBudgetError, PlanningError
from .memory import MemoryBudget, memory_of_config
from .topology import TopologySpec, width

POLICIES = ("parameter_share", "equal", "early_stopping")
PATIENCE_PRESETS = (5, 15, 25)


@dataclass(frozen=True)
class TrainingConfig:
    k_f: int
    k_t: int
    s: float

    def validate(self, topology: TopologySpec):
        if not 0 <= self.k_f <= self.k_t <= topology.K:
            raise PlanningError(f"need 0 <= k_f <= k_t <= K, got {self}")
        if not 0 < self.s <= 1:
            raise PlanningError(f"scale must lie in (0, 1], got {self.s}")


@dataclass(frozen=True)
class SchedulerPolicy:
    kind: str = "parameter_share"
    patience: int = 15
    s_ablation_ratio: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise PlanningError(f"unknown scheduler policy {self.kind!r}")
        if self.kind == "early_stopping" and self.patience <= 0:
            raise PlanningError("patience must be positive")
        if not 0 < self.s_ablation_ratio <= 1:
            raise PlanningError("s_ablation_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class Step:
    n: int
    config: TrainingConfig
    start: int | None
    end: int | None
    memory_bytes: int

    @property
    def rounds(self) -> int | None:
        return None if self.start is None else self.end - self.start + 1


@dataclass(frozen=True)
class Plan:
    """Pretraining stage (n=0) followed by steps 1..N.

    ``stages[0]`` is pretraining; it is omitted (zero rounds) when the budget
    already admits the full model. Round ranges are inclusive and 1-based.
    """

    stages: tuple[Step, ...]
    total_rounds: int
    budget_bytes: int
    policy: SchedulerPolicy = field(default_factory=SchedulerPolicy)

    @property
    def N(self) -> int:
        return self.stages[-1].n

    @property
    def steps(self) -> tuple[Step, ...]:
        return tuple(st for st in self.stages if st.n >= 1)

    @property
    def pretraining(self) -> Step | None:
        return self.stages[0] if self.stages[0].n == 0 else None

    def stage_at(self, r: int) -> Step:
        for st in self.stages:
            if st.start is not None and st.start <= r <= st.end:
                return st
        raise PlanningError(f"round {r} not covered by the plan")

    def to_dict(self) -> dict:
        pre = self.pretraining
        return {
            "total_rounds": self.total_rounds,
            "budget_bytes": self.budget_bytes,
            "policy": asdict(self.policy),
            "N": self.N,
            "pretraining": None if pre is None else _stage_dict(pre),
            "steps": [_stage_dict(st) for st in self.steps],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def table(self) -> list[dict]:
        return [{"n": st.n, "k_f": st.config.k_f, "k_t": st.config.k_t, "s": st.config.s,
                 "memory_bytes": st.memory_bytes, "start": st.start, "end": st.end,
                 "rounds": st.rounds} for st in self.stages]


def _stage_dict(st: Step) -> dict:
    return {"n": st.n, "k_f": st.config.k_f, "k_t": st.config.k_t, "s": st.config.s,
            "memory_bytes": st.memory_bytes, "start": st.start, "end": st.end,
            "rounds": st.rounds}


def scale_breakpoints(topology: TopologySpec) -> list[float]:
    """Every s at which some block's retained width changes, ascending."""
    points = {Fraction(j, b.out_channels)
              for b in topology.blocks if b.scalable_out
              for j in range(1, b.out_channels + 1)}
    return [float(p) for p in sorted(points)]


def _mem(topology, k_f, k_t, s, batch, input_shape):
    return memory_of_config(topology, TrainingConfig(k_f, k_t, s), batch, input_shape).total_bytes


def max_scale(topology: TopologySpec, n: int, budget: MemoryBudget, batch: int = 32,
              input_shape=None) -> float:
    """Largest breakpoint s with memory(n-1, n, s) within budget."""
    if not 1 <= n <= topology.K:
        raise PlanningError(f"step {n} outside [1, {topology.K}]")
    points = scale_breakpoints(topology)

    def fits(s):
        return _mem(topology, n - 1, n, s, batch, input_shape) <= budget.limit_bytes

    if not fits(points[0]):
        raise InfeasibleBudgetError(
            f"step {n} does not fit {budget.limit_bytes} bytes at any scale",
            _mem(topology, n - 1, n, points[0], batch, input_shape))
    # memory is nondecreasing in s: find the last feasible breakpoint
    lo = bisect.bisect_left(range(len(points)), True, key=lambda i: not fits(points[i]))
    return points[lo - 1]


def monotonize(scales: list[float]) -> list[float]:
    """Suffix minimum, making the sequence nondecreasing."""
    if not scales:
        raise PlanningError("no scales given")
    out = list(scales)
    for i in range(len(out) - 2, -1, -1):
        out[i] = min(out[i], out[i + 1])
    return out


def q_params(topology: TopologySpec, k_f: int, k_t: int, s: float) -> int:
    """Trained parameter count (weights only) of configuration {k_f, k_t, s}.

    Blocks k_f < k <= k_t count at full size, block k_t+1 keeps its full input,
    later blocks are scaled on both sides. Block 1's input and the classifier's
    output are never scaled.
    """
    total = 0
    prev = topology.input_shape[0]
    for b in topology.blocks:
        m = b.out_channels if (b.index <= k_t or not b.scalable_out) else width(b.out_channels, s)
        if b.index > k_f:
            total += prev * m * b.kernel[0] * b.kernel[1]
        prev = m
    return total


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def step_scales(topology, budget, batch=32, input_shape=None) -> list[float]:
    """Raw per-step maxima up to and including the first step that admits s = 1."""
    raw = []
    for n in range(1, topology.K + 1):
        s = max_scale(topology, n, budget, batch, input_shape)
        raw.append(s)
        if s >= 1.0:
            return raw
    raise PlanningError("no step admits s = 1 within the budget")


def build_plan(topology: TopologySpec, budget: MemoryBudget, R: int,
               policy: SchedulerPolicy | None = None, batch: int = 32,
               input_shape=None) -> Plan:
    policy = policy or SchedulerPolicy()
    scales = monotonize(step_scales(topology, budget, batch, input_shape))
    configs = []
    for n, s in enumerate(scales, start=1):
        if policy.s_ablation_ratio < 1 and s < 1:
            s_used, k_f = ablation_scale(topology, n, s, policy.s_ablation_ratio, budget,
                                         batch, input_shape)
            configs.append(TrainingConfig(k_f, n, s_used))
        else:
            configs.append(TrainingConfig(n - 1, n, s))
    s1 = configs[0].s
    pre_cfg = TrainingConfig(0, 0, s1)
    with_pre = s1 < 1

    def mem(cfg):
        return memory_of_config(topology, cfg, batch, input_shape).total_bytes

    stage_cfgs = ([(0, pre_cfg)] if with_pre else []) + list(enumerate(configs, start=1))
    if policy.kind == "early_stopping":
        stages = tuple(Step(n, c, None, None, mem(c)) for n, c in stage_cfgs)
        return Plan(stages, R, budget.limit_bytes, policy)

    if policy.kind == "equal":
        share = R // len(stage_cfgs)
        lengths = [share] * len(stage_cfgs)
    else:
        q_full = q_params(topology, 0, 0, 1.0)
        # cumulative trained-parameter count after each stage (frozen blocks included)
        cum = [q_params(topology, 0, c.k_t, c.s) for _, c in stage_cfgs]
        lengths = [_round_half_up(R * cum[0] / q_full)]
        lengths += [_round_half_up(R * (b - a) / q_full) for a, b in zip(cum, cum[1:])]
        if with_pre:
            # step 1 ends where its cumulative share ends
            lengths[1] = _round_half_up(R * cum[1] / q_full) - lengths[0]
        lengths = [max(1, x) for x in lengths]
    lengths[-1] = R - sum(lengths[:-1])
    if min(lengths) < 1:
        raise PlanningError(f"R={R} rounds cannot give each of {len(lengths)} stages a round")
    stages, start = [], 1
    for (n, c), length in zip(stage_cfgs, lengths):
        stages.append(Step(n, c, start, start + length - 1, mem(c)))
        start += length
    return Plan(tuple(stages), R, budget.limit_bytes, policy)


def hetero_min_kf(topology: TopologySpec, config: TrainingConfig, tier_budget: MemoryBudget,
                  batch: int = 32, input_shape=None) -> int:
    """Smallest k_f keeping {k_f, k_t, s} inside a (looser) tier budget."""
    for k_f in range(0, config.k_f + 1):
        if _mem(topology, k_f, config.k_t, config.s, batch, input_shape) <= tier_budget.limit_bytes:
            return k_f
    raise InfeasibleBudgetError(
        f"tier budget {tier_budget.limit_bytes} cannot host {config}",
        _mem(topology, config.k_f, config.k_t, config.s, batch, input_shape))


def ablation_scale(topology: TopologySpec, n: int, s_hat: float, ratio: float,
                   budget: MemoryBudget, batch: int = 32, input_shape=None):
    """Use ``ratio * s_hat`` for the head and spend the freed memory on unfreezing.

    Returns ``(s_used, k_f)``; the fully trained span is ``n - k_f`` blocks.
    """
    if not 0 < ratio <= 1:
        raise PlanningError("ratio must lie in (0, 1]")
    s_used = ratio * s_hat
    if ratio == 1:
        return s_hat, n - 1
    k_f = hetero_min_kf(topology, TrainingConfig(n - 1, n, s_used), budget, batch, input_shape)
    return s_used, k_f
