"""Synchronous FL engine: sampling, submodels, local training, aggregation, metrics.

Randomness is split into named streams seeded by ``(seed, stream, round,
device)`` so results depend neither on the order devices are trained in nor
on how many threads train them.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

from .data import Dataset, PartitionSpec, SynthSpec, hflip, load_idx, partition, synth_gen
from .errors import ConfigError, RoundError, SimError, UsageError
from .memory import MemoryBudget
from .nn import (OptimizerState, ParameterStore, backward, cosine_lr, evaluate, forward,
                 init_params, sgd_step, softmax_cross_entropy)
from .planner import Plan, SchedulerPolicy, TrainingConfig, build_plan, hetero_min_kf
from .subset import (SubsetSpec, Update, aggregate_indexed, full_subset, indices_fd,
                     indices_fedrolex, indices_heterofl, indices_small, slice_params,
                     slt_head_subset)
from .topology import TopologySpec, resolve_topology

log = logging.getLogger(__name__)

ALGORITHMS = ("slt", "small", "fedrolex", "fd", "heterofl", "fjord", "fd_limited")

# named RNG streams
INIT, SAMPLE, DATA, FD, POOL, PICK = 1, 2, 3, 4, 5, 6

METRIC_FIELDS = ("round", "step", "lr", "accuracy", "upload_bytes", "cum_upload_bytes",
                 "flops", "cum_flops")


def stream(seed: int, name: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, name, *keys])


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class IdxSource:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    num_classes: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "slt"
    topology: str = "MicroConv8"
    dataset: SynthSpec = field(default_factory=SynthSpec)
    idx: IdxSource | None = None
    data_seed: int = 0
    devices: int = 20
    devices_per_round: int = 5
    rounds: int = 300
    seed: int = 0
    tiers: tuple[float, ...] = (0.25,)
    partition: str = "iid"
    alpha: float = 0.1
    policy: SchedulerPolicy = field(default_factory=SchedulerPolicy)
    pool_size: int | None = None
    batch_size: int = 32
    lr0: float = 0.1
    lr_min: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    augment: bool = False
    eval_every: int = 1
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tiers", tuple(float(s) for s in self.tiers))

    def validate(self) -> "ExperimentConfig":
        def bad(path, msg):
            raise ConfigError(path, msg)

        if self.algorithm not in ALGORITHMS:
            bad("algorithm", f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.devices < 1:
            bad("devices", "need at least one device")
        if not 1 <= self.devices_per_round <= self.devices:
            bad("devices_per_round", f"must lie in [1, {self.devices}]")
        if self.rounds < 1:
            bad("rounds", "need at least one round")
        if not self.tiers:
            bad("tiers", "need at least one tier")
        if any(not 0 < s <= 1 for s in self.tiers):
            bad("tiers", "tier scales must lie in (0, 1]")
        if list(self.tiers) != sorted(set(self.tiers)):
            bad("tiers", "tier scales must be strictly ascending")
        if self.devices % len(self.tiers):
            bad("tiers", f"{self.devices} devices cannot be split evenly into "
                         f"{len(self.tiers)} tiers")
        if self.partition not in ("iid", "dirichlet"):
            bad("partition", f"unknown partition {self.partition!r}")
        if not self.alpha > 0:
            bad("alpha", "must be positive")
        if self.algorithm == "fd_limited":
            if self.pool_size is None or self.pool_size < 1:
                bad("pool_size", "fd_limited needs pool_size >= 1")
        if self.batch_size < 1:
            bad("batch_size", "must be positive")
        if self.lr0 < 0 or self.lr_min < 0:
            bad("lr0", "learning rates must be non-negative")
        if self.eval_every < 1:
            bad("eval_every", "must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        kw = dict(d)
        try:
            if "dataset" in kw and isinstance(kw["dataset"], dict):
                kw["dataset"] = SynthSpec(**kw["dataset"])
            if kw.get("idx") is not None and isinstance(kw["idx"], dict):
                kw["idx"] = IdxSource(**kw["idx"])
            if "policy" in kw and isinstance(kw["policy"], dict):
                kw["policy"] = SchedulerPolicy(**kw["policy"])
        except TypeError as exc:
            raise ConfigError("dataset", str(exc)) from exc
        except SimError as exc:
            raise ConfigError("policy", str(exc)) from exc
        return cls(**kw)


# -- data plumbing ---------------------------------------------------------


@lru_cache(maxsize=8)
def _synth(spec: SynthSpec, seed: int):
    return synth_gen(spec, seed)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.idx is not None:
        src = cfg.idx
        train = load_idx(src.train_images, src.train_labels, src.num_classes, "train")
        test = load_idx(src.test_images, src.test_labels, train.num_classes, "test")
        return train, test
    return _synth(cfg.dataset, cfg.data_seed)


def tier_of(device: int, devices: int, n_tiers: int) -> int:
    """Devices are split into equal contiguous groups, lowest ids in the tightest tier."""
    return device * n_tiers // devices


# -- cost accounting -------------------------------------------------------


def block_macs(topology: TopologySpec, input_shape=None) -> list[int]:
    """Multiply-accumulates per sample for each block's conv/dense op."""
    spatial = topology.spatial_shapes(input_shape)
    out = []
    for b in topology.blocks:
        h, w = spatial[b.index]
        out.append(b.out_channels * b.in_channels * b.kernel[0] * b.kernel[1] * h * w)
    return out


def count_flops(topology: TopologySpec, subset=None, batch: int = 1, phase: str = "train",
                freeze_below: int | None = None) -> int:
    """FLOPs of one pass over ``batch`` samples.

    ``subset`` is a SubsetSpec, a TrainingConfig (frozen prefix taken from
    ``k_f``) or None for the full network. Forward costs 2 FLOPs per MAC;
    backward costs twice the forward of every trainable block.
    """
    if phase not in ("forward", "backward", "train"):
        raise UsageError(f"unknown phase {phase!r}")
    kf = 0
    if isinstance(subset, TrainingConfig):
        kf = subset.k_f
        subset = slt_head_subset(topology, subset)
    if freeze_below is not None:
        kf = freeze_below
    view = topology if subset is None else subset.view(topology)
    fwd = [2 * m * batch for m in block_macs(view)]
    bwd = [2 * f if b.index > kf else 0 for b, f in zip(view.blocks, fwd)]
    total = 0
    if phase in ("forward", "train"):
        total += sum(fwd)
    if phase in ("backward", "train"):
        total += sum(bwd)
    return total


def count_upload(params: ParameterStore, blocks=None) -> int:
    """Bytes uploaded for the given blocks (all by default), 4 bytes per element."""
    return 4 * params.num_elements(blocks)


# -- local training --------------------------------------------------------


def _prefix_views(params: ParameterStore, widths, in_channels) -> ParameterStore:
    blocks, prev = [], in_channels
    for p, m in zip(params.blocks, widths):
        blocks.append({key: (a[:m, :prev] if key == "weight" else a[:m]) for key, a in p.items()})
        prev = m
    return ParameterStore(blocks)


def batch_schedule(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def device_train(params: ParameterStore, topology: TopologySpec, x: np.ndarray,
                 y: np.ndarray, lr: float, freeze_below: int = 0, *, batch_size: int = 32,
                 momentum: float = 0.9, weight_decay: float = 1e-5,
                 rng: np.random.Generator | None = None, augment: bool = False,
                 cycle=None) -> ParameterStore:
    """One epoch of mini-batch SGD over a shard; returns a trained copy.

    ``cycle`` optionally lists per-block width vectors; mini-batch j then trains
    only the prefix submodel ``cycle[j % len(cycle)]`` (FjORD-style switching).
    Momentum buffers start at zero and live for this call only.
    """
    if len(x) == 0:
        raise UsageError("cannot train on an empty shard")
    params = params.copy()
    batches = batch_schedule(len(x), batch_size, rng)
    if cycle is None:
        opt = OptimizerState(lr, momentum, weight_decay)
        for idx in batches:
            xb = hflip(x[idx], rng) if augment else x[idx]
            logits, record = forward(params, topology, xb, "train", freeze_below)
            _, g = softmax_cross_entropy(logits, y[idx])
            sgd_step(params, backward(g, record), opt)
        return params
    velocity = [{key: np.zeros_like(a) for key, a in p.items()} for p in params.blocks]
    vel_store = ParameterStore(velocity)
    in_ch = topology.input_shape[0]
    for j, idx in enumerate(batches):
        widths = cycle[j % len(cycle)]
        sub_topo = topology.view(widths)
        sub = _prefix_views(params, widths, in_ch)
        vel = _prefix_views(vel_store, widths, in_ch)
        opt = OptimizerState(lr, momentum, weight_decay, velocity={
            (k, key): a for k, p in enumerate(vel.blocks, start=1) for key, a in p.items()})
        xb = hflip(x[idx], rng) if augment else x[idx]
        logits, record = forward(sub, sub_topo, xb, "train", freeze_below)
        _, g = softmax_cross_entropy(logits, y[idx])
        sgd_step(sub, backward(g, record), opt)
    return params


# -- per-algorithm round construction ---------------------------------------


@dataclass(frozen=True)
class Job:
    """One device's work in a round."""

    device: int
    tier: int
    spec: SubsetSpec
    freeze_below: int = 0
    upload: tuple[int, ...] | None = None
    cycle: tuple[tuple[int, ...], ...] | None = None


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    step: int | None
    lr: float
    accuracy: float | None
    upload_bytes: int
    cum_upload_bytes: int
    flops: int
    cum_flops: int

    def row(self) -> list[str]:
        return [str(self.round), "" if self.step is None else str(self.step), repr(self.lr),
                "" if self.accuracy is None else repr(self.accuracy), str(self.upload_bytes),
                str(self.cum_upload_bytes), str(self.flops), str(self.cum_flops)]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    server: ParameterStore
    plan: Plan | None = None

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].accuracy


class RunLog:
    """Line-delimited JSON events; silent when no stream is given."""

    def __init__(self, stream_=None):
        self.stream = stream_

    def event(self, kind: str, **payload):
        if self.stream is not None:
            self.stream.write(json.dumps({"event": kind, **payload}, sort_keys=True) + "\n")


class _SltState:
    """Which plan stage is active, including early-stopping bookkeeping."""

    def __init__(self, plan: Plan):
        self.plan = plan
        self.index = 0
        self.best = -1.0
        self.since = 0

    def stage(self, r: int):
        if self.plan.policy.kind == "early_stopping":
            return self.plan.stages[self.index]
        return self.plan.stage_at(r)

    def observe(self, accuracy: float, rounds_elapsed: int) -> bool:
        """Feed an evaluation; returns True when early stopping advances the step."""
        if self.plan.policy.kind != "early_stopping":
            return False
        if accuracy > self.best:
            self.best, self.since = accuracy, 0
            return False
        self.since += rounds_elapsed
        if self.since >= self.plan.policy.patience and self.index < len(self.plan.stages) - 1:
            self.index += 1
            self.best, self.since = -1.0, 0
            return True
        return False


class Engine:
    def __init__(self, cfg: ExperimentConfig, threads: int = 1, run_log: RunLog | None = None):
        self.cfg = cfg.validate()
        self.threads = max(1, int(threads))
        self.log = run_log or RunLog()
        self.topology = resolve_topology(cfg.topology)
        self.train, self.test = load_data(cfg)
        if self.train.shape != self.topology.input_shape:
            self.topology = self.topology.with_input(self.train.shape)
        if self.train.num_classes != self.topology.num_classes:
            raise ConfigError("topology", f"topology has {self.topology.num_classes} classes, "
                                          f"dataset {self.train.num_classes}")
        self.shards = partition(self.train, PartitionSpec(cfg.partition, cfg.alpha, cfg.devices,
                                                          cfg.seed))
        self.server = init_params(self.topology, stream(cfg.seed, INIT))
        self.budgets = [MemoryBudget.from_reference(self.topology, s, cfg.batch_size)
                        for s in cfg.tiers]
        self.plan = None
        self.slt = None
        self._kf_cache: dict[tuple[int, int], int] = {}
        if cfg.algorithm == "slt":
            self.plan = build_plan(self.topology, self.budgets[0], cfg.rounds, cfg.policy,
                                   cfg.batch_size)
            self.slt = _SltState(self.plan)
        self.pool = None
        if cfg.algorithm == "fd_limited":
            rng = stream(cfg.seed, POOL)
            self.pool = [indices_fd(self.topology, cfg.tiers[0], rng)
                         for _ in range(cfg.pool_size)]

    # which subset each device trains -------------------------------------

    def _slt_kf(self, stage, tier: int) -> int:
        key = (stage.n, tier)
        if key not in self._kf_cache:
            c = stage.config
            self._kf_cache[key] = c.k_f if tier == 0 else hetero_min_kf(
                self.topology, c, self.budgets[tier], self.cfg.batch_size)
        return self._kf_cache[key]

    def jobs(self, r: int, devices) -> list[Job]:
        cfg, topo = self.cfg, self.topology
        n_tiers = len(cfg.tiers)
        out = []
        shared = None
        if cfg.algorithm == "fd_limited":
            shared = self.pool[int(stream(cfg.seed, PICK, r).integers(len(self.pool)))]
        for d in devices:
            e = tier_of(d, cfg.devices, n_tiers)
            s_e = cfg.tiers[e]
            if cfg.algorithm == "slt":
                stage = self.slt.stage(r)
                kf = self._slt_kf(stage, e)
                spec = slt_head_subset(topo, stage.config)
                out.append(Job(d, e, spec, kf, tuple(range(kf + 1, topo.K + 1))))
            elif cfg.algorithm == "small":
                out.append(Job(d, e, indices_small(topo, cfg.tiers[0])))
            elif cfg.algorithm == "fedrolex":
                out.append(Job(d, e, indices_fedrolex(topo, s_e, r)))
            elif cfg.algorithm == "fd":
                out.append(Job(d, e, indices_fd(topo, s_e, stream(cfg.seed, FD, r, d))))
            elif cfg.algorithm == "fd_limited":
                out.append(Job(d, e, shared))
            elif cfg.algorithm == "heterofl":
                out.append(Job(d, e, indices_heterofl(topo, s_e)))
            elif cfg.algorithm == "fjord":
                cycle = tuple(tuple(indices_heterofl(topo, s).widths())
                              for s in cfg.tiers[:e + 1])
                out.append(Job(d, e, indices_heterofl(topo, s_e), cycle=cycle))
        return out

    def eval_spec(self, r: int) -> SubsetSpec:
        cfg, topo = self.cfg, self.topology
        if cfg.algorithm == "slt":
            return slt_head_subset(topo, self.slt.stage(r).config)
        if cfg.algorithm == "small":
            return indices_small(topo, cfg.tiers[0])
        if cfg.algorithm in ("heterofl", "fjord"):
            return indices_heterofl(topo, cfg.tiers[-1])
        return full_subset(topo)

    # one round -----------------------------------------------------------

    def _train_job(self, job: Job, r: int, lr: float):
        cfg = self.cfg
        shard = self.shards[job.device]
        view = job.spec.view(self.topology)
        sub = slice_params(self.server, job.spec, self.topology)
        rng = stream(cfg.seed, DATA, r, job.device)
        trained = device_train(sub, view, self.train.x[shard], self.train.y[shard], lr,
                               job.freeze_below, batch_size=cfg.batch_size,
                               momentum=cfg.momentum, weight_decay=cfg.weight_decay, rng=rng,
                               augment=cfg.augment, cycle=job.cycle)
        flops = self._job_flops(job, view, len(shard))
        return Update(job.device, trained, job.spec, job.upload), flops

    def _job_flops(self, job: Job, view: TopologySpec, n: int) -> int:
        if job.cycle is None:
            return count_flops(view, None, n, "train", job.freeze_below)
        sizes = [len(b) for b in batch_schedule(n, self.cfg.batch_size, None)]
        per = [count_flops(view.view(w), None, 1, "train", job.freeze_below)
               for w in job.cycle]
        return sum(per[j % len(per)] * size for j, size in enumerate(sizes))

    def round(self, r: int, lr: float):
        cfg = self.cfg
        devices = np.sort(stream(cfg.seed, SAMPLE, r).choice(
            cfg.devices, size=cfg.devices_per_round, replace=False))
        jobs = self.jobs(r, devices.tolist())
        if self.threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(lambda j: self._train_job(j, r, lr), jobs))
        else:
            results = [self._train_job(j, r, lr) for j in jobs]
        updates = [u for u, _ in results]
        self.server = aggregate_indexed(updates, self.server, self.topology)
        upload = sum(count_upload(u.params, u.blocks) for u in updates)
        flops = sum(f for _, f in results)
        return jobs, upload, flops

    def evaluate(self, r: int) -> float:
        spec = self.eval_spec(r)
        params = slice_params(self.server, spec, self.topology)
        return evaluate(params, spec.view(self.topology), self.test.x, self.test.y)

    def run(self) -> ExperimentResult:
        cfg = self.cfg
        if self.plan is not None:
            self.log.event("plan", plan=self.plan.to_dict())
        metrics: list[RoundMetrics] = []
        cum_up = cum_flops = 0
        last_eval = 0
        for r in range(1, cfg.rounds + 1):
            lr = cosine_lr(r - 1, cfg.rounds, cfg.lr0, cfg.lr_min)
            step = self.slt.stage(r).n if self.slt else None
            try:
                jobs, up, fl = self.round(r, lr)
                acc = None
                if r % cfg.eval_every == 0 or r == cfg.rounds:
                    acc = self.evaluate(r)
            except SimError as exc:
                raise RoundError(r, exc) from exc
            cum_up += up
            cum_flops += fl
            metrics.append(RoundMetrics(r, step, lr, acc, up, cum_up, fl, cum_flops))
            self.log.event("round", round=r, step=step, lr=lr, accuracy=acc,
                           devices=[j.device for j in jobs],
                           freeze=[j.freeze_below for j in jobs], upload_bytes=up, flops=fl)
            if acc is not None and self.slt is not None:
                if self.slt.observe(acc, r - last_eval):
                    self.log.event("advance", round=r, step=self.slt.stage(r + 1).n)
            if acc is not None:
                last_eval = r
        return ExperimentResult(cfg, metrics, self.server, self.plan)


def run_experiment(cfg: ExperimentConfig, threads: int = 1, run_log: RunLog | None = None
                   ) -> ExperimentResult:
    return Engine(cfg, threads, run_log).run()


def coadaptation_experiment(cfg: ExperimentConfig, pool_sizes=(1, 5, 50, 500), threads: int = 1
                            ) -> dict[int, ExperimentResult]:
    """fd_limited runs that differ only in how many fixed random subsets they draw from."""
    return {k: run_experiment(replace(cfg, algorithm="fd_limited", pool_size=k), threads)
            for k in pool_sizes}


# -- metrics files ---------------------------------------------------------


def write_metrics_csv(metrics: list[RoundMetrics], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in metrics:
            w.writerow(m.row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
