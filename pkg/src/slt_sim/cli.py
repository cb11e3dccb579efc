"""Command-line front end: run, sweep, plan, memreport, chart.

Configs are TOML files whose top-level keys mirror ExperimentConfig; a
``[sweep]`` table turns any of those keys into an axis of a grid.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import re
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .chart import KINDS, write_chart
from .errors import ConfigError, SimError
from .federation import ExperimentConfig, RunLog, run_experiment, write_metrics_csv
from .memory import MemoryBudget, memory_of_config, memory_of_subset
from .planner import SchedulerPolicy, TrainingConfig, build_plan
from .subset import indices_small
from .topology import builtin_names, resolve_topology

log = logging.getLogger("slt_sim")

CONFIG_FIELDS = {f.name for f in fields(ExperimentConfig)}


# -- configuration files ---------------------------------------------------


def _resolve_paths(raw: dict, base: Path) -> dict:
    raw = dict(raw)
    topo = raw.get("topology")
    if isinstance(topo, str) and topo not in builtin_names():
        path = (base / topo) if not Path(topo).is_absolute() else Path(topo)
        if not path.exists():
            raise ConfigError("topology", f"topology file not found: {path}")
        raw["topology"] = str(path)
    idx = raw.get("idx")
    if isinstance(idx, dict):
        idx = dict(idx)
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key in idx and not Path(idx[key]).is_absolute():
                idx[key] = str(base / idx[key])
            if key in idx and not Path(idx[key]).exists():
                raise ConfigError(f"idx.{key}", f"file not found: {idx[key]}")
        raw["idx"] = idx
    return raw


def parse_config(raw: dict, base: Path = Path(".")) -> tuple[ExperimentConfig, dict]:
    """(base config, sweep axes) from a decoded TOML document."""
    raw = dict(raw)
    axes = raw.pop("sweep", {})
    if not isinstance(axes, dict):
        raise ConfigError("sweep", "must be a table of axis lists")
    for key, values in axes.items():
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"sweep.{key}", "unknown field")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key}", "axis must be a nonempty list")
    cfg = ExperimentConfig.from_dict(_resolve_paths(raw, base))
    return cfg, axes


def load_config(path) -> tuple[ExperimentConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from exc
    return parse_config(raw, path.parent)


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def _threads(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("SLT_SIM_THREADS")
    return max(1, int(env)) if env else 1


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- run -------------------------------------------------------------------


def run_one(cfg: ExperimentConfig, out: Path, threads: int = 1, chart: bool = False) -> dict:
    """Execute one experiment and write its artifacts into ``out``."""
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    t0 = time.perf_counter()
    with open(out / "events.jsonl", "w") as events:
        result = run_experiment(cfg, threads, RunLog(events))
    outputs = ["metrics.csv", "events.jsonl", "manifest.json"]
    write_metrics_csv(result.metrics, out / "metrics.csv")
    if result.plan is not None:
        (out / "plan.json").write_text(result.plan.to_json())
        _write_plan_csv(result.plan, out / "plan.csv")
        outputs += ["plan.json", "plan.csv"]
    if chart:
        write_chart([out / "metrics.csv"], "acc_vs_round", out / "acc_vs_round.svg",
                    [cfg.label or cfg.algorithm])
        outputs.append("acc_vs_round.svg")
    manifest = {
        "label": cfg.label or cfg.algorithm,
        "config_hash": config_hash(cfg),
        "config": json.loads(canonical_json(cfg)),
        "seed": cfg.seed,
        "code_version": __version__,
        "started": started,
        "finished": _now(),
        "seconds": round(time.perf_counter() - t0, 3),
        "final_accuracy": result.final_accuracy,
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _write_plan_csv(plan, path):
    rows = plan.table()
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_run(args) -> int:
    cfg, _ = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.label or cfg.algorithm}-s{cfg.seed}"
    manifest = run_one(cfg, out, _threads(args.threads), chart=args.chart)
    if not args.quiet:
        print(f"{manifest['label']}: final accuracy {manifest['final_accuracy']:.4f} -> {out}")
    return 0


# -- sweep -----------------------------------------------------------------


def _cell_name(cell: dict) -> str:
    parts = []
    for k, v in cell.items():
        if isinstance(v, (list, tuple)):
            v = "_".join(str(x) for x in v)
        parts.append(f"{k}={v}")
    return re.sub(r"[^A-Za-z0-9=._-]+", "", "-".join(parts)) or "cell"


def expand_grid(base: ExperimentConfig, axes: dict) -> list[tuple[dict, ExperimentConfig]]:
    cells = []
    keys = list(axes)
    for combo in itertools.product(*(axes[k] for k in keys)):
        cell = dict(zip(keys, combo))
        merged = {**base.to_dict(), **cell}
        cfg = ExperimentConfig.from_dict(merged)
        if "label" not in cell:
            group = {k: v for k, v in cell.items() if k != "seed"}
            cfg = replace(cfg, label=_cell_name(group) if group else (base.label or cfg.algorithm))
        cells.append((cell, cfg))
    return cells


def summarize(records: list[dict]) -> list[dict]:
    """Mean and sample std of final accuracy over the seeds of every group."""
    groups: dict[str, list[dict]] = {}
    for rec in records:
        groups.setdefault(rec["label"], []).append(rec)
    rows = []
    for label, recs in groups.items():
        accs = [r["final_accuracy"] for r in recs if r["status"] == "ok"]
        rows.append({
            "label": label,
            "runs": len(recs),
            "ok": len(accs),
            "mean_accuracy": repr(statistics.fmean(accs)) if accs else "",
            "std_accuracy": repr(statistics.stdev(accs)) if len(accs) > 1 else "",
            "seeds": " ".join(str(r["seed"]) for r in recs),
        })
    return rows


def _reusable(cfg: ExperimentConfig, cell_dir: Path) -> dict | None:
    """The cell's manifest if it was produced by this config and code version."""
    path = cell_dir / "manifest.json"
    if not (path.exists() and (cell_dir / "metrics.csv").exists()):
        return None
    try:
        manifest = json.loads(path.read_text())
    except ValueError:
        return None
    if manifest.get("config_hash") != config_hash(cfg) or \
            manifest.get("code_version") != __version__:
        return None
    return manifest


def run_sweep(base: ExperimentConfig, axes: dict, out: Path, threads: int = 1,
              quiet: bool = False, resume: bool = False) -> list[dict]:
    """Run every cell of the grid; with ``resume``, finished cells are reused."""
    cells = expand_grid(base, axes)
    out.mkdir(parents=True, exist_ok=True)

    def one(item):
        cell, cfg = item
        name = _cell_name(cell) if cell else "cell"
        rec = {"cell": name, "label": cfg.label, "seed": cfg.seed}
        try:
            manifest = _reusable(cfg, out / name) if resume else None
            if manifest is None:
                manifest = run_one(cfg, out / name)
            rec.update(status="ok", final_accuracy=manifest["final_accuracy"])
        except Exception as exc:  # recorded, the sweep goes on
            rec.update(status=f"failed: {type(exc).__name__}: {exc}", final_accuracy=None)
            log.error("cell %s failed: %s", name, exc)
        if not quiet:
            print(f"{name}: {rec['status']}"
                  + (f" {rec['final_accuracy']:.4f}" if rec["final_accuracy"] is not None else ""),
                  flush=True)
        return rec

    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, cells))
    else:
        records = [one(c) for c in cells]
    rows = summarize(records)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / "cells.json").write_text(json.dumps(records, indent=1, sort_keys=True) + "\n")
    return records


def cmd_sweep(args) -> int:
    base, axes = load_config(args.config)
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    out = Path(args.out) if args.out else Path("runs") / (base.label or "sweep")
    records = run_sweep(base, axes, out, _threads(args.threads), args.quiet, args.resume)
    failed = [r for r in records if r["status"] != "ok"]
    if not args.quiet:
        print(f"{len(records) - len(failed)}/{len(records)} cells ok; summary in "
              f"{out / 'summary.csv'}")
    return 1 if failed else 0


# -- plan / memreport ------------------------------------------------------


def _input_shape(text):
    if text is None:
        return None
    try:
        shape = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError("input", f"expected C,H,W, got {text!r}") from exc
    if len(shape) != 3:
        raise ConfigError("input", f"expected C,H,W, got {text!r}")
    return shape


def cmd_plan(args) -> int:
    topo = resolve_topology(args.topology)
    shape = _input_shape(args.input)
    if shape is not None:
        topo = topo.with_input(shape)
    policy = SchedulerPolicy(args.policy, args.patience, args.ablation_ratio)
    budget = MemoryBudget.from_reference(topo, args.s_ref, args.batch)
    plan = build_plan(topo, budget, args.rounds, policy, args.batch)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "plan.json").write_text(plan.to_json())
        _write_plan_csv(plan, out / "plan.csv")
    if not args.quiet:
        print(f"{topo.name}: budget {budget.limit_bytes} bytes (s_ref={args.s_ref}), N={plan.N}")
        print("n,k_f,k_t,s,memory_bytes,start,end,rounds")
        for row in plan.table():
            print(",".join("" if row[k] is None else str(row[k])
                           for k in ("n", "k_f", "k_t", "s", "memory_bytes", "start", "end",
                                     "rounds")))
    return 0


def cmd_memreport(args) -> int:
    topo = resolve_topology(args.topology)
    shape = _input_shape(args.input)
    if args.k_t is not None:
        cfg = TrainingConfig(args.k_f or 0, args.k_t, args.s)
        rep = memory_of_config(topo, cfg, args.batch, shape, args.optimizer)
    else:
        rep = memory_of_subset(topo, indices_small(topo, args.s), args.batch, shape,
                               args.optimizer)
    rows = rep.as_rows()
    stream = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(stream, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        w.writerow({"block": "total", "role": "", "weights": rep.weights_bytes,
                    "activations": rep.activations_bytes, "gradients": rep.gradients_bytes,
                    "optimizer": rep.optimizer_bytes, "total": rep.total_bytes})
    finally:
        if args.out:
            stream.close()
    if not args.quiet and args.out:
        print(f"{topo.name}: {rep.total_bytes} bytes, activations "
              f"{rep.activations_bytes / rep.total_bytes:.1%}")
    return 0


# -- chart -----------------------------------------------------------------


def _label_for(csv_path: Path) -> str:
    manifest = csv_path.parent / "manifest.json"
    if manifest.exists():
        try:
            return json.loads(manifest.read_text())["label"]
        except (KeyError, ValueError):
            pass
    return csv_path.parent.name or csv_path.stem


def cmd_chart(args) -> int:
    paths = [Path(p) for p in args.csv]
    labels = args.label or [_label_for(p) for p in paths]
    write_chart(paths, args.kind, args.out, labels, args.title or "")
    if not args.quiet:
        print(f"wrote {args.out}")
    return 0


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slt-sim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, help="override the config's seed")
        sp.add_argument("--out", help="output directory (file for chart/memreport)")
        sp.add_argument("--threads", type=int,
                        help="worker threads (default: $SLT_SIM_THREADS or 1)")
        sp.add_argument("--quiet", action="store_true", help="only report errors")

    sp = sub.add_parser("run", help="run one experiment from a TOML config")
    sp.add_argument("config")
    sp.add_argument("--chart", action="store_true", help="also draw accuracy over rounds")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run the grid spanned by the config's [sweep] table")
    sp.add_argument("config")
    sp.add_argument("--resume", action="store_true",
                    help="reuse cells whose manifest matches the config and code version")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("plan", help="print (and optionally save) the SLT schedule")
    sp.add_argument("--topology", default="MicroConv8")
    sp.add_argument("--s-ref", type=float, default=0.25, help="budget as a small-model scale")
    sp.add_argument("--rounds", type=int, default=300)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--input", help="input shape C,H,W (default: the topology's)")
    sp.add_argument("--policy", default="parameter_share",
                    choices=["parameter_share", "equal", "early_stopping"])
    sp.add_argument("--patience", type=int, default=15)
    sp.add_argument("--ablation-ratio", type=float, default=1.0)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("memreport", help="per-block training memory ledger as CSV")
    sp.add_argument("--topology", default="MicroConv8")
    sp.add_argument("--s", type=float, default=1.0, help="width scale")
    sp.add_argument("--k-f", type=int, help="frozen blocks (with --k-t: an SLT configuration)")
    sp.add_argument("--k-t", type=int, help="last full-width block")
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--input", help="input shape C,H,W")
    sp.add_argument("--optimizer", action="store_true", help="count momentum buffers")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_memreport)

    sp = sub.add_parser("chart", help="SVG line chart of one or more metrics CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--kind", default="acc_vs_round", choices=sorted(KINDS))
    sp.add_argument("--label", action="append", help="series label (repeat per CSV)")
    sp.add_argument("--title")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_chart)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "chart" and not args.out:
        args.out = "chart.svg"
    try:
        return args.func(args)
    except SimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
