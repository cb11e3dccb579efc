"""Run the bundled experiment sweeps and chart them.

    python scripts/run_experiments.py                 # all three
    python scripts/run_experiments.py quickstart      # desk-scale ordering only

Each sweep lands in ``results/<name>/`` (one directory per cell plus
``summary.csv``). Finished cells are reused, so an interrupted run picks up
where it stopped. Charts use the seed-0 cell of every label.
"""

import argparse
import os
import statistics
from pathlib import Path

from slt_sim.chart import KINDS, write_chart
from slt_sim.cli import load_config, run_sweep

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "src" / "slt_sim" / "configs"
NAMES = ("quickstart", "heterogeneous", "coadaptation")


def run(name: str, out_root: Path, threads: int):
    base, axes = load_config(CONFIGS / f"{name}.toml")
    out = out_root / name
    records = run_sweep(base, axes, out, threads, quiet=True, resume=True)
    by_label: dict[str, list] = {}
    for r in records:
        by_label.setdefault(r["label"], []).append(r)
    print(f"\n{name}: {len(records)} cells in {out}")
    for label, recs in by_label.items():
        accs = [r["final_accuracy"] for r in recs if r["status"] == "ok"]
        failed = len(recs) - len(accs)
        mean = f"{100 * statistics.fmean(accs):6.2f}%" if accs else "   n/a"
        spread = f" +- {100 * statistics.stdev(accs):.2f}" if len(accs) > 1 else ""
        print(f"  {label:24s} {mean}{spread}" + (f"  ({failed} failed)" if failed else ""))
    seed0 = [r for r in records if r["seed"] == min(x["seed"] for x in records)
             and r["status"] == "ok"]
    csvs = [out / r["cell"] / "metrics.csv" for r in seed0]
    labels = [r["label"] for r in seed0]
    for kind in KINDS:
        path = write_chart(csvs, kind, out / f"{kind}.svg", labels, title=name)
        print(f"  chart {path}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", metavar="name", help=f"any of {', '.join(NAMES)}")
    ap.add_argument("--out", type=Path, default=ROOT / "results")
    ap.add_argument("--threads", type=int, default=int(os.environ.get("SLT_SIM_THREADS", "1")))
    args = ap.parse_args()
    unknown = set(args.names) - set(NAMES)
    if unknown:
        ap.error(f"unknown experiment(s) {sorted(unknown)}; choose from {NAMES}")
    for name in args.names or NAMES:
        run(name, args.out, args.threads)


if __name__ == "__main__":
    main()
