import csv
import json
import statistics
from pathlib import Path

import pytest

from slt_sim.chart import load_series, render_svg, write_chart
from slt_sim.cli import (_threads, config_hash, expand_grid, load_config, main, parse_config,
                         summarize)
from slt_sim.errors import UsageError
from slt_sim.memory import MemoryBudget, memory_of_subset
from slt_sim.planner import build_plan
from slt_sim.subset import indices_small
from slt_sim.topology import builtin

FIXTURES = Path(__file__).parent / "fixtures" / "chart"
GOLDEN = FIXTURES / "golden_acc_vs_round.svg"

TINY_TOML = """
label = "tiny"
algorithm = "small"
devices = 4
devices_per_round = 2
rounds = 3
tiers = [0.25]

[dataset]
classes = 10
train_per_class = 8
test_per_class = 4
"""


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_hash_ignores_key_order(tmp_path):
    a = _write(tmp_path, 'algorithm = "fd"\nrounds = 7\n[dataset]\nclasses = 4\nmodes = 1\n', "a.toml")
    b = _write(tmp_path, '[dataset]\nmodes = 1\nclasses = 4\n', "b.toml")
    b.write_text('rounds = 7\nalgorithm = "fd"\n' + b.read_text())
    assert config_hash(load_config(a)[0]) == config_hash(load_config(b)[0])
    c = _write(tmp_path, 'algorithm = "fd"\nrounds = 8\n[dataset]\nclasses = 4\nmodes = 1\n', "c.toml")
    assert config_hash(load_config(c)[0]) != config_hash(load_config(a)[0])


def test_run_writes_artifacts(tmp_path):
    cfg = _write(tmp_path, TINY_TOML)
    assert main(["run", str(cfg), "--out", str(tmp_path / "r"), "--quiet", "--chart"]) == 0
    out = tmp_path / "r"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["label"] == "tiny"
    assert manifest["config_hash"] == config_hash(load_config(cfg)[0])
    assert set(manifest["outputs"]) == {"metrics.csv", "events.jsonl", "manifest.json",
                                        "acc_vs_round.svg"}
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 3 and rows[0].keys() >= {"round", "accuracy", "cum_flops"}


def test_seed_flag_is_reproducible(tmp_path):
    cfg = _write(tmp_path, TINY_TOML)
    for name in ("a", "b"):
        assert main(["run", str(cfg), "--seed", "1", "--out", str(tmp_path / name), "--quiet"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "metrics.csv").read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 1


def test_missing_topology_file(tmp_path, capsys):
    cfg = _write(tmp_path, 'topology = "nets/missing.json"\n')
    assert main(["run", str(cfg), "--out", str(tmp_path / "r")]) != 0
    err = capsys.readouterr().err
    assert "topology" in err and "missing.json" in err
    assert not (tmp_path / "r").exists()


@pytest.mark.parametrize("text, path", [
    ('algorithm = "sgd"\n', "algorithm"),
    ('colour = "red"\n', "colour"),
    ('[sweep]\nflavour = [1]\n', "sweep.flavour"),
    ('rounds = 0\n', "rounds"),
])
def test_validation_errors_name_the_field(tmp_path, capsys, text, path):
    cfg = _write(tmp_path, text)
    assert main(["run", str(cfg), "--out", str(tmp_path / "r")]) != 0
    assert path in capsys.readouterr().err


def test_threads_fallback(monkeypatch):
    monkeypatch.delenv("SLT_SIM_THREADS", raising=False)
    assert _threads(None) == 1
    monkeypatch.setenv("SLT_SIM_THREADS", "3")
    assert _threads(None) == 3
    assert _threads(2) == 2


def test_one_cell_sweep_equals_run(tmp_path):
    cfg = _write(tmp_path, TINY_TOML + '\n[sweep]\nseed = [0]\n')
    assert main(["sweep", str(cfg), "--out", str(tmp_path / "s"), "--quiet"]) == 0
    assert main(["run", str(cfg), "--out", str(tmp_path / "r"), "--quiet"]) == 0
    assert (tmp_path / "s" / "seed=0" / "metrics.csv").read_bytes() == \
        (tmp_path / "r" / "metrics.csv").read_bytes()


def test_sweep_summary_statistics(tmp_path):
    cfg = _write(tmp_path, TINY_TOML + '\n[sweep]\nalgorithm = ["small", "fd"]\nseed = [0, 1, 2]\n')
    assert main(["sweep", str(cfg), "--out", str(tmp_path / "s"), "--quiet", "--threads", "2"]) == 0
    cells = json.loads((tmp_path / "s" / "cells.json").read_text())
    summary = {r["label"]: r for r in csv.DictReader(open(tmp_path / "s" / "summary.csv"))}
    assert set(summary) == {"algorithm=small", "algorithm=fd"}
    for label, row in summary.items():
        accs = [c["final_accuracy"] for c in cells if c["label"] == label]
        assert len(accs) == 3 and row["runs"] == "3"
        assert float(row["mean_accuracy"]) == pytest.approx(statistics.fmean(accs))
        assert float(row["std_accuracy"]) == pytest.approx(statistics.stdev(accs))


def test_sweep_records_failures_and_continues(tmp_path):
    cfg = _write(tmp_path, TINY_TOML + '\n[sweep]\ntiers = [[0.25], [1.5]]\n')
    assert main(["sweep", str(cfg), "--out", str(tmp_path / "s"), "--quiet"]) == 1
    cells = json.loads((tmp_path / "s" / "cells.json").read_text())
    assert [c["status"] == "ok" for c in cells] == [True, False]
    assert "tiers" in cells[1]["status"]


def test_grid_expansion_order():
    base, axes = parse_config({"algorithm": "slt",
                               "sweep": {"algorithm": ["slt", "fd"], "seed": [0, 1]}})
    cells = expand_grid(base, axes)
    assert [(c.algorithm, c.seed) for _, c in cells] == [("slt", 0), ("slt", 1), ("fd", 0),
                                                         ("fd", 1)]
    assert cells[0][1].label == "algorithm=slt"


def test_summary_single_seed_has_no_std():
    rows = summarize([{"label": "x", "seed": 0, "status": "ok", "final_accuracy": 0.5}])
    assert rows[0]["mean_accuracy"] == "0.5" and rows[0]["std_accuracy"] == ""


def test_plan_command(tmp_path):
    assert main(["plan", "--topology", "MicroConv8", "--s-ref", "0.25", "--rounds", "200",
                 "--out", str(tmp_path), "--quiet"]) == 0
    topo = builtin("MicroConv8")
    want = build_plan(topo, MemoryBudget.from_reference(topo, 0.25), 200).to_json()
    assert (tmp_path / "plan.json").read_text() == want
    rows = list(csv.DictReader(open(tmp_path / "plan.csv")))
    assert [r["n"] for r in rows] == [str(i) for i in range(7)]


def test_plan_command_reports_infeasible(capsys):
    assert main(["plan", "--topology", "ResNet20", "--s-ref", "0.125", "--quiet"]) == 2
    assert "minimal achievable memory" in capsys.readouterr().err


def test_memreport_command(tmp_path):
    out = tmp_path / "mem.csv"
    assert main(["memreport", "--topology", "MicroConv8", "--s", "0.25", "--out", str(out),
                 "--quiet"]) == 0
    rows = list(csv.DictReader(open(out)))
    topo = builtin("MicroConv8")
    assert rows[-1]["block"] == "total"
    assert int(rows[-1]["total"]) == memory_of_subset(topo, indices_small(topo, 0.25)).total_bytes


def test_bundled_configs_parse():
    root = Path(__file__).parents[1] / "src" / "slt_sim" / "configs"
    paths = sorted(root.glob("*.toml"))
    assert any(p.name == "quickstart.toml" for p in paths)
    for p in paths:
        cfg, axes = load_config(p)
        for _, cell in expand_grid(cfg, axes):
            cell.validate()


# -- charts --------------------------------------------------------------


def test_single_series_gives_one_polyline(tmp_path):
    out = write_chart([FIXTURES / "slt.csv"], "acc_vs_round", tmp_path / "c.svg", ["slt"])
    svg = out.read_text()
    assert svg.count("<polyline") == 1
    # the unevaluated first round is skipped
    assert "points=2,42 3,55 4,61 5,70" in svg


def test_empty_csv_writes_nothing(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(UsageError):
        write_chart([empty], "acc_vs_round", tmp_path / "c.svg")
    assert not (tmp_path / "c.svg").exists()
    assert main(["chart", str(empty), "--out", str(tmp_path / "d.svg"), "--quiet"]) != 0
    assert not (tmp_path / "d.svg").exists()


def test_schema_mismatch_names_column(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("round,acc\n1,0.5\n")
    with pytest.raises(UsageError, match="accuracy"):
        load_series(bad, "acc_vs_round", "x")
    with pytest.raises(UsageError, match="cum_flops"):
        load_series(FIXTURES.parent / "microconv8_plan_r200.json", "acc_vs_flops", "x")


def test_chart_kinds_scale_x():
    s = load_series(FIXTURES / "slt.csv", "acc_vs_flops", "slt")
    assert s.x[0] == pytest.approx(1.0) and s.y[-1] == pytest.approx(70.0)
    s = load_series(FIXTURES / "small.csv", "acc_vs_upload", "small")
    assert s.x[-1] == pytest.approx(0.004)


def test_render_is_deterministic():
    series = [load_series(FIXTURES / "slt.csv", "acc_vs_round", "slt")]
    assert render_svg(series, "acc_vs_round") == render_svg(series, "acc_vs_round")


def test_golden_svg(tmp_path):
    out = tmp_path / "g.svg"
    assert main(["chart", str(FIXTURES / "slt.csv"), str(FIXTURES / "small.csv"),
                 "--label", "SLT", "--label", "small", "--title", "desk task",
                 "--out", str(out), "--quiet"]) == 0
    assert out.read_bytes() == GOLDEN.read_bytes()


def test_sweep_resume_reuses_matching_cells(tmp_path):
    cfg = _write(tmp_path, TINY_TOML + '\n[sweep]\nseed = [0, 1]\n')
    out = tmp_path / "s"
    assert main(["sweep", str(cfg), "--out", str(out), "--quiet"]) == 0
    first = (out / "seed=0" / "manifest.json").read_text()
    assert main(["sweep", str(cfg), "--out", str(out), "--quiet", "--resume"]) == 0
    assert (out / "seed=0" / "manifest.json").read_text() == first
    # a changed config invalidates the cell
    cfg.write_text(cfg.read_text().replace("rounds = 3", "rounds = 2"))
    assert main(["sweep", str(cfg), "--out", str(out), "--quiet", "--resume"]) == 0
    rows = list(csv.DictReader(open(out / "seed=0" / "metrics.csv")))
    assert len(rows) == 2
