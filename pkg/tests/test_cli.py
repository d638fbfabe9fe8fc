import csv
import json

import numpy as np
import pytest

from ccflow.cli import main
from ccflow.scenario import bundled_path

ZERO = """\
name: zero
units: {time: "1"}
time: {t0: 0, T: 1.5, dt: 0.025}
network:
  models:
    line: {kind: telegrapher, R: 0.01, L: 0.5, C: 0.125, G: 0.01}
  edges:
    - {name: e1, tail: vin, head: v1, a: 0, b: 1, cells: 10, model: line}
    - {name: e2, tail: v1, head: vd, a: 0, b: 1, cells: 10, model: line}
  left_bc: {quantity: I, control: u}
  right_bc: {quantity: U, value: 0}
  supply: {kind: trace, component: I}
initial: {kind: values, values: {e1: [0, 0], e2: [0, 0]}}
demand: {t0: 0, y0: 1, kappa: 3, sigma: 0.2, mean_level: {kind: constant, level: 1}}
costs: {w_track: 1}
controls: {cell: 0.025, initial: {u: 0}}
"""

FPTD = bundled_path("fptd_benchmark").read_text().replace(
    "dt: [480 s, 60 s, 6 s, 1 s]", "dt: [60 s]").replace("  mc_paths: 100000\n", "")


def write(tmp_path, text, name="s.yaml"):
    f = tmp_path / name
    f.write_text(text)
    return str(f)


def test_simulate_zero_everything(tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--scenario", write(tmp_path, ZERO), "--out", str(out)]) == 0
    with open(out / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["edge", "x", "t", "comp1", "comp2"]
    assert len(rows) == 2 * 11 * 61
    assert all(float(r["comp1"]) == 0.0 and float(r["comp2"]) == 0.0 for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 0 and summary["refine"] == 0
    assert "objective" in summary and "total_s" in summary["timings"]


def test_fptd_command_prints_table1_risk(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["fptd", "--scenario", write(tmp_path, FPTD), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "0.1479" in text
    with open(out / "fptd_dt60.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "g", "G"]
    assert float(rows[-1][2]) == pytest.approx(0.1479, abs=5e-4)


def test_parse_error_exit_code(tmp_path, capsys):
    bad = ZERO.replace("cells: 10, model: line}\n    - {name: e2",
                       "cells: ten, model: line}\n    - {name: e2")
    assert main(["simulate", "--scenario", write(tmp_path, bad), "--out",
                 str(tmp_path / "o")]) == 2
    assert "network.edges[0].cells" in capsys.readouterr().err


def test_validation_failure_exit_code(tmp_path):
    text = bundled_path("advect_validate").read_text()
    text = text.replace("cells: 80", "cells: 10").replace("dt: 0.003125 ", "dt: 0.025 ")
    text = text.replace("cell: 0.003125", "cell: 0.025").replace("threshold: 0.02",
                                                                "threshold: 1e-9")
    text = text.replace("refinements: 2", "refinements: 1")
    out = tmp_path / "o"
    assert main(["validate", "--scenario", write(tmp_path, text), "--out", str(out)]) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"] is False


def test_generic_validate_passes(tmp_path, capsys):
    assert main(["validate", "--scenario", write(tmp_path, ZERO.replace("U, value: 0",
                                                                        "U, value: 1")),
                 "--out", str(tmp_path / "o")]) == 0
    assert "PASS" in capsys.readouterr().out


def test_runtime_error_exit_code(tmp_path, capsys):
    text = bundled_path("gtp_s").read_text().replace("initial: {u: 0.8, u_compr: 0}",
                                                      "initial: {u: 60, u_compr: 0}")
    assert main(["simulate", "--scenario", write(tmp_path, text), "--out",
                 str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_negative_refine_rejected(tmp_path):
    assert main(["simulate", "--scenario", write(tmp_path, ZERO), "--refine", "-1",
                 "--out", str(tmp_path / "o")]) == 2


def test_optimize_then_mc_analyze(tmp_path):
    text = ZERO.replace("U, value: 0", "U, value: 1") + \
        "chance_constraint: {variant: scc, interval: [1, 1.5], theta: 0.05}\n" + \
        "mc: {paths: 200, dt: 0.025}\n"
    src = write(tmp_path, text)
    out = tmp_path / "o"
    assert main(["optimize", "--scenario", src, "--out", str(out)]) == 0
    for f in ("controls.csv", "trace.csv", "supply.csv", "trajectory.csv", "summary.json"):
        assert (out / f).exists()
    head = (out / "trace.csv").read_text().splitlines()[0]
    assert head.startswith("iter,cost,grad_norm,scc_viol,jcc_risk")
    assert (out / "controls.csv").read_text().startswith("t,u\n")
    assert main(["mc-analyze", "--scenario", src, "--out", str(out), "--seed", "3"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["supply_from"].endswith("controls.csv")
    assert summary["seed"] == 3
    with open(out / "mc_analysis.csv") as fh:
        rows = list(csv.DictReader(fh))
    hf = np.array([float(r["hit_fraction"]) for r in rows])
    assert np.all(np.diff(hf) >= 0)
