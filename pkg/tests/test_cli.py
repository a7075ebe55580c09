import csv
import json

import numpy as np
import pytest

from fisher_fair.cli import main
from tests.conftest import example5_document


@pytest.fixture
def ex5_file(tmp_path):
    path = tmp_path / "ex5.json"
    path.write_text(json.dumps(example5_document()))
    return str(path)


def test_solve_verify_roundtrip(tmp_path, ex5_file):
    out = str(tmp_path / "res.json")
    assert main(["solve", "--instance", ex5_file, "--out", out]) == 0
    doc = json.loads(open(out).read())
    assert doc["gap"] <= 1e-8
    report = str(tmp_path / "rep.json")
    assert main(["verify", "--instance", ex5_file, "--result", out,
                 "--out", report]) == 0
    rep = json.loads(open(report).read())
    assert rep["kkt"]["pass"] and rep["fairness"]["pass"]


def test_solve_malformed_file_exits_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"mode\": \"linear\", \"budgets\": [1.0]}")
    assert main(["solve", "--instance", str(bad)]) == 1
    bad.write_text("not json at all")
    assert main(["solve", "--instance", str(bad)]) == 1
    assert main(["solve", "--instance", str(tmp_path / "missing.json")]) == 1


def test_solve_invalid_instance_names_invariant(tmp_path, capsys):
    doc = example5_document()
    doc["budgets"][0] = -1.0
    path = tmp_path / "neg.json"
    path.write_text(json.dumps(doc))
    assert main(["solve", "--instance", str(path)]) == 1
    err = capsys.readouterr().err
    assert "budget" in err


def test_sample_instance_deterministic(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    assert main(["sample-instance", "--n", "4", "--k", "3", "--seed", "7",
                 "--out", str(a)]) == 0
    assert main(["sample-instance", "--n", "4", "--k", "3", "--seed", "7",
                 "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert len(doc["budgets"]) == 4
    assert len(doc["breakpoints"]) == 4


def test_sample_instance_loads_and_solves(tmp_path):
    inst_path = tmp_path / "inst.json"
    res_path = tmp_path / "res.json"
    assert main(["sample-instance", "--n", "5", "--k", "4", "--seed", "3",
                 "--out", str(inst_path)]) == 0
    assert main(["solve", "--instance", str(inst_path), "--out",
                 str(res_path)]) == 0


def test_solve_mode_sda_and_exit_codes(tmp_path, ex5_file):
    out = str(tmp_path / "sda.json")
    code = main(["solve", "--instance", ex5_file, "--mode", "sda",
                 "--iters", "20000", "--seed", "5", "--out", out,
                 "--gap-tol", "1e-3"])
    assert code in (0, 2)
    doc = json.loads(open(out).read())
    assert len(doc["beta"]) == 4


def test_solve_mode_ellipsoid_cross_checks_dual(tmp_path):
    inst_path = tmp_path / "i32.json"
    assert main(["sample-instance", "--n", "3", "--k", "2", "--seed", "11",
                 "--out", str(inst_path)]) == 0
    dual_out = str(tmp_path / "dual.json")
    ell_out = str(tmp_path / "ell.json")
    assert main(["solve", "--instance", str(inst_path), "--out", dual_out]) == 0
    assert main(["solve", "--instance", str(inst_path), "--mode", "ellipsoid",
                 "--epsilon", "1e-4", "--out", ell_out]) == 0
    ud = np.asarray(json.loads(open(dual_out).read())["u"])
    ue = np.asarray(json.loads(open(ell_out).read())["u"])
    assert np.abs(ud - ue).max() <= 5e-4


def test_emit_conic_and_oracle(tmp_path):
    inst_path = tmp_path / "inst.json"
    main(["sample-instance", "--n", "3", "--k", "2", "--seed", "2",
          "--out", str(inst_path)])
    conic = tmp_path / "conic.json"
    assert main(["emit-conic", "--instance", str(inst_path),
                 "--out", str(conic)]) == 0
    doc = json.loads(conic.read_text())
    assert set(doc) == {"objective", "rows", "cones", "var_names"}
    orc = tmp_path / "orc.json"
    assert main(["oracle", "--instance", str(inst_path), "--cells", "300",
                 "--out", str(orc)]) == 0
    assert len(json.loads(orc.read_text())["beta"]) == 3


def test_sda_trace_csv(tmp_path, ex5_file):
    res = tmp_path / "res.json"
    main(["solve", "--instance", ex5_file, "--out", str(res)])
    trace = tmp_path / "trace.csv"
    assert main(["sda", "--instance", ex5_file, "--iters", "4096",
                 "--seed", "1", "--ref", str(res), "--out", str(trace)]) == 0
    rows = list(csv.reader(open(trace)))
    assert rows[0][0] == "t"
    assert rows[0][-1] == "sqerr"
    assert int(rows[-1][0]) == 4096


def test_plot_data_csv(tmp_path, ex5_file):
    res = tmp_path / "res.json"
    main(["solve", "--instance", ex5_file, "--out", str(res)])
    plot = tmp_path / "plot.csv"
    assert main(["plot-data", "--instance", ex5_file, "--result", str(res),
                 "--points", "200", "--out", str(plot)]) == 0
    rows = list(csv.reader(open(plot)))
    assert rows[0][:2] == ["theta", "p_star"]
    data = np.asarray(rows[1:], dtype=float)
    # envelope column is the max of the scaled valuation columns
    assert np.allclose(data[:, 1], data[:, 2:].max(axis=1), atol=1e-10)


def test_bench_csv_shape(tmp_path, monkeypatch):
    monkeypatch.setenv("FISHER_FAIR_THREADS", "1")
    out = tmp_path / "bench.csv"
    assert main(["bench", "--grid", "3:2", "--seeds", "1,2,3",
                 "--gap-tol", "1e-6", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0][:3] == ["n", "k", "samples"]
    assert len(rows) == 2
    assert rows[1][:3] == ["3", "2", "3"]


def test_bench_empty_grid(tmp_path):
    out = tmp_path / "empty.csv"
    assert main(["bench", "--grid", ":", "--seeds", "1", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert len(rows) == 1  # header only


def test_bench_parallel_pool(tmp_path, monkeypatch):
    monkeypatch.setenv("FISHER_FAIR_THREADS", "2")
    out = tmp_path / "par.csv"
    assert main(["bench", "--grid", "2,3:2", "--seeds", "1,2", "--out",
                 str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert len(rows) == 3  # header + two cells


def test_ellipsoid_command_with_log(tmp_path):
    inst_path = tmp_path / "inst.json"
    main(["sample-instance", "--n", "2", "--k", "2", "--seed", "4",
          "--out", str(inst_path)])
    log = tmp_path / "log.csv"
    out = tmp_path / "eres.json"
    assert main(["ellipsoid", "--instance", str(inst_path), "--epsilon", "1e-3",
                 "--out", str(out), "--log", str(log)]) == 0
    rows = list(csv.reader(open(log)))
    assert rows[0] == ["iteration", "feasible", "objective", "cut", "volume_proxy"]
    assert len(rows) > 10


def test_verify_flags_bad_result(tmp_path, ex5_file):
    out = tmp_path / "res.json"
    main(["solve", "--instance", ex5_file, "--out", str(out)])
    doc = json.loads(open(out).read())
    lo, hi = doc["intervals"][0][0]
    doc["intervals"][0] = [[lo, 0.5 * (lo + hi)]]  # starved buyer, no overlap
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["verify", "--instance", ex5_file, "--result", str(bad),
                 "--out", str(tmp_path / "rep.json")]) == 2
