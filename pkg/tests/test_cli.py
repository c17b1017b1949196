import json
import subprocess
import sys

import numpy as np
import pytest

from stageplan.cli import main
from stageplan.model import Job, Machine, WorkloadInstance, dump_instance
from stageplan.predictor import synthetic_table

from conftest import EXAMPLE1_PATH


def run_cli(*argv):
    return main([str(a) for a in argv])


def write_workload(path, jobs, machines, times=None):
    path.write_text(dump_instance(WorkloadInstance(jobs, machines, times)))
    return path


# -- train ------------------------------------------------------------------

@pytest.fixture
def linear_table(tmp_path):
    table = synthetic_table(np.random.default_rng(0), 100, lambda fv: 2.5 * fv["size_mb"])
    path = tmp_path / "table.csv"
    table.write_csv(path)
    return path


def test_train_metrics(tmp_path, linear_table):
    out = tmp_path / "t"
    assert run_cli("train", "--table", linear_table, "--kind", "linear", "--out", out) == 0
    doc = json.loads((out / "metrics.json").read_text())
    (group,) = doc["groups"]
    assert group["r2"] >= 0.999 and group["folds"] == 10
    assert (out / "metrics.csv").read_text().startswith("machine_type,stage,rows")
    assert (out / "model.json").is_file()


def test_train_malformed(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("size_mb,stage\n1,1\n")
    assert run_cli("train", "--table", bad, "--out", tmp_path / "o") != 0
    assert "schema error" in capsys.readouterr().err


def test_train_same_seed_same_bytes(tmp_path, linear_table):
    for d in ("a", "b"):
        assert run_cli("train", "--table", linear_table, "--hp", "n_trees=10", "--k", "0",
                       "--seed", 5, "--out", tmp_path / d) == 0
    assert (tmp_path / "a" / "model.json").read_bytes() == (tmp_path / "b" / "model.json").read_bytes()


def test_trained_model_drives_planning(tmp_path, linear_table):
    assert run_cli("train", "--table", linear_table, "--kind", "linear", "--k", "0",
                   "--out", tmp_path / "t") == 0
    jobs = [Job.with_stages(f"s{i}", 1, {"size_mb": 400.0 * (i + 1)}) for i in range(3)]
    wl = write_workload(tmp_path / "w.json", jobs, [Machine("g1", "gpu"), Machine("g2", "gpu")])
    assert run_cli("plan", "--workload", wl, "--model", tmp_path / "t" / "model.json", "--impute",
                   "--out", tmp_path / "p") == 0
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert manifest["time_source"] == "model"
    # 2.5 s per GB-ish: sizes 400/800/1200 MB -> 1000/2000/3000 ms on two machines
    assert manifest["predicted_makespan_ms"] == pytest.approx(3000, abs=10)


# -- plan -------------------------------------------------------------------

def test_plan_fjsp(tmp_path):
    assert run_cli("plan", "--workload", EXAMPLE1_PATH, "--out", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["predicted_makespan_ms"] == 8000
    assert m["solver"]["status"] == "optimal"
    assert sorted(m["plan_files"]) == ["m1", "m2", "m3"]
    assert all((tmp_path / f).is_file() for f in m["plan_files"].values())


def test_plan_greedy(tmp_path):
    assert run_cli("plan", "--workload", EXAMPLE1_PATH, "--strategy", "greedy", "--out", tmp_path) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["predicted_makespan_ms"] == 10000
    assert m["assignment"] == [["J2", "m1"], ["J3", "m2"], ["J1", "m3"]]


def test_plan_no_time_source(tmp_path, capsys):
    wl = write_workload(tmp_path / "w.json", [Job.with_stages("j", 1)], [Machine("m")])
    assert run_cli("plan", "--workload", wl, "--out", tmp_path / "o") == 2
    assert "no time source" in capsys.readouterr().err


# -- run --------------------------------------------------------------------

def test_run_simulated_zero_error(tmp_path):
    assert run_cli("plan", "--workload", EXAMPLE1_PATH, "--out", tmp_path / "p") == 0
    assert run_cli("run", "--manifest", tmp_path / "p" / "manifest.json", "--out", tmp_path / "r") == 0
    s = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert s["makespan_ms"] == 8000 and s["relative_error_pct"] == 0.0
    assert (tmp_path / "r" / "trace.csv").read_text().count("\n") == 1 + 9


def test_run_perturbed_reproducible(tmp_path):
    assert run_cli("plan", "--workload", EXAMPLE1_PATH, "--strategy", "greedy", "--out", tmp_path / "p") == 0
    outs = []
    for d in ("a", "b"):
        assert run_cli("run", "--manifest", tmp_path / "p" / "manifest.json", "--perturb", "uniform:0.9,1.1",
                       "--seed", 0, "--out", tmp_path / d) == 0
        outs.append([(tmp_path / d / f).read_bytes() for f in ("summary.json", "trace.csv", "summary.txt")])
    assert outs[0] == outs[1]


def test_run_missing_plan_file(tmp_path, capsys):
    assert run_cli("plan", "--workload", EXAMPLE1_PATH, "--out", tmp_path / "p") == 0
    (tmp_path / "p" / "run.m2.plan").unlink()
    assert run_cli("run", "--manifest", tmp_path / "p" / "manifest.json", "--out", tmp_path / "r") != 0
    assert "run.m2.plan" in capsys.readouterr().err


def test_run_real_backend(tmp_path):
    assert run_cli("plan", "--workload", EXAMPLE1_PATH, "--out", tmp_path / "p") == 0
    proc = subprocess.run([sys.executable, "-m", "stageplan", "run", "--manifest",
                           str(tmp_path / "p" / "manifest.json"), "--backend", "real",
                           "--sync-root", str(tmp_path / "sync"), "--template", "sleep 0.05",
                           "--wait-poll-ms", "10", "--wait-timeout-ms", "20000",
                           "--out", str(tmp_path / "r")], capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0, proc.stderr
    s = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert s["operations"] == 9 and not s["partial"]
    assert len(list((tmp_path / "sync" / "run").glob("*.complete"))) == 3


# -- dynamic ----------------------------------------------------------------

def test_dynamic_example1(tmp_path):
    assert run_cli("dynamic", "--workload", EXAMPLE1_PATH, "--poll", 0, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["makespan_ms"] >= 8000


def test_dynamic_empty(tmp_path):
    wl = write_workload(tmp_path / "w.json", [], [Machine("m1")])
    assert run_cli("dynamic", "--workload", wl, "--out", tmp_path / "o") == 0
    s = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert s["makespan_ms"] == 0 and s["operations"] == 0


def test_dynamic_identical_jobs(tmp_path):
    machines = [Machine(f"m{i}") for i in (1, 2, 3)]
    jobs = [Job.with_stages(f"j{i}", 2) for i in (1, 2, 3)]
    times = {(j.id, q, m.id): 1000 * q for j in jobs for q in (1, 2) for m in machines}
    from stageplan.model import TimeMatrix
    wl = write_workload(tmp_path / "w.json", jobs, machines, TimeMatrix(times))
    assert run_cli("dynamic", "--workload", wl, "--out", tmp_path / "o") == 0
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["makespan_ms"] == 3000


# -- compare ----------------------------------------------------------------

def test_compare_example1(tmp_path):
    assert run_cli("compare", "--workload", EXAMPLE1_PATH, "--poll", 0, "--out", tmp_path) == 0
    (row,) = json.loads((tmp_path / "comparison.json").read_text())["rows"]
    assert (row["fjsp_ms"], row["greedy_ms"], row["speedup_vs_greedy"]) == (8000, 10000, 1.25)


def test_compare_random_dominance(tmp_path):
    assert run_cli("compare", "--random", "4,3,2", "--trials", 20, "--seed", 1, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "comparison.json").read_text())
    assert len(doc["rows"]) == 20 and doc["aggregate"]["fjsp_le_greedy_when_optimal"]
    for r in doc["rows"]:
        if r["fjsp_status"] == "optimal":
            assert r["fjsp_ms"] <= r["greedy_ms"]


def test_compare_zero_trials(tmp_path):
    assert run_cli("compare", "--random", "2,2,1", "--trials", 0, "--out", tmp_path) == 0
    assert (tmp_path / "comparison.csv").read_text().count("\n") == 1


def test_compare_needs_one_source(tmp_path, capsys):
    assert run_cli("compare", "--out", tmp_path) == 2
    assert "exactly one" in capsys.readouterr().err
