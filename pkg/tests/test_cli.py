import json
import subprocess
import sys

import pytest

from dualmpc.cli import main
from dualmpc.config import dump_benchmark
from dualmpc.simharness import SimulationLog


@pytest.fixture(scope="module")
def short_config(tmp_path_factory, short_bench):
    path = tmp_path_factory.mktemp("cfg") / "short.json"
    dump_benchmark(short_bench, path)
    return path


@pytest.fixture(scope="module")
def simulated(tmp_path_factory, short_config):
    out = tmp_path_factory.mktemp("sim")
    code = main(["simulate", "--config", str(short_config), "--runs", "2", "--seed", "4", "--out", str(out)])
    assert code == 0
    return out


def test_simulate_writes_logs_stats_and_panels(simulated, capsys):
    names = sorted(p.name for p in simulated.iterdir())
    assert names == [
        "altitude.svg",
        "cempc_seed4.csv",
        "cempc_seed5.csv",
        "dmpc_seed4.csv",
        "dmpc_seed5.csv",
        "input.svg",
        "mode_prob.svg",
        "param_mean.svg",
        "stats_cempc.csv",
        "stats_dmpc.csv",
    ]
    log = SimulationLog.from_csv(simulated / "dmpc_seed5.csv")
    assert log.kind == "dmpc" and log.seed == 5 and log.run_length == 15


def test_simulate_single_controller_without_plots(tmp_path, short_config, capsys):
    code = main(["simulate", "--config", str(short_config), "--controller", "cempc", "--runs", "1",
                 "--out", str(tmp_path), "--no-plots"])
    assert code == 0
    assert "cempc: 1 runs, 0 failed" in capsys.readouterr().out
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cempc_seed0.csv", "stats_cempc.csv"]


def test_plot_from_stats(tmp_path, simulated, capsys):
    assert main(["plot", "--stats", str(simulated), "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out.split()
    assert sorted(p.rsplit("/", 1)[-1] for p in printed if p.endswith(".svg")) == [
        "altitude.svg", "input.svg", "mode_prob.svg", "param_mean.svg"
    ]


def test_dump_tree_from_log_and_row(tmp_path, simulated, short_config, capsys):
    out = tmp_path / "tree.json"
    assert main(["dump-tree", "--config", str(short_config), "--state", str(simulated / "dmpc_seed4.csv"),
                 "--step", "6", "--seed", "4", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert [len(s) for s in doc["stages"]] == [1, 4]
    assert abs(doc["applied_input"][0]) <= 0.2
    row = tmp_path / "x.csv"
    row.write_text("0.0,0.0,0.0,1.5\n")
    assert main(["dump-tree", "--config", str(short_config), "--state", str(row)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["stages"][0][0]["state"] == [0.0, 0.0, 0.0, 1.5]


def test_errors_exit_with_code_two(tmp_path, short_config, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "missing key" in capsys.readouterr().err
    row = tmp_path / "x.csv"
    row.write_text("1.0,2.0\n")
    assert main(["dump-tree", "--config", str(short_config), "--state", str(row)]) == 2
    assert main(["plot", "--stats", str(tmp_path / "nothing")]) == 2
    assert "no runs" in capsys.readouterr().err


def test_validate_entry_point():
    res = subprocess.run([sys.executable, "-m", "dualmpc.cli", "validate"], capture_output=True, text=True)
    assert res.returncode == 0, res.stdout + res.stderr
    lines = res.stdout.strip().splitlines()
    assert len(lines) == 7 and all(line.startswith("PASS") for line in lines)
