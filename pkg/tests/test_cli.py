import csv
import json
import os
import re

import numpy as np
import pytest

from orchestra import cli, marl
from orchestra import trace as tr
from orchestra.errors import ConfigError
from conftest import config_path

WORKLOAD = {
    "n_machines": 3,
    "machine_capacity_distribution": {"kind": "constant", "value": 1.0},
    "task_arrival_rate": 2.0,
    "n_tasks": 10,
    "demand_distribution": {"kind": "uniform", "low": 0.1, "high": 0.4},
    "duration_distribution": {"kind": "exponential", "mean": 3.0},
    "n_tenants": 2,
    "tenant_skew": 1.0,
}
TRAIN = {"total_epochs": 2, "batch_size": 16, "hidden_sizes": [8], "lr_initial": 1e-3, "lr_floor": 1e-4,
         "seeds": [0], "eval_episodes": 2, "checkpoint_every": 1}


def write_config(tmp_path, name="run.json", **overrides):
    doc = {"seed": 0, "workload": WORKLOAD, "roles": {"compute": 1, "storage": 1, "scheduler": 1},
           "train": dict(TRAIN)}
    for k, v in overrides.items():
        if k == "train":
            doc["train"].update(v)
        else:
            doc[k] = v
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_trace_is_deterministic(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(WORKLOAD))
    assert cli.main(["gen-trace", "--config", str(spec), "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["gen-trace", "--config", str(spec), "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    for name in ("machine_events.csv", "task_events.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    t = tr.read_trace(str(tmp_path / "a"))
    assert len(t.machine_ids()) == 3


def test_gen_trace_accepts_run_config(tmp_path):
    assert cli.main(["gen-trace", "--config", config_path("toy.json"), "--out", str(tmp_path)]) == 0
    assert len(tr.read_trace(str(tmp_path)).machine_ids()) == 4


def test_missing_spec_file_is_an_error(tmp_path, capsys):
    assert cli.main(["gen-trace", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_unknown_config_keys_rejected(tmp_path, capsys):
    path = write_config(tmp_path, bogus=1)
    assert cli.main(["train", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err
    bad_train = write_config(tmp_path, "t.json", train={"learning_rate": 1})
    assert cli.main(["train", "--config", bad_train, "--out", str(tmp_path / "o")]) == 2


def test_config_needs_exactly_one_source():
    with pytest.raises(ConfigError):
        cli.RunConfig.from_dict({"seed": 0})
    with pytest.raises(ConfigError):
        cli.RunConfig.from_dict({"workload": WORKLOAD, "trace": "x"})


def test_shipped_configs_parse():
    for name in ("toy.json", "scale.json"):
        cfg = cli.RunConfig.from_json(config_path(name))
        assert cfg.workload is not None and cfg.train.total_epochs > 0


def test_train_one_epoch_and_rerun_identical(tmp_path):
    path = write_config(tmp_path, train={"total_epochs": 1})
    for out in ("r1", "r2"):
        assert cli.main(["train", "--config", path, "--out", str(tmp_path / out)]) == 0
    rows = read_csv(tmp_path / "r1" / marl.CURVE_FILE)
    assert len(rows) == 1 and rows[0]["epoch"] == "0"
    for name in (marl.CURVE_FILE, marl.CHECKPOINT_FILE):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    a, b = read_csv(tmp_path / "r1" / cli.REPORT_FILE)[0], read_csv(tmp_path / "r2" / cli.REPORT_FILE)[0]
    a.pop("policy_update_time_s"), b.pop("policy_update_time_s")   # wall-clock
    assert a == b


def test_eval_needs_checkpoint_and_reproduces_report(tmp_path):
    path = write_config(tmp_path)
    out = str(tmp_path / "run")
    assert cli.main(["eval", "--config", path, "--out", out]) == 2
    assert cli.main(["train", "--config", path, "--out", out]) == 0
    assert cli.main(["eval", "--config", path, "--out", out]) == 0
    a, b = read_csv(os.path.join(out, cli.REPORT_FILE)), read_csv(os.path.join(out, cli.EVAL_FILE))
    assert a[0]["resource_utilization_pct"] == b[0]["resource_utilization_pct"]


def test_train_from_recorded_trace(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(WORKLOAD))
    cli.main(["gen-trace", "--config", str(spec), "--out", str(tmp_path / "trace")])
    doc = {"trace": "trace", "roles": {"compute": 1, "storage": 1, "scheduler": 1}, "train": TRAIN}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 0
    assert len(read_csv(tmp_path / "o" / marl.CURVE_FILE)) == 2


def test_ablate_rows_and_full_matches_standalone(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", path, "--out", str(out)]) == 0
    rows = read_csv(out / cli.ABLATION_FILE)
    assert [r["variant"] for r in rows] == ["BASELINE", "+HRAC", "+LGRS", "FULL"]
    assert list(rows[0]) == list(cli.ABLATION_COLUMNS)
    assert cli.main(["train", "--config", path, "--out", str(tmp_path / "solo")]) == 0
    solo = read_csv(tmp_path / "solo" / cli.REPORT_FILE)[0]
    assert rows[3]["resource_utilization_pct"] == solo["resource_utilization_pct"]
    notes = (out / cli.ABLATION_NOTES).read_text()
    assert cli.REFERENCE_FOOTER in notes


@pytest.mark.parametrize("axis,values", [("info_loss", "0,0.5"), ("tenants", "1,2,3"), ("agents", "3,4")])
def test_sweep_row_count(tmp_path, axis, values, capsys):
    path = write_config(tmp_path, train={"total_epochs": 1})
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", path, "--axis", axis, "--values", values, "--out", str(out)]) == 0
    rows = read_csv(out / cli.SWEEP_FILE)
    assert len(rows) == len(values.split(","))
    assert all(r["axis"] == axis for r in rows)
    trends = read_csv(out / cli.TREND_FILE)
    assert sum(int(r["headline"]) for r in trends) == 1
    assert f"spearman({axis}" in capsys.readouterr().out


@pytest.mark.parametrize("values", ["0.5,0.2", "0.1", "0.2,0.2"])
def test_sweep_rejects_bad_values(tmp_path, values):
    path = write_config(tmp_path)
    assert cli.main(["sweep", "--config", path, "--axis", "info_loss", "--values", values,
                     "--out", str(tmp_path / "o")]) == 2


def test_scale_roles():
    assert cli.scale_roles({"compute": 2, "storage": 1, "scheduler": 1}, 8, 16) == \
        {"compute": 4, "storage": 2, "scheduler": 2}
    assert cli.scale_roles({"compute": 2, "storage": 1, "scheduler": 1}, 24, 4) == \
        {"compute": 4, "storage": 4, "scheduler": 16}
    with pytest.raises(ConfigError):
        cli.scale_roles({"compute": 1, "storage": 1, "scheduler": 1}, 2, 4)


def test_report_on_empty_directory_fails(tmp_path, capsys):
    assert cli.main(["report", "--out", str(tmp_path)]) == 2
    assert cli.main(["report", "--out", str(tmp_path / "missing")]) == 2


def test_report_svg_and_csv(tmp_path):
    path = write_config(tmp_path, train={"total_epochs": 3})
    out = tmp_path / "run"
    cli.main(["train", "--config", path, "--out", str(out)])
    assert cli.main(["report", "--out", str(out), "--format", "svg"]) == 0
    svg = (out / "curve_mean_utilization.svg").read_text()
    first = svg
    cli.main(["report", "--out", str(out), "--format", "svg"])
    assert (out / "curve_mean_utilization.svg").read_text() == first
    assert cli.main(["report", "--out", str(out)]) == 0
    assert (out / "consolidated.csv").exists()


def test_svg_polyline_has_one_vertex_per_point():
    xs = list(range(7))
    ys = [0.1, 0.5, 0.2, 0.9, 0.9, 0.3, 0.0]
    svg = cli.svg_line_chart(xs, ys, "t", "x", "y")
    pts = re.search(r'points="([^"]*)"', svg).group(1).split()
    assert len(pts) == 7
    coords = np.array([[float(v) for v in p.split(",")] for p in pts])
    assert np.all(np.diff(coords[:, 0]) > 0)
    assert coords[3, 1] == coords[4, 1] < coords[0, 1]     # higher values sit higher on screen
    assert svg == cli.svg_line_chart(xs, ys, "t", "x", "y")
    assert "<&>" not in cli.svg_line_chart([0, 1], [1, 1], "<&>", "x", "y")


def test_spearman():
    assert cli.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert cli.spearman([1, 2, 3], [1, 1, 1]) != cli.spearman([1, 2, 3], [1, 1, 1])   # nan
    assert cli.spearman([1, 2, 3, 4], [1, float("nan"), 2, 3]) == pytest.approx(1.0)
