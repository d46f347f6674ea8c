import csv
import json
import subprocess
import sys

import pytest

from grouprobe.cli import main
from grouprobe.influence import CSV_COLUMNS

from conftest import DATA

T6_CONFIG = {
    "dataset": {"path": str(DATA / "t6.csv")},
    "lambda": 0.5,
    "eval": {"test_point_selection": {"random_k": 1, "highest_loss_k": 1, "seed": 0}},
    "groups": {"methods": ["shared_feature", "random", "random_within_class"],
               "size_grid": [0.2, 0.34, 0.5], "seed": 0},
    "sweep": {"lambda_over_n_grid": [0.05, 0.5]},
}
OUTPUTS = ("model.json", "groups.jsonl", "effects.csv", "diagnostics.json", "summary.json")


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(T6_CONFIG))
    return p


def test_effects_outputs(tmp_path, config):
    out = tmp_path / "a"
    assert main(["effects", "--config", str(config), "--out", str(out)]) == 0
    for name in OUTPUTS:
        assert (out / name).is_file()
    with (out / "effects.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n"] == 6 and summary["failed_subsets"] == []
    # two test points for prediction and loss, plus self loss
    assert len(summary["eval"]) == 5
    assert len(rows) - 1 == summary["n_subsets"] * 5
    again = tmp_path / "b"
    assert main(["effects", "--config", str(config), "--out", str(again), "--jobs", "2"]) == 0
    for name in OUTPUTS:
        assert (out / name).read_bytes() == (again / name).read_bytes()


def test_report_and_train_and_groups(tmp_path, config, capsys):
    out = tmp_path / "r"
    main(["effects", "--config", str(config), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert {r["eval_kind"] for r in rep["eval"]} >= {"self_loss"}
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "model.json").read_bytes() == (out / "model.json").read_bytes()
    assert main(["groups", "--config", str(config), "--out", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "groups.jsonl").read_bytes() == (out / "groups.jsonl").read_bytes()


def test_sweep(tmp_path, config):
    assert main(["sweep", "--config", str(config), "--out", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "sweep.json").read_text())["rows"]
    assert [r["lambda_over_n"] for r in rows] == [0.05, 0.5]


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**T6_CONFIG, "lambda_over_n": 0.1}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text(json.dumps({**T6_CONFIG, "colour": "red"}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    good = tmp_path / "good.json"
    good.write_text(json.dumps(T6_CONFIG))
    assert main(["train", "--config", str(good), "--out", str(tmp_path), "--jobs", "0"]) == 2
    assert "error" in capsys.readouterr().err


def test_data_errors(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**T6_CONFIG, "dataset": {"path": "missing.csv"}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    broken = tmp_path / "broken.csv"
    broken.write_text("x1,label\n1.0,1\nfoo,0\n")
    cfg.write_text(json.dumps({**T6_CONFIG, "dataset": {"path": "broken.csv"}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 3


@pytest.mark.parametrize("kind", ["mog", "ortho"])
def test_counterexample_command(tmp_path, kind):
    assert main(["counterexample", kind, "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "assertions.json").read_text())
    assert res["checks"] and all(res["checks"].values())
    for name in ("dataset.csv", "groups.jsonl", "pairs.csv"):
        assert (tmp_path / name).is_file()


def test_module_entry_point_rejects_unknown_kind(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "grouprobe", "counterexample", "spiral",
                           "--out", str(tmp_path)], capture_output=True)
    assert proc.returncode == 2
