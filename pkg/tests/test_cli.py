import json
import subprocess
import sys

import pytest

from masklab import config
from masklab.cli import main
from masklab.errors import UsageError
from masklab.worlds import load_dataset

WORLD = ["--width", "24", "--height", "24", "--beacon-size", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["collect", "--n", "40", "--seed", "3", "--out", str(data), *WORLD]) == 0
    ck = root / "ck"
    assert main(["train", "--dataset", str(data), "--epochs", "1", "--seeds", "1,2", "--lr", "1e-3",
                 "--out", str(ck)]) == 0
    return root, data, ck


def test_collect_writes_dataset_and_config(workspace):
    _, data, _ = workspace
    ds = load_dataset(data)
    assert len(ds) == 40 and ds.states.shape[2:] == (24, 24)
    text = (data / "collect.config.ini").read_text()
    assert "beacon_size = 4" in text and "seed = 3" in text


def test_collect_refuses_overwrite_without_force(workspace, capsys):
    _, data, _ = workspace
    assert main(["collect", "--n", "40", "--seed", "3", "--out", str(data), *WORLD]) == 3
    assert "--force" in capsys.readouterr().err
    assert main(["collect", "--n", "40", "--seed", "3", "--out", str(data), *WORLD, "--force"]) == 0


def test_train_emits_one_checkpoint_per_seed(workspace):
    _, _, ck = workspace
    for seed in (1, 2):
        assert (ck / f"seed_{seed}" / "checkpoint.vmc").exists()
        assert (ck / f"seed_{seed}" / "train_log.csv").read_text().startswith("epoch,split,loss_total")
    assert "seeds = 1,2" in (ck / "train.config.ini").read_text()


def test_evaluate_report(workspace):
    root, data, ck = workspace
    out = root / "eval"
    assert main(["evaluate", "--dataset", str(data), "--checkpoint", str(ck), "--out", str(out),
                 "--fractions", "0.5,1.0", "--overlays", "1"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["label"] for r in report["runs"]] == ["seed_1", "seed_2"]
    assert report["aggregate"]["accuracy"]["n"] == 2
    assert set(report["runs"][0]["auc"]["insertion"]) == {"0.5", "1"}
    assert (out / "overlays" / "seed_1").is_dir()


def test_evaluate_missing_checkpoint(workspace, capsys):
    root, data, _ = workspace
    assert main(["evaluate", "--dataset", str(data), "--checkpoint", str(root / "nope"),
                 "--out", str(root / "e2")]) == 5


def test_explain_and_counterfactual(workspace):
    root, data, ck = workspace
    out = root / "explain"
    args = ["--dataset", str(data), "--checkpoint", str(ck / "seed_1" / "checkpoint.vmc"), "--index", "7"]
    assert main(["explain", *args, "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.ppm")) == [f"7_action{k}.ppm" for k in range(5)]
    info = json.loads((out / "7_explain.json").read_text())
    assert len(info["probabilities"]) == 5
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(["explain", *args, "--out", str(out)]) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first
    cf = root / "cf"
    assert main(["counterfactual", *args, "--regions", "2", "--out", str(cf)]) == 0
    rows = json.loads((cf / "7_counterfactual.json").read_text())
    assert rows["index"] == 7 and len(rows["regions"]) <= 2


def test_index_out_of_range(workspace):
    root, data, ck = workspace
    assert main(["explain", "--dataset", str(data), "--checkpoint", str(ck / "seed_1" / "checkpoint.vmc"),
                 "--index", "40", "--out", str(root / "x")]) == 2


def test_baseline_command(workspace):
    root, data, _ = workspace
    out = root / "base"
    assert main(["baseline", "--dataset", str(data), "--index", "2", "--method", "occlusion", "--patch", "3",
                 "--out", str(out)]) == 0
    assert (out / "2_occlusion.vmt").exists() and (out / "2_occlusion.ppm").exists()
    side = json.loads((out / "2_occlusion.json").read_text())
    assert side["method"] == "occlusion" and side["params"]["patch"] == 3
    assert main(["baseline", "--dataset", str(data), "--method", "bogus", "--out", str(out)]) == 2


def test_bad_dataset_is_io_error(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3


def test_config_precedence(tmp_path, monkeypatch):
    ini = tmp_path / "c.ini"
    ini.write_text("[common]\nthreads = 3\n[train]\nepochs = 7\nbatch_size = 4\nseeds = 1,2\n")
    cfg = config.resolve("train", {"epochs": 9}, ini)
    assert cfg["epochs"] == 9 and cfg["batch_size"] == 4 and cfg["threads"] == 3 and cfg["seeds"] == [1, 2]
    assert cfg["lambda_avg"] == 0.3 and cfg["learning_rate"] == 1e-5
    monkeypatch.setenv("MASKLAB_OUT", str(tmp_path / "root"))
    assert config.resolve("train", {})["out"] == str(tmp_path / "root" / "train")
    monkeypatch.delenv("MASKLAB_OUT")
    assert config.resolve("explain", {})["out"] == "runs/explain"


def test_config_errors(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nwarp = 1\n")
    with pytest.raises(UsageError):
        config.resolve("train", {}, ini)
    ini.write_text("[train]\nepochs = many\n")
    with pytest.raises(UsageError):
        config.resolve("train", {}, ini)
    assert main(["train", "--config", str(ini), "--dataset", "x"]) == 2


def test_defaults_match_training_table():
    d = config.DEFAULTS["train"]
    assert (d["batch_size"], d["learning_rate"], d["seeds"]) == (16, 1e-5, [42, 13, 62])
    assert (d["lambda_e"], d["lambda_avg"], d["lambda_smooth"], d["lambda_l2"]) == (1.0, 0.3, 1.0, 0.01)
    assert config.DEFAULTS["evaluate"]["fractions"] == [0.25, 0.5, 1.0]


def test_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "masklab.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("collect", "train", "evaluate", "explain", "counterfactual", "baseline"):
        assert name in out.stdout
    bad = subprocess.run([sys.executable, "-m", "masklab.cli", "train", "--epochs", "x"], capture_output=True)
    assert bad.returncode == 2
