import csv
import json
import subprocess
import sys

import pytest

from milboundary import config
from milboundary.cli import main

TINY = {
    "corpus": {"num_samples": 3, "test_samples": 2},
    "scene": {"image_size": 32, "shape_size": [4, 8]},
    "net": {"channels": [4, 6, 8, 8], "proj_width": 3, "ag_hidden": 5},
    "train": {"steps": 3, "gamma": 4.0},
    "student": {"steps": 3},
    "msf": {"scales": [1.0], "use_flip": False},
    "eval": {"n_thresholds": 9},
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    assert main(["gen", "--out", str(root / "data")] + c) == 0
    assert main(["seeds", "--data", str(root / "data"), "--out", str(root / "seeds")] + c) == 0
    assert main(["train-wsbdn", "--data", str(root / "data"), "--seeds", str(root / "seeds"),
                 "--out", str(root / "wsbdn")] + c) == 0
    assert main(["pseudo", "--data", str(root / "data"),
                 "--checkpoint", str(root / "wsbdn" / "wsbdn.ckpt"), "--out", str(root / "pseudo")]
                + c) == 0
    return root, c


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_pipeline_outputs(tiny):
    root, _ = tiny
    assert len(json.loads((root / "seeds" / "seeds_manifest.json").read_text())["samples"]) == 3
    assert len(read_csv(root / "wsbdn" / "loss_history.csv")) == 3
    doc = json.loads((root / "pseudo" / "pseudo_manifest.json").read_text())
    assert doc["num_classes"] == 3 and len(doc["samples"]) == 3
    assert (root / "pseudo" / (doc["samples"][0]["soft"] + ".c0.pfm")).exists()
    echo = json.loads((root / "pseudo" / "config.json").read_text())
    assert echo["command"] == "pseudo" and echo["config"]["train"]["steps"] == 3


def test_student_and_eval(tiny):
    root, c = tiny
    assert main(["train-student", "--data", str(root / "data"), "--pseudo", str(root / "pseudo"),
                 "--out", str(root / "student")] + c) == 0
    assert main(["eval", "--gt", str(root / "data"),
                 "--checkpoint", str(root / "student" / "student.ckpt"),
                 "--out", str(root / "eval_student")] + c) == 0
    assert main(["eval", "--gt", str(root / "data"), "--pred", str(root / "pseudo"),
                 "--kind", "hard", "--out", str(root / "eval_hard")] + c) == 0
    rows = read_csv(root / "eval_hard" / "metrics.csv")
    assert [r["class"] for r in rows] == ["0", "1", "2", "agnostic", "mean"]


def test_eval_ground_truth_against_itself(tiny):
    root, c = tiny
    assert main(["eval", "--gt", str(root / "data"), "--pred", str(root / "data"),
                 "--out", str(root / "eval_gt")] + c) == 0
    for r in read_csv(root / "eval_gt" / "metrics.csv"):
        assert float(r["MF"]) == 1.0


def test_report(tiny, capsys):
    root, c = tiny
    main(["eval", "--gt", str(root / "data"), "--pred", str(root / "pseudo"),
          "--out", str(root / "runs" / "a")] + c)
    assert main(["report", "--runs", str(root / "runs"), "--out", str(root / "report")]) == 0
    assert len(read_csv(root / "report" / "summary.csv")) == 5


def test_segments_debug(tiny):
    root, c = tiny
    sample = json.loads((root / "seeds" / "seeds_manifest.json").read_text())["samples"][0]["id"]
    assert main(["segments-debug", "--data", str(root / "data"), "--seeds", str(root / "seeds"),
                 "--sample", sample, "--out", str(root / "segdbg")] + c) == 0
    assert list((root / "segdbg").glob("*.segments.csv"))


def test_gen_is_deterministic(tmp_path, tiny):
    root, c = tiny
    assert main(["gen", "--out", str(tmp_path / "again")] + c) == 0
    for f in (root / "data").glob("*.pgm"):
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()


def test_refuses_non_empty_output(tiny, capsys):
    root, c = tiny
    assert main(["gen", "--out", str(root / "data")] + c) == 1
    assert "not empty" in capsys.readouterr().err


def test_unknown_config_key_exits_3(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"stepz": 1}}))
    assert main(["config", "--config", str(p), "--out", str(tmp_path / "o")]) == 3
    assert "train.stepz" in capsys.readouterr().err


def test_missing_config_file_exits_3(tmp_path):
    assert main(["config", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 3


def test_usage_error_exits_2(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["eval", "--out", str(tmp_path)])
    assert err.value.code == 2


def test_missing_input_exits_1(tmp_path, capsys):
    assert main(["seeds", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "corpus manifest" in err


def test_config_subcommand_roundtrips(tmp_path):
    assert main(["config", "--seed", "7", "--out", str(tmp_path / "o")]) == 0
    cfg = config.load(tmp_path / "o" / "run_config.json")
    assert cfg.seed == 7


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "milboundary", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "train-wsbdn" in res.stdout
