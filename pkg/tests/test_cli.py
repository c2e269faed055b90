"""Command-line subcommands, artifacts and exit codes."""

import json
import shutil
import subprocess

import numpy as np
import pytest

from efficientsign.cli import GRADCHECK_FAILED, main
from efficientsign.checkpoint import load_features


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "data"), "--classes", "4", "--per-class", "10", "--size", "32"]) == 0
    return d


TINY = ["--preset", "tiny", "--epochs", "2", "--lr", "2e-2", "--batch", "8", "--image-size", "32", "--quiet"]


def test_params_json(capsys):
    assert main(["params"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["total"] == 4_247_113 and d["display"] == "4.2M"
    assert d["breakdown"] == {"backbone": 4_007_548, "se": 206_160, "spatial": 99, "head": 33_306}


def test_train_eval_features_classical(workdir, capsys):
    data, run = str(workdir / "data"), workdir / "run"
    assert main(["train", "--data", data, *TINY, "--out", str(run)]) == 0
    summary = json.loads((run / "train.json").read_text())
    assert len(summary["history"]) == 2

    assert main(["eval", str(run / "model.efsn"), "--data", data, "--image-size", "32",
                 "--out", str(run / "eval.json")]) == 0
    assert 0 <= json.loads((run / "eval.json").read_text())["accuracy"] <= 1

    feats = run / "f.efsn"
    assert main(["features", "--data", data, "--checkpoint", str(run / "model.efsn"), "--image-size", "32",
                 "--out", str(feats)]) == 0
    f, labels = load_features(feats)
    assert f.shape == (40, 64) and np.bincount(labels).tolist() == [10] * 4

    capsys.readouterr()
    assert main(["classical", "--features", str(feats), "--method", "svm", "--out", str(run / "svm")]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()[-2:]
    assert header.startswith("Method\tParams") and row.startswith("SVM(Deep)\tN/A")
    assert (run / "svm" / "report.json").exists() and (run / "svm" / "folds.csv").exists()


def test_cv_subcommand(workdir):
    out = workdir / "cv"
    assert main(["cv", "--data", str(workdir / "data"), *TINY, "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["fold1.efsn", "fold2.efsn", "fold3.efsn", "fold4.efsn",
                                                      "fold5.efsn", "foldplan.json", "folds.csv", "report.json"]


def test_exit_codes(workdir, capsys):
    assert main(["params", "--preset", "b9"]) == 3
    assert main(["eval", str(workdir / "none.efsn"), "--data", str(workdir / "data")]) == 4
    bad = workdir / "bad.efsn"
    bad.write_bytes(b"XXXX" + bytes(16))
    assert main(["eval", str(bad), "--data", str(workdir / "data")]) == 5
    assert main(["features", "--data", str(workdir / "data"), "--preset", "tiny", "--image-size", "32",
                 "--out", str(workdir / "ff.efsn")]) == 0
    # a feature matrix is not a network
    assert main(["eval", str(workdir / "ff.efsn"), "--data", str(workdir / "data")]) == 7
    raw = bytearray((workdir / "ff.efsn").read_bytes())
    raw[-10] ^= 0xFF
    (workdir / "ff.efsn").write_bytes(bytes(raw))
    assert main(["classical", "--features", str(workdir / "ff.efsn"), "--out", str(workdir / "x")]) == 6
    assert main(["train", "--data", str(workdir / "data"), *TINY, "--fold", "9"]) == 3
    with pytest.raises(SystemExit) as info:
        main(["cv", "--method", "forest"])
    assert info.value.code == 2
    assert "error:" in capsys.readouterr().err


def test_gradcheck_subcommand(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path / "g.json")]) == 0
    rows = json.loads((tmp_path / "g.json").read_text())
    assert max(r["max_rel_error"] for r in rows) <= 1e-3
    assert main(["gradcheck", "--tolerance", "1e-12"]) == GRADCHECK_FAILED


@pytest.mark.skipif(shutil.which("efficientsign") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["efficientsign", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth", "train", "cv", "eval", "features", "classical", "params", "gradcheck"):
        assert cmd in res.stdout
