"""Fold aggregation, reports and the cross-validation driver."""

import csv
import json

import numpy as np
import pytest

from efficientsign.checkpoint import load_checkpoint
from efficientsign.errors import ConfigurationError, InputError
from efficientsign.models import build_model, count_params
from efficientsign.reporting import CVConfig, MetricsReport, aggregate, format_params, model_spec_for, run_cv

PUBLISHED_FOLDS = [100.0, 99.88, 99.88, 100.0, 99.92]


class TestAggregate:
    def test_published_row(self):
        mean, std = aggregate(PUBLISHED_FOLDS)
        assert mean == pytest.approx(99.936, abs=1e-9)
        assert std == pytest.approx(0.054258639865, abs=1e-9)
        assert f"{mean:.2f}" == "99.94" and f"{std:.2f}" == "0.05"
        # the sample (k - 1) std would print 0.06
        assert f"{np.std(PUBLISHED_FOLDS, ddof=1):.2f}" == "0.06"

    def test_identical_and_two_point(self):
        assert aggregate([0.9] * 5) == (0.9, 0.0)
        assert aggregate([0, 1]) == (0.5, 0.5)

    def test_empty(self):
        with pytest.raises(InputError):
            aggregate([])


def test_format_params():
    assert format_params(4_247_113) == "4.2M"
    assert format_params(11_189_850) == "11.2M"
    assert format_params("N/A") == "N/A"
    assert format_params(4843) == "4843"


def _report(accs=(0.9, 1.0, 0.95)):
    conf = [np.eye(2, dtype=int) * 3 for _ in accs]
    return MetricsReport.build("efficientsign", 4_247_113, list(accs), conf, {"seed": 42}, [1.0] * len(accs))


def test_report_recomputable_and_printed_values_in_json(tmp_path):
    rep = _report([0.99, 0.9988, 0.9988, 1.0, 0.9992])
    out = rep.write(tmp_path)
    d = json.loads((out / "report.json").read_text())
    mean, std = aggregate(d["fold_accuracies"])
    assert abs(mean - d["mean"]) <= 1e-9 and abs(std - d["std"]) <= 1e-9
    for field in rep.table_row().split("\t"):
        assert field in json.dumps(d["display"], ensure_ascii=False)
    rows = list(csv.DictReader(open(out / "folds.csv")))
    assert [float(r["accuracy"]) for r in rows] == d["fold_accuracies"]
    assert d["confusion"] == [[15, 0], [0, 15]]


def test_unknown_method():
    with pytest.raises(ConfigurationError):
        CVConfig(method="forest")


@pytest.fixture(scope="module")
def tiny_cv(small_synth, tmp_path_factory):
    out = tmp_path_factory.mktemp("cv")
    cfg = CVConfig(method="efficientsign", preset="tiny", epochs=2, lr=2e-2, batch=16, image_size=32,
                   out=str(out), verbose=False)
    return run_cv(cfg, small_synth), out


def test_deep_cv_artifacts(tiny_cv):
    report, out = tiny_cv
    assert len(report.fold_accuracies) == 5
    assert report.mean == pytest.approx(np.mean(report.fold_accuracies), abs=1e-12)
    for i in range(1, 6):
        assert load_checkpoint(out / f"fold{i}.efsn").spec.num_classes == 8
    plan = json.loads((out / "foldplan.json").read_text())
    assert plan["seed"] == 42 and len(plan["folds"]) == 5
    d = json.loads((out / "report.json").read_text())
    assert d["config"]["std"].startswith("population")
    assert d["config"]["adam"] == {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0}
    assert len(d["fold_details"][0]["history"]) == 2


def test_classical_cv_deterministic(small_synth, tmp_path):
    reports = []
    for name in ("a", "b"):
        cfg = CVConfig(method="knn", preset="tiny", image_size=32, out=str(tmp_path / name), verbose=False)
        reports.append(run_cv(cfg, small_synth))
    a, b = (r.to_dict() for r in reports)
    for d in (a, b):
        d.pop("fold_seconds"), d["config"].pop("out")
    assert a == b
    assert a["params"] == "N/A" and a["fold_details"][0]["feature_dim"] == 64


def test_b0_params_field():
    cfg = CVConfig()
    assert cfg.epochs == 12 and cfg.lr == 1e-4 and cfg.batch == 32 and cfg.folds == 5 and cfg.seed == 42
    total, _ = count_params(build_model(model_spec_for(cfg, 26), 42))
    assert 4.0e6 <= total <= 4.4e6
