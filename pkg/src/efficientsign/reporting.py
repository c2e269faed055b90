"""Cross-validation orchestration and per-method metrics reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .classical import make_classifier
from .data import AugmentConfig, load_dataset, preprocess, stratified_kfold, synth_generate
from .errors import ConfigurationError, EfficientSignError, InputError
from .models import ModelSpec, build_model, count_params, extract_features
from .training import TrainConfig, model_from_result, train_fold

logger = logging.getLogger(__name__)

DEEP_METHODS = ("efficientsign", "resnet18", "mobilenetv2")
CLASSICAL_METHODS = ("svm", "knn", "logreg")
METHOD_LABELS = {"efficientsign": "EfficientSign", "resnet18": "ResNet18", "mobilenetv2": "MobileNetV2",
                 "svm": "SVM(Deep)", "knn": "KNN(Deep)", "logreg": "LR(Deep)"}


def aggregate(values):
    """Arithmetic mean and population (divide-by-k) standard deviation."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise InputError("aggregate needs at least one fold value")
    mean = float(v.mean())
    return mean, float(math.sqrt(float(((v - mean) ** 2).mean())))


def format_params(n):
    if isinstance(n, str):
        return n
    # desk-scale presets are too small for the millions display
    return f"{n / 1e6:.1f}M" if n >= 100_000 else str(int(n))


@dataclass
class MetricsReport:
    method: str
    params: int | str
    fold_accuracies: list
    mean: float
    std: float
    confusion: list
    config: dict
    fold_seconds: list
    fold_details: list = field(default_factory=list)

    @classmethod
    def build(cls, method, params, fold_accuracies, confusions, config, fold_seconds, fold_details=()):
        mean, std = aggregate(fold_accuracies)
        total = np.sum(np.asarray(confusions), axis=0) if len(confusions) else np.zeros((0, 0))
        return cls(method=method, params=params, fold_accuracies=[float(a) for a in fold_accuracies],
                   mean=mean, std=std, confusion=total.astype(int).tolist(), config=config,
                   fold_seconds=[float(s) for s in fold_seconds], fold_details=list(fold_details))

    def to_dict(self):
        d = asdict(self)
        d["display"] = self.display_fields()
        return d

    def display_fields(self):
        """The exact strings printed in the table row."""
        return {
            "method": METHOD_LABELS.get(self.method, self.method),
            "params": format_params(self.params),
            "mean_pct": f"{100 * self.mean:.2f}",
            "std_pct": f"± {100 * self.std:.2f}",
            "folds_pct": [f"{100 * a:.2f}" for a in self.fold_accuracies],
        }

    def table_row(self):
        d = self.display_fields()
        return "\t".join([d["method"], d["params"], d["mean_pct"], d["std_pct"], *d["folds_pct"]])

    @staticmethod
    def table_header(k=5):
        return "\t".join(["Method", "Params", "Mean %", "Std %", *[f"F{i + 1}" for i in range(k)]])

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(out / "folds.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "fold", "accuracy", "seconds"])
            for i, (a, s) in enumerate(zip(self.fold_accuracies, self.fold_seconds)):
                w.writerow([self.method, i + 1, repr(a), repr(s)])
        return out


@dataclass(frozen=True)
class CVConfig:
    method: str = "efficientsign"
    data: str | None = None
    preset: str = "b0"
    epochs: int = 12
    lr: float = 1e-4
    batch: int = 32
    folds: int = 5
    seed: int = 42
    out: str = "runs/cv"
    image_size: int = 224
    augment: bool = True
    num_classes: int | None = None
    extractor: str | None = None
    synth_classes: int = 26
    synth_per_class: int = 40
    synth_size: int = 64
    parallel_folds: bool = False
    verbose: bool = True

    def __post_init__(self):
        if self.method not in DEEP_METHODS + CLASSICAL_METHODS:
            raise ConfigurationError(
                f"unknown method {self.method!r}; expected one of {list(DEEP_METHODS + CLASSICAL_METHODS)}")


def resolve_dataset(cfg: CVConfig):
    if cfg.data:
        return load_dataset(cfg.data)
    return synth_generate(cfg.synth_classes, cfg.synth_per_class, cfg.synth_size, cfg.seed,
                          Path(cfg.out) / "synth")


def model_spec_for(cfg: CVConfig, num_classes):
    if cfg.method == "efficientsign":
        return ModelSpec.efficientsign(cfg.preset, num_classes=num_classes)
    return ModelSpec.baseline(cfg.method, num_classes=num_classes)


def train_config_for(cfg: CVConfig):
    aug = AugmentConfig(target_size=cfg.image_size) if cfg.augment else AugmentConfig.no_augmentation(cfg.image_size)
    return TrainConfig(epochs=cfg.epochs, base_lr=cfg.lr, batch_size=cfg.batch, seed=cfg.seed, augment=aug)


def _run_deep_fold(args):
    spec, dataset, plan, tcfg, fold, out, verbose = args
    try:
        res = train_fold(spec, dataset, plan.train_indices(fold), plan.test_indices(fold), tcfg,
                         fold=fold, verbose=verbose)
    except EfficientSignError as exc:
        raise type(exc)(f"fold {fold + 1}: {exc}") from exc
    save_checkpoint(model_from_result(spec, res), Path(out) / f"fold{fold + 1}.efsn",
                    train_config=tcfg.to_dict(), meta={"fold": fold + 1, "best_epoch": res.best_epoch})
    return res


def dataset_matrix(dataset, indices, size):
    """Eval-mode preprocessed images stacked as N x 3 x S x S."""
    aug = AugmentConfig.no_augmentation(size)
    return np.stack([preprocess(dataset.image(int(i)), "eval", aug) for i in indices])


def classical_cv(features, labels, plan, which, k=None):
    """Fit ``which`` on each fold's train rows and score its test rows."""
    labels = np.asarray(labels)
    k = k or int(labels.max()) + 1
    accs, confs, secs = [], [], []
    for fold in range(plan.k):
        start = time.perf_counter()
        tr, te = plan.train_indices(fold), plan.test_indices(fold)
        clf = make_classifier(which).fit(features[tr], labels[tr])
        pred = clf.predict(features[te])
        conf = np.zeros((k, k), dtype=np.int64)
        np.add.at(conf, (labels[te], pred), 1)
        accs.append(float(np.mean(pred == labels[te])))
        confs.append(conf)
        secs.append(time.perf_counter() - start)
    return accs, confs, secs


def classical_report(features, labels, method, plan, config_echo, k=None):
    """Fit ``method`` per fold of ``plan`` on a feature matrix and build its report."""
    features = np.asarray(features)
    if len(features) != len(labels):
        raise InputError(f"{len(features)} feature rows but {len(labels)} labels")
    accs, confs, secs = classical_cv(features, labels, plan, method, k)
    details = [{"fold": i + 1, "feature_dim": int(features.shape[1])} for i in range(plan.k)]
    return MetricsReport.build(method, "N/A", accs, confs, config_echo, secs, details)


def run_cv(cfg: CVConfig, dataset=None) -> MetricsReport:
    """Full protocol: fold plan, per-fold training or fitting, report + artifacts in ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else resolve_dataset(cfg)
    labels = dataset.labels
    k_classes = cfg.num_classes or dataset.num_classes
    plan = stratified_kfold(labels, cfg.folds, cfg.seed)
    (out / "foldplan.json").write_text(json.dumps(plan.to_dict()))
    config_echo = {**asdict(cfg), "std": "population (divide by k)", "dataset_size": len(dataset),
                   "num_classes": k_classes}

    if cfg.method in DEEP_METHODS:
        spec = model_spec_for(cfg, k_classes)
        tcfg = train_config_for(cfg)
        config_echo.update(spec=spec.to_dict(), train_config=tcfg.to_dict(),
                           adam={"beta1": tcfg.beta1, "beta2": tcfg.beta2, "eps": tcfg.eps, "weight_decay": 0.0})
        params, _ = count_params(build_model(spec, cfg.seed))
        jobs = [(spec, dataset, plan, tcfg, f, out, cfg.verbose and not cfg.parallel_folds)
                for f in range(plan.k)]
        if cfg.parallel_folds:
            with ProcessPoolExecutor() as pool:
                results = list(pool.map(_run_deep_fold, jobs))
        else:
            results = [_run_deep_fold(j) for j in jobs]
        details = [{"fold": r.fold + 1, "best_epoch": r.best_epoch, "initial_train_loss": r.initial_train_loss,
                    "history": [asdict(h) for h in r.history]} for r in results]
        report = MetricsReport.build(cfg.method, params, [r.best_val_accuracy for r in results],
                                     [r.confusion for r in results], config_echo,
                                     [r.seconds for r in results], details)
    else:
        extractor, source = load_extractor(cfg, k_classes)
        config_echo.update(extractor=source, extractor_spec=extractor.spec.to_dict(),
                           classifier=make_classifier(cfg.method).get_params())
        feats = extract_features(extractor, dataset_matrix(dataset, range(len(dataset)), cfg.image_size))
        report = classical_report(feats, labels, cfg.method, plan, config_echo, k_classes)
    report.write(out)
    print(MetricsReport.table_header(plan.k))
    print(report.table_row(), flush=True)
    return report


def load_extractor(cfg: CVConfig, num_classes):
    from .checkpoint import load_checkpoint

    if cfg.extractor:
        return load_checkpoint(cfg.extractor, expect_kind="efficientsign"), cfg.extractor
    spec = ModelSpec.efficientsign(cfg.preset, num_classes=num_classes)
    return build_model(spec, cfg.seed), f"random-init {cfg.preset} (seed {cfg.seed})"
