"""``efficientsign`` command line.

Exit status is 0 on success, 2 for usage errors, the error class's
``exit_code`` for library errors and 10 when a gradient check fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import gradcheck
from .checkpoint import load_checkpoint, load_features, save_checkpoint, save_features
from .data import load_dataset, stratified_kfold, synth_generate
from .errors import ConfigurationError, EfficientSignError, IncompatibleCheckpointError
from .models import ModelSpec, build_model, count_params, extract_features
from .reporting import (CLASSICAL_METHODS, DEEP_METHODS, CVConfig, classical_report, dataset_matrix,
                        model_spec_for, resolve_dataset, run_cv, train_config_for)
from .training import evaluate, model_from_result, train_fold

GRADCHECK_FAILED = 10


def _common(p, method_default="efficientsign", methods=DEEP_METHODS + CLASSICAL_METHODS):
    p.add_argument("--data", help="dataset root (<root>/<CLASS>/<image>); synthetic glyphs when omitted")
    p.add_argument("--method", default=method_default, choices=methods)
    p.add_argument("--preset", default="b0", help="MBConv backbone preset: b0 or tiny")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", default="runs/efficientsign")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--synth-classes", type=int, default=26)
    p.add_argument("--synth-per-class", type=int, default=40)
    p.add_argument("--synth-size", type=int, default=64)
    p.add_argument("--quiet", action="store_true")


def _cv_config(args, **overrides):
    fields = dict(method=args.method, data=args.data, preset=args.preset, epochs=args.epochs, lr=args.lr,
                  batch=args.batch, folds=args.folds, seed=args.seed, out=args.out, image_size=args.image_size,
                  augment=not args.no_augment, synth_classes=args.synth_classes,
                  synth_per_class=args.synth_per_class, synth_size=args.synth_size, verbose=not args.quiet)
    fields.update(overrides)
    return CVConfig(**fields)


def build_parser():
    parser = argparse.ArgumentParser(prog="efficientsign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic glyph dataset")
    p.add_argument("--out", default="synth")
    p.add_argument("--classes", type=int, default=26)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("train", help="train on one fold's split and save the best checkpoint")
    _common(p, methods=DEEP_METHODS)
    p.add_argument("--fold", type=int, default=1, help="1-based fold held out for validation")

    p = sub.add_parser("cv", help="full stratified k-fold protocol")
    _common(p)
    p.add_argument("--extractor", help="EFSN checkpoint used as feature extractor for classical methods")
    p.add_argument("--parallel-folds", action="store_true")

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--out", help="write the result as JSON here")

    p = sub.add_parser("features", help="dataset -> feature matrix container")
    p.add_argument("--data", help="dataset root; synthetic glyphs when omitted")
    p.add_argument("--checkpoint", help="EFSN model checkpoint; random init of --preset when omitted")
    p.add_argument("--preset", default="b0")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", default="features.efsn")

    p = sub.add_parser("classical", help="SVM / KNN / LogReg cross-validation on deep features")
    _common(p, method_default="svm", methods=CLASSICAL_METHODS)
    p.add_argument("--features", help="feature container from `features`; overrides --data")
    p.add_argument("--extractor", help="EFSN checkpoint used to extract features from --data")

    p = sub.add_parser("params", help="parameter count and breakdown of a model spec")
    p.add_argument("--method", default="efficientsign", choices=DEEP_METHODS)
    p.add_argument("--preset", default="b0")
    p.add_argument("--classes", type=int, default=26)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and the tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=gradcheck.N_COORDS)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--out", help="write results as JSON here")
    return parser


def cmd_synth(args):
    ds = synth_generate(args.classes, args.per_class, args.size, args.seed, args.out)
    print(f"wrote {len(ds)} images in {ds.num_classes} classes to {args.out}")
    return 0


def cmd_train(args):
    cfg = _cv_config(args)
    dataset = resolve_dataset(cfg)
    plan = stratified_kfold(dataset.labels, cfg.folds, cfg.seed)
    fold = args.fold - 1
    if not 0 <= fold < plan.k:
        raise ConfigurationError(f"--fold must be in [1, {plan.k}], got {args.fold}")
    spec = model_spec_for(cfg, dataset.num_classes)
    tcfg = train_config_for(cfg)
    res = train_fold(spec, dataset, plan.train_indices(fold), plan.test_indices(fold), tcfg, fold=fold,
                     verbose=cfg.verbose)
    out = Path(cfg.out)
    path = save_checkpoint(model_from_result(spec, res), out / "model.efsn", train_config=tcfg.to_dict(),
                           meta={"fold": args.fold, "best_epoch": res.best_epoch})
    summary = {"fold": args.fold, "best_val_accuracy": res.best_val_accuracy, "best_epoch": res.best_epoch,
               "initial_train_loss": res.initial_train_loss, "history": [asdict(h) for h in res.history],
               "checkpoint": str(path)}
    (out / "train.json").write_text(json.dumps(summary, indent=2))
    print(f"best val accuracy {100 * res.best_val_accuracy:.2f}% at epoch {res.best_epoch}; saved {path}")
    return 0


def cmd_cv(args):
    run_cv(_cv_config(args, extractor=args.extractor, parallel_folds=args.parallel_folds))
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    if not hasattr(model, "spec"):
        raise IncompatibleCheckpointError(f"{args.checkpoint} holds a classifier, not a network")
    dataset = load_dataset(args.data)
    images = dataset_matrix(dataset, range(len(dataset)), args.image_size)
    acc, confusion = evaluate(model, images, dataset.labels, model.spec.num_classes)
    print(f"accuracy {100 * acc:.2f}% on {len(dataset)} images")
    if args.out:
        Path(args.out).write_text(json.dumps({"accuracy": acc, "confusion": confusion.tolist(),
                                              "checkpoint": args.checkpoint, "data": args.data}, indent=2))
    return 0


def cmd_features(args):
    dataset = load_dataset(args.data) if args.data else synth_generate(out_dir=Path(args.out).parent / "synth",
                                                                       seed=args.seed)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, expect_kind="efficientsign")
    else:
        model = build_model(ModelSpec.efficientsign(args.preset, num_classes=dataset.num_classes), args.seed)
    feats = extract_features(model, dataset_matrix(dataset, range(len(dataset)), args.image_size))
    save_features(args.out, feats, dataset.labels,
                  meta={"extractor": args.checkpoint or f"random-init {args.preset}", "spec": model.spec.to_dict(),
                        "class_names": dataset.class_names})
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {args.out}")
    return 0


def cmd_classical(args):
    cfg = _cv_config(args, extractor=args.extractor)
    if args.features:
        feats, labels = load_features(args.features)
        plan = stratified_kfold(labels, cfg.folds, cfg.seed)
        echo = {**asdict(cfg), "features": args.features, "std": "population (divide by k)"}
        report = classical_report(feats, labels, cfg.method, plan, echo, int(labels.max()) + 1)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "foldplan.json").write_text(json.dumps(plan.to_dict()))
        report.write(out)
        print(report.table_header(plan.k))
        print(report.table_row())
    else:
        run_cv(cfg)
    return 0


def cmd_params(args):
    spec = (ModelSpec.efficientsign(args.preset, num_classes=args.classes) if args.method == "efficientsign"
            else ModelSpec.baseline(args.method, num_classes=args.classes))
    total, breakdown = count_params(build_model(spec, 0))
    print(json.dumps({"method": args.method, "preset": args.preset if args.method == "efficientsign" else None,
                      "classes": args.classes, "total": total, "display": f"{total / 1e6:.1f}M",
                      "breakdown": breakdown}, indent=2))
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_suite(seed=args.seed, n_coords=args.coords)
    worst = max(r.max_rel_error for r in results)
    for r in results:
        status = "ok" if r.max_rel_error <= args.tolerance else "FAIL"
        print(f"{status:4s} {r.case:24s} {r.tensor:44s} {r.max_rel_error:.2e} ({r.n_coords} coords)")
    print(f"max relative error {worst:.3e} over {len(results)} tensors")
    if args.out:
        Path(args.out).write_text(json.dumps([asdict(r) for r in results], indent=2))
    return 0 if worst <= args.tolerance else GRADCHECK_FAILED


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "eval": cmd_eval, "features": cmd_features,
            "classical": cmd_classical, "params": cmd_params, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except EfficientSignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
