"""Adam, cosine annealing, the per-fold fine-tuning loop and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .data import AugmentConfig, image_rng, preprocess
from .errors import ConfigurationError, InputError, TrainingError
from .models import ModelSpec, build_model, load_arrays, state_arrays
from .tensor import no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    base_lr: float = 1e-4
    batch_size: int = 32
    lr_min: float = 0.0
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.base_lr <= 0 or self.lr_min > self.base_lr or self.lr_min < 0:
            raise ConfigurationError(f"need 0 <= lr_min <= base_lr and base_lr > 0, got {self.lr_min}, {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


def cosine_lr(epoch, cfg: TrainConfig):
    """lr_min + (base - lr_min)(1 + cos(pi t / (T - 1))) / 2, stepped per epoch."""
    t, big_t = epoch, cfg.epochs
    if big_t < 2:
        return cfg.base_lr
    if not 0 <= t < big_t:
        raise ConfigurationError(f"epoch {t} outside [0, {big_t})")
    return cfg.lr_min + 0.5 * (cfg.base_lr - cfg.lr_min) * (1 + math.cos(math.pi * t / (big_t - 1)))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update; returns new name -> array mapping and the state.

    ``params`` and ``grads`` map parameter names to arrays. Inputs are not
    modified; ``state`` moments and step counter advance in place.
    """
    if lr < 0:
        raise ConfigurationError(f"learning rate must be nonnegative, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return out, state


def evaluate(model, images, labels, num_classes=None, batch_size=64):
    """Eval-mode accuracy and K x K confusion counts (rows = true class)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise InputError("evaluate needs at least one item")
    k = num_classes or model.spec.num_classes
    preds = predict_classes(model, images, batch_size)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return float(np.mean(preds == labels)), confusion


def predict_logits(model, images, batch_size=64):
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(np.asarray(images[i:i + batch_size], dtype=model.dtype)).data)
    model.train(was_training)
    return np.concatenate(out, axis=0)


def predict_classes(model, images, batch_size=64):
    # np.argmax returns the lowest index on ties
    return predict_logits(model, images, batch_size).argmax(axis=1)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: float


@dataclass
class FoldResult:
    fold: int
    best_val_accuracy: float
    best_epoch: int
    history: list
    initial_train_loss: float
    confusion: np.ndarray
    best_state: dict = field(repr=False)
    seconds: float = 0.0

    @property
    def final_train_loss(self):
        return self.history[-1].train_loss


def train_fold(spec: ModelSpec, dataset, train_idx, val_idx, cfg: TrainConfig, fold=0,
               evaluator=None, verbose=False, init_arrays=None):
    """Fine-tune a fresh model on ``train_idx`` and keep the best epoch by val accuracy.

    ``evaluator(model, epoch) -> accuracy`` replaces the built-in validation
    pass when given. ``init_arrays`` loads starting weights (e.g. an imported
    pretrained backbone) after construction.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise InputError("train_fold needs nonempty train and validation sets")
    start = time.perf_counter()
    labels = dataset.labels
    aug = cfg.augment
    model = build_model(spec, cfg.seed)
    if init_arrays:
        load_arrays(model, init_arrays)
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    adam = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    batch = cfg.batch_size
    if batch > len(train_idx):
        logger.warning("batch size %d exceeds %d training items; using one full batch", batch, len(train_idx))
        batch = len(train_idx)

    val_images = None
    if evaluator is None:
        val_images = np.stack([preprocess(dataset.image(i), "eval", aug) for i in val_idx])

    history = []
    best = (-1.0, 0, None)
    initial_loss = None
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = np.random.default_rng([cfg.seed, fold, epoch]).permutation(train_idx)
        drop_rng = np.random.default_rng([cfg.seed, fold, epoch, 1])
        model.train()
        losses = []
        for b0 in range(0, len(order), batch):
            idx = order[b0:b0 + batch]
            x = np.stack([preprocess(dataset.image(i), "train", aug, image_rng(cfg.seed, int(i), epoch))
                          for i in idx])
            model.zero_grad()
            loss = F.softmax_cross_entropy(model(x, drop_rng), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss in fold {fold} epoch {epoch + 1}")
            loss.backward()
            if initial_loss is None:
                initial_loss = float(loss.data)
            new, adam = adam_step({n: params[n].data for n in names},
                                  {n: params[n].grad for n in names if params[n].grad is not None}, adam, lr)
            for n in names:
                params[n].data = new[n]
            losses.append(float(loss.data) * len(idx))
        train_loss = sum(losses) / len(order)
        model.eval()
        if evaluator is not None:
            acc = float(evaluator(model, epoch))
        else:
            acc, _ = evaluate(model, val_images, labels[val_idx], spec.num_classes)
        history.append(EpochRecord(epoch + 1, lr, train_loss, acc))
        if verbose:
            print(f"fold {fold} epoch {epoch + 1:2d}/{cfg.epochs} lr {lr:.3e} "
                  f"train_loss {train_loss:.4f} val_acc {acc:.4f}", flush=True)
        if acc > best[0]:  # strict: ties keep the earlier epoch
            best = (acc, epoch + 1, {k: v.copy() for k, v in state_arrays(model).items()})

    best_acc, best_epoch, best_state = best
    load_arrays(model, best_state)
    if evaluator is None:
        _, confusion = evaluate(model, val_images, labels[val_idx], spec.num_classes)
    else:
        confusion = np.zeros((spec.num_classes, spec.num_classes), dtype=np.int64)
    return FoldResult(fold=fold, best_val_accuracy=best_acc, best_epoch=best_epoch, history=history,
                      initial_train_loss=initial_loss, confusion=confusion, best_state=best_state,
                      seconds=time.perf_counter() - start)


def model_from_result(spec, result: FoldResult):
    model = build_model(spec, 0)
    load_arrays(model, result.best_state)
    return model
