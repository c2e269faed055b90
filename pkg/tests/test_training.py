"""Optimizer, schedule, evaluation and the fold training loop."""

import logging
import math

import numpy as np
import pytest

from efficientsign.data import AugmentConfig, stratified_kfold
from efficientsign.errors import ConfigurationError, InputError, TrainingError
from efficientsign.models import ModelSpec, state_arrays
from efficientsign.tensor import Tensor
from efficientsign.training import AdamState, TrainConfig, adam_step, cosine_lr, evaluate, train_fold


class FixedLogits:
    """Stand-in model whose logits are a function of the batch."""

    def __init__(self, fn, k):
        self.fn, self.training, self.dtype = fn, False, np.float64
        self.spec = ModelSpec.efficientsign("tiny", num_classes=k)

    def train(self, mode=True):
        self.training = mode

    def eval(self):
        self.training = False

    def __call__(self, images, rng=None):
        return Tensor(self.fn(images))


class TestCosine:
    def test_endpoints_and_midpoint(self):
        cfg = TrainConfig(epochs=12, base_lr=1e-4)
        assert cosine_lr(0, cfg) == 1e-4
        assert cosine_lr(11, cfg) == pytest.approx(0.0, abs=1e-20)
        cfg_odd = TrainConfig(epochs=11, base_lr=1e-4)
        assert cosine_lr(5, cfg_odd) == pytest.approx(5e-5, rel=1e-12)

    def test_monotone_nonincreasing(self):
        cfg = TrainConfig(epochs=30, base_lr=3e-3, lr_min=1e-5)
        lrs = [cosine_lr(t, cfg) for t in range(30)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert lrs[-1] == pytest.approx(1e-5)

    def test_single_epoch_constant(self):
        assert cosine_lr(0, TrainConfig(epochs=1, base_lr=0.5)) == 0.5

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(base_lr=1e-4, lr_min=1e-3)
        with pytest.raises(ConfigurationError):
            cosine_lr(12, TrainConfig(epochs=12))


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = {"w": np.array([1.0, -2.0])}
        out, _ = adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3)
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_first_step_hand_value(self):
        out, state = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(), 1e-4)
        assert out["w"][0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
        assert state.t == 1

    def test_opposes_gradient_sign(self):
        for g in (-3.0, 0.2, 7.0):
            out, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([g])}, AdamState(), 1e-2)
            assert np.sign(out["w"][0]) == -np.sign(g)

    def test_quadratic_converges(self):
        w, state = np.array([0.0]), AdamState()
        for _ in range(200):
            new, state = adam_step({"w": w}, {"w": 2 * (w - 3)}, state, 0.1)
            w = new["w"]
        assert abs(w[0] - 3) <= 0.1

    def test_inputs_not_mutated(self):
        p = {"w": np.ones(3)}
        adam_step(p, {"w": np.ones(3)}, AdamState(), 0.1)
        np.testing.assert_array_equal(p["w"], np.ones(3))

    def test_nan_gradient_names_parameter(self):
        with pytest.raises(TrainingError, match="head.weight"):
            adam_step({"head.weight": np.ones(2)}, {"head.weight": np.array([1.0, np.nan])}, AdamState(), 0.1)


class TestEvaluate:
    def test_one_hot_logits(self):
        labels = np.array([0, 2, 1, 2, 0])
        model = FixedLogits(lambda x: np.eye(3)[x[:, 0, 0, 0].astype(int)], 3)
        images = labels.astype(float)[:, None, None, None] * np.ones((5, 3, 2, 2))
        acc, conf = evaluate(model, images, labels, 3)
        assert acc == 1.0
        np.testing.assert_array_equal(conf, np.diag(np.bincount(labels)))

    def test_constant_logits_tie_to_class_zero(self):
        labels = np.repeat(np.arange(26), 3)
        model = FixedLogits(lambda x: np.zeros((len(x), 26)), 26)
        acc, conf = evaluate(model, np.zeros((78, 3, 2, 2)), labels, 26)
        assert acc == pytest.approx(1 / 26)
        assert conf[:, 0].sum() == 78
        np.testing.assert_array_equal(conf.sum(axis=1), np.bincount(labels))
        assert conf.sum() == 78 and np.trace(conf) / conf.sum() == acc

    def test_empty(self):
        with pytest.raises(InputError):
            evaluate(FixedLogits(lambda x: x, 2), np.zeros((0, 3, 2, 2)), [], 2)


def _cfg(epochs=2, **kw):
    return TrainConfig(epochs=epochs, base_lr=2e-2, batch_size=16, seed=42,
                       augment=AugmentConfig(target_size=32), **kw)


class TestTrainFold:
    spec = ModelSpec.efficientsign("tiny", num_classes=8)

    def test_injected_sequence_keeps_best_epoch(self, small_synth):
        scores = [0.5, 0.9, 0.7, 0.6, 0.9]
        snapshots = []

        def evaluator(model, epoch):
            snapshots.append({k: v.copy() for k, v in state_arrays(model).items()})
            return scores[epoch]

        res = train_fold(self.spec, small_synth, np.arange(40), np.arange(40, 80), _cfg(5), evaluator=evaluator)
        assert res.best_epoch == 2 and res.best_val_accuracy == 0.9
        assert res.best_val_accuracy == max(h.val_accuracy for h in res.history)
        for k, v in res.best_state.items():
            np.testing.assert_array_equal(v, snapshots[1][k])

    def test_loss_decreases_and_reproducible(self, small_synth):
        plan = stratified_kfold(small_synth.labels, 5, 42)
        args = (self.spec, small_synth, plan.train_indices(0), plan.test_indices(0), _cfg(12))
        a = train_fold(*args)
        assert a.final_train_loss < a.initial_train_loss
        assert len(a.history) == 12 and [h.epoch for h in a.history] == list(range(1, 13))
        assert a.confusion.sum() == len(plan.test_indices(0))
        b = train_fold(*args)
        assert a.best_val_accuracy == b.best_val_accuracy
        assert [(h.train_loss, h.val_accuracy) for h in a.history] == [(h.train_loss, h.val_accuracy)
                                                                       for h in b.history]

    def test_oversized_batch_warns(self, small_synth, caplog):
        cfg = TrainConfig(epochs=1, base_lr=1e-3, batch_size=500, augment=AugmentConfig.no_augmentation(32))
        with caplog.at_level(logging.WARNING):
            res = train_fold(self.spec, small_synth, np.arange(10), np.arange(10, 20), cfg)
        assert "exceeds" in caplog.text
        assert math.isfinite(res.history[0].train_loss)

    def test_empty_split(self, small_synth):
        with pytest.raises(InputError):
            train_fold(self.spec, small_synth, [], [1], _cfg())
