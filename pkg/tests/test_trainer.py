#!/usr/bin/env python3
"""
Unit tests for the trainer.
"""

import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from dsnet import DSNetArchitecture, forward, init_dsnet
from hsi_data import PatchSet
from layers import conv2d
from losses import LossConfig, ce_loss, re_loss, total_loss
from tensor import Tensor, no_grad
from trainer import (LOG_COLUMNS, AdamState, TrainConfig, TrainingError, adam_step, batch_order, evaluate,
                     format_log, lr_at, recalibrate_batchnorm, train, write_log)


def class_patches(count=30, bands=6, patch_size=5, classes=3, seed=0):
    """Patches whose spectra are noisy copies of one signature per class."""
    rng = np.random.default_rng(seed)
    signatures = rng.uniform(0.1, 0.9, (classes, bands))
    labels = np.arange(count) % classes + 1
    values = signatures[labels - 1][:, :, None, None] + 0.02 * rng.standard_normal(
        (count, bands, patch_size, patch_size))
    values = np.clip(values, 0.01, None)
    rows, cols = np.divmod(np.arange(count), 10)
    return PatchSet(values, labels.astype(np.int64), rows.astype(np.int64), cols.astype(np.int64), 10)


def small_config(**kwargs):
    settings = dict(epochs=2, batch_size=8, patch_size=5, seed=0, precision=64, deterministic=True)
    settings.update(kwargs)
    return TrainConfig(**settings)


class TestSchedule(unittest.TestCase):
    """Unit tests for lr_at and batch_order."""

    def test_step_decay(self):
        cfg = TrainConfig()
        self.assertEqual(lr_at(0, cfg), 1e-3)
        self.assertEqual(lr_at(49, cfg), 1e-3)
        self.assertEqual(lr_at(50, cfg), 9e-4)
        self.assertEqual(lr_at(100, cfg), 8.1e-4)

    def test_non_increasing(self):
        cfg = TrainConfig()
        rates = [lr_at(epoch, cfg) for epoch in range(0, 500, 7)]
        self.assertTrue(all(b <= a for a, b in zip(rates, rates[1:])))

    def test_negative_epoch(self):
        with self.assertRaises(TrainingError):
            lr_at(-1, TrainConfig())

    def test_batch_order_is_a_seeded_permutation(self):
        order = batch_order(37, seed=3, epoch=2)
        self.assertEqual(sorted(order.tolist()), list(range(37)))
        np.testing.assert_array_equal(order, batch_order(37, seed=3, epoch=2))
        self.assertFalse(np.array_equal(order, batch_order(37, seed=3, epoch=3)))

    def test_config_validation(self):
        for bad in (dict(epochs=0), dict(batch_size=0), dict(lam=1.5), dict(schedule='phased'),
                    dict(checkpoint_every=5)):
            with self.subTest(**bad):
                with self.assertRaises(Exception):
                    TrainConfig(**bad).validate()


class TestAdam(unittest.TestCase):
    """Unit tests for adam_step."""

    def test_zero_gradient_leaves_parameters(self):
        params = {'w': Tensor(np.array([1.0, -2.0]))}
        state = AdamState()
        adam_step(params, {'w': np.zeros(2)}, state, lr=1e-3)
        np.testing.assert_array_equal(params['w'].data, [1.0, -2.0])
        self.assertEqual(state.t, 1)

    def test_first_step_moves_by_learning_rate(self):
        params = {'w': Tensor(np.array([1.0, 1.0, 1.0]))}
        adam_step(params, {'w': np.array([0.5, -3.0, 1e-2])}, AdamState(), lr=1e-3)
        np.testing.assert_allclose(params['w'].data, [1.0 - 1e-3, 1.0 + 1e-3, 1.0 - 1e-3], rtol=0, atol=1e-8)

    def test_non_finite_gradient_updates_nothing(self):
        params = {'a': Tensor(np.array([1.0])), 'b': Tensor(np.array([2.0]))}
        state = AdamState()
        with self.assertRaises(TrainingError) as ctx:
            adam_step(params, {'a': np.array([0.1]), 'b': np.array([np.nan])}, state, lr=1e-3)
        self.assertEqual(ctx.exception.parameter, 'b')
        np.testing.assert_array_equal(params['a'].data, [1.0])
        self.assertEqual(state.t, 0)

    def test_non_positive_learning_rate(self):
        with self.assertRaises(TrainingError):
            adam_step({'w': Tensor(np.ones(1))}, {'w': np.ones(1)}, AdamState(), lr=0.0)


class TestGradientFlow(unittest.TestCase):
    """Which parameters each objective reaches."""

    def gradients(self, variant, lam):
        patches = class_patches(count=6)
        arch = DSNetArchitecture.for_variant(variant, bands=6, patch_size=5, endmembers=3, classes=3)
        params = init_dsnet(arch, seed=0, precision=64)
        x = Tensor(patches.values)
        out = forward(params, x, 'train')
        loss = total_loss(re_loss(x, out.reconstruction), ce_loss(out.logits, patches.labels), LossConfig(lam))
        params.zero_grad()
        loss.backward()
        return {name: np.abs(t.grad).max() for name, t in params.named_parameters().items()}

    def test_reconstruction_only(self):
        grads = self.gradients('full', 1.0)
        for name, value in grads.items():
            if name.startswith(('classifier.', 'fusion.')):
                self.assertEqual(value, 0.0, name)
        self.assertGreater(grads['unmixing.decoder.G.weight'], 0.0)

    def test_classification_only_leaves_decoder(self):
        for variant in ('full', 'no-fusion'):
            with self.subTest(variant=variant):
                grads = self.gradients(variant, 0.0)
                for name, value in grads.items():
                    if name.startswith('unmixing.decoder.'):
                        self.assertEqual(value, 0.0, name)
                self.assertGreater(grads['classifier.fc2.weight'], 0.0)

    def test_classification_reaches_encoder_through_fusion(self):
        self.assertGreater(self.gradients('full', 0.0)['unmixing.encoder.block3.weight'], 0.0)
        self.assertEqual(self.gradients('no-fusion', 0.0)['unmixing.encoder.block3.weight'], 0.0)


class TestTrain(unittest.TestCase):
    """Unit tests for train and evaluate."""

    def setUp(self):
        self.patches = class_patches()
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_loss_decreases(self):
        result = train(self.patches, small_config(epochs=20, lr0=5e-3))
        self.assertEqual(len(result.log), 20)
        self.assertLess(result.log[-1].total_loss, result.log[0].total_loss)
        self.assertLess(result.log[-1].ce_loss, result.log[0].ce_loss)

    def test_deterministic_runs_are_identical(self):
        first = train(self.patches, small_config())
        second = train(self.patches, small_config())
        self.assertEqual(format_log(first.log), format_log(second.log))
        for name, array in first.params.state_arrays().items():
            np.testing.assert_array_equal(second.params.state_arrays()[name], array)
        self.assertTrue(all(r.elapsed_s == 0.0 for r in first.log))

    def test_log_format(self):
        result = train(self.patches, small_config(epochs=1))
        path = os.path.join(self.tmpdir, 'train_log.csv')
        write_log(path, result.log)
        with open(path) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], ','.join(LOG_COLUMNS))
        self.assertEqual(len(lines), 2)
        self.assertTrue(lines[1].startswith('0,0.001,'))

    def test_variants_train(self):
        for variant, fusion, decoder in (('no-fusion', False, 'nonlinear'), ('linear', True, 'linear')):
            with self.subTest(variant=variant):
                result = train(self.patches, small_config(epochs=1, fusion=fusion, decoder=decoder))
                self.assertEqual(result.params.architecture.variant, variant)
                record = result.log[0]
                self.assertTrue(np.isfinite(record.re_loss) and np.isfinite(record.ce_loss))

    def test_alternating_schedule(self):
        blended = train(self.patches, small_config(epochs=1))
        alternating = train(self.patches, small_config(epochs=1, schedule='alternating'))
        self.assertFalse(np.array_equal(blended.params.state_arrays()['classifier.fc2.weight'],
                                        alternating.params.state_arrays()['classifier.fc2.weight']))

    def test_periodic_checkpoints(self):
        stem = os.path.join(self.tmpdir, 'model')
        train(self.patches, small_config(epochs=2, checkpoint_every=1, checkpoint_stem=stem))
        for epoch in (1, 2):
            self.assertTrue(os.path.exists(f"{stem}_epoch{epoch:04d}.bin"))

    def test_non_finite_loss_aborts(self):
        cfg = small_config(epochs=1)
        arch = DSNetArchitecture.for_variant('full', bands=6, patch_size=5, endmembers=3, classes=3)
        params = init_dsnet(arch, seed=0, precision=64)
        params.fusion.out.bias.data[...] = np.nan
        with self.assertRaises(TrainingError) as ctx:
            train(self.patches, cfg, params=params)
        self.assertEqual((ctx.exception.epoch, ctx.exception.batch), (0, 0))

    def test_invalid_inputs(self):
        with self.assertRaises(TrainingError):
            train(self.patches.subset([]), small_config())
        with self.assertRaises(TrainingError):
            train(self.patches, small_config(patch_size=7))

    def test_running_statistics_match_training_set(self):
        params = train(self.patches, small_config(epochs=3)).params
        block1 = params.encoder.block1
        pre = conv2d(Tensor(self.patches.values), block1).data
        count = pre.shape[0] * pre.shape[2] * pre.shape[3]
        np.testing.assert_allclose(block1.running_mean, pre.mean(axis=(0, 2, 3)), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(block1.running_var, pre.var(axis=(0, 2, 3)) * count / (count - 1),
                                   rtol=1e-10)
        self.assertEqual(block1.momentum, 0.9)

    def test_eval_mode_matches_full_batch_train_mode(self):
        params = train(self.patches, small_config(epochs=3)).params
        x = Tensor(self.patches.values)
        with no_grad():
            eval_logits = forward(params, x, 'eval').logits.data
            train_logits = forward(params, x, 'train').logits.data
        np.testing.assert_array_equal(np.argmax(eval_logits, axis=1), np.argmax(train_logits, axis=1))
        np.testing.assert_allclose(eval_logits, train_logits, rtol=1e-2, atol=5e-3)

    def test_recalibration_can_be_disabled(self):
        recalibrated = train(self.patches, small_config(epochs=2)).params
        raw = train(self.patches, small_config(epochs=2, recalibrate_batchnorm=False)).params
        name = 'unmixing.encoder.block1.bn_running_mean'
        np.testing.assert_array_equal(recalibrated.state_arrays()['classifier.fc2.weight'],
                                      raw.state_arrays()['classifier.fc2.weight'])
        self.assertFalse(np.allclose(recalibrated.state_arrays()[name], raw.state_arrays()[name]))

    def test_chunked_recalibration_averages_means(self):
        arch = DSNetArchitecture.for_variant('full', bands=6, patch_size=5, endmembers=3, classes=3)
        params = init_dsnet(arch, seed=0, precision=64)
        recalibrate_batchnorm(params, self.patches.values, chunk_size=7)
        pre = conv2d(Tensor(self.patches.values), params.encoder.block1).data
        np.testing.assert_allclose(params.encoder.block1.running_mean, pre.mean(axis=(0, 2, 3)), rtol=1e-10)
        for layer in params.batchnorm_layers():
            self.assertEqual(layer.momentum, 0.9)

    def test_sharded_evaluation_matches(self):
        params = train(self.patches, small_config(epochs=1)).params
        single = evaluate(params, self.patches, workers=1)
        sharded = evaluate(params, self.patches, workers=4, batch_size=5)
        np.testing.assert_array_equal(single.counts, sharded.counts)
        self.assertEqual(single.total, len(self.patches))


if __name__ == '__main__':
    unittest.main()
