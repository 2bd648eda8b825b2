"""
Unit tests for losses, LEE, the optimizer and staged QAT
"""

import math
import os
import unittest
from unittest.mock import patch

import numpy as np

import tensor_core as tc
from dataset import Dataset, gen_synthetic, split
from geometry import Rotation, build_graph, random_rotation
from model import EquivariantTransformer, ModelConfig, ModelOutput
from quantizers import ON
from tensor_core import ShapeError, Tape, Tensor, backward
from training import (Adam, EpochRecord, TrainConfig, TrainingError, TrainLog, ev_to_mev,
                      evaluate, fit, kcal_mol_to_mev, lee, loss, mev_to_kcal_mol,
                      post_training_quantize, qat_train)


SMALL = ModelConfig(F0=8, F1=8, n_layers=2, n_rbf=8, d_attn=8)
SLOW = os.environ.get('EQUIQUANT_SLOW') == '1'


def small_data(n=12, atoms=(4, 6), seed=5):
    return gen_synthetic(n, atoms, seed=seed)


class TestLoss(unittest.TestCase):
    """Composite task loss"""

    def setUp(self):
        self.energy = np.array([2.0, -1.5])
        self.forces = np.arange(12, dtype=np.float64).reshape(4, 3) / 4

    def _pred(self, energy, forces):
        return ModelOutput(Tensor(energy), Tensor(forces))

    def test_perfect_prediction(self):
        """Test exact predictions with no LEE give zero loss"""
        total, terms = loss(self._pred(self.energy, self.forces), self.energy, self.forces)
        self.assertEqual(total.item(), 0.0)
        self.assertEqual(terms['lee'], 0.0)

    def test_energy_off_by_one(self):
        """Test an energy error of 1 with only the energy weight gives 1"""
        total, _ = loss(self._pred(self.energy + 1.0, self.forces), self.energy, self.forces,
                        lambda_energy=1.0, lambda_force=0.0, lambda_lee=0.0)
        self.assertAlmostEqual(total.item(), 1.0, places=6)

    def test_zero_lee_weight_bitwise(self):
        """Test a zero LEE weight reproduces the plain loss bitwise"""
        pred = self._pred(self.energy + 0.3, self.forces * 1.1)
        plain, _ = loss(pred, self.energy, self.forces)
        weighted, _ = loss(pred, self.energy, self.forces, lambda_lee=0.0, lee_term=Tensor(0.7))
        np.testing.assert_array_equal(plain.data, weighted.data)

    def test_lee_term_added(self):
        """Test the penalty adds lambda times the LEE term"""
        pred = self._pred(self.energy, self.forces)
        total, terms = loss(pred, self.energy, self.forces, lambda_lee=0.5, lee_term=Tensor(0.25))
        self.assertAlmostEqual(total.item(), 0.125, places=6)
        self.assertAlmostEqual(terms['lee'], 0.25, places=6)

    def test_shape_mismatch(self):
        """Test forces for the wrong number of atoms are rejected"""
        with self.assertRaises(ShapeError):
            loss(self._pred(self.energy, self.forces[:3]), self.energy, self.forces)

    def test_missing_references(self):
        """Test a loss without references is rejected"""
        with self.assertRaises(TrainingError):
            loss(self._pred(self.energy, self.forces), None, self.forces)


class TestAdam(unittest.TestCase):
    """Adam optimizer"""

    def test_first_step_is_lr_times_sign(self):
        """Test the bias-corrected first step moves every entry by lr"""
        p = Tensor.parameter([1.0, -2.0, 0.5])
        with Tape() as tape:
            total = tc.sum(tc.mul(p, p))
        optimizer = Adam([p], lr=0.1)
        optimizer.step(backward(tape, total))
        np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], rtol=1e-5)

    def test_zero_gradient_leaves_parameter(self):
        """Test a parameter with zero gradient does not move"""
        p = Tensor.parameter([3.0])
        unused = Tensor.parameter([1.0])
        with Tape() as tape:
            total = tc.sum(tc.mul(unused, 2.0))
        Adam([p, unused], lr=0.1).step(backward(tape, total, [p, unused]))
        self.assertEqual(p.data.tolist(), [3.0])


class TestUnits(unittest.TestCase):
    """Unit conversion helpers"""

    def test_conversions(self):
        """Test eV and kcal/mol conversions to meV"""
        self.assertEqual(ev_to_mev(0.25), 250.0)
        self.assertAlmostEqual(kcal_mol_to_mev(1.0), 43.364)
        self.assertAlmostEqual(mev_to_kcal_mol(43.364), 1.0)


class TestTrainConfig(unittest.TestCase):
    """Training configuration invariants"""

    def test_warmup_must_precede_end(self):
        """Test warm-up as long as the run is rejected"""
        with self.assertRaises(ValueError):
            TrainConfig(epochs=5, warmup_epochs=5)

    def test_negative_lambda(self):
        """Test negative loss weights are rejected"""
        with self.assertRaises(ValueError):
            TrainConfig(lambda_lee=-0.1)

    def test_bad_init(self):
        """Test unknown initialization modes are rejected"""
        with self.assertRaises(ValueError):
            TrainConfig(init='pretrained')

    def test_scheme_alias(self):
        """Test scheme aliases resolve to the canonical name"""
        self.assertEqual(TrainConfig(scheme='int8-scalar').scheme, 'int8-scalar-only')


class TestLee(unittest.TestCase):
    """Local equivariance error"""

    def setUp(self):
        self.data = small_data()
        self.model = EquivariantTransformer(SMALL, seed=3)
        self.model.fit_normalization(self.data.graphs)

    def test_fp32_is_equivariant(self):
        """Test the FP32 model has LEE below 1e-4 meV/Å"""
        rng = np.random.default_rng(0)
        for g in self.data.graphs[:5]:
            value = lee(self.model, g, [random_rotation(rng) for _ in range(3)])
            self.assertLess(value, 1e-4)

    def test_identity_rotation(self):
        """Test the identity rotation gives exactly zero"""
        self.assertEqual(lee(self.model, self.data.graphs[0], [Rotation.identity()]), 0.0)

    def test_quantized_model_positive(self):
        """Test a fully quantized model has a positive finite LEE"""
        model = EquivariantTransformer(SMALL, 'int8-full', seed=3)
        model.fit_normalization(self.data.graphs)
        post_training_quantize(model, self.data)
        value = lee(model, self.data.graphs[1], [random_rotation(7), random_rotation(8)])
        self.assertTrue(math.isfinite(value))
        self.assertGreater(value, 0.0)

    def test_pair_on_cutoff_sphere(self):
        """Test a pair exactly at the cutoff survives arbitrary rotations"""
        g = build_graph([6, 8], [[0, 0, 0], [5, 0, 0]], cutoff=5.0)
        rng = np.random.default_rng(11)
        for _ in range(200):
            self.assertLess(lee(self.model, g, [random_rotation(rng)]), 1e-4)

    def test_requires_rotation(self):
        """Test an empty rotation list is rejected"""
        with self.assertRaises(TrainingError):
            lee(self.model, self.data.graphs[0], [])


class TestEvaluate(unittest.TestCase):
    """Dataset-level metrics"""

    def test_empty_dataset(self):
        """Test evaluation of an empty dataset is rejected"""
        with self.assertRaises(TrainingError):
            evaluate(EquivariantTransformer(SMALL), Dataset([]))

    def test_constant_model(self):
        """Test a constant-energy, zero-force model reproduces the reference deviations"""
        data = small_data(8, (5, 5), seed=2)
        model = EquivariantTransformer(SMALL, seed=1)
        model.head2.data[...] = 0.0
        model.force_head.data[...] = 0.0
        model.energy_shift = -0.2
        result = evaluate(model, data, n_rotations=1)
        expected_energy = np.mean([abs(g.ref_energy - 5 * -0.2) for g in data])
        expected_force = np.mean([np.abs(g.ref_forces).mean() for g in data])
        self.assertAlmostEqual(result.e_mae_mev, 1000 * expected_energy, delta=1e-2)
        self.assertAlmostEqual(result.f_mae_mev_a, 1000 * expected_force, delta=1e-2)
        self.assertEqual(result.lee_mev_a, 0.0)

    def test_fp32_lee_and_determinism(self):
        """Test FP32 LEE over 8 rotations and repeatable metrics"""
        data = small_data()
        model = EquivariantTransformer(SMALL, seed=2)
        model.fit_normalization(data.graphs)
        first = evaluate(model, data, seed=4)
        self.assertLess(first.lee_mev_a, 1e-4)
        self.assertEqual(first, evaluate(model, data, seed=4))


class TestPostTrainingQuantize(unittest.TestCase):
    """Calibration-only quantization"""

    def setUp(self):
        self.data = small_data()

    def test_fp32_is_noop(self):
        """Test an FP32 model is returned without quantizers"""
        model = EquivariantTransformer(SMALL)
        self.assertIs(post_training_quantize(model, self.data), model)
        self.assertEqual(model.quantizers(), {})

    def test_all_frozen_and_on(self):
        """Test every quantizer is frozen and active afterwards"""
        model = post_training_quantize(EquivariantTransformer(SMALL, 'int8-full'), self.data)
        for q in model.quantizers().values():
            self.assertTrue(q.frozen)
            self.assertEqual(q.state, ON)

    def test_magnitude_steps_receive_gradient(self):
        """Test gradients reach the vector magnitude step sizes"""
        model = EquivariantTransformer(SMALL, 'int8-full', seed=1)
        model.fit_normalization(self.data.graphs)
        post_training_quantize(model, self.data)
        batch = model.batch(self.data.graphs[:4])
        with Tape() as tape:
            total, _ = loss(model.forward(batch), batch.ref_energy, batch.ref_forces)
        steps = [q.mag_step for q in model.vector_quantizers.values()]
        grads = backward(tape, total, steps)
        self.assertTrue(any(np.any(grads[s] != 0) for s in steps))


class TestTrainLog(unittest.TestCase):
    """Epoch log bookkeeping"""

    def test_epochs_strictly_increase(self):
        """Test logging an epoch twice is rejected"""
        log = TrainLog()
        log.append(EpochRecord(0, 1.0, 1.0, 0.0, 1.0))
        with self.assertRaises(TrainingError):
            log.append(EpochRecord(0, 1.0, 1.0, 0.0, 1.0))

    def test_record_fields(self):
        """Test emitted records lead with the fixed field names"""
        log = TrainLog([EpochRecord(0, 1.0, 2.0, 0.5, 3.0)])
        keys = list(log.to_records()[0])
        self.assertEqual(keys[:5], ['epoch', 'e_mae_mev', 'f_mae_mev_a', 'lee_mev_a', 'loss'])


class TestQatTrain(unittest.TestCase):
    """Staged quantization-aware training"""

    def setUp(self):
        self.data = small_data(16)
        self.train, self.val, _ = split(self.data, (0.75, 0.25, 0.0), seed=1)

    def test_fp32_deterministic_and_equivariant(self):
        """Test FP32 training repeats bitwise and stays equivariant"""
        cfg = TrainConfig(epochs=2, warmup_epochs=0, lr=1e-3, batch_size=4, seed=7)
        _, first = fit(SMALL, cfg, self.train, self.val)
        _, second = fit(SMALL, cfg, self.train, self.val)
        self.assertEqual(first.to_records(), second.to_records())
        self.assertEqual([r.stage for r in first], ['fp32', 'fp32'])
        for record in first:
            self.assertLess(record.lee_mev_a, 1e-4)

    def test_one_full_epoch_after_warmup(self):
        """Test warm-up of epochs-1 leaves exactly one fully quantized epoch"""
        model = EquivariantTransformer(SMALL, 'int8-full', seed=2)
        model.fit_normalization(self.train.graphs)
        cfg = TrainConfig(epochs=3, warmup_epochs=2, lr=1e-3, batch_size=4, scheme='int8-full')
        log = qat_train(model, self.train, self.val, cfg)
        self.assertEqual([r.stage for r in log], ['warmup', 'warmup', 'full'])
        self.assertEqual([r.loss_lee for r in log][:2], [0.0, 0.0])
        self.assertGreater(log.last.loss_lee, 0.0)
        for q in model.quantizers().values():
            self.assertTrue(q.frozen)
            self.assertEqual(q.state, ON)

    def test_stage_boundary_stable(self):
        """Test switching on vector quantization neither diverges nor explodes"""
        model = EquivariantTransformer(SMALL, 'int8-full', seed=4)
        model.fit_normalization(self.train.graphs)
        cfg = TrainConfig(epochs=3, warmup_epochs=1, lr=1e-3, batch_size=4, scheme='int8-full')
        losses = [r.loss for r in qat_train(model, self.train, self.val, cfg)]
        self.assertTrue(all(math.isfinite(v) for v in losses))
        for before, after in zip(losses, losses[1:]):
            self.assertLess(after, 10 * before)

    def test_nan_loss_names_epoch_and_term(self):
        """Test a non-finite energy term aborts with a diagnostic"""
        g = build_graph([6, 8], [[0, 0, 0], [1.5, 0, 0]], ref_energy=float('nan'),
                        ref_forces=np.zeros((2, 3)))
        cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=1)
        with self.assertRaisesRegex(TrainingError, 'Epoch 0: energy'):
            qat_train(EquivariantTransformer(SMALL), Dataset([g]), None, cfg)

    def test_empty_training_set(self):
        """Test training without molecules is rejected"""
        with self.assertRaises(TrainingError):
            qat_train(EquivariantTransformer(SMALL), Dataset([]), None,
                      TrainConfig(epochs=1, warmup_epochs=0))

    def test_finetune_runs_pretraining_first(self):
        """Test finetune logs FP32 epochs before the staged ones"""
        cfg = TrainConfig(epochs=2, warmup_epochs=1, lr=1e-3, batch_size=4, scheme='int8-full',
                          pretrain_epochs=1)
        model, log = fit(SMALL, cfg, self.train, self.val)
        self.assertEqual([r.stage for r in log], ['fp32', 'warmup', 'full'])
        self.assertEqual([r.epoch for r in log], [0, 1, 2])
        self.assertEqual(model.scheme.name, 'int8-full')

    def test_default_init_pretrains_fp32(self):
        """Test the default configuration runs an FP32 stage before QAT"""
        calls = []

        def record_stage(model, train, val, cfg, log=None):
            calls.append((cfg.scheme, cfg.epochs))
            return log

        cfg = TrainConfig(epochs=2, warmup_epochs=1, batch_size=8, scheme='int8-full')
        self.assertEqual(cfg.init, 'finetune')
        self.assertGreater(cfg.pretrain_epochs, 0)
        with patch('training.qat_train', side_effect=record_stage):
            fit(SMALL, cfg, self.train, self.val)
        self.assertEqual(calls, [('fp32', cfg.pretrain_epochs), ('int8-full', 2)])

    def test_finetune_without_pretraining_warns(self):
        """Test finetune with zero pretraining epochs is flagged"""
        cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=8, scheme='int8-full', pretrain_epochs=0)
        with patch('training.qat_train'):
            with self.assertLogs('EquiQuant.Training', level='WARNING') as logs:
                fit(SMALL, cfg, self.train, self.val)
        self.assertTrue(any('pretrain_epochs 0' in line for line in logs.output))

    def test_scratch_skips_pretraining(self):
        """Test scratch starts staged QAT immediately"""
        cfg = TrainConfig(epochs=2, warmup_epochs=1, lr=1e-3, batch_size=4, scheme='int8-scalar',
                          init='scratch', pretrain_epochs=3)
        model, log = fit(SMALL, cfg, self.train, self.val)
        self.assertEqual([r.stage for r in log], ['warmup', 'full'])
        self.assertEqual(model.vector_quantizers, {})


@unittest.skipUnless(SLOW, "set EQUIQUANT_SLOW=1 to run long training checks")
class TestTrainingAcceptance(unittest.TestCase):
    """Desk-scale training runs on the synthetic Lennard-Jones dataset"""

    @classmethod
    def setUpClass(cls):
        data = gen_synthetic(500, (8, 16), seed=0)
        cls.train, cls.val, cls.test = split(data, (0.8, 0.1, 0.1), seed=0)
        cls.model_config = ModelConfig()

    def test_fp32_loss_halves(self):
        """Test the FP32 training loss drops below half its first-epoch value"""
        cfg = TrainConfig(epochs=30, warmup_epochs=0, lr=1e-3, batch_size=16, seed=0)
        _, log = fit(self.model_config, cfg, self.train, self.val)
        self.assertLess(log.last.loss, 0.5 * log.records[0].loss)

    def test_int8_full_close_to_fp32(self):
        """Test int8-full QAT stays within 2x of FP32 energy and force MAE at equal budget"""
        fp32_cfg = TrainConfig(epochs=60, warmup_epochs=0, lr=1e-3, seed=0)
        qat_cfg = TrainConfig(epochs=20, warmup_epochs=5, lr=1e-3, seed=0, scheme='int8-full',
                              pretrain_epochs=40)
        _, fp32_log = fit(self.model_config, fp32_cfg, self.train, self.val)
        _, qat_log = fit(self.model_config, qat_cfg, self.train, self.val)
        self.assertLessEqual(qat_log.last.f_mae_mev_a, 2 * fp32_log.last.f_mae_mev_a)
        self.assertLessEqual(qat_log.last.e_mae_mev, 2 * fp32_log.last.e_mae_mev)
        losses = [r.loss for r in qat_log]
        for before, after in zip(losses, losses[1:]):
            self.assertLess(after, 10 * before)

    def test_lee_regularizer_lowers_lee(self):
        """Test the equivariance penalty lowers final LEE at similar accuracy"""
        base = dict(epochs=20, warmup_epochs=5, lr=1e-3, seed=0, scheme='int8-full', pretrain_epochs=40)
        _, with_lee = fit(self.model_config, TrainConfig(lambda_lee=0.01, **base), self.train, self.val)
        _, without = fit(self.model_config, TrainConfig(lambda_lee=0.0, **base), self.train, self.val)
        self.assertLess(with_lee.last.lee_mev_a, without.last.lee_mev_a)
        for name in ('e_mae_mev', 'f_mae_mev_a'):
            a, b = getattr(with_lee.last, name), getattr(without.last, name)
            self.assertLessEqual(abs(a - b), 0.25 * max(a, b))


if __name__ == '__main__':
    unittest.main()
