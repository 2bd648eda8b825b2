"""
Unit tests for the equivariant transformer
"""

import unittest

import numpy as np

import tensor_core as tc
from dataset import gen_synthetic
from geometry import (build_graph, permute_graph, random_rotation, rotate_graph,
                      translate_graph)
from model import (EquivariantTransformer, ModelConfig, ModelError, attach_quantizers,
                   attention_weights, load_model, model_forward, save_model)
from quantizers import OBSERVE, ON, QuantizationError
from tensor_core import Tensor, gradcheck


SMALL = ModelConfig(F0=8, F1=8, n_layers=2, n_rbf=8, d_attn=8)


def calibrate(model, graphs):
    """Observe one pass on every quantizer, then freeze and switch on"""
    for branch in ('scalar', 'vector'):
        model.set_quant_state(branch, OBSERVE)
    model.forward(model.batch(graphs))
    for branch in ('scalar', 'vector'):
        model.freeze(branch)
        model.set_quant_state(branch, ON)


class TestEmbedding(unittest.TestCase):
    """Species embedding"""

    def setUp(self):
        self.model = EquivariantTransformer(SMALL, seed=0)

    def test_same_species_same_rows(self):
        """Test atoms of one species share their scalar features"""
        features = self.model.embed(np.array([6, 8, 6]))
        np.testing.assert_array_equal(features.h0.data[0], features.h0.data[2])
        self.assertFalse(np.array_equal(features.h0.data[0], features.h0.data[1]))

    def test_vectors_start_at_zero(self):
        """Test embedded vector features are exactly zero"""
        features = self.model.embed(np.array([6, 8]))
        self.assertEqual(features.h1.shape, (2, 8, 3))
        self.assertFalse(np.any(features.h1.data))

    def test_unknown_species(self):
        """Test species beyond the table are rejected"""
        with self.assertRaises(ModelError):
            self.model.embed(np.array([6, 12]))

    def test_invalid_config(self):
        """Test non-positive sizes are rejected"""
        with self.assertRaises(ValueError):
            ModelConfig(F0=0)


class TestAttention(unittest.TestCase):
    """Normalized neighbor attention"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.receivers = np.array([0, 0, 0, 0, 1, 2, 2])
        self.senders = np.array([1, 2, 3, 4, 0, 0, 1])
        self.q = rng.normal(size=(5, 6)).astype(np.float32)
        self.k = rng.normal(size=(5, 6)).astype(np.float32)
        self.bias = Tensor(rng.normal(size=7))

    def _alpha(self, q, bias=None):
        return attention_weights(Tensor(q), Tensor(self.k), self.bias if bias is None else bias,
                                 self.senders, self.receivers, 5)

    def test_single_neighbor(self):
        """Test an atom with one neighbor gives it weight one"""
        alpha, _ = self._alpha(self.q)
        self.assertAlmostEqual(float(alpha.data[4]), 1.0, places=6)

    def test_rows_sum_to_one(self):
        """Test weights of each attending atom sum to one"""
        alpha, _ = self._alpha(self.q)
        totals = np.zeros(5)
        np.add.at(totals, self.receivers, alpha.data)
        np.testing.assert_allclose(totals[[0, 1, 2]], 1.0, atol=1e-6)

    def test_query_scale_invariance(self):
        """Test scaling a query row by 0.1 or 10 leaves weights unchanged"""
        base, similarity = self._alpha(self.q)
        self.assertTrue(np.all(np.abs(similarity.data) <= 1 + 1e-5))
        for c in (0.1, 10.0):
            scaled = self.q.copy()
            scaled[0] *= c
            alpha, _ = self._alpha(scaled)
            self.assertLess(np.max(np.abs(alpha.data - base.data)), 1e-5)

    def test_equal_logits(self):
        """Test four neighbors with equal logits each get a quarter"""
        q = np.zeros((5, 6), dtype=np.float32)
        alpha, _ = attention_weights(Tensor(q), Tensor(self.k), Tensor(np.zeros(7)),
                                     self.senders, self.receivers, 5)
        np.testing.assert_allclose(alpha.data[:4], 0.25, rtol=1e-6)


class TestEquivariance(unittest.TestCase):
    """Rotation, translation and permutation behavior of the FP32 model"""

    def setUp(self):
        self.model = EquivariantTransformer(ModelConfig(), seed=1)
        self.graphs = gen_synthetic(100, (4, 12), seed=11).graphs

    def test_forces_equivariant_energy_invariant(self):
        """Test 100 random molecule/rotation pairs"""
        rng = np.random.default_rng(2)
        worst_force, worst_energy = 0.0, 0.0
        for g in self.graphs:
            rotation = random_rotation(rng)
            energy, forces = self.model.predict(g)
            energy_r, forces_r = self.model.predict(rotate_graph(g, rotation))
            worst_force = max(worst_force, np.max(np.abs(forces_r - rotation.apply(forces))))
            worst_energy = max(worst_energy, abs(energy_r[0] - energy[0]) / max(abs(energy[0]), 1e-6))
        self.assertLess(worst_force, 1e-4)
        self.assertLess(worst_energy, 1e-4)

    def test_layerwise_equivariance(self):
        """Test h0 is invariant and h1 rotates after every layer"""
        g = self.graphs[0]
        rotation = random_rotation(5)
        plain = self.model.forward(self.model.batch(g), keep_features=True).features
        turned = self.model.forward(self.model.batch(rotate_graph(g, rotation)), keep_features=True).features
        for a, b in zip(plain, turned):
            np.testing.assert_allclose(b.h0.data, a.h0.data, rtol=1e-4, atol=1e-5)
            np.testing.assert_allclose(b.h1.data, a.h1.data @ rotation.matrix.T.astype(np.float32),
                                       rtol=1e-4, atol=1e-5)

    def test_translation_invariance(self):
        """Test a rigid shift leaves energy unchanged"""
        g = self.graphs[1]
        energy, _ = self.model.predict(g)
        shifted, _ = self.model.predict(translate_graph(g, [3.0, -7.0, 1.5]))
        self.assertLess(abs(shifted[0] - energy[0]), 1e-5 * max(abs(energy[0]), 1.0))

    def test_permutation_equivariance(self):
        """Test relabeling atoms relabels forces"""
        g = self.graphs[2]
        perm = np.random.default_rng(3).permutation(g.n_atoms)
        energy, forces = self.model.predict(g)
        energy_p, forces_p = self.model.predict(permute_graph(g, perm))
        np.testing.assert_allclose(forces_p, forces[perm], rtol=1e-4, atol=1e-5)
        self.assertAlmostEqual(float(energy_p[0]), float(energy[0]), delta=1e-4 * max(abs(energy[0]), 1.0))

    def test_isolated_atoms(self):
        """Test atoms without neighbors pass through every layer and get zero force"""
        g = build_graph([6, 8], [[0, 0, 0], [10, 0, 0]], cutoff=5.0)
        features = self.model.forward(self.model.batch(g), keep_features=True).features
        for later in features[1:]:
            np.testing.assert_array_equal(later.h0.data, features[0].h0.data)
            np.testing.assert_array_equal(later.h1.data, features[0].h1.data)
        _, forces = model_forward(self.model, build_graph([6], [[0, 0, 0]], cutoff=5.0))
        np.testing.assert_array_equal(forces, np.zeros((1, 3)))


class TestQuantizerAttachment(unittest.TestCase):
    """Scheme attachment and quantized forward"""

    def setUp(self):
        self.graphs = gen_synthetic(4, (5, 8), seed=3).graphs

    def test_fp32_has_no_quantizers(self):
        """Test fp32 attaches nothing"""
        model = EquivariantTransformer(SMALL)
        self.assertEqual(attach_quantizers(model, 'fp32'), {})

    def test_scalar_only_has_no_mddq(self):
        """Test the scalar-only scheme leaves vectors unquantized"""
        model = EquivariantTransformer(SMALL, 'int8-scalar')
        kinds = {k for kinds in attach_quantizers(model, 'int8-scalar-only').values() for k in kinds}
        self.assertEqual(kinds, {'uniform'})
        self.assertEqual(model.vector_quantizers, {})

    def test_full_covers_every_inner_linear(self):
        """Test int8-full puts three quantizers on each inner linear and mddq on vectors"""
        model = EquivariantTransformer(SMALL, 'int8-full')
        for linear in model.linears.values():
            self.assertEqual(len(linear.quantizers()), 3)
        self.assertEqual(set(model.vector_quantizers), set(model.vector_points()))
        self.assertTrue(all(q.get_name() == 'mddq' for q in model.vector_quantizers.values()))
        self.assertNotIn('embedding', model.quantizers())

    def test_w4a8_bits(self):
        """Test w4a8 uses 4-bit weights and 8-bit activations"""
        model = EquivariantTransformer(SMALL, 'w4a8')
        linear = model.linears['layer0.wv']
        self.assertEqual((linear.weight_q.bits, linear.act_in.bits), (4, 8))

    def test_unknown_scheme(self):
        """Test unknown schemes are rejected"""
        with self.assertRaises(QuantizationError):
            EquivariantTransformer(SMALL, 'int3-everything')

    def test_full_forward_finite_deterministic(self):
        """Test the fully quantized forward is finite and repeatable"""
        model = EquivariantTransformer(SMALL, 'int8-full', seed=2)
        calibrate(model, self.graphs)
        first = model.predict(self.graphs)
        second = model.predict(self.graphs)
        self.assertTrue(np.all(np.isfinite(first[0])) and np.all(np.isfinite(first[1])))
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])

    def test_save_load_round_trip(self):
        """Test a reloaded quantized model predicts bitwise identically"""
        model = EquivariantTransformer(SMALL, 'int8-full', seed=4)
        model.fit_normalization(self.graphs)
        calibrate(model, self.graphs)
        restored = load_model(save_model(model))
        for a, b in zip(model.predict(self.graphs), restored.predict(self.graphs)):
            np.testing.assert_array_equal(a, b)


class TestModelGradient(unittest.TestCase):
    """Finite-difference check of the full model loss"""

    def test_full_loss_gradcheck(self):
        """Test parameter gradients of energy and force outputs"""
        config = ModelConfig(F0=4, F1=4, n_layers=1, n_rbf=4, d_attn=4)
        model = EquivariantTransformer(config, seed=6)
        graph = gen_synthetic(1, (4, 4), seed=2).graphs[0]
        batch = model.batch(graph)
        weights = np.random.default_rng(1).normal(size=(4, 3)).astype(np.float32)

        def loss():
            out = model.forward(batch)
            return tc.add(tc.sum(out.energy), tc.sum(tc.mul(out.forces, Tensor(weights))))

        params = model.named_parameters()
        names = ['embedding', 'layer0.wq.weight', 'layer0.wb.weight', 'layer0.mlp1.weight',
                 'layer0.gate.weight', 'layer0.gate.bias', 'layer0.vec_gate.weight',
                 'head.w1', 'force_head.weight']
        self.assertLess(gradcheck(loss, [params[n] for n in names]), 1e-4)


if __name__ == '__main__':
    unittest.main()
