"""
Unit tests for molecular graphs, rotations and radial features
"""

import itertools
import unittest

import numpy as np

from geometry import (GeometryError, GraphBatch, Rotation, build_graph, permute_graph,
                      random_rotation, rbf_expand, rotate_graph, translate_graph)


class TestBuildGraph(unittest.TestCase):
    """Cutoff neighbor lists"""

    def test_pair_within_cutoff(self):
        """Test two atoms 1.0 Å apart with cutoff 2.0 neighbor each other"""
        g = build_graph([6, 6], [[0, 0, 0], [1, 0, 0]], cutoff=2.0)
        self.assertEqual(g.neighbors[0].tolist(), [1])
        self.assertEqual(g.neighbors[1].tolist(), [0])

    def test_pair_beyond_cutoff(self):
        """Test two atoms 3.0 Å apart with cutoff 2.0 have no neighbors"""
        g = build_graph([6, 6], [[0, 0, 0], [3, 0, 0]], cutoff=2.0)
        self.assertEqual(g.n_edges, 0)

    def test_pair_at_cutoff_included(self):
        """Test distance exactly at the cutoff is included"""
        g = build_graph([6, 8], [[0, 0, 0], [2, 0, 0]], cutoff=2.0)
        self.assertEqual(g.n_edges, 2)

    def test_cube_three_neighbors(self):
        """Test 8-atom cube of side 1.5 with cutoff 1.6"""
        corners = 1.5 * np.array(list(itertools.product([0, 1], repeat=3)), dtype=float)
        g = build_graph([6] * 8, corners, cutoff=1.6)
        for i, neighbors in enumerate(g.neighbors):
            self.assertEqual(len(neighbors), 3)
            for j in neighbors:
                self.assertAlmostEqual(np.linalg.norm(corners[i] - corners[j]), 1.5)

    def test_symmetric_no_self(self):
        """Test neighbor lists are symmetric and exclude self"""
        rng = np.random.default_rng(1)
        g = build_graph([6] * 12, rng.uniform(-2, 2, size=(12, 3)), cutoff=2.5)
        for i, neighbors in enumerate(g.neighbors):
            self.assertNotIn(i, neighbors)
            for j in neighbors:
                self.assertIn(i, g.neighbors[j])

    def test_duplicate_positions_rejected(self):
        """Test coincident atoms are rejected"""
        with self.assertRaises(GeometryError):
            build_graph([6, 6], [[1, 1, 1], [1, 1, 1]], cutoff=2.0)

    def test_empty_rejected(self):
        """Test zero atoms are rejected"""
        with self.assertRaises(GeometryError):
            build_graph([], np.zeros((0, 3)), cutoff=2.0)

    def test_permutation_consistent(self):
        """Test relabeling atoms relabels the neighbor lists identically"""
        rng = np.random.default_rng(2)
        positions = rng.uniform(-2, 2, size=(7, 3))
        species = rng.integers(0, 2, size=7)
        g = build_graph(species, positions, cutoff=2.0)
        perm = rng.permutation(7)
        rebuilt = build_graph(species[perm], positions[perm], cutoff=2.0)
        relabeled = permute_graph(g, perm)
        for a, b in zip(rebuilt.neighbors, relabeled.neighbors):
            self.assertEqual(a.tolist(), b.tolist())


class TestRotation(unittest.TestCase):
    """Rotation sampling and application"""

    def test_group_membership(self):
        """Test sampled rotations are orthogonal with det +1"""
        for seed in range(20):
            m = random_rotation(seed).matrix
            np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-6)
            self.assertAlmostEqual(np.linalg.det(m), 1.0, places=6)

    def test_haar_mean(self):
        """Test the empirical mean over 1e5 samples is near zero"""
        rng = np.random.default_rng(7)
        q = rng.normal(size=(100000, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        w, x, y, z = q.T
        mean = np.array([
            [np.mean(1 - 2 * (y * y + z * z)), np.mean(2 * (x * y - w * z)), np.mean(2 * (x * z + w * y))],
            [np.mean(2 * (x * y + w * z)), np.mean(1 - 2 * (x * x + z * z)), np.mean(2 * (y * z - w * x))],
            [np.mean(2 * (x * z - w * y)), np.mean(2 * (y * z + w * x)), np.mean(1 - 2 * (x * x + y * y))],
        ])
        self.assertLess(np.max(np.abs(mean)), 0.02)
        sample = np.mean([random_rotation(rng).matrix for _ in range(2000)], axis=0)
        self.assertLess(np.max(np.abs(sample)), 0.1)

    def test_seed_deterministic(self):
        """Test same seed gives identical matrices"""
        np.testing.assert_array_equal(random_rotation(11).matrix, random_rotation(11).matrix)

    def test_invalid_matrix_rejected(self):
        """Test reflections are not rotations"""
        with self.assertRaises(GeometryError):
            Rotation(np.diag([1.0, 1.0, -1.0]))

    def test_quarter_turn_about_z(self):
        """Test 90 degrees about z maps x onto y"""
        r = Rotation.about_axis([0, 0, 1], np.pi / 2)
        np.testing.assert_allclose(r.apply(np.array([[1.0, 0, 0]])), [[0, 1, 0]], atol=1e-12)


class TestRotateGraph(unittest.TestCase):
    """Rigid motions of graphs"""

    def setUp(self):
        rng = np.random.default_rng(5)
        self.graph = build_graph(rng.integers(0, 2, size=6), rng.uniform(-2, 2, size=(6, 3)),
                                 cutoff=3.0, ref_energy=-1.25, ref_forces=rng.normal(size=(6, 3)))

    def test_identity(self):
        """Test identity rotation leaves the graph unchanged"""
        rotated = rotate_graph(self.graph, Rotation.identity())
        np.testing.assert_allclose(rotated.positions, self.graph.positions, rtol=0, atol=1e-15)

    def test_topology_and_energy_kept(self):
        """Test neighbors, species and energy survive rotation"""
        rotated = rotate_graph(self.graph, random_rotation(3))
        self.assertEqual(rotated.ref_energy, self.graph.ref_energy)
        np.testing.assert_array_equal(rotated.species, self.graph.species)
        for a, b in zip(rotated.neighbors, self.graph.neighbors):
            self.assertEqual(a.tolist(), b.tolist())

    def test_forces_rotate(self):
        """Test reference forces rotate with positions"""
        r = random_rotation(4)
        rotated = rotate_graph(self.graph, r)
        np.testing.assert_allclose(rotated.ref_forces, self.graph.ref_forces @ r.matrix.T, atol=1e-12)

    def test_round_trip(self):
        """Test rotating by R then R^T restores positions"""
        r = random_rotation(9)
        back = rotate_graph(rotate_graph(self.graph, r), r.inverse())
        np.testing.assert_allclose(back.positions, self.graph.positions, atol=1e-5)

    def test_translate(self):
        """Test translation shifts every position"""
        moved = translate_graph(self.graph, [1.0, -2.0, 0.5])
        np.testing.assert_allclose(moved.positions - self.graph.positions,
                                   np.tile([1.0, -2.0, 0.5], (6, 1)))


class TestRbf(unittest.TestCase):
    """Radial basis expansion"""

    def test_zero_at_cutoff(self):
        """Test all features vanish at the cutoff"""
        np.testing.assert_allclose(rbf_expand(5.0, 16, 5.0), np.zeros(16), atol=1e-15)

    def test_center_value_is_envelope(self):
        """Test the basis function at its own center equals the envelope"""
        cutoff, n = 5.0, 10
        center = 3 * cutoff / n
        features = rbf_expand(center, n, cutoff)
        envelope = 0.5 * (np.cos(np.pi * center / cutoff) + 1)
        self.assertAlmostEqual(features[2], envelope, places=12)

    def test_nonpositive_distance_rejected(self):
        """Test zero distance is rejected"""
        with self.assertRaises(GeometryError):
            rbf_expand(0.0)

    def test_rotation_invariant(self):
        """Test edge features before and after rotation agree"""
        rng = np.random.default_rng(6)
        g = build_graph([6] * 5, rng.uniform(-1.5, 1.5, size=(5, 3)), cutoff=5.0)
        rotated = rotate_graph(g, random_rotation(1))
        before = GraphBatch.from_graphs([g])
        after = GraphBatch.from_graphs([rotated])
        np.testing.assert_allclose(before.rbf, after.rbf, atol=1e-6)
        np.testing.assert_array_equal(rbf_expand(before.distances), rbf_expand(before.distances.copy()))


class TestGraphBatch(unittest.TestCase):
    """Disjoint-union batching"""

    def test_offsets(self):
        """Test edges of the second graph are offset by the first graph's atoms"""
        a = build_graph([6, 6], [[0, 0, 0], [1, 0, 0]], cutoff=2.0)
        b = build_graph([8, 8, 8], [[0, 0, 0], [1, 0, 0], [0, 1, 0]], cutoff=1.2)
        batch = GraphBatch.from_graphs([a, b], n_rbf=4, cutoff=2.0)
        self.assertEqual(batch.n_atoms, 5)
        self.assertEqual(batch.graph_index.tolist(), [0, 0, 1, 1, 1])
        self.assertTrue(np.all(batch.senders[2:] >= 2))
        self.assertEqual(batch.rbf.shape, (len(batch.senders), 4))
        np.testing.assert_allclose(np.linalg.norm(batch.unit_vectors, axis=1), 1.0, rtol=1e-6)

    def test_cutoff_pair_after_rotation(self):
        """Test a neighbor exactly at the cutoff still batches after rotation or translation"""
        g = build_graph([6, 8], [[0, 0, 0], [5, 0, 0]], cutoff=5.0)
        rng = np.random.default_rng(4)
        for _ in range(200):
            moved = translate_graph(rotate_graph(g, random_rotation(rng)), rng.uniform(-10, 10, size=3))
            batch = GraphBatch.from_graphs([moved], n_rbf=8)
            self.assertEqual(len(batch.senders), 2)
            np.testing.assert_allclose(batch.rbf, 0.0, atol=1e-12)

    def test_stale_neighbor_list_rejected(self):
        """Test a listed pair far beyond the cutoff is rejected"""
        g = build_graph([6, 8], [[0, 0, 0], [5, 0, 0]], cutoff=5.0)
        g.positions[1] = [6.0, 0.0, 0.0]
        with self.assertRaises(GeometryError):
            GraphBatch.from_graphs([g], n_rbf=8)


if __name__ == '__main__':
    unittest.main()
