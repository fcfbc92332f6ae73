import argparse
import contextlib
import io
import os
import tempfile
import unittest

import numpy as np

import unifeat.common
from unifeat import datastore, matching
from unifeat.common import DescriptorSet, KeypointSet


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _keypoints(xy):
    xy = np.asarray(xy, dtype=float)
    return KeypointSet.from_array(
        np.concatenate([xy, np.ones((len(xy), 2))], axis=1))


class TestAffinity(unittest.TestCase):

    def test_000_hand_case(self):
        m = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.4]])
        self.assertAlmostEqual(
            matching.affinity_score(m), 0.7916666666666667, places=12)

    def test_001_identity(self):
        self.assertEqual(matching.affinity_score(np.eye(5)), 1.0)

    def test_002_matrix_of_unit_vectors(self):
        rng = np.random.default_rng(0)
        a, b = _unit(rng, 6, 8), _unit(rng, 4, 8)
        m = matching.affinity_matrix(DescriptorSet(a), DescriptorSet(b))
        self.assertEqual(m.shape, (6, 4))
        np.testing.assert_allclose(m, a @ b.T)
        self.assertTrue(np.all(np.abs(m) <= 1 + 1e-12))

    def test_003_dim_mismatch(self):
        with self.assertRaises(unifeat.common.DimensionError):
            matching.affinity_matrix(np.ones((2, 3)), np.ones((2, 4)))

    def test_004_empty_score(self):
        with self.assertRaises(ValueError):
            matching.affinity_score(np.zeros((0, 3)))


class TestMutualNN(unittest.TestCase):

    def test_000_identical_sets(self):
        rng = np.random.default_rng(1)
        a = _unit(rng, 20, 16)
        matches = matching.mutual_nn_matches(a, a)
        np.testing.assert_array_equal(matches.index_a, np.arange(20))
        np.testing.assert_array_equal(matches.index_b, np.arange(20))
        np.testing.assert_allclose(matches.similarity, 1.0)

    def test_001_loop_oracle(self):
        rng = np.random.default_rng(2)
        a, b = _unit(rng, 30, 8), _unit(rng, 25, 8)
        matches = matching.mutual_nn_matches(a, b)
        sim = a @ b.T
        expected = [
            (i, int(np.argmax(sim[i]))) for i in range(len(a))
            if int(np.argmax(sim[:, np.argmax(sim[i])])) == i]
        self.assertEqual(
            list(zip(matches.index_a, matches.index_b)), expected)

    def test_002_empty(self):
        matches = matching.mutual_nn_matches(np.zeros((0, 4)), np.ones((3, 4)))
        self.assertEqual(len(matches), 0)

    def test_003_zero_rows_unmatched(self):
        # an all-zero row would otherwise pair with b[0] through a tie
        a = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        b = np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        matches = matching.mutual_nn_matches(a, b)
        self.assertEqual(list(zip(matches.index_a, matches.index_b)), [(1, 1)])
        matches = matching.mutual_nn_matches(b, a)
        self.assertEqual(list(zip(matches.index_a, matches.index_b)), [(1, 1)])

    def test_004_flagged_rows_unmatched(self):
        eye = np.eye(3)
        a = DescriptorSet(eye, flags=[DescriptorSet.ZERO, 0, 0])
        b = DescriptorSet(eye, flags=[0, 0, DescriptorSet.ZERO])
        matches = matching.mutual_nn_matches(a, b)
        self.assertEqual(list(zip(matches.index_a, matches.index_b)), [(1, 1)])
        # clamped rows still match
        c = DescriptorSet(eye, flags=[DescriptorSet.CLAMPED] * 3)
        self.assertEqual(len(matching.mutual_nn_matches(c, c)), 3)


class TestMMA(unittest.TestCase):

    def test_000_identity_homography(self):
        rng = np.random.default_rng(3)
        kps = _keypoints(rng.random((15, 2)) * 100)
        desc = _unit(rng, 15, 8)
        matches = matching.mutual_nn_matches(desc, desc)
        curve = matching.mma_curve(matches, kps, kps, np.eye(3))
        self.assertEqual(curve, [1.0] * 10)

    def test_001_translation(self):
        xy_a = np.array([[10.0, 10.0], [20.0, 30.0], [40.0, 5.0]])
        xy_b = xy_a + [5.0, 0.0]
        xy_b[2] += [0.0, 2.5]
        h = np.array([[1, 0, 5], [0, 1, 0], [0, 0, 1]], dtype=float)
        matches = matching.MatchSet([0, 1, 2], [0, 1, 2], [1, 1, 1])
        curve = matching.mma_curve(
            matches, _keypoints(xy_a), _keypoints(xy_b), h, (1, 2, 3))
        np.testing.assert_allclose(curve, [2 / 3, 2 / 3, 1.0])

    def test_002_no_matches(self):
        kps = _keypoints(np.zeros((0, 2)))
        curve = matching.mma_curve(
            matching.MatchSet.empty(), kps, kps, np.eye(3))
        self.assertEqual(curve, [0.0] * 10)

    def test_003_invalid_homography(self):
        kps = _keypoints([[1.0, 1.0]])
        matches = matching.MatchSet([0], [0], [1.0])
        with self.assertRaises(unifeat.common.DimensionError):
            matching.mma_curve(matches, kps, kps, np.eye(2))
        with self.assertRaises(unifeat.common.FormatError):
            matching.mma_curve(matches, kps, kps, np.zeros((3, 3)))

    def test_004_point_at_infinity(self):
        h = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0]], dtype=float)
        h[2, 2] = 1e-30
        proj, finite = matching.project_points(h, [[0.0, 5.0], [1.0, 1.0]])
        self.assertFalse(finite[0])
        self.assertTrue(finite[1])
        self.assertTrue(np.all(np.isnan(proj[0])))


class TestMatchFiles(unittest.TestCase):

    def test_000_write_read(self):
        kps_a = _keypoints([[1.5, 2.25], [3.0, 4.0]])
        kps_b = _keypoints([[5.0, 6.0], [7.125, 8.0]])
        matches = matching.MatchSet([0, 1], [1, 0], [0.5, 0.25])
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, 'm.txt')
            matching.write_matches(path, matches, kps_a, kps_b)
            rows = matching.read_matches(path)
            np.testing.assert_allclose(rows, [
                [1.5, 2.25, 7.125, 8.0, 0.5], [3.0, 4.0, 5.0, 6.0, 0.25]])
            recovered = matching.match_indices(rows, kps_a, kps_b)
        np.testing.assert_array_equal(recovered.index_a, [0, 1])
        np.testing.assert_array_equal(recovered.index_b, [1, 0])

    def test_001_malformed(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, 'm.txt')
            with open(path, 'w') as fh:
                fh.write('1 2 3 4 0.5\n# comment\n1 2 3\n')
            with self.assertRaises(unifeat.common.FormatError):
                matching.read_matches(path)

    def test_002_unknown_coordinates(self):
        kps = _keypoints([[1.0, 1.0]])
        with self.assertRaises(unifeat.common.FormatError):
            matching.match_indices(
                np.array([[2.0, 2.0, 1.0, 1.0, 0.5]]), kps, kps)

    def test_003_colmap_block(self):
        fh = io.StringIO()
        matching.write_colmap_matches(
            fh, 'a.jpg', 'b.jpg', matching.MatchSet([0, 3], [2, 1], [1, 1]))
        self.assertEqual(fh.getvalue(), 'a.jpg b.jpg\n0 2\n3 1\n\n')


class TestPrograms(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        root = self.tmpdir.name
        eye = np.eye(3, dtype=np.float32)
        self.feat_a = os.path.join(root, 'a.feat')
        self.feat_b = os.path.join(root, 'b.feat')
        datastore.write_features(
            self.feat_a, _keypoints([[10, 10], [20, 20], [30, 30]]), eye,
            (64, 64), 4, 'teacher', 1)
        datastore.write_features(
            self.feat_b, _keypoints([[20, 20], [10, 10], [50, 50]]),
            eye[[1, 0, 2]], (64, 64), 4, 'teacher', 1)
        self.homography = os.path.join(root, 'H_1_2')
        with open(self.homography, 'w') as fh:
            fh.write('1 0 0\n0 1 0\n0 0 1\n')
        self.match_file = os.path.join(root, 'a_b.txt')

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_000_match(self):
        args = argparse.Namespace(
            features_a=self.feat_a, features_b=self.feat_b,
            output=self.match_file, homography=self.homography,
            thresholds=[1, 5])
        stdout = io.StringIO()
        with contextlib.redirect_stdout(stdout):
            matching.match(args)
        self.assertEqual(stdout.getvalue(), '1\t0.666667\n5\t0.666667\n')
        rows = matching.read_matches(self.match_file)
        np.testing.assert_allclose(rows[:, :4], [
            [10, 10, 10, 10], [20, 20, 20, 20], [30, 30, 50, 50]])
        np.testing.assert_allclose(rows[:, 4], 1.0)
        with open(self.match_file) as fh:
            self.assertEqual(fh.read().splitlines()[-2:],
                             ['# mma 1 0.666667', '# mma 5 0.666667'])

    def test_001_export(self):
        args = argparse.Namespace(
            features_a=self.feat_a, features_b=self.feat_b,
            output=self.match_file, homography=None, thresholds=[1])
        matching.match(args)
        pairs = os.path.join(self.tmpdir.name, 'pairs.txt')
        with open(pairs, 'w') as fh:
            fh.write('# name_a name_b feat_a feat_b matches\n')
            fh.write('a.jpg b.jpg {} {} {}\n'.format(
                self.feat_a, self.feat_b, self.match_file))
        out = os.path.join(self.tmpdir.name, 'colmap.txt')
        matching.export_matches(argparse.Namespace(pairs=pairs, output=out))
        with open(out) as fh:
            self.assertEqual(fh.read(), 'a.jpg b.jpg\n0 1\n1 0\n2 2\n\n')

    def test_002_dimension_mismatch(self):
        other = os.path.join(self.tmpdir.name, 'c.feat')
        datastore.write_features(
            other, _keypoints([[1, 1]]), np.ones((1, 5)), (64, 64), 4,
            'teacher', 1)
        args = argparse.Namespace(
            features_a=self.feat_a, features_b=other,
            output=self.match_file, homography=None, thresholds=[1])
        with self.assertRaises(unifeat.common.DimensionError):
            matching.match(args)
