import unittest

import numpy as np
import tensorflow as tf

import unifeat.common
import unifeat.keras_ext
from unifeat import losses


def _unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class TestAffinity(unittest.TestCase):

    def test_000_hand_case(self):
        m = tf.constant([[0.9, 0.1], [0.2, 0.8], [0.5, 0.4]], tf.float64)
        self.assertAlmostEqual(
            float(losses.affinity_score(m)), 0.7916666666666667, places=12)

    def test_001_identical_sets(self):
        rng = np.random.default_rng(0)
        d = tf.constant(_unit(rng, 12, 8))
        score = losses.affinity_score(losses.affinity_matrix(d, d))
        self.assertAlmostEqual(float(score), 1.0, places=12)

    def test_002_batched_and_errors(self):
        rng = np.random.default_rng(1)
        a = tf.constant(_unit(rng, 2, 3, 5, 4))
        b = tf.constant(_unit(rng, 2, 3, 6, 4))
        self.assertEqual(losses.affinity_matrix(a, b).shape, (2, 3, 5, 6))
        self.assertEqual(
            losses.affinity_score(losses.affinity_matrix(a, b)).shape, (2, 3))
        with self.assertRaises(unifeat.common.DimensionError):
            losses.affinity_matrix(tf.ones((2, 3)), tf.ones((2, 4)))
        with self.assertRaises(ValueError):
            losses.affinity_score(tf.zeros((0, 3)))


class TestMarginLoss(unittest.TestCase):

    def test_000_hand_case(self):
        loss = losses.matching_margin_loss(
            tf.constant(0.8, tf.float64), tf.constant([0.5, 0.9], tf.float64),
            0.5)
        self.assertAlmostEqual(float(loss), 0.4, places=12)

    def test_001_satisfied_margin(self):
        loss = losses.matching_margin_loss(
            tf.constant([0.9, 1.0], tf.float64),
            tf.constant([[0.1, 0.3], [0.5, 0.2]], tf.float64), 0.5)
        np.testing.assert_allclose(loss.numpy(), [0.0, 0.0])

    def test_002_needs_negatives(self):
        with self.assertRaises(ValueError):
            losses.matching_margin_loss(
                tf.constant([0.5]), tf.zeros((1, 0)), 0.5)


class TestSoftDetection(unittest.TestCase):

    def test_000_distribution(self):
        rng = np.random.default_rng(2)
        fmap = tf.constant(rng.random((2, 7, 9, 5)))
        scores = losses.soft_detection(fmap).numpy()
        self.assertEqual(scores.shape, (2, 7, 9))
        self.assertTrue(np.all(scores >= 0))
        np.testing.assert_allclose(scores.sum(axis=(1, 2)), 1.0, atol=1e-12)

    def test_001_zero_map_is_uniform(self):
        scores = losses.soft_detection(tf.zeros((4, 5, 3), tf.float64))
        np.testing.assert_allclose(scores.numpy(), 1.0 / 20)

    def test_002_peak_is_highest(self):
        fmap = np.full((9, 9, 2), 0.1)
        fmap[4, 6, 1] = 5.0
        scores = losses.soft_detection(tf.constant(fmap)).numpy()
        self.assertEqual(
            np.unravel_index(np.argmax(scores), scores.shape), (4, 6))

    def test_003_loop_oracle(self):
        rng = np.random.default_rng(9)
        values = rng.random((6, 6, 4))
        h, w, c = values.shape

        def mirror(i, n):
            # symmetric padding repeats the edge cell
            return -i - 1 if i < 0 else 2 * n - i - 1 if i >= n else i

        raw = np.zeros((h, w))
        for y in range(h):
            for x in range(w):
                best = 0.0
                for k in range(c):
                    top = values[:, :, k].max()
                    window = sum(
                        np.exp(values[mirror(y + dy, h), mirror(x + dx, w), k]
                               - top)
                        for dy in (-1, 0, 1) for dx in (-1, 0, 1))
                    alpha = np.exp(values[y, x, k] - top) / window
                    best = max(best, alpha * values[y, x, k] / top)
                raw[y, x] = best
        scores = losses.soft_detection(tf.constant(values), window=3).numpy()
        np.testing.assert_allclose(scores, raw / raw.sum(), atol=1e-12)


class TestDistillation(unittest.TestCase):

    def test_000_weights_have_unit_mean(self):
        rng = np.random.default_rng(3)
        det_a = rng.random(6)
        det_p = rng.random(4)
        det_a /= det_a.sum()
        det_p /= det_p.sum()
        w = losses.distillation_weights(
            tf.constant(det_a), tf.constant(det_p)).numpy()
        self.assertEqual(w.shape, (6, 4))
        self.assertAlmostEqual(w.mean(), 1.0, places=12)
        uniform = losses.distillation_weights(
            tf.fill([5], 0.2), tf.fill([5], 0.2)).numpy()
        np.testing.assert_allclose(uniform, 1.0, rtol=1e-6)

    def test_001_zero_at_target(self):
        rng = np.random.default_rng(4)
        m_high = rng.normal(size=(5, 3))
        det_a = np.full(5, 0.2)
        det_p = np.array([0.5, 0.25, 0.25])
        target = m_high * np.outer(det_a, det_p) * 15
        loss = losses.distillation_loss(m_high, det_a, det_p, target)
        self.assertAlmostEqual(float(loss), 0.0, places=12)
        loss = losses.distillation_loss(m_high, det_a, det_p, target + 0.5)
        self.assertAlmostEqual(float(loss), 0.25, places=12)

    def test_002_shape_mismatch(self):
        with self.assertRaises(unifeat.common.DimensionError):
            losses.distillation_loss(
                np.zeros((3, 3)), np.ones(3) / 3, np.ones(3) / 3,
                np.zeros((3, 4)))


class TestContrastive(unittest.TestCase):

    def test_000_cases(self):
        a = tf.constant([1.0, 0.0], tf.float64)
        b = tf.constant([0.0, 1.0], tf.float64)
        self.assertEqual(float(losses.contrastive_loss(a, a, 1, 0.85)), 0.0)
        self.assertAlmostEqual(
            float(losses.contrastive_loss(a, b, 1, 0.85)), 1.0, places=12)
        # distance sqrt(2) beyond the margin
        self.assertEqual(float(losses.contrastive_loss(a, b, 0, 0.85)), 0.0)
        self.assertAlmostEqual(
            float(losses.contrastive_loss(a, a, 0, 0.85)), 0.36125,
            places=5)


class TestGradients(unittest.TestCase):

    def test_000_affinity_score_gradient(self):
        rng = np.random.default_rng(5)
        y = tf.constant(_unit(rng, 4, 6))

        def score(x):
            return losses.affinity_score(
                losses.affinity_matrix(losses.l2_normalize(x), y))

        x = tf.constant(rng.normal(size=(5, 6)))
        theoretical, numerical = tf.test.compute_gradient(score, [x])
        np.testing.assert_allclose(
            theoretical[0], numerical[0], atol=1e-5)

    def test_001_contrastive_gradient(self):
        rng = np.random.default_rng(6)
        b = tf.constant(_unit(rng, 8) * 0.1)

        def loss(a):
            return losses.contrastive_loss(a, b, 0, 0.85)

        a = tf.constant(_unit(rng, 8) * 0.1)
        theoretical, numerical = tf.test.compute_gradient(loss, [a])
        np.testing.assert_allclose(
            theoretical[0], numerical[0], atol=1e-5)

    def test_002_safe_norm_at_zero(self):
        x = tf.zeros((3,), tf.float64)
        with tf.GradientTape() as tape:
            tape.watch(x)
            n = losses.safe_norm(x)
        grad = tape.gradient(n, x).numpy()
        self.assertTrue(np.all(np.isfinite(grad)))
        np.testing.assert_array_equal(
            losses.l2_normalize(tf.zeros((2, 3))).numpy(), 0.0)

    def _check(self, f, *xs):
        # small steps keep finite differences clear of hinge and max kinks
        theoretical, numerical = tf.test.compute_gradient(f, xs, delta=1e-6)
        for t, n in zip(theoretical, numerical):
            scale = max(1.0, float(np.abs(n).max()))
            np.testing.assert_allclose(t, n, rtol=1e-4, atol=1e-4 * scale)

    def test_003_margin_loss_gradient(self):
        rng = np.random.default_rng(10)
        s_ap = tf.constant(rng.uniform(-1, 1, size=3))
        s_an = tf.constant(rng.uniform(-1, 1, size=(3, 4)))

        def loss(s_ap, s_an):
            return losses.matching_margin_loss(s_ap, s_an, 0.5)

        self._check(loss, s_ap, s_an)

    def test_004_distillation_gradient(self):
        rng = np.random.default_rng(11)
        det_a = rng.random(4)
        det_p = rng.random(5)
        inputs = [
            tf.constant(rng.uniform(-1, 1, size=(4, 5))),
            tf.constant(det_a / det_a.sum()), tf.constant(det_p / det_p.sum()),
            tf.constant(rng.uniform(-1, 1, size=(4, 5)))]
        self._check(losses.distillation_loss, *inputs)

    def test_005_soft_detection_gradient(self):
        rng = np.random.default_rng(12)
        fmap = tf.constant(rng.uniform(0.1, 1.0, size=(6, 6, 4)))
        self._check(losses.soft_detection, fmap)

    def test_006_gem_gradient(self):
        rng = np.random.default_rng(13)
        x = tf.constant(rng.uniform(0.1, 1.0, size=(1, 6, 6, 4)))
        self._check(lambda x: unifeat.keras_ext.gem(x, p=3.0), x)

    def test_007_reduction_head_gradient(self):
        head = unifeat.keras_ext.ReductionHead(
            (2, 2), (1, 2), drop_prob=0.3, dtype='float64')
        rng = np.random.default_rng(14)
        x = tf.constant(rng.normal(size=(1, 6, 6, 4)))
        head(x)
        self._check(lambda x: head(x, training=False), x)


class TestTotalLoss(unittest.TestCase):

    def _inputs(self, seed=7, tuples=3):
        rng = np.random.default_rng(seed)
        b2 = rng.random((2, tuples, 6, 6, 4))
        b3 = rng.random((2, tuples, 3, 3, 6))
        teacher = rng.random((2, tuples, 6, 6, 10))
        student = rng.normal(size=(2, tuples, 6, 6, 5))
        global_desc = _unit(rng, 2, tuples, 8)
        return [tf.constant(v) for v in
                (b2, b3, teacher, student, global_desc)]

    def test_000_terms(self):
        b2, b3, teacher, student, global_desc = self._inputs()
        terms = losses.total_loss(
            b2, b3, teacher, student, global_desc, losses.LossConfig())
        self.assertEqual(
            set(terms),
            {'L_M_B2', 'L_M_B3', 'L_M_student', 'L_C', 'L_Dis', 'total'})
        values = {k: float(v) for k, v in terms.items()}
        for v in values.values():
            self.assertTrue(np.isfinite(v))
            self.assertGreaterEqual(v, 0.0)
        expected = values['L_M_B2'] + values['L_M_B3'] + \
            values['L_M_student'] + values['L_C'] + 0.1 * values['L_Dis']
        self.assertAlmostEqual(values['total'], expected, places=10)

    def test_001_location_cap(self):
        b2, b3, teacher, student, global_desc = self._inputs(seed=8)
        terms = losses.total_loss(
            b2, b3, teacher, student, global_desc, losses.LossConfig(),
            location_cap=5)
        for v in terms.values():
            self.assertTrue(np.isfinite(float(v)))

    def test_002_gradient_cut(self):
        b2, b3, teacher, student, global_desc = self._inputs(seed=9)
        for cut in (False, True):
            with tf.GradientTape() as tape:
                tape.watch(teacher)
                terms = losses.total_loss(
                    b2, b3, teacher, student, global_desc,
                    losses.LossConfig(), gradient_cut=cut)
            grad = tape.gradient(terms['L_Dis'], teacher)
            if cut:
                self.assertIsNone(grad)
            else:
                self.assertGreater(float(tf.reduce_sum(tf.abs(grad))), 0.0)

    def test_003_invalid_config(self):
        with self.assertRaises(unifeat.common.ConfigError):
            losses.LossConfig(window=4)
        with self.assertRaises(unifeat.common.ConfigError):
            losses.LossConfig(margin_m=0)
