import os
import tempfile
import unittest

import numpy as np

import unifeat.common
import unifeat.options
from unifeat import models
from unifeat.common import BlockFeatures, FeatureMap
from unifeat.test import mock_data


def _close(actual, expected):
    scale = max(1.0, float(np.abs(expected).max()))
    np.testing.assert_allclose(actual, expected, rtol=1e-4, atol=1e-4 * scale)


class TestBackbone(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.net = mock_data.tiny_net()
        cls.image = mock_data.texture_image(0)

    def test_000_block_strides(self):
        self.assertEqual(models.block_strides(), (4, 8, 16, 32))
        self.assertEqual(models.block_strides(dilated=True), (4, 4, 4, 8))

    def test_001_output_sizes(self):
        blocks = models.extract_block_features(self.net, self.image, 'train')
        self.assertEqual(
            [(b.height, b.width, b.channels) for b in blocks],
            [(24, 24, 16), (12, 12, 32), (6, 6, 64), (3, 3, 128)])
        self.assertEqual([b.stride for b in blocks], [4, 8, 16, 32])
        blocks = models.extract_block_features(self.net, self.image, 'test')
        self.assertEqual(
            [(b.height, b.width) for b in blocks],
            [(24, 24), (24, 24), (24, 24), (12, 12)])
        self.assertEqual([b.stride for b in blocks], [4, 4, 4, 8])

    def test_002_dilation_equivalence(self):
        standard = models.extract_block_features(self.net, self.image, 'train')
        dense = models.extract_block_features(self.net, self.image, 'test')
        _close(dense.c1.values, standard.c1.values)
        _close(dense.c2.values[::2, ::2], standard.c2.values)
        _close(dense.c3.values[::4, ::4], standard.c3.values)
        _close(dense.c4.values[::4, ::4], standard.c4.values)

    def test_003_non_negative(self):
        for mode in ('train', 'test'):
            blocks = models.extract_block_features(self.net, self.image, mode)
            for block in blocks:
                self.assertGreaterEqual(block.values.min(), 0.0)

    def test_004_small_image(self):
        with self.assertRaises(unifeat.common.DimensionError):
            models.extract_block_features(
                self.net, np.zeros((32, 80, 3), np.float32))

    def test_005_bad_mode(self):
        with self.assertRaises(ValueError):
            models.extract_block_features(self.net, self.image, 'other')

    def test_006_dilated_copy_shares_weights(self):
        dense = models.build_dilated_backbone(self.net)
        self.assertEqual(dense.name, 'resnet_tiny_dilated')
        source = self.net.backbone.get_layer('conv4_block1_2_conv')
        target = dense.get_layer('conv4_block1_2_conv')
        np.testing.assert_array_equal(
            source.get_weights()[0], target.get_weights()[0])
        self.assertEqual(target.dilation_rate, (4, 4))

    def test_007_local_blocks_skip_last_stage(self):
        local = models.build_dilated_backbone(self.net, local_only=True)
        self.assertEqual(len(local.outputs), 2)
        self.assertFalse(
            any(layer.name.startswith('conv5_') for layer in local.layers))
        blocks = models.extract_local_blocks(self.net, self.image, local)
        self.assertIsNone(blocks.c1)
        self.assertIsNone(blocks.c4)
        dense = models.extract_block_features(self.net, self.image, 'test')
        for got, expected in ((blocks.c2, dense.c2), (blocks.c3, dense.c3)):
            self.assertEqual(got.stride, 4)
            _close(got.values, expected.values)
        _close(
            models.concat_local_features(blocks).values,
            models.concat_local_features(dense).values)


class TestBuild(unittest.TestCase):

    def test_000_unknown_backbone(self):
        with self.assertRaises(unifeat.common.ConfigError):
            models.build_backbone('vgg')

    def test_001_weights_sources(self):
        backbone = models.build_backbone('resnet_tiny')
        self.assertEqual(
            models.load_backbone_weights(backbone, 'resnet_tiny', 'random'),
            'random')
        with self.assertRaises(unifeat.common.ConfigError):
            models.load_backbone_weights(backbone, 'resnet_tiny', 'imagenet')
        with self.assertRaises(unifeat.common.CheckpointError):
            models.load_backbone_weights(
                backbone, 'resnet_tiny', '/no/such/weights.h5')

    def test_002_weights_file(self):
        backbone = models.build_backbone('resnet_tiny')
        other = models.build_backbone('resnet_tiny')
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, 'backbone.h5')
            backbone.save_weights(path)
            models.load_backbone_weights(other, 'resnet_tiny', path)
        for a, b in zip(backbone.get_weights(), other.get_weights()):
            np.testing.assert_array_equal(a, b)

    def test_003_uninitialised(self):
        net = models.build_joint_net(
            backbone='resnet_tiny', dims=mock_data.tiny_dims,
            fpn_width=mock_data.tiny_fpn_width)
        self.assertIsNone(net.weights_source)
        with self.assertRaises(unifeat.common.StateError):
            models.extract_block_features(net, mock_data.texture_image(1))

    def test_004_model_function(self):
        config = mock_data.tiny_config(gem_p=4.0, freeze_policy='none')
        net = models.model_function_from_config(config)(
            backbone_weights='random')
        self.assertEqual(net.backbone_name, 'resnet_tiny')
        self.assertEqual(net.gem.p, 4.0)
        self.assertEqual(net.freeze_policy, 'none')
        self.assertEqual(net.head.block_channels_in, (32, 64))
        self.assertEqual(net.head.block_channels_out, mock_data.tiny_dims)
        self.assertEqual(net.frozen_layer_names(), [])

    def test_005_freeze_policy(self):
        net = mock_data.tiny_net()
        frozen = net.apply_freeze_policy()
        self.assertIn('conv4_block1_2_conv', frozen)
        self.assertNotIn('conv5_block1_2_conv', frozen)
        self.assertFalse(net.backbone.get_layer('conv2_block1_1_conv').trainable)
        self.assertTrue(net.backbone.get_layer('conv5_block1_1_conv').trainable)

    def test_006_joint_outputs(self):
        net = mock_data.tiny_net()
        image = mock_data.texture_image(2)[np.newaxis]
        outputs = net(image)
        self.assertEqual(outputs['teacher'].shape, (1, 12, 12, 96))
        self.assertEqual(outputs['student'].shape, (1, 12, 12, 24))
        self.assertEqual(outputs['global'].shape, (1, 32))
        self.assertAlmostEqual(
            float(np.linalg.norm(outputs['global'].numpy())), 1.0, places=5)


class TestConcatAndPyramid(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.net = mock_data.tiny_net()
        cls.image = mock_data.texture_image(3)

    def test_000_concat_same_grid(self):
        blocks = models.extract_block_features(self.net, self.image, 'test')
        fmap = models.concat_local_features(blocks)
        self.assertEqual(fmap.block_channels, (32, 64))
        self.assertEqual(fmap.stride, 4)
        np.testing.assert_array_equal(fmap.block(0).values, blocks.c2.values)
        np.testing.assert_array_equal(fmap.block(1).values, blocks.c3.values)

    def test_001_concat_resamples(self):
        blocks = models.extract_block_features(self.net, self.image, 'train')
        fmap = models.concat_local_features(blocks)
        self.assertEqual(
            (fmap.height, fmap.width, fmap.channels), (12, 12, 96))
        self.assertEqual(fmap.stride, 8)

    def test_002_concat_bad_sizes(self):
        small = FeatureMap(np.zeros((2, 2, 3)), 8)
        large = FeatureMap(np.zeros((4, 4, 5)), 16)
        with self.assertRaises(unifeat.common.DimensionError):
            models.concat_local_features(
                BlockFeatures(small, small, large, large))

    def test_003_pyramid(self):
        blocks = models.extract_block_features(self.net, self.image, 'train')
        pyramid = models.build_fpn(self.net, blocks)
        for level, block in zip(pyramid, blocks):
            self.assertEqual(
                (level.height, level.width, level.channels),
                (block.height, block.width, mock_data.tiny_fpn_width))
            self.assertEqual(level.stride, block.stride)
            self.assertGreaterEqual(level.values.min(), 0.0)

    def test_004_pyramid_bad_sizes(self):
        blocks = models.extract_block_features(self.net, self.image, 'train')
        swapped = BlockFeatures(blocks.c1, blocks.c2, blocks.c3, blocks.c2)
        with self.assertRaises(unifeat.common.DimensionError):
            models.build_fpn(self.net, swapped)


class TestCheckpoints(unittest.TestCase):

    def test_000_missing_file(self):
        with self.assertRaises(unifeat.common.CheckpointError):
            models.resolve_checkpoint('/no/such/checkpoint.h5')

    def test_001_cached_url(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = os.path.join(tmpdir, 'cached.h5')
            with open(path, 'w') as fh:
                fh.write('placeholder')
            previous = os.environ.get(unifeat.options.cache_env_var)
            os.environ[unifeat.options.cache_env_var] = tmpdir
            try:
                resolved = models.resolve_checkpoint(
                    'https://example.invalid/models/cached.h5')
            finally:
                if previous is None:
                    del os.environ[unifeat.options.cache_env_var]
                else:
                    os.environ[unifeat.options.cache_env_var] = previous
        self.assertEqual(resolved, path)

    def test_002_failed_download(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            previous = os.environ.get(unifeat.options.cache_env_var)
            os.environ[unifeat.options.cache_env_var] = tmpdir
            try:
                with self.assertRaises(models.DownloadError):
                    models.resolve_checkpoint(
                        'http://127.0.0.1:9/not_a_checkpoint.h5')
            finally:
                if previous is None:
                    del os.environ[unifeat.options.cache_env_var]
                else:
                    os.environ[unifeat.options.cache_env_var] = previous
