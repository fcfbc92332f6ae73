"""Local descriptors: dimension reduction, sampling and extraction modes."""
import collections
import os

import numpy as np

import unifeat.common
import unifeat.detector
import unifeat.global_desc
import unifeat.models
from unifeat.common import DescriptorSet, FeatureMap


logger = unifeat.common.get_named_logger('Extract')

ExtractionMode = collections.namedtuple(
    'ExtractionMode', ['detector_source', 'descriptor_source'])
ExtractionMode.__doc__ = """Which map ('teacher' or 'student') is used for
detection and which for description."""

extraction_modes = {
    'teacher': ExtractionMode('teacher', 'teacher'),
    'TS': ExtractionMode('teacher', 'student'),
    'SS': ExtractionMode('student', 'student'),
}

ExtractionResult = collections.namedtuple(
    'ExtractionResult',
    ['keypoints', 'descriptors', 'global_descriptor', 'image_size',
     'stride', 'mode'])


def reduce_dim(fmap, head, training=False):
    """Apply the reduction head to a concatenated block map.

    :param fmap: `FeatureMap` with `block_channels` set.
    :param head: `unifeat.keras_ext.ReductionHead`.
    :param training: apply channel dropout.

    :returns: `FeatureMap` with the head's output block widths.
    """
    if fmap.block_channels is not None and \
            tuple(fmap.block_channels) != head.block_channels_in:
        raise unifeat.common.DimensionError(
            'Head expects blocks of {} channels, map has {}.'.format(
                head.block_channels_in, fmap.block_channels))
    if fmap.channels != sum(head.block_channels_in):
        raise unifeat.common.DimensionError(
            'Head expects {} channels, map has {}.'.format(
                sum(head.block_channels_in), fmap.channels))
    values = np.asarray(fmap.values)[np.newaxis]
    out = head(values.astype(head.dtype), training=training).numpy()[0]
    return FeatureMap(
        out, fmap.stride, block_channels=head.block_channels_out)


def normalize_map(fmap):
    """Unit-normalise the descriptor at every location of a map."""
    values, _ = unifeat.common.l2_normalize(fmap.values, axis=2)
    return fmap.amend(values=values)


def sample_descriptors(fmap, keypoints):
    """Bilinearly interpolate a map at keypoint positions.

    Positions outside the grid are clamped to the border and flagged
    `DescriptorSet.CLAMPED`; vectors with zero norm are left as zeros
    and flagged `DescriptorSet.ZERO`.

    :param fmap: `FeatureMap`.
    :param keypoints: `KeypointSet` or (N, 2) image coordinates.

    :returns: `DescriptorSet` aligned with `keypoints`.
    """
    xy = np.asarray(getattr(keypoints, 'xy', keypoints), dtype=np.float64)
    xy = xy.reshape(-1, 2)
    if len(xy) == 0:
        return DescriptorSet(np.zeros((0, fmap.channels), dtype=np.float32))
    values = np.asarray(fmap.values, dtype=np.float64)
    fx, fy = fmap.to_feature(xy).T
    max_x, max_y = fmap.width - 1, fmap.height - 1
    clamped = (fx < 0) | (fx > max_x) | (fy < 0) | (fy > max_y)
    fx = np.clip(fx, 0, max_x)
    fy = np.clip(fy, 0, max_y)

    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, max_x)
    y1 = np.minimum(y0 + 1, max_y)
    wx = (fx - x0)[:, np.newaxis]
    wy = (fy - y0)[:, np.newaxis]
    vectors = \
        (1 - wx) * (1 - wy) * values[y0, x0] + \
        wx * (1 - wy) * values[y0, x1] + \
        (1 - wx) * wy * values[y1, x0] + \
        wx * wy * values[y1, x1]
    vectors, is_zero = unifeat.common.l2_normalize(vectors, axis=1)

    flags = np.zeros(len(xy), dtype=np.uint8)
    flags[is_zero] |= DescriptorSet.ZERO
    flags[clamped] |= DescriptorSet.CLAMPED
    return DescriptorSet(vectors.astype(np.float32), flags)


def teacher_descriptor_map(blocks):
    """The high dimensional teacher map: second and third blocks joined."""
    return unifeat.models.concat_local_features(blocks)


class FeatureExtractor(object):
    """Keypoints, local descriptors and a global descriptor for images."""

    def __init__(self, net, config):
        """Initialize extraction.

        :param net: `unifeat.keras_ext.JointNet` with initialised weights.
        :param config: `unifeat.config.RunConfig`, `mode` selects the
            detection and description maps.
        """
        self.net = net
        self.config = config
        self.mode = extraction_modes[config.mode]
        if 'student' in self.mode and not net.head_trained:
            raise unifeat.common.CheckpointError(
                "Mode '{}' requires a trained checkpoint.".format(
                    config.mode))
        self.detector_config = \
            unifeat.detector.DetectorConfig.from_run_config(config)
        self.detect = unifeat.detector.detectors[config.detector]
        if self.detect is unifeat.detector.detect_gcdad:
            # fail on a bad G before running the network
            unifeat.detector.partition_channels(
                self.detection_channels, self.detector_config.n_groups)
        self._dilated = None
        self.logger = unifeat.common.get_named_logger('Extract')

    @property
    def detection_channels(self):
        """Channel count of the map keypoints are detected on."""
        if self.mode.detector_source == 'student':
            return sum(self.net.head.block_channels_out)
        return sum(self.net.head.block_channels_in)

    @property
    def dilated_backbone(self):
        """Dense backbone up to the third block, created on first use."""
        if self._dilated is None:
            self._dilated = unifeat.models.build_dilated_backbone(
                self.net, local_only=True)
        return self._dilated

    def refresh(self):
        """Copy current network weights into the dense backbone."""
        if self._dilated is not None:
            unifeat.models.transfer_weights(self.net.backbone, self._dilated)

    def local_maps(self, image):
        """Teacher and (if needed) student maps at stride 4.

        :returns: dict of 'teacher' / 'student': `FeatureMap`.
        """
        blocks = unifeat.models.extract_local_blocks(
            self.net, image, self.dilated_backbone)
        maps = {'teacher': teacher_descriptor_map(blocks)}
        if 'student' in self.mode:
            maps['student'] = reduce_dim(
                maps['teacher'], self.net.head, training=False)
        return maps

    def global_descriptor(self, image):
        """Pyramid GeM descriptor, computed at the training strides."""
        blocks = unifeat.models.extract_block_features(
            self.net, image, 'train')
        pyramid = unifeat.models.build_fpn(self.net, blocks)
        return unifeat.global_desc.global_descriptor(
            pyramid, self.config.gem_p)

    def extract_local(self, image):
        """Keypoints and their descriptors.

        :param image: (H, W, 3) RGB array in [0, 1].

        :returns: (`KeypointSet`, `DescriptorSet`, stride).
        """
        image = unifeat.common.check_image(image)
        maps = self.local_maps(image)
        det_map = maps[self.mode.detector_source]
        desc_map = maps[self.mode.descriptor_source]
        keypoints = self.detect(det_map, self.detector_config)
        descriptors = sample_descriptors(desc_map, keypoints)
        self.logger.debug('{} keypoints, dim {}.'.format(
            len(keypoints), descriptors.dim))
        return keypoints, descriptors, det_map.stride

    def extract(self, image):
        """Run the full extraction on one image.

        :param image: (H, W, 3) RGB array in [0, 1].

        :returns: `ExtractionResult`.
        """
        keypoints, descriptors, stride = self.extract_local(image)
        return ExtractionResult(
            keypoints, descriptors, self.global_descriptor(image),
            (image.shape[1], image.shape[0]), stride, self.config.mode)


def create_extractor(config, checkpoint=None):
    """Build a `FeatureExtractor` from a config and optional checkpoint.

    Without a checkpoint the network is built from `config` with its
    `backbone_weights`; the reduction head is then untrained and only the
    'teacher' mode is available.
    """
    if checkpoint is not None:
        net, _, epoch = unifeat.models.open_checkpoint(checkpoint)
        logger.info('Loaded checkpoint {} (epoch {}).'.format(
            checkpoint, epoch))
    else:
        if 'student' in extraction_modes[config.mode]:
            raise unifeat.common.CheckpointError(
                "Mode '{}' requires a checkpoint.".format(config.mode))
        net = unifeat.models.model_function_from_config(config)(
            backbone_weights=config.backbone_weights)
    return FeatureExtractor(net, config)


def _image_id(path):
    return os.path.splitext(os.path.basename(path))[0]


def extract(args):
    """Extraction program: feature and global descriptor files per image."""
    import unifeat.config
    import unifeat.datastore
    import unifeat.executor

    config = unifeat.config.load_config(args.config, args.set)
    extractor = create_extractor(config, args.checkpoint)
    unifeat.common.mkdir_p(args.output)
    index = None
    if args.index is not None:
        index = unifeat.datastore.IndexDirectory(args.index)

    images = unifeat.executor.prefetch(
        unifeat.common.read_image, args.images, threads=args.threads)
    for path, image in images:
        if isinstance(image, Exception):
            raise image
        result = extractor.extract(image)
        image_id = _image_id(path)
        unifeat.datastore.write_features(
            os.path.join(args.output, image_id + '.feat'),
            result.keypoints, result.descriptors, result.image_size,
            result.stride, result.mode, config.G)
        unifeat.datastore.write_global(
            os.path.join(args.output, image_id + '.gdesc'),
            result.global_descriptor, image_id)
        if index is not None:
            index.add(image_id, result.global_descriptor)
        if result.global_descriptor.is_zero:
            logger.warning('Global descriptor of {} is zero.'.format(path))
        print('{}\t{}\t{}'.format(
            path, len(result.keypoints), result.descriptors.dim))
