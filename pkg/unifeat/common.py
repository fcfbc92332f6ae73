"""Commonly used data structures and functions."""
import collections
import errno
import logging
import os

import numpy as np

import unifeat.options


class DimensionError(ValueError):
    """Raised when array shapes, sizes or dimensions are incompatible."""


class StateError(RuntimeError):
    """Raised when an object is used before it is ready (e.g. no weights)."""


class ConfigError(ValueError):
    """Raised for unknown configuration keys or out-of-range values."""


class ManifestError(ValueError):
    """Raised for a malformed line in a training manifest."""

    def __init__(self, line_number, msg):
        """Initialize the error.

        :param line_number: one-based line number of the offending record,
            `None` for problems with the manifest as a whole.
        :param msg: description of the problem.
        """
        self.line_number = line_number
        if line_number is None:
            super().__init__('Manifest: {}'.format(msg))
        else:
            super().__init__('Manifest line {}: {}'.format(line_number, msg))


class FormatError(ValueError):
    """Raised when a feature, descriptor or homography file is malformed."""


class CheckpointError(ValueError):
    """Raised when a checkpoint is missing or unsuitable for a task."""


class ImageReadError(IOError):
    """Raised when an image file cannot be read or decoded."""


class NonFiniteLossError(RuntimeError):
    """Raised when training produces a non-finite loss."""


_FeatureMap = collections.namedtuple(
    'FeatureMap', ['values', 'stride', 'block_channels'])


class FeatureMap(_FeatureMap):
    """A channels-last activation grid with a known stride to the image.

    :param values: (H, W, C) array.
    :param stride: image pixels per grid cell.
    :param block_channels: for concatenated maps, the channel count of each
        constituent block in order, otherwise `None`.
    """

    def __new__(cls, values, stride, block_channels=None):
        values = np.asarray(values)
        if values.ndim != 3:
            raise DimensionError(
                'FeatureMap requires an (H, W, C) array, got shape {}.'.format(
                    values.shape))
        if block_channels is not None:
            block_channels = tuple(int(c) for c in block_channels)
            if sum(block_channels) != values.shape[2]:
                raise DimensionError(
                    'Block channels {} do not sum to {}.'.format(
                        block_channels, values.shape[2]))
        return super().__new__(cls, values, stride, block_channels)

    @property
    def height(self):
        """Number of grid rows."""
        return self.values.shape[0]

    @property
    def width(self):
        """Number of grid columns."""
        return self.values.shape[1]

    @property
    def channels(self):
        """Number of channels."""
        return self.values.shape[2]

    @property
    def origin_offset(self):
        """Image position of the centre of cell (0, 0)."""
        return self.stride / 2.0

    def to_image(self, xy):
        """Map feature grid coordinates (x=column, y=row) to image pixels."""
        return np.asarray(xy, dtype=np.float64) * self.stride + \
            self.origin_offset

    def to_feature(self, xy):
        """Map image pixel coordinates to (fractional) grid coordinates."""
        return (np.asarray(xy, dtype=np.float64) - self.origin_offset) / \
            self.stride

    def block(self, index):
        """Return the channels of one constituent block as a `FeatureMap`."""
        if self.block_channels is None:
            raise DimensionError('Feature map is not a block concatenation.')
        start = sum(self.block_channels[:index])
        end = start + self.block_channels[index]
        return FeatureMap(self.values[:, :, start:end], self.stride)

    def amend(self, **kwargs):
        """Create new `FeatureMap` with some attributes changed."""
        d = dict(zip(self._fields, self))
        for k, v in kwargs.items():
            if k not in self._fields:
                raise KeyError('Invalid key for FeatureMap: {}'.format(k))
            d[k] = v
        return FeatureMap(**d)


BlockFeatures = collections.namedtuple(
    'BlockFeatures', ['c1', 'c2', 'c3', 'c4'])
BlockFeatures.__doc__ = \
    """`FeatureMap` outputs of the last four residual blocks (B1..B4)."""

FeaturePyramid = collections.namedtuple(
    'FeaturePyramid', ['f1', 'f2', 'f3', 'f4'])
FeaturePyramid.__doc__ = \
    """Top-down merged pyramid levels, one `FeatureMap` per block."""


_KeypointSet = collections.namedtuple(
    'KeypointSet', ['xy', 'scores', 'group_ids', 'feature_xy', 'refined'])


class KeypointSet(_KeypointSet):
    """Subpixel keypoints in image coordinates.

    :param xy: (N, 2) float image coordinates (x=column, y=row).
    :param scores: (N,) response values.
    :param group_ids: (N,) int group index, 0 for the channel-max detector.
    :param feature_xy: (N, 2) int grid cell each keypoint was detected at.
    :param refined: (N,) bool, whether subpixel refinement was applied.
    """

    @classmethod
    def empty(cls):
        """Create a set with no keypoints."""
        return cls(
            xy=np.zeros((0, 2), dtype=np.float64),
            scores=np.zeros(0, dtype=np.float64),
            group_ids=np.zeros(0, dtype=np.int64),
            feature_xy=np.zeros((0, 2), dtype=np.int64),
            refined=np.zeros(0, dtype=bool))

    @classmethod
    def from_array(cls, array):
        """Create a set from an (N, 4) array of x, y, score, group_id."""
        array = np.asarray(array)
        n = len(array)
        return cls(
            xy=array[:, 0:2].astype(np.float64),
            scores=array[:, 2].astype(np.float64),
            group_ids=array[:, 3].astype(np.int64),
            feature_xy=np.full((n, 2), -1, dtype=np.int64),
            refined=np.zeros(n, dtype=bool))

    def __len__(self):
        return len(self.scores)

    def take(self, indices):
        """Select a subset of keypoints (in the given order)."""
        indices = np.asarray(indices, dtype=np.int64)
        return KeypointSet(*(field[indices] for field in self))

    def as_array(self):
        """Return an (N, 4) float32 array of x, y, score, group_id."""
        out = np.empty((len(self), 4), dtype=np.float32)
        out[:, 0:2] = self.xy
        out[:, 2] = self.scores
        out[:, 3] = self.group_ids
        return out

    @staticmethod
    def concatenate(sets):
        """Join several keypoint sets into one."""
        sets = list(sets)
        if len(sets) == 0:
            return KeypointSet.empty()
        return KeypointSet(*(
            np.concatenate([getattr(s, f) for s in sets])
            for f in KeypointSet._fields))


_DescriptorSet = collections.namedtuple(
    'DescriptorSet', ['vectors', 'flags'])


class DescriptorSet(_DescriptorSet):
    """Unit-norm descriptors aligned with a `KeypointSet` or a grid.

    `flags` is a per-row bit field of `ZERO` (the raw vector was zero and
    has not been normalised) and `CLAMPED` (the sample location lay outside
    the map and was clamped to the border).
    """

    ZERO = 1
    CLAMPED = 2

    def __new__(cls, vectors, flags=None):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2:
            raise DimensionError(
                'Descriptors must be an (N, D) array, got shape {}.'.format(
                    vectors.shape))
        if flags is None:
            flags = np.zeros(len(vectors), dtype=np.uint8)
        return super().__new__(cls, vectors, np.asarray(flags, np.uint8))

    @property
    def dim(self):
        """Descriptor dimension."""
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]


GlobalDescriptor = collections.namedtuple(
    'GlobalDescriptor', ['vector', 'level_dims', 'is_zero'])
GlobalDescriptor.__doc__ = \
    """Unit-norm concatenation of per-level pooled pyramid outputs."""


def l2_normalize(array, axis=-1):
    """Normalise vectors to unit L2 norm along an axis.

    Zero vectors are left untouched.

    :param array: input array.
    :param axis: axis along which to normalise.

    :returns: (normalised array, boolean mask of zero vectors).
    """
    array = np.asarray(array)
    norm = np.linalg.norm(array, axis=axis, keepdims=True)
    is_zero = norm == 0
    out = array / np.where(is_zero, 1, norm)
    return out, np.squeeze(is_zero, axis=axis)


def check_image(image):
    """Validate an (H, W, 3) image array.

    :param image: image array.

    :raises: `DimensionError` for wrong shape, small size or non-finite
        values.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(
            'Images must be (H, W, 3) arrays, got shape {}.'.format(
                image.shape))
    min_size = unifeat.options.min_image_size
    if image.shape[0] < min_size or image.shape[1] < min_size:
        raise DimensionError(
            'Image of size {}x{} is smaller than the minimum {}x{}.'.format(
                image.shape[1], image.shape[0], min_size, min_size))
    if not np.all(np.isfinite(image)):
        raise DimensionError('Image contains non-finite values.')
    return image


def read_image(path, size=None):
    """Read an image file as float32 RGB in [0, 1].

    :param path: image filepath.
    :param size: optional (width, height) to resize to.

    :returns: (H, W, 3) float32 array.
    """
    import cv2
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise ImageReadError('Could not read image {}.'.format(path))
    if size is not None:
        bgr = cv2.resize(bgr, tuple(size), interpolation=cv2.INTER_AREA)
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return rgb.astype(np.float32) / 255.0


def resize_image(image, scale):
    """Resize an image by a scale factor.

    :param image: (H, W, 3) float array.
    :param scale: multiplicative factor for both sides.

    :returns: resized image.
    """
    import cv2
    h, w = image.shape[:2]
    size = (max(1, int(round(w * scale))), max(1, int(round(h * scale))))
    return cv2.resize(image, size, interpolation=cv2.INTER_AREA)


def mkdir_p(path, info=None):
    """Make a directory if it doesn't exist."""
    try:
        os.makedirs(path)
    except OSError as exc:
        if exc.errno == errno.EEXIST and os.path.isdir(path):
            if info is not None:
                info = " {}".format(info)
                logging.warning("The path {} exists.{}".format(path, info))
        else:
            raise


def get_named_logger(name):
    """Create a logger with a name."""
    logger = logging.getLogger('{}.{}'.format(__package__, name))
    logger.name = name
    return logger
