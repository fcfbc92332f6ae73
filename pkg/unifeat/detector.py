"""Keypoint detection on CNN feature maps.

Two detectors share one candidate chain (strict local maxima, relative
response threshold, Hessian edge test, second-order subpixel refinement):

* group-concept detection (GC-DAD) splits the channels into equal groups
  and detects on the L2 norm of every group separately, merging the
  resulting keypoint sets;
* the channel-max baseline (DAD) detects on the per-cell maximum across
  all channels.
"""
import collections

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

import unifeat.common
from unifeat.common import KeypointSet


GroupPartition = collections.namedtuple(
    'GroupPartition', ['ranges', 'n_groups', 'n_channels'])
GroupPartition.__doc__ = """Equal-width channel groups.

`ranges` holds one-based, end-inclusive (start, end) channel pairs.
"""

ResponseMap = collections.namedtuple('ResponseMap', ['values', 'group_id'])

_DetectorConfig = collections.namedtuple(
    'DetectorConfig',
    ['n_groups', 'rel_threshold', 'nms_radius', 'edge_ratio',
     'max_keypoints'])


class DetectorConfig(_DetectorConfig):
    """Parameters shared by both detectors."""

    def __new__(
            cls, n_groups=6, rel_threshold=0.2, nms_radius=1,
            edge_ratio=10.0, max_keypoints=5000):
        self = super().__new__(
            cls, int(n_groups), float(rel_threshold), int(nms_radius),
            float(edge_ratio), int(max_keypoints))
        self.validate()
        return self

    def validate(self):
        """Check parameter ranges.

        :raises: `unifeat.common.ConfigError`
        """
        checks = (
            (self.n_groups >= 1, 'n_groups must be >= 1'),
            (0 < self.rel_threshold < 1, 'rel_threshold must be in (0, 1)'),
            (self.nms_radius >= 1, 'nms_radius must be >= 1'),
            (self.edge_ratio > 1, 'edge_ratio must be > 1'),
            (self.max_keypoints >= 1, 'max_keypoints must be >= 1'))
        for ok, msg in checks:
            if not ok:
                raise unifeat.common.ConfigError(
                    '{} (got {}).'.format(msg, self))

    @classmethod
    def from_run_config(cls, config):
        """Create from a `unifeat.config.RunConfig`."""
        return cls(
            n_groups=config.G, rel_threshold=config.rel_threshold,
            nms_radius=config.nms_radius, edge_ratio=config.edge_ratio,
            max_keypoints=config.max_keypoints)


def partition_channels(n_channels, n_groups):
    """Divide channels uniformly into groups.

    Group g covers channels (g-1)*w+1 .. g*w with w = floor(K/G); the
    trailing K mod G channels belong to no group.

    :param n_channels: total channel count K.
    :param n_groups: group count G.

    :returns: `GroupPartition`.
    :raises: `unifeat.common.ConfigError` if G is not in 1..K.
    """
    if n_groups < 1 or n_groups > n_channels:
        raise unifeat.common.ConfigError(
            'Cannot divide {} channels into {} groups.'.format(
                n_channels, n_groups))
    width = n_channels // n_groups
    ranges = [((g - 1) * width + 1, g * width) for g in range(1, n_groups + 1)]
    return GroupPartition(ranges, n_groups, n_channels)


def group_l2_response(fmap, partition):
    """Per-group L2 norm over channels.

    :param fmap: `unifeat.common.FeatureMap`.
    :param partition: `GroupPartition` for the map's channel count.

    :returns: list of `ResponseMap`, group ids start at 1.
    """
    if partition.n_channels != fmap.channels:
        raise unifeat.common.DimensionError(
            'Partition is for {} channels, map has {}.'.format(
                partition.n_channels, fmap.channels))
    values = np.asarray(fmap.values, dtype=np.float64)
    responses = []
    for g, (start, end) in enumerate(partition.ranges, start=1):
        group = values[:, :, start - 1:end]
        responses.append(ResponseMap(
            np.sqrt(np.sum(group * group, axis=2)), g))
    return responses


def channel_max_response(fmap):
    """Per-cell maximum across channels, as a single `ResponseMap`."""
    return ResponseMap(
        np.max(np.asarray(fmap.values, dtype=np.float64), axis=2), 0)


def strict_local_maxima(values, radius):
    """Cells strictly greater than every other cell in their window.

    :param values: (H, W) array.
    :param radius: half-width of the square window in cells.

    :returns: (H, W) boolean mask.
    """
    size = 2 * radius + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[radius, radius] = False
    neighbours = ndimage.maximum_filter(
        values, footprint=footprint, mode='constant', cval=-np.inf)
    return values > neighbours


def _is_interior(values, cell):
    x, y = cell
    h, w = values.shape
    return 1 <= x <= w - 2 and 1 <= y <= h - 2


def _derivatives(values, cell):
    """Central-difference gradient and Hessian at an interior cell."""
    x, y = cell
    v = values
    gx = (v[y, x + 1] - v[y, x - 1]) / 2.0
    gy = (v[y + 1, x] - v[y - 1, x]) / 2.0
    dxx = v[y, x + 1] - 2.0 * v[y, x] + v[y, x - 1]
    dyy = v[y + 1, x] - 2.0 * v[y, x] + v[y - 1, x]
    dxy = (v[y + 1, x + 1] - v[y + 1, x - 1]
           - v[y - 1, x + 1] + v[y - 1, x - 1]) / 4.0
    return gx, gy, dxx, dyy, dxy


def harris_edge_filter(values, cell, ratio):
    """Reject edge-like responses using the Hessian curvature ratio.

    :param values: (H, W) response array.
    :param cell: (x, y) integer grid location.
    :param ratio: edge ratio r > 1.

    :returns: True if det(H) > 0 and tr(H)^2 / det(H) < (r + 1)^2 / r.
    """
    if not _is_interior(values, cell):
        return False
    _, _, dxx, dyy, dxy = _derivatives(values, cell)
    det = dxx * dyy - dxy * dxy
    if not det > 0:
        return False
    trace = dxx + dyy
    return trace * trace / det < (ratio + 1) ** 2 / ratio


def refine_subpixel(values, cell):
    """Second-order subpixel offset of a peak.

    Solves H.d = -g using central differences.

    :param values: (H, W) response array.
    :param cell: (x, y) integer grid location.

    :returns: (dx, dy, valid); the offset is zero whenever `valid` is False
        (border cell, singular Hessian or an offset beyond half a cell).
    """
    if not _is_interior(values, cell):
        return 0.0, 0.0, False
    gx, gy, dxx, dyy, dxy = _derivatives(values, cell)
    det = dxx * dyy - dxy * dxy
    if abs(det) < 1e-12 or not np.isfinite(det):
        return 0.0, 0.0, False
    dx = -(dyy * gx - dxy * gy) / det
    dy = -(dxx * gy - dxy * gx) / det
    if abs(dx) > 0.5 or abs(dy) > 0.5:
        return 0.0, 0.0, False
    return float(dx), float(dy), True


def detect_on_response(response, stride, config):
    """Run the candidate chain on a single response map.

    :param response: `ResponseMap`.
    :param stride: image pixels per grid cell.
    :param config: `DetectorConfig`.

    :returns: `KeypointSet` in image coordinates (unmerged, untruncated).
    """
    values = response.values
    if values.size == 0:
        return KeypointSet.empty()
    peak = values.max()
    if not peak > 0:
        return KeypointSet.empty()
    candidates = strict_local_maxima(values, config.nms_radius) \
        & (values >= config.rel_threshold * peak) & (values > 0)

    xy, scores, cells, refined = [], [], [], []
    ys, xs = np.nonzero(candidates)
    for x, y in zip(xs, ys):
        cell = (int(x), int(y))
        if not harris_edge_filter(values, cell, config.edge_ratio):
            continue
        dx, dy, valid = refine_subpixel(values, cell)
        xy.append(((x + dx) * stride + stride / 2.0,
                   (y + dy) * stride + stride / 2.0))
        scores.append(values[y, x])
        cells.append(cell)
        refined.append(valid)
    if len(scores) == 0:
        return KeypointSet.empty()
    n = len(scores)
    return KeypointSet(
        xy=np.array(xy, dtype=np.float64),
        scores=np.array(scores, dtype=np.float64),
        group_ids=np.full(n, response.group_id, dtype=np.int64),
        feature_xy=np.array(cells, dtype=np.int64),
        refined=np.array(refined, dtype=bool))


def merge_keypoints(keypoints, radius):
    """Greedy duplicate removal, higher scores win.

    Keypoints are visited by descending score (ties by group, row,
    column) and kept unless a kept keypoint lies within `radius` pixels.

    :param keypoints: `KeypointSet`.
    :param radius: merge distance in image pixels.

    :returns: `KeypointSet` ordered by descending score.
    """
    if len(keypoints) == 0:
        return keypoints
    order = np.lexsort((
        keypoints.feature_xy[:, 0], keypoints.feature_xy[:, 1],
        keypoints.group_ids, -keypoints.scores))
    tree = cKDTree(keypoints.xy)
    suppressed = np.zeros(len(keypoints), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed[tree.query_ball_point(keypoints.xy[i], radius)] = True
    return keypoints.take(keep)


def _finalise(sets, stride, config):
    merged = merge_keypoints(KeypointSet.concatenate(sets), 0.5 * stride)
    return merged.take(np.arange(min(len(merged), config.max_keypoints)))


def detect_gcdad(fmap, config):
    """Group-concept detect-and-describe keypoint detection.

    :param fmap: `unifeat.common.FeatureMap`.
    :param config: `DetectorConfig`.

    :returns: `KeypointSet` sorted by descending score.
    """
    partition = partition_channels(fmap.channels, config.n_groups)
    responses = group_l2_response(fmap, partition)
    return _finalise(
        [detect_on_response(r, fmap.stride, config) for r in responses],
        fmap.stride, config)


def detect_dad_baseline(fmap, config):
    """Channel-maximum detect-and-describe keypoint detection.

    :param fmap: `unifeat.common.FeatureMap`.
    :param config: `DetectorConfig` (`n_groups` is ignored).

    :returns: `KeypointSet` sorted by descending score, group ids 0.
    """
    response = channel_max_response(fmap)
    return _finalise(
        [detect_on_response(response, fmap.stride, config)],
        fmap.stride, config)


detectors = {
    'gcdad': detect_gcdad,
    'dad': detect_dad_baseline,
}
