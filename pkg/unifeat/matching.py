"""Descriptor affinities, mutual nearest neighbour matching and MMA."""
import collections

import numpy as np

import unifeat.common
import unifeat.options


_MatchSet = collections.namedtuple(
    'MatchSet', ['index_a', 'index_b', 'similarity'])


class MatchSet(_MatchSet):
    """Pairs of row indices into two descriptor sets with their similarity."""

    def __new__(cls, index_a, index_b, similarity):
        return super().__new__(
            cls, np.asarray(index_a, dtype=np.int64),
            np.asarray(index_b, dtype=np.int64),
            np.asarray(similarity, dtype=np.float64))

    @classmethod
    def empty(cls):
        """Create a set with no matches."""
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    def __len__(self):
        return len(self.index_a)


def _vectors(descriptors):
    if isinstance(descriptors, unifeat.common.DescriptorSet):
        return descriptors.vectors
    return np.asarray(descriptors)


def affinity_matrix(desc_a, desc_p):
    """Inner products between all descriptors of two sets.

    :param desc_a: `DescriptorSet` or (N1, D) array.
    :param desc_p: `DescriptorSet` or (N2, D) array.

    :returns: (N1, N2) float64 array.
    """
    a, p = _vectors(desc_a), _vectors(desc_p)
    if a.shape[1] != p.shape[1]:
        raise unifeat.common.DimensionError(
            'Descriptor dimensions differ: {} and {}.'.format(
                a.shape[1], p.shape[1]))
    return a.astype(np.float64) @ p.astype(np.float64).T


def affinity_score(affinity):
    """Mean of row maxima and column maxima, weighted equally.

    :param affinity: (N1, N2) array.

    :returns: float.
    """
    affinity = np.asarray(affinity, dtype=np.float64)
    if affinity.ndim != 2 or 0 in affinity.shape:
        raise ValueError(
            'Cannot score affinity matrix of shape {}.'.format(
                affinity.shape))
    return 0.5 * np.mean(np.max(affinity, axis=1)) + \
        0.5 * np.mean(np.max(affinity, axis=0))


def _matchable(descriptors):
    """Rows that may take part in matching: not flagged ZERO, non-zero."""
    vectors = _vectors(descriptors)
    usable = np.any(vectors != 0, axis=1)
    if isinstance(descriptors, unifeat.common.DescriptorSet):
        usable &= (descriptors.flags & descriptors.ZERO) == 0
    return usable


def mutual_nn_matches(desc_a, desc_b):
    """Pairs of descriptors that are each other's nearest neighbour.

    Ties resolve to the lowest index. Zero descriptors (flagged or read
    back from file as all zeros) are never matched.

    :param desc_a: `DescriptorSet` or (N1, D) array.
    :param desc_b: `DescriptorSet` or (N2, D) array.

    :returns: `MatchSet` ordered by index into `desc_a`.
    """
    if len(_vectors(desc_a)) == 0 or len(_vectors(desc_b)) == 0:
        return MatchSet.empty()
    similarity = affinity_matrix(desc_a, desc_b)
    usable_a, usable_b = _matchable(desc_a), _matchable(desc_b)
    masked = similarity.copy()
    masked[~usable_a, :] = -np.inf
    masked[:, ~usable_b] = -np.inf
    nn12 = np.argmax(masked, axis=1)
    nn21 = np.argmax(masked, axis=0)
    ids1 = np.arange(similarity.shape[0])
    mask = (ids1 == nn21[nn12]) & usable_a & usable_b[nn12]
    return MatchSet(ids1[mask], nn12[mask], similarity[ids1[mask], nn12[mask]])


def check_homography(homography):
    """Validate a 3x3 homography.

    :raises: `unifeat.common.DimensionError` for wrong shape,
        `unifeat.common.FormatError` for non-finite or singular matrices.
    """
    homography = np.asarray(homography, dtype=np.float64)
    if homography.shape != (3, 3):
        raise unifeat.common.DimensionError(
            'Homography must be 3x3, got shape {}.'.format(homography.shape))
    if not np.all(np.isfinite(homography)) or \
            np.linalg.matrix_rank(homography) < 3:
        raise unifeat.common.FormatError(
            'Homography is singular or non-finite.')
    return homography


def project_points(homography, xy):
    """Apply a homography to points.

    :param homography: 3x3 array.
    :param xy: (N, 2) array.

    :returns: ((N, 2) projected points, (N,) bool finite mask); points
        mapped to infinity are NaN and masked False.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    homog = np.concatenate([xy, np.ones((len(xy), 1))], axis=1)
    proj = homog @ homography.T
    w = proj[:, 2]
    finite = np.abs(w) >= 1e-12
    out = np.full((len(xy), 2), np.nan)
    out[finite] = proj[finite, :2] / w[finite, None]
    return out, finite


def reprojection_errors(matches, xy_a, xy_b, homography):
    """Distance between projected anchor points and their matches.

    Points mapped to infinity have infinite error.
    """
    homography = check_homography(homography)
    proj, finite = project_points(homography, np.asarray(xy_a)[matches.index_a])
    errors = np.full(len(matches), np.inf)
    diff = proj[finite] - np.asarray(xy_b)[matches.index_b][finite]
    errors[finite] = np.sqrt(np.sum(diff * diff, axis=1))
    return errors


def mma_curve(
        matches, kps_a, kps_b, homography,
        thresholds=unifeat.options.mma_thresholds):
    """Fraction of matches within each pixel threshold of the true position.

    :param matches: `MatchSet`.
    :param kps_a: `KeypointSet` (or (N, 2) xy array) of the first image.
    :param kps_b: `KeypointSet` (or (N, 2) xy array) of the second image.
    :param homography: 3x3 map from image a to image b.
    :param thresholds: pixel thresholds.

    :returns: list of float, one per threshold.
    """
    xy_a = getattr(kps_a, 'xy', kps_a)
    xy_b = getattr(kps_b, 'xy', kps_b)
    errors = reprojection_errors(matches, xy_a, xy_b, homography)
    if len(errors) == 0:
        return [0.0 for _ in thresholds]
    return [float(np.mean(errors <= t)) for t in thresholds]


def write_matches(path, matches, kps_a, kps_b):
    """Write matches as text lines of "xa ya xb yb sim"."""
    with open(path, 'w') as fh:
        for i, j, s in zip(*matches):
            fh.write('{:.6f} {:.6f} {:.6f} {:.6f} {:.6f}\n'.format(
                kps_a.xy[i, 0], kps_a.xy[i, 1],
                kps_b.xy[j, 0], kps_b.xy[j, 1], s))


def read_matches(path):
    """Read a match file written by `write_matches`.

    :returns: (N, 5) float64 array of xa, ya, xb, yb, sim.
    """
    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip() == '' or line.startswith('#'):
                continue
            fields = line.split()
            if len(fields) != 5:
                raise unifeat.common.FormatError(
                    '{}:{}: expected 5 fields, found {}.'.format(
                        path, line_no, len(fields)))
            rows.append([float(x) for x in fields])
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def match_indices(rows, kps_a, kps_b, tolerance=1e-3):
    """Recover keypoint indices for the coordinates of a match file.

    :param rows: (N, 5) array from `read_matches`.
    :param kps_a: `KeypointSet` the first coordinates were taken from.
    :param kps_b: `KeypointSet` the second coordinates were taken from.
    :param tolerance: maximum coordinate distance in pixels.

    :returns: `MatchSet`.
    :raises: `unifeat.common.FormatError` if a point has no keypoint.
    """
    from scipy.spatial import cKDTree
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    indices = []
    for xy, kps in ((rows[:, 0:2], kps_a), (rows[:, 2:4], kps_b)):
        if len(rows) == 0:
            indices.append(np.zeros(0, dtype=np.int64))
            continue
        if len(kps) == 0:
            raise unifeat.common.FormatError(
                'Matches refer to an image without keypoints.')
        dist, index = cKDTree(kps.xy).query(xy)
        if np.any(dist > tolerance):
            raise unifeat.common.FormatError(
                'Match coordinates do not correspond to keypoints.')
        indices.append(index)
    return MatchSet(indices[0], indices[1], rows[:, 4])


def write_colmap_matches(fh, name_a, name_b, matches):
    """Append one image pair in COLMAP's raw match import format.

    The block is the two image names on one line, one line of keypoint
    indices per match, then a blank line.
    """
    fh.write('{} {}\n'.format(name_a, name_b))
    for i, j in zip(matches.index_a, matches.index_b):
        fh.write('{} {}\n'.format(i, j))
    fh.write('\n')


def _feature_record(path):
    import unifeat.datastore
    record = unifeat.datastore.read_features(path)
    kps = unifeat.common.KeypointSet.from_array(record.keypoints)
    return kps, unifeat.common.DescriptorSet(record.descriptors)


def match(args):
    """Matching program: mutual nearest neighbours of two feature files."""
    import unifeat.datastore
    logger = unifeat.common.get_named_logger('Match')
    kps_a, desc_a = _feature_record(args.features_a)
    kps_b, desc_b = _feature_record(args.features_b)
    if desc_a.dim != desc_b.dim:
        raise unifeat.common.DimensionError(
            'Descriptor dimensions differ: {} and {}.'.format(
                desc_a.dim, desc_b.dim))
    matches = mutual_nn_matches(desc_a, desc_b)
    write_matches(args.output, matches, kps_a, kps_b)
    logger.info('Wrote {} matches to {}.'.format(len(matches), args.output))
    if args.homography is None:
        return
    homography = unifeat.datastore.read_homography(args.homography)
    curve = mma_curve(matches, kps_a, kps_b, homography, args.thresholds)
    with open(args.output, 'a') as fh:
        for threshold, value in zip(args.thresholds, curve):
            fh.write('# mma {} {:.6f}\n'.format(threshold, value))
    for threshold, value in zip(args.thresholds, curve):
        print('{}\t{:.6f}'.format(threshold, value))


def export_matches(args):
    """Convert match files to COLMAP's raw match import format.

    `args.pairs` lists, per line, two image names as known to COLMAP,
    their feature files and the match file, whitespace separated.
    """
    logger = unifeat.common.get_named_logger('Export')
    n_pairs = 0
    with open(args.pairs) as fh, open(args.output, 'w') as out:
        for line_no, line in enumerate(fh, start=1):
            fields = line.split()
            if len(fields) == 0 or fields[0].startswith('#'):
                continue
            if len(fields) != 5:
                raise unifeat.common.FormatError(
                    '{}:{}: expected 5 fields, found {}.'.format(
                        args.pairs, line_no, len(fields)))
            name_a, name_b, feat_a, feat_b, match_file = fields
            kps_a, _ = _feature_record(feat_a)
            kps_b, _ = _feature_record(feat_b)
            matches = match_indices(read_matches(match_file), kps_a, kps_b)
            write_colmap_matches(out, name_a, name_b, matches)
            n_pairs += 1
    logger.info('Exported {} image pairs to {}.'.format(n_pairs, args.output))
