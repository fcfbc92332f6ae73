"""Global image descriptors, retrieval ranking and mean average precision."""
import collections

import numpy as np

import unifeat.common
import unifeat.options
from unifeat.common import GlobalDescriptor


logger = unifeat.common.get_named_logger('Retrieval')


def gem_pool(fmap, p=3.0):
    """Generalised-mean pooling of every channel.

    :param fmap: `FeatureMap` or (H, W, C) array, non-negative.
    :param p: power, p >= 1.

    :returns: (C,) float64 array.
    """
    values = np.asarray(getattr(fmap, 'values', fmap), dtype=np.float64)
    if values.ndim != 3:
        raise unifeat.common.DimensionError(
            'GeM pooling requires an (H, W, C) map, got shape {}.'.format(
                values.shape))
    if p < 1:
        raise ValueError('GeM power must be >= 1, got {}.'.format(p))
    if np.any(values < 0):
        raise ValueError('GeM pooling requires a non-negative feature map.')
    if values.shape[0] * values.shape[1] == 0:
        raise unifeat.common.DimensionError('Cannot pool an empty map.')
    # scale by the channel maximum so large p does not overflow
    scale = np.max(values, axis=(0, 1))
    safe = np.where(scale > 0, scale, 1.0)
    mean = np.mean((values / safe) ** p, axis=(0, 1))
    return np.where(scale > 0, safe * mean ** (1.0 / p), 0.0)


def global_descriptor(pyramid, p=3.0):
    """Pooled, per-level normalised and concatenated pyramid descriptor.

    :param pyramid: `FeaturePyramid` (or sequence of maps).
    :param p: GeM power.

    :returns: `GlobalDescriptor`; an all-zero pyramid gives a zero vector
        with `is_zero` set.
    """
    levels = [gem_pool(level, p) for level in pyramid]
    level_dims = tuple(len(v) for v in levels)
    normed = [unifeat.common.l2_normalize(v)[0] for v in levels]
    vector, is_zero = unifeat.common.l2_normalize(np.concatenate(normed))
    return GlobalDescriptor(vector, level_dims, bool(is_zero))


class RetrievalIndex(object):
    """Set of global descriptors keyed by image id."""

    def __init__(self):
        """Initialize an empty index."""
        self._entries = collections.OrderedDict()
        self.dim = None

    def add(self, image_id, descriptor):
        """Add a descriptor.

        :param image_id: unique string id.
        :param descriptor: `GlobalDescriptor` or 1D array.
        """
        vector = np.asarray(getattr(descriptor, 'vector', descriptor))
        if image_id in self._entries:
            raise ValueError('Duplicate image id {}.'.format(image_id))
        if self.dim is not None and len(vector) != self.dim:
            raise unifeat.common.DimensionError(
                'Descriptor for {} has dim {}, index has {}.'.format(
                    image_id, len(vector), self.dim))
        self.dim = len(vector)
        self._entries[image_id] = vector

    def __len__(self):
        return len(self._entries)

    def __contains__(self, image_id):
        return image_id in self._entries

    def __getitem__(self, image_id):
        return self._entries[image_id]

    @property
    def ids(self):
        """Image ids in insertion order."""
        return list(self._entries.keys())

    def matrix(self):
        """(N, D) array of all descriptors in insertion order."""
        if len(self) == 0:
            return np.zeros((0, self.dim or 0))
        return np.stack(list(self._entries.values()))


def rank(query, index):
    """Order index entries by similarity to a query.

    :param query: `GlobalDescriptor` or 1D array.
    :param index: `RetrievalIndex`.

    :returns: list of (image_id, similarity), by descending similarity
        with ties broken by ascending id.
    """
    if len(index) == 0:
        return []
    vector = np.asarray(getattr(query, 'vector', query), dtype=np.float64)
    if len(vector) != index.dim:
        raise unifeat.common.DimensionError(
            'Query has dim {}, index has {}.'.format(len(vector), index.dim))
    similarity = index.matrix().astype(np.float64) @ vector
    ids = index.ids
    order = sorted(range(len(ids)), key=lambda i: (-similarity[i], ids[i]))
    return [(ids[i], float(similarity[i])) for i in order]


def shortlist(query, index, top_k=unifeat.options.shortlist_top_k,
              exclude_self=None):
    """Top-K candidate images for a query.

    :param query: `GlobalDescriptor` or 1D array.
    :param index: `RetrievalIndex`.
    :param top_k: number of candidates.
    :param exclude_self: optional id to leave out (the query itself).

    :returns: list of (image_id, similarity).
    """
    ranking = [r for r in rank(query, index) if r[0] != exclude_self]
    return ranking[:top_k]


def average_precision(ranking, relevant):
    """Mean of the precision at the rank of every relevant item.

    :param ranking: ordered ids.
    :param relevant: set of relevant ids.

    :returns: float, relevant items that are never retrieved count as zero
        precision.
    """
    relevant = set(relevant)
    if len(relevant) == 0:
        raise ValueError('Average precision needs at least one relevant item.')
    hits, total = 0, 0.0
    for position, image_id in enumerate(ranking, start=1):
        if image_id in relevant:
            hits += 1
            total += hits / position
    return total / len(relevant)


def mean_average_precision(rankings, relevant):
    """Mean of per-query average precision.

    :param rankings: dict of query id: ordered ids.
    :param relevant: dict of query id: set of relevant ids.

    :returns: (mAP, dict of query id: AP); queries without relevant items
        are excluded with a warning.
    """
    aps = collections.OrderedDict()
    for query, ranking in rankings.items():
        query_relevant = relevant.get(query, set())
        if len(query_relevant) == 0:
            logger.warning(
                'Query {} has no relevant items, excluding.'.format(query))
            continue
        aps[query] = average_precision(ranking, query_relevant)
    if len(aps) == 0:
        raise ValueError('No query has relevant items.')
    return float(np.mean(list(aps.values()))), aps
