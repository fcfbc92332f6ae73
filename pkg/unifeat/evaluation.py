"""Matching accuracy on homography sequences and retrieval precision.

A homography dataset is a directory of sequence directories. Each holds a
reference image `1.<ext>`, target images `<k>.<ext>` and text files
`H_1_<k>` mapping reference pixels onto target `k`. Sequence names
starting `i_` vary illumination, those starting `v_` vary viewpoint.
"""
import collections
import glob
import os

import numpy as np

import unifeat.common
import unifeat.datastore
import unifeat.global_desc
import unifeat.matching
import unifeat.options


logger = unifeat.common.get_named_logger('Evaluate')

_image_exts = ('.ppm', '.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff')
_sequence_kinds = {'i': 'illumination', 'v': 'viewpoint'}
groups = ('overall', 'illumination', 'viewpoint')

SequencePair = collections.namedtuple(
    'SequencePair', ['sequence', 'kind', 'reference', 'target', 'homography'])

PairResult = collections.namedtuple(
    'PairResult',
    ['sequence', 'kind', 'target', 'scale_ratio', 'curve', 'n_matches',
     'n_keypoints_a', 'n_keypoints_b'])


def sequence_kind(name):
    """'illumination', 'viewpoint' or `None` from a sequence name."""
    prefix, sep, _ = name.partition('_')
    return _sequence_kinds.get(prefix) if sep else None


def _find_image(directory, stem):
    for ext in _image_exts:
        path = os.path.join(directory, stem + ext)
        if os.path.exists(path):
            return path
    return None


def find_sequence_pairs(root):
    """List the reference/target pairs of a homography dataset.

    Sequences with an unknown prefix or without a reference image are
    skipped with a warning.

    :param root: dataset directory.

    :returns: list of `SequencePair`, ordered by sequence then target.
    """
    pairs = []
    for name in sorted(os.listdir(root)):
        directory = os.path.join(root, name)
        if not os.path.isdir(directory):
            continue
        kind = sequence_kind(name)
        if kind is None:
            logger.warning('Skipping {}, unknown sequence type.'.format(name))
            continue
        reference = _find_image(directory, '1')
        if reference is None:
            logger.warning('Skipping {}, no reference image.'.format(name))
            continue
        targets = []
        for path in glob.glob(os.path.join(directory, '*')):
            stem, ext = os.path.splitext(os.path.basename(path))
            if ext.lower() in _image_exts and stem.isdigit() and stem != '1':
                targets.append((int(stem), path))
        for index, path in sorted(targets):
            pairs.append(SequencePair(
                name, kind, reference, path,
                os.path.join(directory, 'H_1_{}'.format(index))))
    return pairs


def scale_homography(homography, ratio_a, ratio_b):
    """Homography between images rescaled by `ratio_a` and `ratio_b`."""
    scale_a = np.diag([ratio_a, ratio_a, 1.0])
    scale_b = np.diag([ratio_b, ratio_b, 1.0])
    return scale_b @ homography @ np.linalg.inv(scale_a)


def parse_scale_ratio(text):
    """Parse 'r_query:r_database' into a pair of positive floats."""
    try:
        ratio_a, ratio_b = (float(v) for v in text.split(':'))
    except ValueError:
        raise unifeat.common.ConfigError(
            "Scale ratio must look like '1.0:0.5', got {!r}.".format(text))
    if not (ratio_a > 0 and ratio_b > 0):
        raise unifeat.common.ConfigError(
            'Scale ratios must be positive, got {!r}.'.format(text))
    return ratio_a, ratio_b


class HPatchesEvaluator(object):
    """Mutual nearest neighbour MMA over a homography dataset."""

    def __init__(
            self, extract, thresholds=unifeat.options.mma_thresholds,
            scale_ratios=((1.0, 1.0),), reader=None):
        """Initialize evaluation.

        :param extract: function image -> (`KeypointSet`, `DescriptorSet`).
        :param thresholds: pixel thresholds of the MMA curve.
        :param scale_ratios: (reference, target) resize factors, one
            evaluation pass per entry.
        :param reader: function path -> image.
        """
        self.extract = extract
        self.thresholds = tuple(thresholds)
        self.scale_ratios = tuple(scale_ratios)
        self.reader = reader or unifeat.common.read_image
        self._cache = {}

    def _features(self, path, ratio):
        key = (path, ratio)
        if key not in self._cache:
            image = self.reader(path)
            if ratio != 1.0:
                image = unifeat.common.resize_image(image, ratio)
            self._cache[key] = self.extract(image)
        return self._cache[key]

    def evaluate_pair(self, pair, homography, ratios):
        """MMA curve and counts for one pair at one scale ratio."""
        ratio_a, ratio_b = ratios
        kps_a, desc_a = self._features(pair.reference, ratio_a)
        kps_b, desc_b = self._features(pair.target, ratio_b)
        matches = unifeat.matching.mutual_nn_matches(desc_a, desc_b)
        curve = unifeat.matching.mma_curve(
            matches, kps_a, kps_b,
            scale_homography(homography, ratio_a, ratio_b), self.thresholds)
        return PairResult(
            pair.sequence, pair.kind, os.path.basename(pair.target),
            ratios, curve, len(matches), len(kps_a), len(kps_b))

    def run(self, root):
        """Evaluate every pair of a dataset.

        Pairs with a missing or malformed homography are skipped.

        :returns: (list of `PairResult`, number of skipped pairs).
        """
        results, skipped = [], 0
        for pair in find_sequence_pairs(root):
            try:
                homography = unifeat.matching.check_homography(
                    unifeat.datastore.read_homography(pair.homography))
            except (OSError, ValueError) as e:
                logger.warning('Skipping {} / {}: {}'.format(
                    pair.sequence, os.path.basename(pair.target), e))
                skipped += 1
                continue
            for ratios in self.scale_ratios:
                results.append(self.evaluate_pair(pair, homography, ratios))
            # references are shared within a sequence only
            self._cache = {
                k: v for k, v in self._cache.items() if k[0] == pair.reference}
        if skipped > 0:
            logger.warning('Skipped {} pairs.'.format(skipped))
        return results, skipped


MMASummary = collections.namedtuple(
    'MMASummary',
    ['scale_ratio', 'curves', 'n_pairs', 'mean_keypoints', 'mean_matches'])


def summarise(results, thresholds=unifeat.options.mma_thresholds):
    """Per-group mean MMA curves and counts for each scale ratio.

    :param results: list of `PairResult`.

    :returns: list of `MMASummary`; groups without pairs have NaN curves.
    """
    summaries = []
    ratios = sorted(set(r.scale_ratio for r in results))
    for ratio in ratios:
        curves, n_pairs, keypoints, matches = {}, {}, {}, {}
        for group in groups:
            members = [
                r for r in results if r.scale_ratio == ratio
                and (group == 'overall' or r.kind == group)]
            n_pairs[group] = len(members)
            if len(members) == 0:
                curves[group] = [float('nan')] * len(thresholds)
                keypoints[group] = matches[group] = float('nan')
                continue
            curves[group] = list(np.mean([r.curve for r in members], axis=0))
            keypoints[group] = float(np.mean(
                [(r.n_keypoints_a + r.n_keypoints_b) / 2 for r in members]))
            matches[group] = float(np.mean([r.n_matches for r in members]))
        summaries.append(
            MMASummary(ratio, curves, n_pairs, keypoints, matches))
    return summaries


def write_mma_table(path, summaries, thresholds=unifeat.options.mma_thresholds):
    """Write tab-separated MMA curves, one row per threshold and ratio."""
    with open(path, 'w') as fh:
        fh.write('\t'.join(('scale_ratio', 'threshold') + groups) + '\n')
        for summary in summaries:
            ratio = '{:g}:{:g}'.format(*summary.scale_ratio)
            for i, threshold in enumerate(thresholds):
                row = [ratio, str(threshold)] + [
                    '{:.6f}'.format(summary.curves[g][i]) for g in groups]
                fh.write('\t'.join(row) + '\n')


def write_pair_results(path, results):
    """Write one tab-separated row of counts and MMA per pair."""
    with open(path, 'w') as fh:
        fh.write('sequence\tkind\ttarget\tscale_ratio\tn_keypoints_a\t'
                 'n_keypoints_b\tn_matches\tcurve\n')
        for r in results:
            fh.write('{}\t{}\t{}\t{:g}:{:g}\t{}\t{}\t{}\t{}\n'.format(
                r.sequence, r.kind, r.target, r.scale_ratio[0],
                r.scale_ratio[1], r.n_keypoints_a, r.n_keypoints_b,
                r.n_matches, ','.join('{:.6f}'.format(v) for v in r.curve)))


def read_id_list(path):
    """Read one image id per line, ignoring blank lines."""
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def read_relevance(path):
    """Read relevance judgements.

    Each line holds a query id followed by its relevant ids, whitespace
    separated. A query listed without ids has no relevant items.

    :returns: dict of query id: set of ids.
    """
    relevant = collections.OrderedDict()
    with open(path) as fh:
        for line in fh:
            fields = line.split()
            if len(fields) == 0 or fields[0].startswith('#'):
                continue
            relevant.setdefault(fields[0], set()).update(fields[1:])
    return relevant


def evaluate_retrieval(index, queries, relevant):
    """Rank the index for each query and score the rankings.

    :param index: `unifeat.global_desc.RetrievalIndex`.
    :param queries: ids of index entries used as queries.
    :param relevant: dict of query id: set of relevant ids.

    :returns: (mAP, dict of query id: AP, dict of query id: ranking).
    """
    rankings = collections.OrderedDict()
    for query in queries:
        if query not in index:
            raise unifeat.common.FormatError(
                'Query {} is not in the index.'.format(query))
        rankings[query] = [
            image_id for image_id, _ in
            unifeat.global_desc.rank(index[query], index)]
    mean_ap, aps = unifeat.global_desc.mean_average_precision(
        rankings, relevant)
    return mean_ap, aps, rankings


def eval_hpatches(args):
    """Homography benchmark program."""
    import unifeat.config
    import unifeat.descriptor

    config = unifeat.config.load_config(args.config, args.set)
    extractor = unifeat.descriptor.create_extractor(config, args.checkpoint)

    def extract(image):
        keypoints, descriptors, _ = extractor.extract_local(image)
        return keypoints, descriptors

    evaluator = HPatchesEvaluator(
        extract, thresholds=args.thresholds,
        scale_ratios=[parse_scale_ratio(r) for r in args.scale_ratios])
    results, skipped = evaluator.run(args.dataset)
    if len(results) == 0:
        raise unifeat.common.FormatError(
            'No evaluable pairs found in {}.'.format(args.dataset))
    summaries = summarise(results, evaluator.thresholds)
    write_mma_table(args.output + '.mma.tsv', summaries, evaluator.thresholds)
    write_pair_results(args.output + '.pairs.tsv', results)
    for summary in summaries:
        for group in groups:
            if summary.n_pairs[group] == 0:
                continue
            logger.info(
                'ratio {:g}:{:g} {}: {} pairs, MMA@3 {:.4f}, '
                '{:.1f} keypoints, {:.1f} matches.'.format(
                    summary.scale_ratio[0], summary.scale_ratio[1], group,
                    summary.n_pairs[group],
                    _curve_at(summary.curves[group], evaluator.thresholds, 3),
                    summary.mean_keypoints[group],
                    summary.mean_matches[group]))
    print('pairs\t{}\tskipped\t{}'.format(len(results), skipped))


def _curve_at(curve, thresholds, threshold):
    if threshold in thresholds:
        return curve[list(thresholds).index(threshold)]
    return float('nan')


def eval_retrieval(args):
    """Retrieval benchmark program."""
    index = unifeat.datastore.IndexDirectory(args.index).load()
    queries = read_id_list(args.queries)
    relevant = read_relevance(args.relevance)
    mean_ap, aps, _ = evaluate_retrieval(index, queries, relevant)
    if args.output is not None:
        with open(args.output, 'w') as fh:
            fh.write('query\tap\n')
            for query, ap in aps.items():
                fh.write('{}\t{:.6f}\n'.format(query, ap))
    logger.info('{} queries evaluated.'.format(len(aps)))
    print('mAP\t{:.6f}'.format(mean_ap))


def shortlist(args):
    """Write the top-K database candidates of every query."""
    index = unifeat.datastore.IndexDirectory(args.index).load()
    queries = index.ids if args.queries is None else \
        read_id_list(args.queries)
    with open(args.output, 'w') as fh:
        fh.write('query\trank\tcandidate\tsimilarity\n')
        for query in queries:
            if query not in index:
                raise unifeat.common.FormatError(
                    'Query {} is not in the index.'.format(query))
            candidates = unifeat.global_desc.shortlist(
                index[query], index, args.top_k, exclude_self=query)
            for position, (image_id, similarity) in enumerate(
                    candidates, start=1):
                fh.write('{}\t{}\t{}\t{:.6f}\n'.format(
                    query, position, image_id, similarity))
    logger.info('Wrote shortlists for {} queries to {}.'.format(
        len(queries), args.output))
