"""Training program and ancillary functions."""
import collections
import json
import math
import os

import numpy as np

import unifeat.common
import unifeat.config
import unifeat.datastore
import unifeat.models
import unifeat.options


PairRecord = collections.namedtuple(
    'PairRecord', ['scene', 'anchor', 'positive'])

_TrainingTuple = collections.namedtuple(
    'TrainingTuple', ['scene', 'anchor', 'positive', 'negatives'])


class TrainingTuple(_TrainingTuple):
    """An anchor, a positive from the same scene and cross-scene negatives."""

    def paths(self):
        """Image paths in network order: anchor, positive, negatives."""
        return [self.anchor, self.positive] + list(self.negatives)


class PairManifest(object):
    """Positive image pairs grouped by scene."""

    def __init__(self, pairs):
        """Initialize a manifest.

        :param pairs: iterable of `PairRecord`.
        """
        self.pairs = list(pairs)
        scenes = collections.defaultdict(set)
        for pair in self.pairs:
            scenes[pair.scene].update((pair.anchor, pair.positive))
        self.scene_images = {k: sorted(v) for k, v in scenes.items()}

    def __len__(self):
        return len(self.pairs)

    @property
    def scenes(self):
        """Sorted scene names."""
        return sorted(self.scene_images)


def read_manifest(path):
    """Read a JSON lines manifest of positive pairs.

    Each non-blank line is an object with string fields `scene`, `anchor`
    and `positive`; relative image paths are taken relative to the
    manifest's directory.

    :param path: manifest filepath.

    :returns: `PairManifest`.
    :raises: `unifeat.common.ManifestError` naming the offending line.
    """
    root = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip() == '':
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise unifeat.common.ManifestError(
                    line_no, 'invalid JSON ({}).'.format(e))
            if not isinstance(record, dict):
                raise unifeat.common.ManifestError(
                    line_no, 'record must be an object.')
            missing = [
                k for k in PairRecord._fields
                if not isinstance(record.get(k), str) or record[k] == '']
            if missing:
                raise unifeat.common.ManifestError(
                    line_no, 'missing or empty field(s): {}.'.format(
                        ', '.join(missing)))
            extra = sorted(set(record) - set(PairRecord._fields))
            if extra:
                raise unifeat.common.ManifestError(
                    line_no, 'unknown field(s): {}.'.format(', '.join(extra)))
            anchor, positive = (
                os.path.join(root, record[k]) for k in ('anchor', 'positive'))
            if anchor == positive:
                raise unifeat.common.ManifestError(
                    line_no, 'anchor and positive are the same image.')
            pairs.append(PairRecord(record['scene'], anchor, positive))
    if len(pairs) == 0:
        raise unifeat.common.ManifestError(None, '{} has no pairs.'.format(path))
    return PairManifest(pairs)


def sample_tuples(manifest, epoch_size, seed, n_negatives=5):
    """Draw the training tuples of one epoch.

    Pairs are drawn uniformly with replacement, negatives uniformly from
    the images of all other scenes.

    :param manifest: `PairManifest`.
    :param epoch_size: number of tuples.
    :param seed: random seed, equal seeds give equal tuples.
    :param n_negatives: negatives per tuple.

    :returns: list of `TrainingTuple`.
    """
    scenes = manifest.scenes
    if len(scenes) < 2:
        raise unifeat.common.ManifestError(
            None, 'at least two scenes are needed to draw negatives, '
            'found {}.'.format(len(scenes)))
    others = {
        scene: [
            image for other in scenes if other != scene
            for image in manifest.scene_images[other]]
        for scene in scenes}
    rng = np.random.default_rng(seed)
    tuples = []
    for index in rng.integers(len(manifest), size=epoch_size):
        pair = manifest.pairs[index]
        pool = others[pair.scene]
        picks = rng.choice(
            len(pool), size=n_negatives, replace=len(pool) < n_negatives)
        tuples.append(TrainingTuple(
            pair.scene, pair.anchor, pair.positive,
            tuple(pool[i] for i in picks)))
    return tuples


def lr_at_epoch(base_lr, epoch):
    """Exponentially decayed learning rate, base_lr * exp(-0.1 * epoch)."""
    if epoch < 0:
        raise ValueError('Epoch index must be non-negative.')
    return base_lr * math.exp(-0.1 * epoch)


def load_training_image(path, size):
    """Read an image resized to the training resolution."""
    return unifeat.common.read_image(path, size)


def set_determinism(seed):
    """Seed python, numpy and tensorflow and request deterministic ops."""
    import tensorflow as tf
    tf.keras.utils.set_random_seed(seed)
    tf.config.experimental.enable_op_determinism()


def tuple_similarity(net, images):
    """Anchor-positive and anchor-negative affinity scores of the student.

    :param net: `unifeat.keras_ext.JointNet`.
    :param images: (B, T, H, W, 3) tuple images.

    :returns: ((B,) s_ap, (B, T-2) s_an) numpy arrays.
    """
    import tensorflow as tf
    import unifeat.losses
    images = tf.convert_to_tensor(images, dtype=tf.float32)
    shape = tf.shape(images)
    outputs = net(tf.reshape(
        images, tf.concat([[shape[0] * shape[1]], shape[2:]], 0)))
    student = unifeat.losses.location_descriptors(outputs['student'])
    student = tf.reshape(
        student, tf.concat([shape[:2], tf.shape(student)[1:]], 0))
    s_ap, s_an = unifeat.losses.tuple_scores(student)
    return s_ap.numpy(), s_an.numpy()


def train(args):
    """Training program."""
    unifeat.common.mkdir_p(args.output, info='Results will be overwritten.')
    logger = unifeat.common.get_named_logger('Training')

    config = unifeat.config.load_config(args.config, args.set)
    manifest = read_manifest(args.manifest)
    logger.info('Loaded {} pairs from {} scenes.'.format(
        len(manifest), len(manifest.scenes)))
    run_training(args.output, manifest, config, resume=args.resume)
    logger.info("Training finished.")


def run_training(
        out_dir, manifest, config, resume=None, loader=None,
        steps_per_epoch=None, verbose=0, extra_callbacks=None):
    """Run training.

    :param out_dir: directory for checkpoints and logs.
    :param manifest: `PairManifest`.
    :param config: `unifeat.config.RunConfig`.
    :param resume: checkpoint to continue from, training restarts at its
        stored epoch (optimizer moments start afresh).
    :param loader: function (path, size) -> image, for tests.
    :param steps_per_epoch: limit batches per epoch.
    :param extra_callbacks: further keras callbacks, run after the
        built-in ones.

    :returns: the trained `unifeat.keras_ext.JointNet`.
    """
    import tensorflow as tf
    from tensorflow.keras.callbacks import CSVLogger, LearningRateScheduler
    from unifeat.keras_ext import \
        ModelMetaCheckpoint, NonFiniteLossGuard, StepLossLogger, TupleSequence

    logger = unifeat.common.get_named_logger('RunTraining')
    set_determinism(config.seed)

    if resume is not None:
        net, _, initial_epoch = unifeat.models.open_checkpoint(resume)
        with unifeat.datastore.ModelStore(
                unifeat.models.resolve_checkpoint(resume)) as store:
            model_function = store.get_meta('model_function')
        logger.info('Resuming from {} at epoch {}.'.format(
            resume, initial_epoch))
    else:
        model_function = unifeat.models.model_function_from_config(config)
        net = model_function(backbone_weights=config.backbone_weights)
        initial_epoch = 0
    if initial_epoch >= config.epochs:
        logger.warning('Checkpoint has already completed {} epochs.'.format(
            initial_epoch))

    frozen = net.apply_freeze_policy()
    logger.info("Freeze policy '{}', {} backbone layers frozen.".format(
        net.freeze_policy, len(frozen)))
    config.save(os.path.join(out_dir, 'config.json'))

    sequence = TupleSequence(
        manifest, config.epoch_size, config.batch_tuples, config.n_negatives,
        config.train_size, seed=config.seed, epoch=initial_epoch,
        loader=loader)

    model_metadata = {
        'model_function': model_function,
        'config': config.to_json(),
        'format_version': unifeat.options.checkpoint_version}
    appending = resume is not None
    callbacks = [
        # write a checkpoint at the end of every epoch
        ModelMetaCheckpoint(
            model_metadata, os.path.join(out_dir, 'model-{epoch:02d}.h5'),
            save_best_only=False, verbose=0),
        LearningRateScheduler(lambda epoch: lr_at_epoch(config.lr, epoch)),
        StepLossLogger(
            os.path.join(out_dir, 'losses.tsv'), append=appending),
        NonFiniteLossGuard(
            sequence, os.path.join(out_dir, 'nonfinite_tuples.json')),
        # Log of epoch stats
        CSVLogger(
            os.path.join(out_dir, 'training.log'), separator='\t',
            append=appending)]
    callbacks.extend(extra_callbacks or [])

    optimizer = tf.keras.optimizers.Adam(
        learning_rate=config.lr, beta_1=0.9, beta_2=0.99)
    net.compile(optimizer=optimizer)
    net.fit(
        sequence, epochs=config.epochs, initial_epoch=initial_epoch,
        steps_per_epoch=steps_per_epoch, shuffle=False, callbacks=callbacks,
        verbose=verbose)
    return net
