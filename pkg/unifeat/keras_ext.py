"""Extensions to keras API for unifeat."""
import json
import os

import numpy as np
import tensorflow as tf
from tensorflow.keras import layers
from tensorflow.keras.callbacks import Callback, ModelCheckpoint
from tensorflow.keras.utils import Sequence

import unifeat.common
import unifeat.datastore
import unifeat.losses

# define subclasses here to avoid top-level keras import elsewhere

# per-channel BGR means of the ImageNet "caffe" preprocessing
_imagenet_bgr_mean = (103.939, 116.779, 123.68)


def resize_like(x, reference):
    """Bilinearly resize `x` to the spatial size of `reference`."""
    resized = tf.image.resize(
        x, tf.shape(reference)[-3:-1], method='bilinear')
    return tf.cast(resized, x.dtype)


def concat_blocks(c2, c3):
    """Concatenate second and third block maps on the second block's grid.

    The third block is bilinearly resampled to the second block's grid,
    which is exact when the grids already agree.
    """
    return tf.concat([c2, resize_like(c3, c2)], axis=-1)


def gem(x, p=3.0, eps=1e-6):
    """Generalised-mean pooling over the spatial axes of (B, H, W, C)."""
    p = tf.cast(p, x.dtype)
    pooled = tf.reduce_mean(
        tf.pow(tf.maximum(x, tf.cast(eps, x.dtype)), p), axis=[-3, -2])
    return tf.pow(pooled, 1.0 / p)


class ImageNetNormalization(layers.Layer):
    """Map RGB images in [0, 1] to the ResNet "caffe" input convention."""

    def call(self, inputs):
        """Scale to [0, 255], swap to BGR and remove the channel means."""
        x = inputs * 255.0
        x = x[..., ::-1]
        return x - tf.constant(_imagenet_bgr_mean, dtype=x.dtype)


class GeM(layers.Layer):
    """Generalised-mean pooling with a fixed power."""

    def __init__(self, p=3.0, eps=1e-6, **kwargs):
        """Initialize pooling.

        :param p: power, 1 is average pooling and large values approach
            max pooling.
        :param eps: inputs are clamped to at least this value.
        """
        super().__init__(**kwargs)
        self.p = float(p)
        self.eps = float(eps)

    def call(self, inputs):
        """Pool (B, H, W, C) to (B, C)."""
        return gem(inputs, self.p, self.eps)

    def get_config(self):
        """Return layer configuration."""
        config = super().get_config()
        config.update(p=self.p, eps=self.eps)
        return config


class FeaturePyramid(layers.Layer):
    """Top-down feature pyramid over a list of block maps.

    The top level is ReLU(Conv3x3(C4)); lower levels are
    ReLU(Conv3x3(C_r) + Upsample(F_{r+1})).
    """

    def __init__(self, width=256, n_levels=4, **kwargs):
        """Initialize the pyramid.

        :param width: channels of every level.
        :param n_levels: number of input blocks.
        """
        super().__init__(**kwargs)
        self.width = int(width)
        self.n_levels = int(n_levels)
        self.laterals = [
            layers.Conv2D(
                self.width, 3, padding='same', dtype=self.dtype,
                name='lateral{}'.format(r + 1))
            for r in range(self.n_levels)]

    def call(self, blocks):
        """Return pyramid levels, finest first."""
        blocks = list(blocks)
        if len(blocks) != self.n_levels:
            raise unifeat.common.DimensionError(
                'Expected {} blocks, got {}.'.format(
                    self.n_levels, len(blocks)))
        top = tf.nn.relu(self.laterals[-1](blocks[-1]))
        levels = [top]
        for r in reversed(range(self.n_levels - 1)):
            lateral = self.laterals[r](blocks[r])
            top = tf.nn.relu(lateral + resize_like(top, lateral))
            levels.insert(0, top)
        return levels

    def get_config(self):
        """Return layer configuration."""
        config = super().get_config()
        config.update(width=self.width, n_levels=self.n_levels)
        return config


class ReductionHead(layers.Layer):
    """Channel dropout followed by a bias-free 1x1 projection per block."""

    def __init__(
            self, block_channels_in, block_channels_out=(256, 256),
            drop_prob=0.3, seed=None, **kwargs):
        """Initialize the head.

        :param block_channels_in: channels of each concatenated input block.
        :param block_channels_out: output channels for each block.
        :param drop_prob: probability of dropping a whole input channel
            during training.
        :param seed: dropout seed.
        """
        super().__init__(**kwargs)
        self.block_channels_in = tuple(int(c) for c in block_channels_in)
        self.block_channels_out = tuple(int(c) for c in block_channels_out)
        if len(self.block_channels_in) != len(self.block_channels_out):
            raise unifeat.common.DimensionError(
                'Need one output width per input block.')
        if any(o > i for i, o in zip(
                self.block_channels_in, self.block_channels_out)):
            raise unifeat.common.DimensionError(
                'Reduction head cannot widen {} to {}.'.format(
                    self.block_channels_in, self.block_channels_out))
        if not 0 <= drop_prob < 1:
            raise unifeat.common.ConfigError(
                'drop_prob must be in [0, 1), got {}.'.format(drop_prob))
        self.drop_prob = float(drop_prob)
        self.seed = seed
        self.dropout = layers.SpatialDropout2D(
            self.drop_prob, seed=seed, dtype=self.dtype)
        self.projections = [
            layers.Conv2D(
                d, 1, use_bias=False, dtype=self.dtype,
                name='reduce_b{}'.format(b + 2))
            for b, d in enumerate(self.block_channels_out)]

    def call(self, inputs, training=None):
        """Project (B, H, W, sum(in)) to (B, H, W, sum(out))."""
        if inputs.shape[-1] is not None and \
                inputs.shape[-1] != sum(self.block_channels_in):
            raise unifeat.common.DimensionError(
                'Reduction head expects {} channels, got {}.'.format(
                    sum(self.block_channels_in), inputs.shape[-1]))
        x = self.dropout(inputs, training=training)
        parts = tf.split(x, list(self.block_channels_in), axis=-1)
        return tf.concat(
            [proj(part) for proj, part in zip(self.projections, parts)],
            axis=-1)

    def get_config(self):
        """Return layer configuration."""
        config = super().get_config()
        config.update(
            block_channels_in=self.block_channels_in,
            block_channels_out=self.block_channels_out,
            drop_prob=self.drop_prob, seed=self.seed)
        return config


def global_descriptor(levels, gem_layer):
    """Pool, normalise and concatenate pyramid levels, then normalise."""
    pooled = [unifeat.losses.l2_normalize(gem_layer(x)) for x in levels]
    return unifeat.losses.l2_normalize(tf.concat(pooled, axis=-1))


class JointNet(tf.keras.Model):
    """Backbone, pyramid, pooling and reduction head trained jointly."""

    def __init__(
            self, backbone, backbone_name, dims=(256, 256), fpn_width=256,
            gem_p=3.0, drop_prob=0.3, loss_config=None,
            freeze_policy='freeze_B2B3', location_cap=0, seed=None,
            **kwargs):
        """Initialize the network.

        :param backbone: keras model mapping images to four block maps.
        :param backbone_name: key of `unifeat.models.backbone_specs`.
        :param dims: reduction head output widths for the second and third
            blocks.
        :param fpn_width: channels per pyramid level.
        :param gem_p: GeM power.
        :param drop_prob: reduction head channel dropout.
        :param loss_config: `unifeat.losses.LossConfig`.
        :param freeze_policy: one of `unifeat.options.freeze_policies`.
        :param location_cap: locations per image used in affinities,
            0 for all.
        :param seed: dropout seed.
        """
        super().__init__(**kwargs)
        self.backbone = backbone
        self.backbone_name = backbone_name
        self.block_channels = tuple(
            int(o.shape[-1]) for o in backbone.outputs)
        self.fpn = FeaturePyramid(fpn_width, name='fpn')
        self.gem = GeM(gem_p, name='gem')
        self.head = ReductionHead(
            self.block_channels[1:3], dims, drop_prob, seed=seed,
            name='reduction')
        if loss_config is None:
            loss_config = unifeat.losses.LossConfig()
        self.loss_params = dict(loss_config._asdict())
        self.freeze_policy = freeze_policy
        self.location_cap = int(location_cap)
        self.weights_source = None
        self.head_trained = False

    @property
    def loss_config(self):
        """The `unifeat.losses.LossConfig` used in training."""
        return unifeat.losses.LossConfig(**self.loss_params)

    def call(self, images, training=False):
        """Run all branches.

        Batch normalisation always uses its stored statistics.

        :returns: dict with `blocks` (four maps), `pyramid` (four levels),
            `global` (unit-norm descriptors), `teacher` (second and third
            blocks concatenated) and `student` (reduced teacher).
        """
        blocks = self.backbone(images, training=False)
        levels = self.fpn(blocks)
        teacher = concat_blocks(blocks[1], blocks[2])
        return {
            'blocks': list(blocks),
            'pyramid': levels,
            'global': global_descriptor(levels, self.gem),
            'teacher': teacher,
            'student': self.head(teacher, training=training)}

    def ensure_built(self, size=64):
        """Create all weights by running a small dummy batch."""
        if not self.built:
            self(tf.zeros((1, size, size, 3)), training=False)

    def frozen_layer_names(self):
        """Backbone layers excluded from updates by the freeze policy."""
        if self.freeze_policy != 'freeze_B2B3':
            return []
        prefixes = ('conv1_', 'conv2_', 'conv3_', 'conv4_')
        return [
            layer.name for layer in self.backbone.layers
            if layer.name.startswith(prefixes)]

    def apply_freeze_policy(self):
        """Mark frozen layers as non-trainable."""
        names = set(self.frozen_layer_names())
        for layer in self.backbone.layers:
            layer.trainable = layer.name not in names
        return names

    def load_checkpoint_weights(self, filepath):
        """Load weights saved by `ModelMetaCheckpoint`.

        The freeze policy is applied first: hdf weight order depends on
        which layers are trainable.
        """
        self.ensure_built()
        self.apply_freeze_policy()
        self.load_weights(filepath)
        self.weights_source = filepath
        self.head_trained = True

    def tuple_losses(self, images, training=False):
        """Joint objective for a batch of tuples.

        :param images: (B, T, H, W, 3) tensor, anchor first, positive
            second, then negatives.

        :returns: dict of scalar loss terms.
        """
        shape = tf.shape(images)
        n_batch, n_tuple = shape[0], shape[1]
        flat = tf.reshape(
            images, tf.concat([[n_batch * n_tuple], shape[2:]], 0))
        outputs = self(flat, training=training)

        def per_tuple(x):
            return tf.reshape(
                x, tf.concat([[n_batch, n_tuple], tf.shape(x)[1:]], 0))

        blocks = outputs['blocks']
        return unifeat.losses.total_loss(
            per_tuple(blocks[1]), per_tuple(blocks[2]),
            per_tuple(outputs['teacher']), per_tuple(outputs['student']),
            per_tuple(outputs['global']), self.loss_config,
            gradient_cut=self.freeze_policy == 'gradient_cut',
            location_cap=self.location_cap)

    def train_step(self, data):
        """Single optimisation step on a batch of tuples."""
        if isinstance(data, (tuple, list)):
            data = data[0]
        with tf.GradientTape() as tape:
            terms = self.tuple_losses(data, training=True)
        variables = self.trainable_variables
        gradients = tape.gradient(terms['total'], variables)
        self.optimizer.apply_gradients([
            (g, v) for g, v in zip(gradients, variables) if g is not None])
        return terms

    def test_step(self, data):
        """Evaluate loss terms without dropout."""
        if isinstance(data, (tuple, list)):
            data = data[0]
        return self.tuple_losses(data, training=False)


class ModelMetaCheckpoint(ModelCheckpoint):
    """Custom ModelCheckpoint to add unifeat-specific metadata to hdf5 files."""

    def __init__(self, unifeat_meta, *args, **kwargs):
        """Initialize checkpointing.

        :param unifeat_meta: dict of meta data to store in checkpoint files.
        :param args: positional arguments for baseclass.
        :param kwargs: keyword arguments for baseclass.

        """
        required_meta = set(
            ('model_function', 'config', 'format_version'))
        kwargs['save_weights_only'] = True
        super().__init__(*args, **kwargs)
        self.unifeat_meta = unifeat_meta
        if not set(unifeat_meta.keys()).issubset(required_meta):
            raise KeyError(
                '`unifeat_meta` may only contain: {}'.format(required_meta))
        self.logger = unifeat.common.get_named_logger("CheckPnt")

    def on_epoch_end(self, epoch, logs=None):
        """Perform actions at the end of an epoch."""
        super().on_epoch_end(epoch, logs)
        # keras numbers checkpoint files from 1
        self.epoch_fp = self.filepath.format(epoch=epoch + 1, **(logs or {}))
        if os.path.exists(self.epoch_fp):
            self.pack_meta(epoch + 1)

    def pack_meta(self, epoch):
        """Write meta to hdf."""
        with unifeat.datastore.DataStore(self.epoch_fp, 'a') as ds:
            for k, v in self.unifeat_meta.items():
                ds.set_meta(v, k)
            ds.set_meta(epoch, 'epoch')
        self.logger.info('Wrote checkpoint {}.'.format(self.epoch_fp))


class StepLossLogger(Callback):
    """Tab-separated log of every loss term at every step."""

    fields = (
        'step', 'epoch', 'L_M_B2', 'L_M_B3', 'L_M_student', 'L_C', 'L_Dis',
        'total', 'lr')

    def __init__(self, filepath, append=False):
        """Initialize logging.

        :param filepath: output file.
        :param append: append to an existing log (resumed training).
        """
        super().__init__()
        self.filepath = filepath
        self.append = append
        self.step = 0
        self.epoch = 0
        self.fh = None
        self.logger = unifeat.common.get_named_logger('LossLog')

    def on_train_begin(self, logs=None):
        """Open the log file."""
        exists = self.append and os.path.exists(self.filepath)
        if exists:
            with open(self.filepath) as fh:
                self.step = max(0, sum(1 for _ in fh) - 1)
        self.fh = open(self.filepath, 'a' if exists else 'w')
        if not exists:
            self.fh.write('\t'.join(self.fields) + '\n')

    def on_epoch_begin(self, epoch, logs=None):
        """Record the epoch index."""
        self.epoch = epoch

    def on_train_batch_end(self, batch, logs=None):
        """Write one row."""
        logs = logs or {}
        self.step += 1
        lr = float(tf.keras.backend.get_value(
            self.model.optimizer.learning_rate))
        row = [str(self.step), str(self.epoch)]
        row.extend(
            '{:.8g}'.format(float(logs.get(k, np.nan)))
            for k in self.fields[2:-1])
        row.append('{:.8g}'.format(lr))
        self.fh.write('\t'.join(row) + '\n')
        self.fh.flush()

    def on_epoch_end(self, epoch, logs=None):
        """Log a summary of the last step."""
        logs = logs or {}
        self.logger.info('Epoch {} finished, total loss {:.5f}.'.format(
            epoch + 1, float(logs.get('total', np.nan))))

    def on_train_end(self, logs=None):
        """Close the log file."""
        if self.fh is not None:
            self.fh.close()
            self.fh = None


class NonFiniteLossGuard(Callback):
    """Abort training on a non-finite loss, dumping the offending tuples."""

    def __init__(self, sequence, dump_path):
        """Initialize the guard.

        :param sequence: the `TupleSequence` being trained on.
        :param dump_path: JSON file written on failure.
        """
        super().__init__()
        self.sequence = sequence
        self.dump_path = dump_path

    def on_train_batch_end(self, batch, logs=None):
        """Check the total loss of the last step."""
        logs = logs or {}
        total = float(logs.get('total', 0.0))
        if np.isfinite(total):
            return
        dump = {
            'epoch': self.sequence.epoch,
            'batch': int(batch),
            'losses': {k: float(v) for k, v in logs.items()},
            'tuples': [t._asdict() for t in self.sequence.batch_tuples(batch)]}
        with open(self.dump_path, 'w') as fh:
            json.dump(dump, fh, indent=2)
        self.model.stop_training = True
        raise unifeat.common.NonFiniteLossError(
            'Non-finite loss at epoch {} batch {}; tuples written to {}.'
            .format(self.sequence.epoch, batch, self.dump_path))


class TupleSequence(Sequence):
    """Interface for keras to batches of training tuples."""

    def __init__(
            self, manifest, epoch_size, batch_tuples, n_negatives,
            image_size, seed=0, epoch=0, loader=None):
        """Initialize batching for training.

        :param manifest: `unifeat.training.PairManifest`.
        :param epoch_size: tuples sampled per epoch.
        :param batch_tuples: tuples per batch.
        :param n_negatives: negatives per tuple.
        :param image_size: side length images are resized to.
        :param seed: base seed, the tuples of epoch i use seed + i.
        :param epoch: index of the first epoch (for resumed training).
        :param loader: function (path, size) -> (H, W, 3) array.
        """
        import unifeat.training
        super().__init__()
        self._sample = unifeat.training.sample_tuples
        self.manifest = manifest
        self.epoch_size = epoch_size
        self.batch_size = batch_tuples
        self.n_negatives = n_negatives
        self.image_size = image_size
        self.seed = seed
        self.epoch = epoch
        self.loader = loader or unifeat.training.load_training_image
        self.logger = unifeat.common.get_named_logger('TupleBatcher')
        self._resample()
        self.logger.info(
            '{} batches of {} tuples from {} pairs.'.format(
                len(self), self.batch_size, len(manifest)))

    def _resample(self):
        self.tuples = self._sample(
            self.manifest, self.epoch_size, self.seed + self.epoch,
            n_negatives=self.n_negatives)

    def __len__(self):
        """Return the number of batches."""
        return max(1, len(self.tuples) // self.batch_size)

    def batch_tuples(self, idx):
        """Tuples making up batch `idx` of the current epoch."""
        return self.tuples[idx * self.batch_size:(idx + 1) * self.batch_size]

    def __getitem__(self, idx):
        """Return the ith batch as a (B, T, S, S, 3) float32 array."""
        size = (self.image_size, self.image_size)
        batch = [
            np.stack([self.loader(path, size) for path in t.paths()])
            for t in self.batch_tuples(idx)]
        return np.stack(batch).astype(np.float32)

    def on_epoch_end(self):
        """Sample fresh tuples for the next epoch."""
        self.epoch += 1
        self._resample()
