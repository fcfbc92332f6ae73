"""Creation and loading of models."""
import collections
import functools
import os
import pathlib
import tempfile
import urllib.parse

import numpy as np
import requests

import unifeat.common
import unifeat.datastore
import unifeat.options
from unifeat.common import BlockFeatures, FeatureMap, FeaturePyramid

logger = unifeat.common.get_named_logger('ModelLoad')


class DownloadError(ValueError):
    """Raised when a checkpoint is unsuccessfully downloaded."""


BackboneSpec = collections.namedtuple(
    'BackboneSpec', ['blocks', 'filters', 'stem_filters', 'imagenet'])
BackboneSpec.__doc__ = """Bottleneck ResNet layout.

`blocks` and `filters` list the residual units and bottleneck widths of
the four stages (outputs are four times wider); `imagenet` names the
`tf.keras.applications` model providing pretrained weights, if any.
"""

backbone_specs = {
    'resnet101': BackboneSpec((3, 4, 23, 3), (64, 128, 256, 512), 64,
                              'ResNet101'),
    'resnet50': BackboneSpec((3, 4, 6, 3), (64, 128, 256, 512), 64,
                             'ResNet50'),
    'resnet_tiny': BackboneSpec((1, 1, 1, 1), (4, 8, 16, 32), 8, None),
}

# first-unit stride and 3x3 dilation of the four stages
_standard_layout = ((1, 1), (2, 1), (2, 1), (2, 1))
# second and third stages stay at stride 4, dilation restores their field
_dilated_layout = ((1, 1), (1, 2), (1, 4), (2, 4))


def block_strides(dilated=False):
    """Image pixels per cell of the four block outputs."""
    stride, strides = 4, []
    for unit_stride, _ in _dilated_layout if dilated else _standard_layout:
        stride *= unit_stride
        strides.append(stride)
    return tuple(strides)


def _bottleneck(x, filters, stride, dilation, shortcut, name):
    """Residual bottleneck unit with keras.applications layer names."""
    from tensorflow.keras import layers
    bn = functools.partial(
        layers.BatchNormalization, axis=3, epsilon=1.001e-5)
    if shortcut:
        skip = layers.Conv2D(
            4 * filters, 1, strides=stride, name=name + '_0_conv')(x)
        skip = bn(name=name + '_0_bn')(skip)
    else:
        skip = x
    x = layers.Conv2D(filters, 1, strides=stride, name=name + '_1_conv')(x)
    x = bn(name=name + '_1_bn')(x)
    x = layers.Activation('relu', name=name + '_1_relu')(x)
    x = layers.Conv2D(
        filters, 3, padding='same', dilation_rate=dilation,
        name=name + '_2_conv')(x)
    x = bn(name=name + '_2_bn')(x)
    x = layers.Activation('relu', name=name + '_2_relu')(x)
    x = layers.Conv2D(4 * filters, 1, name=name + '_3_conv')(x)
    x = bn(name=name + '_3_bn')(x)
    x = layers.Add(name=name + '_add')([skip, x])
    return layers.Activation('relu', name=name + '_out')(x)


def build_backbone(name=unifeat.options.default_backbone, dilated=False):
    """Build a ResNet returning the outputs of its four residual stages.

    With `dilated`, the second and third stages run at stride 1 with
    dilated 3x3 kernels so both share the first stage's stride 4 grid; the
    weights are interchangeable with the standard network.

    :param name: key of `backbone_specs`.
    :param dilated: build the dense (test time) variant.

    :returns: `keras.Model` mapping (B, H, W, 3) RGB in [0, 1] to four maps.
    """
    import tensorflow as tf
    from tensorflow.keras import layers
    from unifeat.keras_ext import ImageNetNormalization

    try:
        spec = backbone_specs[name]
    except KeyError:
        raise unifeat.common.ConfigError(
            'Unknown backbone {}, choose from {}.'.format(
                name, ', '.join(backbone_specs)))
    layout = _dilated_layout if dilated else _standard_layout

    inputs = layers.Input((None, None, 3), name='image')
    x = ImageNetNormalization(name='imagenet_norm')(inputs)
    x = layers.ZeroPadding2D(3, name='conv1_pad')(x)
    x = layers.Conv2D(spec.stem_filters, 7, strides=2, name='conv1_conv')(x)
    x = layers.BatchNormalization(
        axis=3, epsilon=1.001e-5, name='conv1_bn')(x)
    x = layers.Activation('relu', name='conv1_relu')(x)
    x = layers.ZeroPadding2D(1, name='pool1_pad')(x)
    x = layers.MaxPooling2D(3, strides=2, name='pool1_pool')(x)

    outputs = []
    for stage, (n_units, filters, (stride, dilation)) in enumerate(
            zip(spec.blocks, spec.filters, layout), start=2):
        for unit in range(1, n_units + 1):
            x = _bottleneck(
                x, filters, stride if unit == 1 else 1, dilation,
                shortcut=unit == 1,
                name='conv{}_block{}'.format(stage, unit))
        outputs.append(x)
    suffix = '_dilated' if dilated else ''
    return tf.keras.Model(inputs, outputs, name=name + suffix)


def transfer_weights(source, target):
    """Copy weights between models for all layers sharing a name.

    :returns: number of layers copied.
    """
    by_name = {layer.name: layer for layer in source.layers}
    copied = 0
    for layer in target.layers:
        if layer.weights and layer.name in by_name:
            layer.set_weights(by_name[layer.name].get_weights())
            copied += 1
    return copied


def load_backbone_weights(backbone, name, weights):
    """Initialise backbone weights.

    :param backbone: model from `build_backbone`.
    :param name: key of `backbone_specs`.
    :param weights: 'imagenet', 'random' or a keras weights file.

    :returns: description of the weight source.
    """
    import tensorflow as tf
    if weights == 'random':
        return 'random'
    if weights == 'imagenet':
        source_name = backbone_specs[name].imagenet
        if source_name is None:
            raise unifeat.common.ConfigError(
                'No ImageNet weights are available for {}.'.format(name))
        logger.info('Loading ImageNet weights for {}.'.format(name))
        source = getattr(tf.keras.applications, source_name)(
            include_top=False, weights='imagenet')
        copied = transfer_weights(source, backbone)
        logger.debug('Copied weights of {} layers.'.format(copied))
        return 'imagenet'
    if not os.path.exists(weights):
        raise unifeat.common.CheckpointError(
            'Backbone weights {} not found.'.format(weights))
    backbone.load_weights(weights)
    return weights


def build_joint_net(
        backbone=unifeat.options.default_backbone, backbone_weights=None,
        dims=(256, 256), fpn_width=256, gem_p=3.0, drop_prob=0.3,
        loss_params=None, freeze_policy='freeze_B2B3', location_cap=0,
        seed=None):
    """Build the joint network.

    :param backbone: key of `backbone_specs`.
    :param backbone_weights: 'imagenet', 'random', a weights file, or
        `None` to leave the network marked as uninitialised.
    :param dims: reduction widths of the second and third blocks.
    :param fpn_width: channels per pyramid level.
    :param gem_p: GeM power.
    :param drop_prob: channel dropout of the reduction head.
    :param loss_params: dict of `unifeat.losses.LossConfig` fields.
    :param freeze_policy: one of `unifeat.options.freeze_policies`.
    :param location_cap: locations per image in training affinities.
    :param seed: dropout seed.

    :returns: `unifeat.keras_ext.JointNet`.
    """
    import unifeat.keras_ext
    import unifeat.losses
    base = build_backbone(backbone)
    source = None
    if backbone_weights is not None:
        source = load_backbone_weights(base, backbone, backbone_weights)
    net = unifeat.keras_ext.JointNet(
        base, backbone, dims=dims, fpn_width=fpn_width, gem_p=gem_p,
        drop_prob=drop_prob,
        loss_config=unifeat.losses.LossConfig(**(loss_params or {})),
        freeze_policy=freeze_policy, location_cap=location_cap, seed=seed,
        name='joint_net')
    net.ensure_built()
    net.weights_source = source
    return net


def model_function_from_config(config):
    """Partial network builder capturing a `RunConfig`.

    The returned object is pickled into checkpoints; calling it with
    `backbone_weights` builds the network.
    """
    return functools.partial(
        build_joint_net, backbone=config.backbone,
        dims=(config.dim_b2, config.dim_b3), fpn_width=config.fpn_width,
        gem_p=config.gem_p, drop_prob=config.drop_prob,
        loss_params=dict(
            margin_m=config.margin_m, tau=config.tau, lam=config.lam,
            n_negatives=config.n_negatives, window=config.window),
        freeze_policy=config.freeze_policy,
        location_cap=config.location_cap, seed=config.seed)


def _check_ready(net):
    if net.weights_source is None:
        raise unifeat.common.StateError(
            'Network weights have not been initialised.')


def _batch(image):
    image = unifeat.common.check_image(image)
    return np.asarray(image, dtype=np.float32)[np.newaxis]


def extract_block_features(net, image, mode='test', dilated_backbone=None):
    """Run the backbone on one image.

    :param net: `JointNet` with initialised weights.
    :param image: (H, W, 3) RGB array in [0, 1].
    :param mode: 'train' (standard strides) or 'test' (dilated second and
        third stages sharing stride 4).
    :param dilated_backbone: prebuilt dilated copy of `net.backbone`,
        created on the fly if not given.

    :returns: `BlockFeatures` of numpy `FeatureMap` s.
    """
    _check_ready(net)
    if mode not in ('train', 'test'):
        raise ValueError("mode must be 'train' or 'test'.")
    dilated = mode == 'test'
    if dilated:
        if dilated_backbone is None:
            dilated_backbone = build_dilated_backbone(net)
        model = dilated_backbone
    else:
        model = net.backbone
    outputs = model(_batch(image), training=False)
    return BlockFeatures(*(
        FeatureMap(out.numpy()[0], stride)
        for out, stride in zip(outputs, block_strides(dilated))))


def build_dilated_backbone(net, local_only=False):
    """Dense copy of a network's backbone sharing its current weights.

    :param net: `JointNet`.
    :param local_only: output only the second and third blocks; the last
        stage is then not part of the model and never computed.

    :returns: `keras.Model`.
    """
    import tensorflow as tf
    dilated = build_backbone(net.backbone_name, dilated=True)
    if local_only:
        dilated = tf.keras.Model(
            dilated.input, dilated.outputs[1:3], name=dilated.name + '_local')
    transfer_weights(net.backbone, dilated)
    return dilated


def extract_local_blocks(net, image, local_backbone=None):
    """Second and third dilated blocks of one image.

    :param net: `JointNet` with initialised weights.
    :param image: (H, W, 3) RGB array in [0, 1].
    :param local_backbone: prebuilt `build_dilated_backbone(net, True)`.

    :returns: `BlockFeatures` with only `c2` and `c3` set.
    """
    _check_ready(net)
    if local_backbone is None:
        local_backbone = build_dilated_backbone(net, local_only=True)
    strides = block_strides(dilated=True)
    c2, c3 = local_backbone(_batch(image), training=False)
    return BlockFeatures(
        None, FeatureMap(c2.numpy()[0], strides[1]),
        FeatureMap(c3.numpy()[0], strides[2]), None)


def build_fpn(net, blocks):
    """Top-down pyramid of block features.

    :param net: `JointNet`.
    :param blocks: `BlockFeatures`.

    :returns: `FeaturePyramid` of numpy `FeatureMap` s.
    """
    _check_ready(net)
    for finer, coarser in zip(blocks[:-1], blocks[1:]):
        if coarser.height > finer.height or coarser.width > finer.width:
            raise unifeat.common.DimensionError(
                'Block of size {}x{} cannot be upsampled onto {}x{}.'.format(
                    coarser.height, coarser.width, finer.height, finer.width))
    levels = net.fpn([b.values[np.newaxis] for b in blocks])
    return FeaturePyramid(*(
        FeatureMap(level.numpy()[0], block.stride)
        for level, block in zip(levels, blocks)))


def concat_local_features(blocks):
    """Concatenate the second and third blocks on the second block's grid.

    :param blocks: `BlockFeatures`.

    :returns: `FeatureMap` with `block_channels` set.
    """
    import unifeat.keras_ext
    c2, c3 = blocks.c2, blocks.c3
    if c3.height > c2.height or c3.width > c2.width:
        raise unifeat.common.DimensionError(
            'Third block {}x{} cannot be aligned to second block {}x{}.'
            .format(c3.height, c3.width, c2.height, c2.width))
    if (c3.height, c3.width) == (c2.height, c2.width):
        values = np.concatenate([c2.values, c3.values], axis=2)
    else:
        values = unifeat.keras_ext.concat_blocks(
            c2.values[np.newaxis], c3.values[np.newaxis]).numpy()[0]
    return FeatureMap(
        values, c2.stride, block_channels=(c2.channels, c3.channels))


def resolve_checkpoint(checkpoint):
    """Resolve a checkpoint filepath, downloading URLs if necessary.

    :param checkpoint: filepath or http(s) URL of an hdf checkpoint.

    :returns: filepath to the checkpoint.
    """
    if os.path.exists(checkpoint):
        return checkpoint
    parsed = urllib.parse.urlparse(checkpoint)
    if parsed.scheme not in ('http', 'https'):
        raise unifeat.common.CheckpointError(
            'Checkpoint {} does not exist.'.format(checkpoint))
    fname = os.path.basename(parsed.path)
    stores = unifeat.options.checkpoint_stores()
    for store in stores:
        fp = os.path.join(store, fname)
        if os.path.exists(fp):
            return fp

    try:
        data = requests.get(checkpoint, timeout=60).content
        with tempfile.TemporaryDirectory() as tmpdir:
            # write the data and check it looks like a checkpoint
            tmp_file = os.path.join(tmpdir, fname)
            with open(tmp_file, 'wb') as fh:
                fh.write(data)
            with unifeat.datastore.ModelStore(tmp_file) as store:
                if store.get_meta('model_function') is None:
                    raise ValueError('Not a checkpoint.')
    except Exception as e:
        raise DownloadError(
            "The checkpoint {} could not be downloaded ({}). Check you are "
            "connected to the internet and try again.".format(checkpoint, e))
    # save the checkpoint, try all locations
    for store in stores:
        fp = os.path.join(store, fname)
        try:
            pathlib.Path(store).mkdir(parents=True, exist_ok=True)
            with open(fp, 'wb') as fh:
                fh.write(data)
            return fp
        except Exception:  # we might not have write access
            pass
    raise RuntimeError(
        "The checkpoint {} could not be installed to any of {}. Download it "
        "manually and give the downloaded filepath instead.".format(
            checkpoint, ' or '.join(stores)))


def open_checkpoint(checkpoint):
    """Load a network from a checkpoint filepath or URL.

    :returns: (`JointNet`, `RunConfig` stored with it, completed epochs).
    """
    import unifeat.config
    fp = resolve_checkpoint(checkpoint)
    with unifeat.datastore.ModelStore(fp) as store:
        net = store.load_model()
        config = unifeat.config.RunConfig.from_json(store.get_meta('config'))
        epoch = store.get_meta('epoch') or 0
    return net, config, epoch
