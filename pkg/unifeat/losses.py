"""Differentiable losses for joint local and global training.

All functions accept arbitrary leading (batch) dimensions and work in the
dtype of their inputs, so they can be checked numerically in float64.
"""
import collections

import tensorflow as tf

import unifeat.common


_LossConfig = collections.namedtuple(
    'LossConfig', ['margin_m', 'tau', 'lam', 'n_negatives', 'window'])


class LossConfig(_LossConfig):
    """Margins, weights and tuple structure of the joint objective."""

    def __new__(
            cls, margin_m=0.5, tau=0.85, lam=0.1, n_negatives=5, window=3):
        self = super().__new__(
            cls, float(margin_m), float(tau), float(lam), int(n_negatives),
            int(window))
        if not (self.margin_m > 0 and self.tau > 0 and self.lam >= 0
                and self.n_negatives >= 1 and self.window % 2 == 1):
            raise unifeat.common.ConfigError(
                'Invalid loss configuration: {}.'.format(self))
        return self

    @classmethod
    def from_run_config(cls, config):
        """Create from a `unifeat.config.RunConfig`."""
        return cls(
            margin_m=config.margin_m, tau=config.tau, lam=config.lam,
            n_negatives=config.n_negatives, window=config.window)


# keeps norms and their gradients finite at the origin
_norm_eps = 1e-12


def safe_norm(x, axis=-1, keepdims=False):
    """Euclidean norm with a finite gradient at zero."""
    squared = tf.reduce_sum(tf.square(x), axis=axis, keepdims=keepdims)
    return tf.sqrt(tf.maximum(squared, tf.cast(_norm_eps, x.dtype)))


def l2_normalize(x, axis=-1):
    """Scale vectors to unit norm, zero vectors stay zero."""
    return x / safe_norm(x, axis=axis, keepdims=True)


def flatten_locations(fmap):
    """Reshape (..., H, W, C) maps to (..., H*W, C) location descriptors."""
    shape = tf.shape(fmap)
    new_shape = tf.concat([shape[:-3], [shape[-3] * shape[-2], shape[-1]]], 0)
    return tf.reshape(fmap, new_shape)


def location_descriptors(fmap):
    """Per-location unit-norm descriptors of a map, (..., H*W, C)."""
    return l2_normalize(flatten_locations(fmap))


def affinity_matrix(desc_a, desc_p):
    """Inner products between all rows of two descriptor sets.

    :param desc_a: (..., N1, D) tensor.
    :param desc_p: (..., N2, D) tensor.

    :returns: (..., N1, N2) tensor.
    """
    desc_a = tf.convert_to_tensor(desc_a)
    desc_p = tf.convert_to_tensor(desc_p, dtype=desc_a.dtype)
    if desc_a.shape[-1] is not None and desc_p.shape[-1] is not None \
            and desc_a.shape[-1] != desc_p.shape[-1]:
        raise unifeat.common.DimensionError(
            'Descriptor dimensions differ: {} and {}.'.format(
                desc_a.shape[-1], desc_p.shape[-1]))
    return tf.matmul(desc_a, desc_p, transpose_b=True)


def affinity_score(affinity):
    """Average of row maxima and column maxima of an affinity matrix.

    :param affinity: (..., N1, N2) tensor.

    :returns: (...) tensor.
    """
    affinity = tf.convert_to_tensor(affinity)
    if 0 in affinity.shape[-2:]:
        raise ValueError('Cannot score an empty affinity matrix.')
    rows = tf.reduce_mean(tf.reduce_max(affinity, axis=-1), axis=-1)
    cols = tf.reduce_mean(tf.reduce_max(affinity, axis=-2), axis=-1)
    return 0.5 * rows + 0.5 * cols


def matching_margin_loss(s_ap, s_an, margin):
    """Hinge on positive against negative affinity scores.

    :param s_ap: (...) anchor-positive scores.
    :param s_an: (..., K) anchor-negative scores.
    :param margin: margin m.

    :returns: (...) tensor, mean over the K negatives.
    """
    s_an = tf.convert_to_tensor(s_an)
    if s_an.shape[-1] == 0:
        raise ValueError('At least one negative score is required.')
    s_ap = tf.convert_to_tensor(s_ap, dtype=s_an.dtype)
    margin = tf.cast(margin, s_an.dtype)
    return tf.reduce_mean(
        tf.nn.relu(s_an - tf.expand_dims(s_ap, -1) + margin), axis=-1)


def soft_detection(fmap, window=3):
    """Normalised soft detection scores of a non-negative feature map.

    Combines a soft local-maximum term (softmax of each channel over a
    window, borders mirrored) with the ratio to the channel's spatial
    maximum, takes the maximum over channels and normalises to sum to one.

    :param fmap: (H, W, C) or (B, H, W, C) tensor.
    :param window: odd side length of the local window.

    :returns: (H, W) or (B, H, W) tensor.
    """
    fmap = tf.convert_to_tensor(fmap)
    unbatched = fmap.shape.rank == 3
    if unbatched:
        fmap = fmap[tf.newaxis]
    eps = tf.cast(_norm_eps, fmap.dtype)
    channel_max = tf.reduce_max(fmap, axis=[1, 2], keepdims=True)
    exp = tf.exp(fmap - channel_max)
    pad = window // 2
    padded = tf.pad(
        exp, [[0, 0], [pad, pad], [pad, pad], [0, 0]], mode='SYMMETRIC')
    local_sum = tf.nn.avg_pool2d(padded, window, 1, 'VALID') * window ** 2
    alpha = exp / local_sum
    beta = fmap / tf.maximum(channel_max, eps)
    raw = tf.reduce_max(alpha * beta, axis=-1)
    total = tf.reduce_sum(raw, axis=[1, 2], keepdims=True)
    n_cells = tf.cast(tf.shape(raw)[1] * tf.shape(raw)[2], raw.dtype)
    scores = tf.where(
        total > 0, raw / tf.maximum(total, eps), tf.ones_like(raw) / n_cells)
    if unbatched:
        scores = scores[0]
    return scores


def distillation_weights(det_a, det_p):
    """Outer product of two detection distributions scaled to mean one.

    :param det_a: (..., N1) scores summing to one.
    :param det_p: (..., N2) scores summing to one.

    :returns: (..., N1, N2) tensor.
    """
    n1 = tf.cast(tf.shape(det_a)[-1], det_a.dtype)
    n2 = tf.cast(tf.shape(det_p)[-1], det_p.dtype)
    return tf.expand_dims(det_a, -1) * tf.expand_dims(det_p, -2) * n1 * n2


def distillation_loss(m_high, det_a, det_p, m_low):
    """Squared error between a detection-weighted teacher affinity and a
    student affinity.

    :param m_high: (..., N1, N2) teacher affinity.
    :param det_a: (..., N1) anchor detection scores.
    :param det_p: (..., N2) positive detection scores.
    :param m_low: (..., N1, N2) student affinity.

    :returns: (...) tensor, mean over matrix entries.
    """
    m_high = tf.convert_to_tensor(m_high)
    m_low = tf.convert_to_tensor(m_low, dtype=m_high.dtype)
    det_a = tf.convert_to_tensor(det_a, dtype=m_high.dtype)
    det_p = tf.convert_to_tensor(det_p, dtype=m_high.dtype)
    if m_high.shape.is_fully_defined() and m_low.shape.is_fully_defined() \
            and m_high.shape != m_low.shape:
        raise unifeat.common.DimensionError(
            'Affinity shapes differ: {} and {}.'.format(
                m_high.shape, m_low.shape))
    target = m_high * distillation_weights(det_a, det_p)
    return tf.reduce_mean(tf.square(target - m_low), axis=[-2, -1])


def contrastive_loss(desc_a, desc_b, label, tau):
    """Contrastive loss on global descriptors.

    :param desc_a: (..., D) descriptors.
    :param desc_b: (..., D) descriptors.
    :param label: 1 for matching pairs, 0 otherwise (broadcastable).
    :param tau: margin for non-matching pairs.

    :returns: (...) tensor.
    """
    desc_a = tf.convert_to_tensor(desc_a)
    desc_b = tf.convert_to_tensor(desc_b, dtype=desc_a.dtype)
    label = tf.cast(label, desc_a.dtype)
    tau = tf.cast(tau, desc_a.dtype)
    distance = safe_norm(desc_a - desc_b)
    positive = 0.5 * tf.reduce_sum(tf.square(desc_a - desc_b), axis=-1)
    negative = 0.5 * tf.square(tf.nn.relu(tau - distance))
    return label * positive + (1 - label) * negative


def _renormalize(scores):
    total = tf.reduce_sum(scores, axis=-1, keepdims=True)
    return scores / tf.maximum(total, tf.cast(_norm_eps, scores.dtype))


def _select_locations(fmap, desc, cap):
    """Keep the `cap` locations with the largest L2 response per image.

    :param fmap: (B, T, H, W, C) map providing the response.
    :param desc: (B, T, N, D) descriptors on the same grid.
    :param cap: maximum number of locations.

    :returns: (selected descriptors, (B, T, k) indices).
    """
    response = tf.stop_gradient(
        tf.norm(flatten_locations(fmap), axis=-1))
    k = tf.minimum(cap, tf.shape(response)[-1])
    indices = tf.math.top_k(response, k=k, sorted=False).indices
    return tf.gather(desc, indices, batch_dims=2), indices


def tuple_scores(desc):
    """Anchor affinity scores against every other tuple member.

    :param desc: (B, T, N, D) unit-norm descriptors, index 0 the anchor,
        index 1 the positive.

    :returns: (s_ap (B,), s_an (B, T-2)).
    """
    anchor = desc[:, :1]
    scores = affinity_score(affinity_matrix(anchor, desc[:, 1:]))
    return scores[:, 0], scores[:, 1:]


def total_loss(
        b2, b3, teacher, student, global_desc, config,
        gradient_cut=False, location_cap=0):
    """Joint objective over a batch of training tuples.

    Tuple index 0 is the anchor, 1 the positive, the rest negatives.

    :param b2: (B, T, H2, W2, C2) second-block maps.
    :param b3: (B, T, H3, W3, C3) third-block maps on their own grid.
    :param teacher: (B, T, H2, W2, C2+C3) concatenated teacher maps.
    :param student: (B, T, H2, W2, D2+D3) reduced student maps.
    :param global_desc: (B, T, Dg) unit-norm global descriptors.
    :param config: `LossConfig`.
    :param gradient_cut: stop distillation gradients reaching the teacher.
    :param location_cap: if positive, affinities use only this many
        locations per image, those with the largest teacher response.

    :returns: dict of batch-mean scalars `L_M_B2`, `L_M_B3`,
        `L_M_student`, `L_C`, `L_Dis` and `total`.
    """
    teacher_desc = location_descriptors(teacher)
    student_desc = location_descriptors(student)
    b2_desc = location_descriptors(b2)
    b3_desc = location_descriptors(b3)

    det_source = tf.stop_gradient(teacher) if gradient_cut else teacher
    det_a = tf.reshape(soft_detection(det_source[:, 0], config.window),
                       [tf.shape(teacher)[0], -1])
    det_p = tf.reshape(soft_detection(det_source[:, 1], config.window),
                       [tf.shape(teacher)[0], -1])

    if location_cap > 0:
        teacher_desc, idx = _select_locations(
            teacher, teacher_desc, location_cap)
        student_desc = tf.gather(student_desc, idx, batch_dims=2)
        b2_desc = tf.gather(b2_desc, idx, batch_dims=2)
        det_a = tf.gather(det_a, idx[:, 0], batch_dims=1)
        det_p = tf.gather(det_p, idx[:, 1], batch_dims=1)
        det_a = _renormalize(det_a)
        det_p = _renormalize(det_p)
        b3_desc, _ = _select_locations(b3, b3_desc, location_cap)

    terms = {}
    for name, desc in (
            ('L_M_B2', b2_desc), ('L_M_B3', b3_desc),
            ('L_M_student', student_desc)):
        s_ap, s_an = tuple_scores(desc)
        terms[name] = tf.reduce_mean(
            matching_margin_loss(s_ap, s_an, config.margin_m))

    anchor = global_desc[:, :1]
    labels = tf.concat([
        tf.ones([1], global_desc.dtype),
        tf.zeros([tf.shape(global_desc)[1] - 2], global_desc.dtype)], 0)
    terms['L_C'] = tf.reduce_mean(tf.reduce_sum(
        contrastive_loss(anchor, global_desc[:, 1:], labels, config.tau),
        axis=-1))

    high = tf.stop_gradient(teacher_desc) if gradient_cut else teacher_desc
    m_high = affinity_matrix(high[:, 0], high[:, 1])
    m_low = affinity_matrix(student_desc[:, 0], student_desc[:, 1])
    terms['L_Dis'] = tf.reduce_mean(
        distillation_loss(m_high, det_a, det_p, m_low))

    terms['total'] = terms['L_M_B2'] + terms['L_M_B3'] + \
        terms['L_M_student'] + terms['L_C'] + \
        tf.cast(config.lam, terms['L_Dis'].dtype) * terms['L_Dis']
    return terms
