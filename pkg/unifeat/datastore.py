"""Reading and writing of features, global descriptors and checkpoints.

Feature and global descriptor files are a short ASCII header, terminated
by a line reading `end`, followed by a raw little-endian float32 payload::

    UNIFEAT-FEATURES            UNIFEAT-GLOBAL
    version 1                   version 1
    dim <D>                     dim <D>
    keypoints <N>               image_id <id>
    image_size <W> <H>          end
    stride <s>                  <D float32>
    mode <teacher|TS|SS>
    groups <G>
    end
    <N x 4 float32: x, y, score, group_id>
    <N x D float32: descriptors>
"""
import collections
import os
import pickle
import warnings

import numpy as np

import unifeat.common
import unifeat.options


with warnings.catch_warnings():
    warnings.filterwarnings("ignore", category=FutureWarning)
    import h5py


_payload_dtype = np.dtype('<f4')
_end_of_header = b'end'

FeatureRecord = collections.namedtuple(
    'FeatureRecord',
    ['keypoints', 'descriptors', 'image_size', 'stride', 'mode', 'groups',
     'version'])
FeatureRecord.__doc__ = """Contents of a feature file.

`keypoints` is an (N, 4) float32 array of x, y, score, group_id and
`descriptors` an (N, D) float32 array.
"""

GlobalRecord = collections.namedtuple(
    'GlobalRecord', ['vector', 'image_id', 'version'])


def _format_number(value):
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def _read_header(fh, path, magic):
    """Read header lines up to `end`, returning a dict of fields."""
    first = fh.readline().rstrip(b'\n')
    if first != magic.encode():
        raise unifeat.common.FormatError(
            '{} is not a {} file.'.format(path, magic))
    fields = {}
    while True:
        line = fh.readline()
        if line == b'':
            raise unifeat.common.FormatError(
                'Unexpected end of header in {}.'.format(path))
        line = line.rstrip(b'\n')
        if line == _end_of_header:
            return fields
        try:
            key, value = line.decode('utf-8').split(' ', 1)
        except (UnicodeDecodeError, ValueError):
            raise unifeat.common.FormatError(
                'Malformed header line {!r} in {}.'.format(line, path))
        fields[key] = value


def _header_int(fields, key, path):
    try:
        return int(fields[key])
    except (KeyError, ValueError):
        raise unifeat.common.FormatError(
            'Missing or invalid header field "{}" in {}.'.format(key, path))


def _read_payload(fh, count, path):
    data = fh.read()
    expected = count * _payload_dtype.itemsize
    if len(data) != expected:
        raise unifeat.common.FormatError(
            'Payload of {} is {} bytes, expected {}.'.format(
                path, len(data), expected))
    return np.frombuffer(data, dtype=_payload_dtype)


def write_features(
        path, keypoints, descriptors, image_size, stride, mode, groups):
    """Write a feature file.

    :param path: output filepath.
    :param keypoints: `KeypointSet` or (N, 4) array.
    :param descriptors: `DescriptorSet` or (N, D) array.
    :param image_size: (width, height) of the source image.
    :param stride: stride of the map the keypoints were detected on.
    :param mode: extraction mode.
    :param groups: detector group count.
    """
    if isinstance(keypoints, unifeat.common.KeypointSet):
        keypoints = keypoints.as_array()
    descriptors = getattr(descriptors, 'vectors', descriptors)
    keypoints = np.ascontiguousarray(keypoints, dtype=_payload_dtype)
    descriptors = np.ascontiguousarray(descriptors, dtype=_payload_dtype)
    if keypoints.ndim != 2 or keypoints.shape[1] != 4 or \
            descriptors.ndim != 2 or len(keypoints) != len(descriptors):
        raise unifeat.common.DimensionError(
            'Inconsistent keypoint {} and descriptor {} shapes.'.format(
                keypoints.shape, descriptors.shape))
    header = [
        unifeat.options.feature_file_magic,
        'version {}'.format(unifeat.options.feature_file_version),
        'dim {}'.format(descriptors.shape[1]),
        'keypoints {}'.format(len(keypoints)),
        'image_size {} {}'.format(int(image_size[0]), int(image_size[1])),
        'stride {}'.format(_format_number(stride)),
        'mode {}'.format(mode),
        'groups {}'.format(int(groups)),
        _end_of_header.decode()]
    with open(path, 'wb') as fh:
        fh.write(('\n'.join(header) + '\n').encode('ascii'))
        fh.write(keypoints.tobytes())
        fh.write(descriptors.tobytes())


def read_features(path):
    """Read a feature file.

    :param path: input filepath.

    :returns: `FeatureRecord`.
    """
    with open(path, 'rb') as fh:
        fields = _read_header(fh, path, unifeat.options.feature_file_magic)
        version = _header_int(fields, 'version', path)
        if version > unifeat.options.feature_file_version:
            raise unifeat.common.FormatError(
                'Feature file {} has unsupported version {}.'.format(
                    path, version))
        dim = _header_int(fields, 'dim', path)
        n = _header_int(fields, 'keypoints', path)
        groups = _header_int(fields, 'groups', path)
        try:
            image_size = tuple(int(v) for v in fields['image_size'].split())
            stride = float(fields['stride'])
            mode = fields['mode']
        except (KeyError, ValueError):
            raise unifeat.common.FormatError(
                'Invalid header in {}.'.format(path))
        payload = _read_payload(fh, 4 * n + n * dim, path)
    keypoints = payload[:4 * n].reshape(n, 4)
    descriptors = payload[4 * n:].reshape(n, dim)
    if stride.is_integer():
        stride = int(stride)
    return FeatureRecord(
        keypoints, descriptors, image_size, stride, mode, groups, version)


def write_global(path, vector, image_id):
    """Write a global descriptor file."""
    vector = np.ascontiguousarray(
        getattr(vector, 'vector', vector), dtype=_payload_dtype)
    if '\n' in image_id:
        raise ValueError('Image ids may not contain newlines.')
    header = [
        unifeat.options.global_file_magic,
        'version {}'.format(unifeat.options.global_file_version),
        'dim {}'.format(len(vector)),
        'image_id {}'.format(image_id),
        _end_of_header.decode()]
    with open(path, 'wb') as fh:
        fh.write(('\n'.join(header) + '\n').encode('utf-8'))
        fh.write(vector.tobytes())


def read_global(path):
    """Read a global descriptor file.

    :returns: `GlobalRecord`.
    """
    with open(path, 'rb') as fh:
        fields = _read_header(fh, path, unifeat.options.global_file_magic)
        version = _header_int(fields, 'version', path)
        dim = _header_int(fields, 'dim', path)
        if 'image_id' not in fields:
            raise unifeat.common.FormatError(
                'Missing image_id in {}.'.format(path))
        vector = _read_payload(fh, dim, path)
    return GlobalRecord(vector, fields['image_id'], version)


class IndexDirectory(object):
    """A directory of global descriptor files with a manifest of ids."""

    suffix = '.gdesc'

    def __init__(self, path):
        """Initialize an index directory.

        :param path: directory path, created on first write.
        """
        self.path = path
        self.logger = unifeat.common.get_named_logger('IndexDir')

    @property
    def manifest(self):
        """Filepath of the id manifest."""
        return os.path.join(self.path, unifeat.options.index_manifest)

    def descriptor_path(self, image_id):
        """Filepath of the descriptor file for an id."""
        if os.sep in image_id or image_id in ('', '.', '..'):
            raise ValueError('Invalid image id {!r}.'.format(image_id))
        return os.path.join(self.path, image_id + self.suffix)

    def ids(self):
        """Ids listed in the manifest, in order."""
        if not os.path.exists(self.manifest):
            return []
        with open(self.manifest) as fh:
            return [line.rstrip('\n') for line in fh if line.strip()]

    def add(self, image_id, vector):
        """Write a descriptor and append its id to the manifest."""
        unifeat.common.mkdir_p(self.path)
        write_global(self.descriptor_path(image_id), vector, image_id)
        if image_id not in self.ids():
            with open(self.manifest, 'a') as fh:
                fh.write('{}\n'.format(image_id))

    def load(self):
        """Build a `unifeat.global_desc.RetrievalIndex` from all entries.

        :raises: `unifeat.common.DimensionError` if dims are inconsistent.
        """
        import unifeat.global_desc
        index = unifeat.global_desc.RetrievalIndex()
        for image_id in self.ids():
            record = read_global(self.descriptor_path(image_id))
            index.add(image_id, record.vector)
        self.logger.info('Loaded {} descriptors from {}.'.format(
            len(index), self.path))
        return index


def read_homography(path):
    """Read a 3x3 whitespace-separated homography text file.

    :raises: `unifeat.common.FormatError` for malformed content.
    """
    try:
        with open(path) as fh:
            values = [float(v) for v in fh.read().split()]
    except ValueError:
        raise unifeat.common.FormatError(
            'Homography {} contains non-numeric values.'.format(path))
    if len(values) != 9:
        raise unifeat.common.FormatError(
            'Homography {} has {} values, expected 9.'.format(
                path, len(values)))
    return np.array(values, dtype=np.float64).reshape(3, 3)


class ModelStore(object):
    """Read a checkpoint: network weights plus meta data in one hdf file."""

    def __init__(self, filepath):
        """Initialize a Modelstore.

        :param filepath: filepath to hdf file
        """
        self.filepath = filepath
        self.logger = unifeat.common.get_named_logger('MdlStore')

    def __enter__(self):
        """Create context for handling a modelstore file."""
        return self

    def __exit__(self, exception_type, exception_value, traceback):
        """Exit context manager."""
        if exception_type is not None:
            self.logger.info('ModelStore exception {}'.format(exception_value))

    def load_model(self):
        """Build the network and load the stored weights.

        :returns: `unifeat.keras_ext.JointNet`.
        """
        version = self.get_meta('format_version')
        if version is None or version > unifeat.options.checkpoint_version:
            raise unifeat.common.CheckpointError(
                '{} is not a supported checkpoint.'.format(self.filepath))
        model_function = self.get_meta('model_function')
        self.logger.info('Loading weights from {}.'.format(self.filepath))
        model = model_function(backbone_weights=None)
        model.load_checkpoint_weights(self.filepath)
        return model

    def get_meta(self, key):
        """Retrieve a meta data item.

        :param key: name of item to load.
        """
        with DataStore(self.filepath) as ds:
            return ds.get_meta(key)


class DataStore(object):
    """Read and write meta data items to .hdf files."""

    _meta_group_ = 'meta'  # top level group for meta items

    def __init__(self, filename, mode='r'):
        """Initialize a datastore.

        :param filename: file to open.
        :param mode: file opening mode ('r', 'w', 'a').
        """
        self.filename = filename
        self.mode = mode
        self.logger = unifeat.common.get_named_logger('DataStre')
        try:
            self.fh = h5py.File(self.filename, self.mode)
        except OSError as e:
            raise unifeat.common.CheckpointError(
                'Cannot open {}: {}'.format(filename, e))

    def __enter__(self):
        """Create context for handling a datastore file."""
        return self

    def __exit__(self, *args):
        """Close file."""
        self.close()

    def close(self):
        """Close filehandle of back-end file."""
        self.fh.close()

    def get_meta(self, key):
        """Load (deserialise) a meta data item.

        :param key: name of item to load.
        """
        path = '{}/{}'.format(self._meta_group_, key)
        try:
            return pickle.loads(self.fh[path][()].tobytes())
        except Exception as e:
            self.logger.debug("Could not load {} from {}. {}.".format(
                key, self.filename, e))

    def set_meta(self, obj, key):
        """Store (serialize) a meta data item to file.

        :param obj: the object to serialise.
        :param key: the name of the object.
        """
        path = '{}/{}'.format(self._meta_group_, key)
        if path in self.fh:
            del self.fh[path]
        self.fh[path] = np.void(pickle.dumps(obj))
        self.fh.flush()
