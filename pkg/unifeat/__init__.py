"""Unified keypoints, local descriptors and global descriptors from one CNN."""
import os

__version__ = "0.3.1"


def report_devices():
    """Print the TensorFlow devices visible to the package.

    The program will exit with status 1 if TensorFlow cannot be imported.

    """
    try:
        import tensorflow as tf
    except ImportError:
        print('tensorflow could not be imported.')
        os._exit(1)

    width = 12
    cols = "Type Name".split()
    print('  '.join([x.ljust(width) for x in cols]))
    for device in tf.config.list_physical_devices():
        print('  '.join(
            str(x).ljust(width) for x in (device.device_type, device.name)))
