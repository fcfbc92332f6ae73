"""Stores miscellaneous data for unifeat."""

import os
import pathlib


cache_env_var = 'UNIFEAT_CACHE'
checkpoint_subdir = 'checkpoints'


def checkpoint_stores():
    """Directories searched (in order) for cached checkpoints.

    The environment variable `UNIFEAT_CACHE` takes precedence over the
    default location in the user's home directory.
    """
    stores = []
    override = os.environ.get(cache_env_var)
    if override:
        stores.append(override)
    stores.append(os.path.join(
        str(pathlib.Path.home()), '.{}'.format(__package__),
        checkpoint_subdir))
    return tuple(stores)


# bumped whenever the on-disk layout changes
feature_file_version = 1
global_file_version = 1
checkpoint_version = 1

feature_file_magic = 'UNIFEAT-FEATURES'
global_file_magic = 'UNIFEAT-GLOBAL'
index_manifest = 'manifest.txt'

# resolution (pixels) all training images are resized to
default_train_size = 256
# smallest side accepted by the backbone, four stride-2 stages
min_image_size = 64

mma_thresholds = tuple(range(1, 11))
shortlist_top_k = 20

extraction_modes = ('teacher', 'TS', 'SS')
freeze_policies = ('freeze_B2B3', 'gradient_cut', 'none')
default_backbone = 'resnet101'
