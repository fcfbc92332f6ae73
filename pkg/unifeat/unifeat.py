"""Command-line interface."""
import argparse
import logging
import os
import sys

import unifeat.common
import unifeat.config
import unifeat.descriptor
import unifeat.evaluation
import unifeat.matching
import unifeat.models
import unifeat.options
import unifeat.training


# exit codes
_usage_errors = (
    unifeat.common.ConfigError, unifeat.common.ManifestError,
    unifeat.common.DimensionError, unifeat.common.FormatError,
    unifeat.common.CheckpointError, unifeat.common.StateError)
_io_errors = (
    unifeat.common.ImageReadError, unifeat.models.DownloadError, OSError)


class StoreDict(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        """Converts 'key1=value1 key2=value2' to a dictionary.

        Values are left as strings except 'None', which becomes `None`;
        `unifeat.config.RunConfig` does the type conversion.
        """
        my_dict = {}
        for kv in values:
            try:
                key, value = kv.split("=", 1)
            except ValueError:
                parser.error("'{}' is not of the form KEY=VALUE.".format(kv))
            my_dict[key] = None if value == 'None' else value
        setattr(namespace, self.dest, my_dict)


def _log_level():
    """Parser to set logging level."""
    parser = argparse.ArgumentParser(
        formatter_class=argparse.ArgumentDefaultsHelpFormatter, add_help=False)

    modify_log_level = parser.add_mutually_exclusive_group()
    modify_log_level.add_argument('--debug', action='store_const',
        dest='log_level', const=logging.DEBUG, default=logging.INFO,
        help='Verbose logging of debug information.')
    modify_log_level.add_argument('--quiet', action='store_const',
        dest='log_level', const=logging.WARNING, default=logging.INFO,
        help='Minimal logging; warnings only.')
    return parser


def _config_args():
    """Parser for run configuration."""
    parser = argparse.ArgumentParser(
        formatter_class=argparse.ArgumentDefaultsHelpFormatter, add_help=False)
    parser.add_argument('--config', default=None,
        help='JSON configuration file, see `unifeat tools default_config`.')
    parser.add_argument('--set', action=StoreDict, nargs='+', default=None,
        metavar='KEY=VALUE', help='Override configuration values.')
    return parser


def _checkpoint_arg(required=False):
    """Parser for a checkpoint argument."""
    parser = argparse.ArgumentParser(
        formatter_class=argparse.ArgumentDefaultsHelpFormatter, add_help=False)
    parser.add_argument('--checkpoint', default=None, required=required,
        help=('Checkpoint file or URL, URLs are cached in ${} or {}.'.format(
            unifeat.options.cache_env_var,
            unifeat.options.checkpoint_stores()[-1])))
    return parser


def _thresholds_arg():
    parser = argparse.ArgumentParser(
        formatter_class=argparse.ArgumentDefaultsHelpFormatter, add_help=False)
    parser.add_argument('--thresholds', type=int, nargs='+',
        default=list(unifeat.options.mma_thresholds),
        help='Pixel thresholds of the matching accuracy curve.')
    return parser


def print_default_config(args):
    """Print the default configuration."""
    sys.stdout.write(unifeat.config.RunConfig().to_json())


def unifeat_parser():
    """Create the unifeat command-line interface."""
    from unifeat import __version__
    parser = argparse.ArgumentParser('unifeat',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    subparsers = parser.add_subparsers(title='subcommands', description='valid commands', help='additional help', dest='command')
    subparsers.required = True

    parser.add_argument('--version', action='version',
        version='%(prog)s {}'.format(__version__))

    # Keypoints, local and global descriptors
    eparser = subparsers.add_parser('extract',
        help='Detect keypoints and write local and global descriptors.',
        parents=[_log_level(), _config_args(), _checkpoint_arg()],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    eparser.set_defaults(func=unifeat.descriptor.extract)
    eparser.add_argument('images', nargs='+', help='Input image files.')
    eparser.add_argument('--output', default='features',
        help='Output directory for .feat and .gdesc files.')
    eparser.add_argument('--index', default=None,
        help='Also add global descriptors to this index directory.')
    eparser.add_argument('--threads', type=int, default=1,
        help='Threads for reading images.')

    # Matching of two feature files
    mparser = subparsers.add_parser('match',
        help='Mutual nearest neighbour matching of two feature files.',
        parents=[_log_level(), _thresholds_arg()],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    mparser.set_defaults(func=unifeat.matching.match)
    mparser.add_argument('features_a', help='First .feat file.')
    mparser.add_argument('features_b', help='Second .feat file.')
    mparser.add_argument('output', help='Output match file.')
    mparser.add_argument('--homography', default=None,
        help='3x3 homography from the first to the second image, to report '
             'matching accuracy.')

    # Training
    tparser = subparsers.add_parser('train',
        help='Train the network on a manifest of image pairs.',
        parents=[_log_level(), _config_args()],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    tparser.set_defaults(func=unifeat.training.train)
    tparser.add_argument('manifest', help='JSON lines manifest of pairs.')
    tparser.add_argument('--output', default='training',
        help='Directory for checkpoints and logs.')
    tparser.add_argument('--resume', default=None,
        help='Checkpoint to continue training from.')

    # Homography benchmark
    hparser = subparsers.add_parser('eval_hpatches',
        help='Matching accuracy on homography sequences.',
        parents=[
            _log_level(), _config_args(), _checkpoint_arg(),
            _thresholds_arg()],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    hparser.set_defaults(func=unifeat.evaluation.eval_hpatches)
    hparser.add_argument('dataset', help='Directory of sequence directories.')
    hparser.add_argument('--output', default='hpatches',
        help='Prefix of the output tables.')
    hparser.add_argument('--scale_ratios', nargs='+', default=['1:1'],
        metavar='RQ:RDB',
        help='Resize factors of the reference and target images.')

    # Retrieval benchmark
    rparser = subparsers.add_parser('eval_retrieval',
        help='Mean average precision of global descriptor retrieval.',
        parents=[_log_level()],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    rparser.set_defaults(func=unifeat.evaluation.eval_retrieval)
    rparser.add_argument('index', help='Index directory.')
    rparser.add_argument('queries', help='File of query ids, one per line.')
    rparser.add_argument('relevance',
        help='File of lines: query id followed by relevant ids.')
    rparser.add_argument('--output', default=None,
        help='Write per-query average precision to this file.')

    # Tools
    toolparser = subparsers.add_parser('tools',
        help='tools subcommand.',
        parents=[_log_level()],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    toolsubparsers = toolparser.add_subparsers(title='tools', description='valid tool commands', help='additional help', dest='tool_command')

    slparser = toolsubparsers.add_parser('shortlist',
        help='List the top candidates of every query in an index.',
        parents=[_log_level()],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    slparser.set_defaults(func=unifeat.evaluation.shortlist)
    slparser.add_argument('index', help='Index directory.')
    slparser.add_argument('output', help='Output .tsv file.')
    slparser.add_argument('--queries', default=None,
        help='File of query ids, default all index entries.')
    slparser.add_argument('--top_k', type=int,
        default=unifeat.options.shortlist_top_k,
        help='Candidates per query.')

    exparser = toolsubparsers.add_parser('export_matches',
        help='Convert match files to COLMAP raw match text.',
        parents=[_log_level()],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    exparser.set_defaults(func=unifeat.matching.export_matches)
    exparser.add_argument('pairs',
        help='File of lines: name_a name_b feat_a feat_b match_file.')
    exparser.add_argument('output', help='Output text file.')

    dcparser = toolsubparsers.add_parser('default_config',
        help='Print the default configuration as JSON.',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    dcparser.set_defaults(func=print_default_config)

    return parser


def main(argv=None):
    """Run a subcommand, returning the exit code."""
    # Some users report setting this helps them resolve issues on their
    # filesystems.
    os.environ['HDF5_USE_FILE_LOCKING'] = 'FALSE'
    parser = unifeat_parser()
    args = parser.parse_args(argv)

    log_level = getattr(args, 'log_level', logging.INFO)
    if log_level > logging.DEBUG:
        os.environ.setdefault('TF_CPP_MIN_LOG_LEVEL', '2')
    import absl.logging
    logging.root.removeHandler(absl.logging._absl_handler)
    absl.logging._warn_preinit_stderr = False

    logging.basicConfig(format='[%(asctime)s - %(name)s] %(message)s', datefmt='%H:%M:%S', level=logging.INFO)
    logger = logging.getLogger(__package__)
    logger.setLevel(log_level)

    if args.command == 'tools' and not hasattr(args, 'func'):
        # display help if given `unifeat tools (--help)`
        parser.__dict__['_actions'][1].choices['tools'].print_help()
        return 0
    try:
        args.func(args)
    except _usage_errors as e:
        logger.error(str(e))
        return 2
    except _io_errors as e:
        logger.error(str(e))
        return 3
    except unifeat.common.NonFiniteLossError as e:
        logger.error(str(e))
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
