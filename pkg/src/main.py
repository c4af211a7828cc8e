#!/usr/bin/env python3
"""
Main entry point for the DSNet command line.

Commands: synth, train, eval, sweep, export-abundance, export-features, and
rerun (replay a recorded run manifest).
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

THREAD_VARIABLES = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def pin_threads(argv):
    """Single-threaded BLAS in deterministic mode; must run before numpy is imported."""
    deterministic = '--deterministic' in argv or os.getenv('DSNET_DETERMINISTIC', '').lower() in ('true', '1', 'yes')
    if not deterministic and '--from-manifest' in argv:
        deterministic = _recorded_deterministic(argv[argv.index('--from-manifest') + 1:][:1])
    if deterministic:
        for variable in THREAD_VARIABLES:
            os.environ[variable] = '1'


def _recorded_deterministic(paths) -> bool:
    """Whether a local manifest was recorded in deterministic mode."""
    if not paths:
        return False
    path = paths[0]
    if os.path.isdir(path):
        path = os.path.join(path, 'manifest.json')
    try:
        with open(path) as f:
            return bool(json.load(f).get('config', {}).get('deterministic'))
    except (OSError, ValueError):
        return False


def _size(text: str):
    try:
        rows, cols = (int(part) for part in text.lower().split('x'))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got '{text}'")
    return rows, cols


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='random seed')
    common.add_argument('--deterministic', action='store_true', default=None,
                        help='single-threaded, bit-reproducible run')
    common.add_argument('--precision', type=int, choices=(32, 64), help='floating point precision')
    common.add_argument('--config', dest='config_file', help='JSON file of settings')
    common.add_argument('--output-dir', dest='output_dir', help='directory for every artifact of the run')

    scene = argparse.ArgumentParser(add_help=False)
    scene.add_argument('--cube', help='cube raster stem')
    scene.add_argument('--labels', help='label raster stem')

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument('--epochs', type=int)
    training.add_argument('--batch', dest='batch_size', type=int)
    training.add_argument('--lr', type=float)
    training.add_argument('--lambda', dest='lam', type=float)
    training.add_argument('--decoder-layers', dest='decoder_layers', type=int)
    training.add_argument('--patch', dest='patch_size', type=int)
    training.add_argument('--variant', help='full, no-fusion, linear or linear-no-fusion')
    training.add_argument('--relu-placement', dest='relu_placement', choices=('table', 'equation'))
    training.add_argument('--schedule', choices=('blended', 'alternating'))
    training.add_argument('--endmembers', type=int, help='endmember count (defaults to the class count)')
    training.add_argument('--train-per-class', dest='train_per_class', type=int)
    training.add_argument('--train-ratio', dest='train_ratio', type=float)
    training.add_argument('--checkpoint-every', dest='checkpoint_every', type=int)
    training.add_argument('--workers', type=int, help='evaluation threads')

    parser = argparse.ArgumentParser(prog='dsnet', description='Dual-branch hyperspectral unmixing and classification')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', parents=[common], help='generate a synthetic scene')
    synth.add_argument('--bands', type=int)
    synth.add_argument('--classes', type=int)
    synth.add_argument('--size', type=_size, help='ROWSxCOLS')
    synth.add_argument('--snr', dest='snr_db', type=float, help='signal-to-noise ratio in dB')
    synth.add_argument('--smoothness', type=float)
    synth.add_argument('--nonlinear', dest='nonlinear_strength', type=float)
    synth.add_argument('--alpha', dest='dirichlet_alpha', type=float)
    synth.add_argument('--min-purity', dest='min_purity', type=float)

    train = commands.add_parser('train', parents=[common, scene, training], help='train DSNet')
    train.add_argument('--split', help='reuse a split manifest')

    evaluate = commands.add_parser('eval', parents=[common, scene], help='score a checkpoint')
    evaluate.add_argument('--checkpoint', help='checkpoint stem')
    evaluate.add_argument('--split', help='split manifest written by train')
    evaluate.add_argument('--workers', type=int)
    evaluate.add_argument('--map', dest='map_mode', choices=('labeled', 'all'))

    sweep = commands.add_parser('sweep', parents=[common, scene, training], help='run a parameter grid')
    sweep.add_argument('--param', choices=('K', 'lambda', 'ratio', 'ablation'))
    sweep.add_argument('--values', help="comma list or start:stop:step")
    sweep.add_argument('--repeats', type=int)

    abundance = commands.add_parser('export-abundance', parents=[common], help='write abundance maps')
    abundance.add_argument('--checkpoint')
    abundance.add_argument('--cube')

    features = commands.add_parser('export-features', parents=[common, scene], help='write class features')
    features.add_argument('--checkpoint')
    features.add_argument('--split')

    rerun = commands.add_parser('rerun', help='replay a recorded run')
    rerun.add_argument('--from-manifest', dest='from_manifest', required=True,
                       help='manifest.json, its directory, or an s3:// URL')
    rerun.add_argument('--output-dir', dest='output_dir', help='write the replay here instead')
    return parser


def split_arguments(args: argparse.Namespace, config_keys) -> tuple:
    """Separate config overrides from command arguments (paths and sweep grid)."""
    values = dict(vars(args))
    size = values.pop('size', None)
    if size:
        values['rows'], values['cols'] = size
    overrides = {k: v for k, v in values.items() if k in config_keys and v is not None}
    arguments = {k: v for k, v in values.items()
                 if k not in config_keys and k not in ('command', 'config_file', 'from_manifest')}
    return overrides, arguments


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    pin_threads(argv)

    import logging
    from checkpoint import CheckpointError
    from commands import COMMANDS
    from config import Config, ConfigurationError
    from losses import LossError
    from metrics import MetricsError
    from raster_io import DataError
    from run_manifest import ManifestError, ManifestStore, RunManifest
    from tensor import TensorError, set_precision
    from trainer import TrainingError

    logger = logging.getLogger(__name__)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    manifest = None
    store = None
    config = None
    try:
        keys = set(Config().as_dict())
        if args.command == 'rerun':
            store = ManifestStore(Config())
            recorded = store.load(args.from_manifest)
            command = recorded.command
            overrides = dict(recorded.config)
            if args.output_dir:
                overrides['output_dir'] = args.output_dir
            arguments = dict(recorded.arguments)
            config = Config(overrides=overrides)
        else:
            command = args.command
            overrides, arguments = split_arguments(args, keys)
            config = Config(config_file=args.config_file, overrides=overrides)
        if command not in COMMANDS:
            raise ConfigurationError(f"Unknown command '{command}'")

        config.setup_logging()
        config.validate_run_config()
        config.print_summary()
        set_precision(config.precision)
        store = ManifestStore(config)

        logger.info("=" * 80)
        logger.info(f"Running '{command}' with seed {config.seed}, output in {config.output_dir}")
        logger.info("=" * 80)

        manifest = RunManifest(command=command, config=config.as_dict(), seed=config.seed, arguments=arguments)
        COMMANDS[command](config, argparse.Namespace(**arguments), manifest)
        manifest.finish('succeeded')
        store.save(manifest, config.output_dir)
        return EXIT_OK
    except (ConfigurationError, ValueError) as e:
        status = EXIT_USAGE
        error = str(e)
        logger.error(f"Configuration error: {e}")
    except (DataError, CheckpointError, ManifestError, OSError) as e:
        status = EXIT_DATA
        error = str(e)
        logger.error(f"Data error: {e}")
    except (TrainingError, TensorError, LossError, MetricsError) as e:
        status = EXIT_NUMERIC
        error = str(e)
        logger.error(f"Numeric failure: {e}")

    if manifest is not None and store is not None:
        manifest.finish('failed', error=error)
        try:
            store.save(manifest, config.output_dir)
        except ManifestError as save_error:
            logger.error(f"Could not record the failed run: {save_error}")
    return status


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
