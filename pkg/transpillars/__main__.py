import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

import transpillars


logger = logging.getLogger('transpillars')


###############################################################################
# Commands
###############################################################################


def gen(config, args):
    """Generate train and validation sequences"""
    data = Path(args.data or Path(config.out_dir) / 'data')
    for split, (name, count) in enumerate((
            ('train', config.data.train_sequences),
            ('val', config.data.val_sequences))):
        transpillars.synth.generate_split(
            data / name, config.scene, count, config.seed, split)
    transpillars.config.save(config, data / 'config.yaml')


def train(config, args):
    """Train the network in one or both stages"""
    data = Path(args.data or Path(config.out_dir) / 'data')
    n_frames = config.frames.n_frames
    train_samples = transpillars.train.load_samples(data / 'train', n_frames)
    val_samples = transpillars.train.load_samples(data / 'val', n_frames)
    logger.info(
        'training on %d samples, validating on %d',
        len(train_samples), len(val_samples))
    stages = (args.stage,) if args.stage else transpillars.train.STAGES
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    transpillars.config.save(config, Path(config.out_dir) / 'config.yaml')
    transpillars.train.train(
        config, train_samples, val_samples, config.out_dir, stages, args.resume)


def evaluate(config, args):
    """Evaluate a checkpoint on the validation split"""
    data = Path(args.data or Path(config.out_dir) / 'data')
    model = transpillars.train.build_model(config)
    checkpoint = restore(model, config, args)
    samples = transpillars.train.load_samples(
        data / 'val', config.frames.n_frames)
    report = transpillars.train.evaluate_model(
        model, samples, config.evaluation, checkpoint.stage == 'base')
    output = Path(config.out_dir)
    output.mkdir(parents=True, exist_ok=True)
    report.write(output / 'report.csv')
    logger.info('evaluated %d samples\n%s', len(samples), report.table())


def attn_dump(config, args):
    """Dump the cross-frame attention of one sequence"""
    if not args.sequence:
        raise transpillars.errors.ConfigurationError(
            'attn-dump needs --sequence')
    model = transpillars.train.build_model(config)
    restore(model, config, args)
    frames, boxes = transpillars.synth.read_sequence(args.sequence)
    sample = transpillars.train.make_sample(frames, boxes, config.frames.n_frames)
    transpillars.dump.from_file(
        model, sample.sequence, Path(config.out_dir) / 'attention')


def ablate(config, args):
    """Sweep the ablation axes over seeds"""
    data = Path(args.data or Path(config.out_dir) / 'data')
    n_frames = config.frames.n_frames
    seeds = args.seeds or [config.seed]
    transpillars.train.ablate(
        config,
        transpillars.train.load_samples(data / 'train', n_frames),
        transpillars.train.load_samples(data / 'val', n_frames),
        seeds,
        Path(config.out_dir) / 'ablation',
        args.axes)


COMMANDS = {
    'gen': gen,
    'train': train,
    'eval': evaluate,
    'attn-dump': attn_dump,
    'ablate': ablate}


###############################################################################
# Entry point
###############################################################################


def main(argv=None) -> int:
    """Run a command and retrieve its exit code"""
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else
        logging.WARNING if args.quiet else logging.INFO,
        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        config = load_config(args)
        with transpillars.tensor.precision(
                np.dtype(config.precision).type):
            COMMANDS[args.command](config, args)
    except transpillars.errors.ConfigurationError as error:
        logger.error('configuration error: %s', error)
        return 2
    except transpillars.errors.DivergenceError as error:
        logger.error('%s', error)
        return 3
    except transpillars.errors.ContractError as error:
        logger.error('unsupported request: %s', error)
        return 4
    return 0


def load_config(args) -> 'transpillars.config.RunConfig':
    """Combine the config file, overrides and flags"""
    if args.config:
        config = transpillars.config.load(args.config)
    else:
        config = transpillars.config.RunConfig()
    config = transpillars.config.override(config, args.set)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=str(args.out))
    return config


def parse_args(argv=None):
    """Parse command-line arguments"""
    parser = argparse.ArgumentParser(
        prog='transpillars',
        description='Multi-frame pillar detection on synthetic LiDAR')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', type=Path, help='YAML run configuration')
    parser.add_argument('--seed', type=int, help='Run seed')
    parser.add_argument('--out', type=Path, help='Output directory')
    parser.add_argument(
        '--stage',
        choices=transpillars.train.STAGES,
        help='Train only this stage')
    parser.add_argument(
        '--set',
        action='append',
        default=[],
        metavar='KEY=VALUE',
        help='Override a configuration value, e.g. model.layers=2')
    parser.add_argument(
        '--data',
        type=Path,
        help='Dataset directory (defaults to <out>/data)')
    parser.add_argument(
        '--checkpoint',
        type=Path,
        help='Checkpoint directory (defaults to the latest stage in <out>)')
    parser.add_argument(
        '--sequence',
        type=Path,
        help='Sequence directory for attn-dump')
    parser.add_argument(
        '--resume',
        action='store_true',
        help='Continue training from <out>/checkpoint')
    parser.add_argument(
        '--seeds',
        type=int,
        nargs='+',
        help='Seeds of the ablation sweep')
    parser.add_argument(
        '--axes',
        nargs='+',
        choices=transpillars.train.ABLATION_AXES,
        help='Ablation axes to sweep')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true')
    verbosity.add_argument('--quiet', action='store_true')
    return parser.parse_args(argv)


def restore(model, config, args) -> 'transpillars.checkpoint.Checkpoint':
    """Load the requested or latest checkpoint into a model"""
    directory = args.checkpoint
    if directory is None:
        candidates = [
            Path(config.out_dir) / f'checkpoint_{stage}'
            for stage in reversed(transpillars.train.STAGES)]
        existing = [c for c in candidates if (c / 'manifest.txt').exists()]
        if not existing:
            raise transpillars.errors.ConfigurationError(
                f'No checkpoint found in {config.out_dir}')
        directory = existing[0]
    logger.info('restoring %s', directory)
    return transpillars.checkpoint.restore(directory, model, strict=False)


if __name__ == '__main__':
    sys.exit(main())
