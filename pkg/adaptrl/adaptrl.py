#!/usr/bin/python3
import sys
from pathlib import Path
import argparse
from argparse import SUPPRESS

from . import log
from . import config
from . import status
from .a2c import train
from .errors import AdaptError, ConfigError
from .games import SPECS, get_spec, record_trajectory, verify_golden, write_golden
from .metrics import export_trial
from .networks import AGENT_ROLES, NetworkBundle, build, graft_encoder, graft_heads, load_checkpoint, \
    save_checkpoint
from .adaptation import EmbeddingDataset, FrameDataset, adapt, collect_source_embeddings, collect_target_frames
from .pipeline import SUMMARY, format_summary, load_donor, run_pipeline, transfer_summary, write_summary


class ArgumentParser(argparse.ArgumentParser):
    '''Usage errors exit with 1; 2 is kept for runtime failures'''

    def error(self, message):
        self.print_usage(sys.stderr)
        log.log_error(f'{self.prog}: {message}', code=1)


common = ArgumentParser(add_help=False)
common.add_argument('--config', default='', help='run configuration file (key = value lines)')
common.add_argument('--seed', type=int, help='random seed')
# SUPPRESS defaults keep the subcommand from resetting flags given before it
common.add_argument('--verbose', action='store_true', default=SUPPRESS, help='print runtime info')
common.add_argument('-d', '--debug', action='store_true', default=SUPPRESS, help=SUPPRESS)

argparser = ArgumentParser(prog='adaptrl', description='Adversarial encoder adaptation for transfer between games.')
argparser.add_argument('-d', '--debug', action='store_true', help=SUPPRESS)
argparser.add_argument('--system', action='store_true', help='show system info and exit')
argparser.add_argument('--verbose', action='store_true', help='print runtime info')
argparser.add_argument('--version', action='store_true', help='show program version and exit')
argparser.add_argument('--write-config', metavar='PATH', help='write the default configuration to PATH and exit')
commands = argparser.add_subparsers(dest='command', metavar='command')

parser = commands.add_parser('train-source', parents=[common], help='train an agent on the source game')
parser.add_argument('--env', choices=tuple(SPECS), help='game to train on')
parser.add_argument('--frames', type=int, help='frame budget')
parser.add_argument('--out', default='source', help='output directory')

parser = commands.add_parser('collect-embeddings', parents=[common], help='record encoder outputs of a trained agent')
parser.add_argument('--checkpoint', required=True, help='source agent checkpoint')
parser.add_argument('--env', choices=tuple(SPECS), help='game the agent plays')
parser.add_argument('--count', type=int, help='number of embeddings')
parser.add_argument('--sample-mode', choices=('sample', 'greedy'), help='action selection of the agent')
parser.add_argument('--out', default='embeddings.aadd', help='dataset path')

parser = commands.add_parser('collect-frames', parents=[common], help='record frames of random play')
parser.add_argument('--env', choices=tuple(SPECS), help='game to play')
parser.add_argument('--count', type=int, help='number of frames')
parser.add_argument('--out', default='frames.aadd', help='dataset path')

parser = commands.add_parser('adapt', parents=[common], help='align a target encoder to source embeddings')
parser.add_argument('--embeddings', required=True, help='source embedding dataset')
parser.add_argument('--frame-set', required=True, help='target frame dataset')
parser.add_argument('--init-encoder', default='', help='start from the encoder of this checkpoint')
parser.add_argument('--objective', choices=('wgan', 'vanilla-gan'), help='adversarial objective')
parser.add_argument('--epochs', type=int, help='passes over the target frames')
parser.add_argument('--out', default='encoder.ckpt', help='adapted encoder checkpoint')

for name, help_text in (('train-target', 'train on the target game from an adapted encoder'),
                        ('baseline', 'train on the target game from scratch')):
    parser = commands.add_parser(name, parents=[common], help=help_text)
    parser.add_argument('--env', choices=tuple(SPECS), help='target game')
    parser.add_argument('--frames', type=int, help='frame budget')
    parser.add_argument('--out', default=name.split('-')[0], help='output directory')
    if name == 'train-target':
        parser.add_argument('--encoder', required=True, help='adapted encoder checkpoint')
        parser.add_argument('--donor', help='checkpoint whose policy and value heads are grafted too')

parser = commands.add_parser('pipeline', parents=[common], help='run every step for each seed')
parser.add_argument('--source-env', choices=tuple(SPECS), help='source game')
parser.add_argument('--target-env', choices=tuple(SPECS), help='target game')
parser.add_argument('--seeds', help='comma separated trial seeds')
parser.add_argument('--frames', type=int, help='frame budget of both games')
parser.add_argument('--source-frames', type=int, help='source frame budget')
parser.add_argument('--target-frames', type=int, help='target frame budget')
parser.add_argument('--variant', choices=('transfer', 'baseline', 'transfer+heads'), help='experiment variant')
parser.add_argument('--donor', help='head donor checkpoint of transfer+heads')
parser.add_argument('--workers', type=int, help='trials run in parallel')
parser.add_argument('--out', default='out', help='output directory')

parser = commands.add_parser('report', parents=[common], help='compare transfer and baseline runs')
parser.add_argument('out', nargs='?', default='out', help='pipeline output directory')
parser.add_argument('--transfer', help='transfer variant directory (default <out>/transfer)')
parser.add_argument('--baseline', help='baseline variant directory (default <out>/baseline)')
parser.add_argument('--threshold', type=float, help='moving-average score to reach')
parser.add_argument('--window', type=int, help='moving-average window in games')
parser.add_argument('--log', action='store_true', help='print the run log and exit')

parser = commands.add_parser('golden', parents=[common], help='record or verify a golden trajectory')
parser.add_argument('--env', choices=tuple(SPECS), help='game')
parser.add_argument('--steps', type=int, default=1000, help='recorded steps')
parser.add_argument('--verify', default='', help='golden file to replay instead of recording')
parser.add_argument('--out', default='golden.aadg', help='golden file to write')

# command line flag -> configuration key
OVERRIDES = dict(seed='seed', seeds='seeds', env='env', source_env='source_env', target_env='target_env',
                 variant='variant', donor='donor', workers='workers', objective='objective', epochs='epochs',
                 sample_mode='sample_mode', threshold='score_threshold', window='window')


def load_config(args, **overrides) -> config.RunConfig:
    '''Config file values overridden by the flags that were given'''
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return config.load(args.config or None, overrides)

def train_and_export(spec, trainer, bundle, out_dir, checkpoint_name) -> Path:
    out_dir = Path(out_dir)
    result = train(spec, trainer, bundle, trial=trainer.seed, checkpoint_path=out_dir / checkpoint_name)
    export_trial(result.records, out_dir)
    print(f'{spec.id}: {len(result.episodes)} games in {result.updates} updates, '
          f'checkpoint {out_dir / checkpoint_name}')
    return out_dir / checkpoint_name


def train_source(args):
    cfg = load_config(args, source_frames=args.frames)
    train_and_export(get_spec(cfg.env), cfg.to_trainer_config(frames=cfg.source_frames), None, args.out,
                     'source.ckpt')

def collect_embeddings(args):
    cfg = load_config(args, embedding_count=args.count)
    bundle = load_checkpoint(args.checkpoint, roles=AGENT_ROLES)
    dataset = collect_source_embeddings(bundle, get_spec(cfg.env), cfg.embedding_count, cfg.seed,
                                        cfg.sample_mode, cfg.n_envs)
    dataset.save(args.out)
    print(f'{len(dataset)} embeddings written to {args.out}')

def collect_frames(args):
    cfg = load_config(args, frame_count=args.count)
    dataset = collect_target_frames(get_spec(cfg.env), cfg.frame_count, cfg.seed, cfg.n_envs)
    dataset.save(args.out)
    print(f'{len(dataset)} frames written to {args.out}')

def adapt_encoder(args):
    cfg = load_config(args)
    source = EmbeddingDataset.load(args.embeddings)
    target = FrameDataset.load(args.frame_set)
    encoder = None
    if args.init_encoder:
        encoder = load_checkpoint(args.init_encoder, roles=('encoder',))['encoder']
    result = adapt(source, target, cfg.to_adapt_config(), encoder)
    action_count = get_spec(target.env_id or cfg.env).action_count
    save_checkpoint(NetworkBundle(action_count, cfg.seed, {'encoder': result.encoder}), args.out)
    result.report.export(Path(args.out).with_suffix('.csv'))
    print(f'Alignment {result.report.pre_alignment:.4f} -> {result.report.post_alignment:.4f}, '
          f'encoder written to {args.out}')

def train_target(args):
    cfg = load_config(args, target_frames=args.frames)
    spec = get_spec(cfg.env)
    bundle = build(AGENT_ROLES, spec.action_count, cfg.seed)
    bundle = graft_encoder(bundle, load_checkpoint(args.encoder, roles=('encoder',))['encoder'])
    if args.donor:
        donor = load_donor(args.donor, spec.id)
        bundle = graft_heads(bundle, donor['policy'], donor['value'])
    train_and_export(spec, cfg.to_trainer_config(frames=cfg.target_frames), bundle, args.out, 'target.ckpt')

def baseline(args):
    cfg = load_config(args, target_frames=args.frames)
    train_and_export(get_spec(cfg.env), cfg.to_trainer_config(frames=cfg.target_frames), None, args.out,
                     'target.ckpt')

def pipeline(args):
    source_frames = args.source_frames if args.source_frames is not None else args.frames
    target_frames = args.target_frames if args.target_frames is not None else args.frames
    cfg = load_config(args, source_frames=source_frames, target_frames=target_frames)
    result = run_pipeline(cfg.to_plan(args.out))
    print(f'{len(result.reports)} trials finished, manifest {result.manifest}')

def report(args):
    if args.log:
        log.print_log(args.out)
        return
    cfg = load_config(args)
    transfer_dir = args.transfer or Path(args.out) / 'transfer'
    baseline_dir = args.baseline or Path(args.out) / 'baseline'
    summary = transfer_summary(transfer_dir, baseline_dir, cfg.score_threshold, cfg.window)
    path = write_summary(summary, Path(args.out) / SUMMARY)
    print(format_summary(summary, cfg.score_threshold))
    log.log_info(f'Summary written to {path}.')

def golden(args):
    cfg = load_config(args)
    spec = get_spec(cfg.env)
    if args.verify:
        if not verify_golden(args.verify, spec, cfg.seed):
            log.log_error(f'{args.verify} does not match a replay of {spec.id} with seed {cfg.seed}.', code=2)
        print(f'{args.verify} matches {spec.id} seed {cfg.seed}.')
    else:
        write_golden(args.out, record_trajectory(spec, cfg.seed, args.steps))
        print(f'{args.steps} steps of {spec.id} seed {cfg.seed} written to {args.out}')


COMMANDS = {
    'train-source': train_source,
    'collect-embeddings': collect_embeddings,
    'collect-frames': collect_frames,
    'adapt': adapt_encoder,
    'train-target': train_target,
    'baseline': baseline,
    'pipeline': pipeline,
    'report': report,
    'golden': golden,
}


def main(argv=None) -> int:
    args = argparser.parse_args(argv)

    # Version
    if args.version:
        status.print_version()
        return 0

    if args.system:
        print(status.SYSTEM_INFO)
        return 0

    if args.write_config:
        config.write_default_config(args.write_config)
        print(f'Default configuration written to {args.write_config}')
        return 0

    if args.command is None:
        argparser.print_help()
        return 1

    # Debug info
    if args.debug:
        print(status.SYSTEM_INFO)

    try:
        COMMANDS[args.command](args)
    except ConfigError as error:
        log.log_error(str(error))
    except (AdaptError, OSError) as error:
        log.log_error(str(error), code=2)
    return 0


if __name__ == '__main__':
    sys.exit(main())
