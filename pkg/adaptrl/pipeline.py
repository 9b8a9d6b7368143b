'''
End-to-end experiment runs: source agent, source embeddings, target frames, adversarial
adaptation, encoder graft, target training; per-seed trials, aggregated curves, manifest
and the transfer-vs-baseline summary.
'''
import json
import hashlib
from pathlib import Path
from functools import partial
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import log
from .a2c import TrainerConfig, train
from .games import get_spec
from .errors import AdaptError, ConfigError, ShapeError
from .files import file_hash, path_is_writable, write_atomic
from .process import OutputLock, run_trials
from .metrics import (SERIES, MOVING_AVERAGE_WINDOW, AggregateCurve, aggregate, export, export_trial, median_or_none,
                      read_trial_records, summarize_trial)
from .networks import (AGENT_ROLES, HEAD_ROLES, NetworkBundle, build, graft_encoder, graft_heads, load_checkpoint,
                       save_checkpoint)
from .adaptation import AdaptConfig, adapt, collect_source_embeddings, collect_target_frames

VARIANTS = ('transfer', 'baseline', 'transfer+heads')
MANIFEST = 'manifest.json'
SUMMARY = 'summary.csv'


@dataclass(frozen=True)
class ExperimentPlan:
    source_env: str = 'mini-pong'
    target_env: str = 'mini-breakout'
    seeds: tuple = (0, 1, 2, 3, 4)
    source_frames: int = 2_000_000
    target_frames: int = 2_000_000
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    # total_frames and seed are replaced per run
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    variant: str = 'transfer'
    out_dir: str = 'out'
    donor: str = ''
    embedding_count: int = 10000
    frame_count: int = 10000
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'seeds', tuple(int(seed) for seed in self.seeds))
        # unknown games raise ConfigError
        get_spec(self.source_env)
        get_spec(self.target_env)
        if self.variant not in VARIANTS:
            raise ConfigError(f'Unknown variant "{self.variant}". Known variants: {", ".join(VARIANTS)}.')
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f'Seeds must be a non-empty list without duplicates, got {self.seeds}.')
        if self.variant == 'transfer+heads' and not self.donor:
            raise ConfigError('Variant transfer+heads needs a donor checkpoint.')
        if self.source_frames <= 0 or self.target_frames <= 0:
            raise ConfigError('Frame budgets must be positive.')

    @property
    def trials(self) -> int:
        return len(self.seeds)

    @property
    def variant_dir(self) -> Path:
        return Path(self.out_dir) / self.variant

    def trial_dir(self, seed: int) -> Path:
        return self.variant_dir / f'trial-{seed}'


@dataclass
class TrialResult:
    seed: int
    records: list
    report: object
    artifacts: dict


@dataclass
class PipelineResult:
    records: list
    curves: dict
    reports: dict
    manifest: Path


# Artifacts

def source_key(plan: ExperimentPlan, seed: int) -> str:
    '''Source agents are reused across runs that share game, seed, budget and trainer settings'''
    trainer = replace(plan.trainer, total_frames=plan.source_frames, seed=seed, checkpoint_every=0, log_every=0)
    text = json.dumps(dict(env=plan.source_env, trainer=asdict(trainer)), sort_keys=True)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]

def source_checkpoint(plan: ExperimentPlan, seed: int) -> Path:
    '''Trains the source agent of a seed unless the cache already holds it'''
    path = Path(plan.out_dir) / 'cache' / f'source-{plan.source_env}-{source_key(plan, seed)}.ckpt'
    if path.exists():
        log.log_info(f'Using cached source agent {path}.')
        return path
    spec = get_spec(plan.source_env)
    trainer = replace(plan.trainer, total_frames=plan.source_frames, seed=seed, checkpoint_every=0)
    train(spec, trainer, trial=seed, checkpoint_path=path)
    return path

def check_donor(plan: ExperimentPlan):
    '''The donor of transfer+heads must exist and fit the target action space'''
    if plan.variant != 'transfer+heads':
        return None
    return load_donor(plan.donor, plan.target_env)

def load_donor(path, target_env: str):
    if not Path(path).is_file():
        raise ConfigError(f'Donor checkpoint {path} does not exist.')
    donor = load_checkpoint(path)
    if not set(HEAD_ROLES) <= set(donor.roles):
        raise ShapeError(f'Donor checkpoint {path} holds no policy/value heads.')
    target_actions = get_spec(target_env).action_count
    if donor.action_count != target_actions:
        raise ShapeError(f'Donor heads have {donor.action_count} actions, {target_env} has {target_actions}.')
    return donor

def _entry(path: Path, root: Path) -> dict:
    return dict(path=path.relative_to(root).as_posix(), sha256=file_hash(path))


def run_trial(plan: ExperimentPlan, seed: int) -> TrialResult:
    '''One seed of the protocol; the baseline goes straight to target training from a fresh bundle'''
    root = Path(plan.out_dir)
    trial_dir = plan.trial_dir(seed)
    trial_dir.mkdir(parents=True, exist_ok=True)
    source_spec, target_spec = get_spec(plan.source_env), get_spec(plan.target_env)
    artifacts, report = {}, None
    log.log_info(f'Trial {seed}: {plan.variant} {plan.source_env} -> {plan.target_env}.')

    target = build(AGENT_ROLES, target_spec.action_count, seed)
    if plan.variant != 'baseline':
        path = source_checkpoint(plan, seed)
        artifacts['source_checkpoint'] = _entry(path, root)
        source = load_checkpoint(path, roles=AGENT_ROLES)

        embeddings = collect_source_embeddings(source, source_spec, plan.embedding_count, seed,
                                               plan.trainer.sample_mode, plan.trainer.n_envs)
        embeddings.save(trial_dir / 'embeddings.aadd')
        artifacts['embeddings'] = _entry(trial_dir / 'embeddings.aadd', root)

        frames = collect_target_frames(target_spec, plan.frame_count, seed, plan.trainer.n_envs)
        frames.save(trial_dir / 'frames.aadd')
        artifacts['frames'] = _entry(trial_dir / 'frames.aadd', root)

        result = adapt(embeddings, frames, replace(plan.adapt, seed=seed))
        report = result.report
        report.export(trial_dir / 'adapt.csv')
        log.log_info(f'Trial {seed}: alignment {report.pre_alignment:.4f} -> {report.post_alignment:.4f}.')
        save_checkpoint(NetworkBundle(target_spec.action_count, seed, {'encoder': result.encoder}),
                        trial_dir / 'encoder.ckpt')
        artifacts['adapted_encoder'] = _entry(trial_dir / 'encoder.ckpt', root)

        target = graft_encoder(target, result.encoder)
        if plan.variant == 'transfer+heads':
            donor = load_checkpoint(plan.donor, roles=HEAD_ROLES)
            target = graft_heads(target, donor['policy'], donor['value'])

    trainer = replace(plan.trainer, total_frames=plan.target_frames, seed=seed)
    trained = train(target_spec, trainer, target, trial=seed, checkpoint_path=trial_dir / 'target.ckpt')
    artifacts['target_checkpoint'] = _entry(trial_dir / 'target.ckpt', root)
    for path in export_trial(trained.records, trial_dir):
        artifacts[path.stem] = _entry(path, root)
    return TrialResult(seed, trained.records, report, artifacts)


def empty_curves(trials: int) -> dict:
    empty = np.array([])
    return {name: AggregateCurve(name, empty.astype(np.int64), empty, empty, trials) for name in SERIES}

def write_manifest(plan: ExperimentPlan, results: list, curve_paths: list) -> Path:
    root = Path(plan.out_dir)
    manifest = dict(plan=asdict(plan),
                    trials={str(result.seed): result.artifacts for result in results},
                    curves={path.stem: _entry(path, root) for path in curve_paths},
                    adapt_reports={str(result.seed): _entry(plan.trial_dir(result.seed) / 'adapt.csv', root)
                                   for result in results if result.report is not None})
    path = plan.variant_dir / MANIFEST
    write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    return path

def run_pipeline(plan: ExperimentPlan) -> PipelineResult:
    out_dir = Path(plan.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not path_is_writable(out_dir):
        raise AdaptError(f'Output directory {out_dir} is not writable.')
    with OutputLock(out_dir):
        log.set_logfile(out_dir / 'run.log')
        try:
            check_donor(plan)
            results = run_trials(partial(run_trial, plan), plan.seeds, plan.workers)
            records = [record for result in results for record in result.records]
            try:
                curves = aggregate(records, trials=plan.seeds)
            except AdaptError as error:
                log.log_warning(f'{error} Writing empty aggregate curves.')
                curves = empty_curves(plan.trials)
            curve_paths = export(curves, plan.variant_dir)
            manifest = write_manifest(plan, results, curve_paths)
            log.log_info(f'Pipeline finished: {plan.trials} trials, manifest {manifest}.')
        finally:
            log.set_logfile(None)
    return PipelineResult(records, curves, {result.seed: result.report for result in results}, manifest)


# Transfer summary

def trial_seeds(variant_dir) -> list:
    return sorted(int(path.name.split('-', 1)[1]) for path in Path(variant_dir).glob('trial-*') if path.is_dir())

def frames_per_batch(variant_dir) -> int:
    '''Update size recorded in the manifest, 80 frames when there is none'''
    path = Path(variant_dir) / MANIFEST
    if not path.exists():
        return 80
    trainer = json.loads(path.read_text(encoding='utf-8'))['plan']['trainer']
    return trainer['n_envs'] * trainer['n_steps']

def summarize_variant(variant_dir, threshold: float, window: int = MOVING_AVERAGE_WINDOW) -> list:
    variant_dir = Path(variant_dir)
    seeds = trial_seeds(variant_dir)
    if not seeds:
        raise AdaptError(f'No trial directories found in {variant_dir}.')
    batch = frames_per_batch(variant_dir)
    return [summarize_trial(read_trial_records(variant_dir / f'trial-{seed}', seed), seed, threshold, window, batch)
            for seed in seeds]

def _median(values):
    values = [value for value in values if not np.isnan(value)]
    return float(np.median(values)) if values else float('nan')

def transfer_summary(transfer_dir, baseline_dir, threshold: float = 5, window: int = MOVING_AVERAGE_WINDOW) -> dict:
    '''
    Per-trial and median comparison of two variant directories: frames to reach the
    moving-average threshold, peak episode length and final moving-average score.
    '''
    summaries = dict(transfer=summarize_variant(transfer_dir, threshold, window),
                     baseline=summarize_variant(baseline_dir, threshold, window))
    medians = {variant: dict(frames_to_threshold=median_or_none([s.frames_to_threshold for s in trials]),
                             peak_episode_frames=_median([s.peak_episode_frames for s in trials]),
                             final_score=_median([s.final_score for s in trials]))
               for variant, trials in summaries.items()}
    transfer_frames = medians['transfer']['frames_to_threshold']
    baseline_frames = medians['baseline']['frames_to_threshold']
    ratio = None
    if transfer_frames is not None and baseline_frames:
        ratio = transfer_frames / baseline_frames
    return dict(trials=summaries, medians=medians, ratio=ratio,
                final_score_gap=medians['transfer']['final_score'] - medians['baseline']['final_score'])

def _field(value) -> str:
    if value is None:
        return ''
    return str(value) if isinstance(value, int) else repr(float(value))

def summary_csv(summary: dict) -> str:
    lines = ['variant,trial,frames_to_threshold,peak_episode_frames,final_score']
    for variant, trials in summary['trials'].items():
        for s in trials:
            lines.append(','.join([variant, str(s.trial), _field(s.frames_to_threshold),
                                   _field(s.peak_episode_frames), _field(s.final_score)]))
    for variant, medians in summary['medians'].items():
        lines.append(','.join([variant, 'median', _field(medians['frames_to_threshold']),
                               _field(medians['peak_episode_frames']), _field(medians['final_score'])]))
    return '\n'.join(lines) + '\n'

def write_summary(summary: dict, path) -> Path:
    write_atomic(path, summary_csv(summary))
    return Path(path)

def format_summary(summary: dict, threshold: float) -> str:
    def frames(value):
        return 'never' if value is None else str(value)
    lines = [f'{"variant":<10}{"frames to " + str(threshold):>18}{"peak ep frames":>16}{"final score":>13}']
    for variant, medians in summary['medians'].items():
        lines.append(f'{variant:<10}{frames(medians["frames_to_threshold"]):>18}'
                     f'{medians["peak_episode_frames"]:>16.1f}{medians["final_score"]:>13.2f}')
    ratio = 'N/A' if summary['ratio'] is None else f'{summary["ratio"]:.3f}'
    lines.append(f'transfer/baseline frames ratio: {ratio}, final score gap: {summary["final_score_gap"]:+.2f}')
    return '\n'.join(lines)
