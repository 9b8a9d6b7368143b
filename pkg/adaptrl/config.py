import os
import configparser
from pathlib import Path

from .games import SPECS
from .a2c import TrainerConfig, SAMPLE_MODES
from .adaptation import AdaptConfig, OBJECTIVES
from .pipeline import ExperimentPlan, VARIANTS
from .process import default_workers
from .log import log_error, log_info

# configparser needs a section; config files have none
SECTION = 'run'

DEFAULT_CONFIG = dict(
    seed=0,
    seeds='0,1,2,3,4',
    env='mini-pong',
    source_env='mini-pong',
    target_env='mini-breakout',
    source_frames=2_000_000,
    target_frames=2_000_000,
    n_envs=16,
    n_steps=5,
    gamma=0.99,
    value_coef=0.5,
    entropy_coef=0.01,
    learning_rate=0.0007,
    max_grad_norm=0.5,
    checkpoint_every=0,
    log_every=100,
    sample_mode='sample',
    embedding_count=10000,
    frame_count=10000,
    epochs=20,
    batch_size=64,
    critic_steps=5,
    objective='wgan',
    clip=0.01,
    ae_lr=0.001,
    critic_lr=0.00005,
    generator_lr=0.00005,
    critic_beta1=0.0,
    alignment_projections=128,
    variant='transfer',
    donor='',
    workers=1,
    window=100,
    score_threshold=5
)


def parse_seeds(text: str) -> tuple:
    '''"0,1, 2" -> (0, 1, 2)'''
    return tuple(int(seed) for seed in text.split(',') if seed.strip())


class RunConfig:
    '''Typed and validated view of a merged configuration'''

    def __init__(self, values: dict = None, source: str = 'configuration'):
        self.source = source
        parser = configparser.ConfigParser(interpolation=None)
        parser[SECTION] = merge(values or {})
        section = parser[SECTION]

        self.env = section['env']
        self.source_env = section['source_env']
        self.target_env = section['target_env']
        self.sample_mode = section['sample_mode']
        self.objective = section['objective']
        self.variant = section['variant']
        self.donor = section['donor']
        try:
            self.seeds = parse_seeds(section['seeds'])
        except ValueError:
            log_error(f'Invalid {self.source}: seeds must be a comma separated list of integers.')

        # Type check / error handling
        i, f = section.getint, section.getfloat
        method_type_attr = (
            (i, 'integer', 'seed'),
            (i, 'integer', 'source_frames'),
            (i, 'integer', 'target_frames'),
            (i, 'integer', 'n_envs'),
            (i, 'integer', 'n_steps'),
            (f, 'float', 'gamma'),
            (f, 'float', 'value_coef'),
            (f, 'float', 'entropy_coef'),
            (f, 'float', 'learning_rate'),
            (f, 'float', 'max_grad_norm'),
            (i, 'integer', 'checkpoint_every'),
            (i, 'integer', 'log_every'),
            (i, 'integer', 'embedding_count'),
            (i, 'integer', 'frame_count'),
            (i, 'integer', 'epochs'),
            (i, 'integer', 'batch_size'),
            (i, 'integer', 'critic_steps'),
            (f, 'float', 'clip'),
            (f, 'float', 'ae_lr'),
            (f, 'float', 'critic_lr'),
            (f, 'float', 'generator_lr'),
            (f, 'float', 'critic_beta1'),
            (i, 'integer', 'alignment_projections'),
            (i, 'integer', 'workers'),
            (i, 'integer', 'window'),
            (f, 'float', 'score_threshold')
        )

        for (method, type_name, attr) in method_type_attr:
            try:
                setattr(self, attr, method(attr))
            except ValueError:
                log_error(f'Invalid {self.source}: {attr} must be of {type_name} type.')

        # Value checks
        self._validate()

    def _check_value_in_range(self, value_name, value, allowed_range):
        minimum, maximum = allowed_range
        if not (minimum <= value and value <= maximum):  # range is limit inclusive
            log_error(f'Invalid {self.source}: {value_name} is outside allowed range. '
                      f'Allowed range for this value is: {allowed_range}.')

    def _check_value_positive(self, value_name, value):
        if value <= 0:
            log_error(f'Invalid {self.source}: {value_name} must be greater than zero.')

    def _check_value_choice(self, value_name, value, choices):
        if value not in choices:
            log_error(f'Invalid {self.source}: {value_name} "{value}" is not one of: {", ".join(choices)}.')

    def _validate(self):
        for value_name in ('env', 'source_env', 'target_env'):
            self._check_value_choice(value_name, getattr(self, value_name), tuple(SPECS))
        self._check_value_choice('sample_mode', self.sample_mode, SAMPLE_MODES)
        self._check_value_choice('objective', self.objective, OBJECTIVES)
        self._check_value_choice('variant', self.variant, VARIANTS)

        for value_name in ('source_frames', 'target_frames', 'n_envs', 'n_steps', 'max_grad_norm',
                           'learning_rate', 'embedding_count', 'frame_count', 'batch_size', 'critic_steps',
                           'clip', 'ae_lr', 'critic_lr', 'generator_lr', 'alignment_projections',
                           'window'):
            self._check_value_positive(value_name, getattr(self, value_name))

        self._check_value_in_range('gamma', self.gamma, [0.0, 1.0])
        self._check_value_in_range('critic_beta1', self.critic_beta1, [0.0, 0.999])
        self._check_value_in_range('epochs', self.epochs, [0, 10**6])
        self._check_value_in_range('checkpoint_every', self.checkpoint_every, [0, 10**9])
        self._check_value_in_range('log_every', self.log_every, [0, 10**9])
        # 0 means one worker per physical core
        self._check_value_in_range('workers', self.workers, [0, 1024])

        if not self.seeds:
            log_error(f'Invalid {self.source}: seeds must list at least one seed.')
        if len(set(self.seeds)) != len(self.seeds):
            log_error(f'Invalid {self.source}: seeds {self.seeds} contain duplicates.')
        if self.variant == 'transfer+heads' and not self.donor:
            log_error(f'Invalid {self.source}: variant transfer+heads needs a donor checkpoint (donor = <path>).')
        if self.source_env == self.target_env:
            log_info(f'Source and target game are both {self.source_env}.')

    def to_trainer_config(self, frames: int = None, seed: int = None) -> TrainerConfig:
        return TrainerConfig(n_envs=self.n_envs, n_steps=self.n_steps, gamma=self.gamma,
                             value_coef=self.value_coef, entropy_coef=self.entropy_coef,
                             learning_rate=self.learning_rate, max_grad_norm=self.max_grad_norm,
                             total_frames=self.source_frames if frames is None else frames,
                             seed=self.seed if seed is None else seed,
                             checkpoint_every=self.checkpoint_every, log_every=self.log_every,
                             sample_mode=self.sample_mode)

    def to_adapt_config(self, seed: int = None) -> AdaptConfig:
        return AdaptConfig(epochs=self.epochs, batch_size=self.batch_size, critic_steps=self.critic_steps,
                           objective=self.objective, clip=self.clip, ae_lr=self.ae_lr,
                           critic_lr=self.critic_lr, generator_lr=self.generator_lr,
                           critic_beta1=self.critic_beta1 if self.objective == 'wgan' else None,
                           seed=self.seed if seed is None else seed,
                           alignment_projections=self.alignment_projections)

    def to_plan(self, out_dir) -> ExperimentPlan:
        return ExperimentPlan(source_env=self.source_env, target_env=self.target_env, seeds=self.seeds,
                              source_frames=self.source_frames, target_frames=self.target_frames,
                              adapt=self.to_adapt_config(), trainer=self.to_trainer_config(),
                              variant=self.variant, out_dir=str(out_dir), donor=self.donor,
                              embedding_count=self.embedding_count, frame_count=self.frame_count,
                              workers=self.workers or default_workers())


# Config IO

def merge(values: dict, overrides: dict = None) -> dict:
    '''Defaults, then file values, then the overrides that were actually given; all as strings'''
    merged = {key: str(value) for key, value in DEFAULT_CONFIG.items()}
    merged.update({key: str(value) for key, value in values.items()})
    merged.update({key: str(value) for key, value in (overrides or {}).items() if value is not None})
    return merged

def check_config_keys(section, source):
    '''Looks for keys that are not configuration keys'''
    for key in section:
        if key not in DEFAULT_CONFIG:
            log_error(f'Invalid configuration file {source}: unknown key "{key}".')

def read_config(path) -> dict:
    '''Reads a section-less key = value file and returns its raw values'''
    if not os.path.isfile(path):
        log_error(f'Configuration file {path} does not exist.')
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#',))
    try:
        parser.read_string(f'[{SECTION}]\n' + Path(path).read_text(encoding='utf-8'), source=str(path))
    except configparser.Error as error:
        log_error(f'Invalid configuration file {path}: {error}'.replace('\n', ' '))
    check_config_keys(parser[SECTION], path)
    return dict(parser[SECTION])

def write_default_config(path):
    lines = [f'{key} = {value}' for key, value in DEFAULT_CONFIG.items()]
    Path(path).write_text('# adaptrl run configuration\n' + '\n'.join(lines) + '\n', encoding='utf-8')

def load(path=None, overrides: dict = None) -> RunConfig:
    values = read_config(path) if path else {}
    return RunConfig(merge(values, overrides), source=f'configuration {path}' if path else 'configuration')
