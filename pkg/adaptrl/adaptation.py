'''
Adversarial autoencoder alignment of a fresh target encoder to a source embedding set.

Per target batch: one autoencoder update, N critic updates on fresh source/target
mini-batches (weights clipped after each one for the Wasserstein objective), then
one generator (encoder) update against the frozen critic.
'''
import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import wasserstein_distance

from . import log
from . import status
from . import container
from .a2c import Lanes, act, role_view
from .games import EnvironmentSpec, OBSERVATION_SHAPE
from .errors import AdaptError, ConfigError, FormatError, ShapeError
from .files import write_atomic
from .networks import EMBEDDING_DIM, NetworkBundle, critic_logit, decode, encode, initialize
from .tensor import (ParameterSet, OptimizerState, backward, clip_values, constant, log_sigmoid, mean,
                     optimizer_update, square, watch)

OBJECTIVES = ('wgan', 'vanilla-gan')


# Datasets

@dataclass
class EmbeddingDataset:
    embeddings: np.ndarray
    source_hash: str
    seed: int
    env_id: str = ''

    def __len__(self):
        return len(self.embeddings)

    def save(self, path):
        container.write(path, {'embeddings': self.embeddings,
                               'meta.source_hash': container.text_to_tensor(self.source_hash),
                               'meta.env': container.text_to_tensor(self.env_id),
                               'meta.seed': np.array([self.seed])}, container.DATASET_MAGIC)

    @classmethod
    def load(cls, path):
        tensors = container.read(path, container.DATASET_MAGIC)
        if 'embeddings' not in tensors:
            raise FormatError(f'{path}: not an embedding dataset (no "embeddings" tensor).')
        embeddings = tensors['embeddings']
        if embeddings.ndim != 2 or embeddings.shape[1] != EMBEDDING_DIM:
            raise ShapeError(f'{path}: embeddings have shape {embeddings.shape}, expected (count, {EMBEDDING_DIM}).')
        if embeddings.size and np.max(np.abs(embeddings)) >= 1.0:
            raise FormatError(f'{path}: embeddings outside the tanh range.')
        return cls(embeddings, container.tensor_to_text(tensors.get('meta.source_hash', [])),
                   int(tensors.get('meta.seed', [0])[0]), container.tensor_to_text(tensors.get('meta.env', [])))


@dataclass
class FrameDataset:
    frames: np.ndarray
    env_id: str
    seed: int

    def __len__(self):
        return len(self.frames)

    def save(self, path):
        container.write(path, {'frames': self.frames,
                               'meta.env': container.text_to_tensor(self.env_id),
                               'meta.seed': np.array([self.seed])}, container.DATASET_MAGIC)

    @classmethod
    def load(cls, path):
        tensors = container.read(path, container.DATASET_MAGIC)
        if 'frames' not in tensors:
            raise FormatError(f'{path}: not a frame dataset (no "frames" tensor).')
        frames = tensors['frames']
        if frames.shape[1:] != OBSERVATION_SHAPE:
            raise ShapeError(f'{path}: frames have shape {frames.shape}, expected (count, {OBSERVATION_SHAPE}).')
        if not np.isin(frames, (0.0, 1.0)).all():
            raise FormatError(f'{path}: frame values outside {{0, 1}}.')
        return cls(frames, container.tensor_to_text(tensors.get('meta.env', [])), int(tensors.get('meta.seed', [0])[0]))


def bundle_hash(bundle: NetworkBundle) -> str:
    '''Identity of the parameters an embedding set was produced with'''
    tensors = {f'{role}.{name}': tensor for role in bundle.roles for name, tensor in bundle[role].items()}
    return hashlib.sha256(container.encode(tensors, container.CHECKPOINT_MAGIC)).hexdigest()

def collect_source_embeddings(bundle: NetworkBundle, spec: EnvironmentSpec, count: int, seed: int,
                              sample_mode: str = 'sample', n_envs: int = 16) -> EmbeddingDataset:
    '''The source agent plays its own game; its encoder output is recorded for every frame it sees'''
    if count <= 0:
        raise ConfigError(f'Embedding count must be positive, got {count}.')
    if bundle.action_count != spec.action_count:
        raise ShapeError(f'Source bundle has {bundle.action_count} actions, {spec.id} has {spec.action_count}.')
    lanes = Lanes(spec, n_envs, seed)
    rows = []
    collected = 0
    while collected < count:
        probabilities, _, embeddings = act(bundle, lanes.observations())
        take = min(len(lanes), count - collected)
        rows.append(embeddings[:take])
        collected += take
        for lane in range(len(lanes)):
            lanes.step(lane, lanes.choose(lane, probabilities[lane], sample_mode))
    log.log_info(f'Collected {count} source embeddings on {spec.id} ({lanes.episodes_finished} games).')
    return EmbeddingDataset(np.concatenate(rows), bundle_hash(bundle), seed, spec.id)

def collect_target_frames(spec: EnvironmentSpec, count: int, seed: int, n_envs: int = 16) -> FrameDataset:
    '''Uniform-random play on the target game; no learning happens here'''
    if count <= 0:
        raise ConfigError(f'Frame count must be positive, got {count}.')
    lanes = Lanes(spec, n_envs, seed)
    uniform = np.full(spec.action_count, 1.0 / spec.action_count)
    rows = []
    collected = 0
    while collected < count:
        observations = lanes.observations()
        take = min(len(lanes), count - collected)
        rows.append(observations[:take])
        collected += take
        for lane in range(len(lanes)):
            lanes.step(lane, lanes.choose(lane, uniform))
    log.log_info(f'Collected {count} random-policy frames on {spec.id} ({lanes.episodes_finished} games).')
    return FrameDataset(np.concatenate(rows), spec.id, seed)


# Losses

def reconstruction_loss(reconstructions, frames):
    '''Mean over batch and pixels of the squared reconstruction error'''
    return mean(square(reconstructions - np.asarray(frames, dtype=np.float64)))

def ae_loss(frames, encoder, decoder):
    if len(frames) == 0:
        raise AdaptError('ae_loss needs a non-empty batch.')
    return reconstruction_loss(decode(decoder, encode(encoder, frames)), frames)

def critic_loss(source_embeddings, target_embeddings, critic, objective: str = 'wgan'):
    '''
    wgan: mean D(target) - mean D(source), the negated critic objective.
    vanilla-gan: -mean log D(source) - mean log(1 - D(target)) with D the sigmoid of the score.
    '''
    if len(source_embeddings) != len(target_embeddings):
        raise ShapeError(f'Critic batches differ in size: {len(source_embeddings)} source vs '
                         f'{len(target_embeddings)} target.')
    source_score = critic_logit(critic, source_embeddings)
    target_score = critic_logit(critic, target_embeddings)
    if objective == 'wgan':
        return mean(target_score) - mean(source_score)
    elif objective == 'vanilla-gan':
        return -mean(log_sigmoid(source_score)) - mean(log_sigmoid(-target_score))
    raise ConfigError(f'Unknown objective "{objective}". Known objectives: {", ".join(OBJECTIVES)}.')

def generator_loss(frames, encoder, critic, objective: str = 'wgan'):
    '''-mean D(E(x)) (wgan) or the non-saturating -mean log D(E(x)); the critic only enters as constants'''
    score = critic_logit(constant(critic), encode(encoder, frames))
    if objective == 'wgan':
        return -mean(score)
    elif objective == 'vanilla-gan':
        return -mean(log_sigmoid(score))
    raise ConfigError(f'Unknown objective "{objective}". Known objectives: {", ".join(OBJECTIVES)}.')


# Alignment diagnostic

def random_directions(dim: int, projections: int, seed: int) -> np.ndarray:
    '''(projections, dim) unit vectors'''
    directions = np.random.default_rng(seed).normal(size=(projections, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)

def measure_alignment(a, b, projections: int = 128, seed: int = 0) -> float:
    '''Sliced 1-Wasserstein distance: mean over random directions of the 1-D distance of the projections'''
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise AdaptError('measure_alignment needs two non-empty embedding sets.')
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f'Embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}.')
    directions = random_directions(a.shape[1], projections, seed)
    projected_a, projected_b = a @ directions.T, b @ directions.T
    if len(a) == len(b):
        distances = np.abs(np.sort(projected_a, axis=0) - np.sort(projected_b, axis=0)).mean(axis=0)
    else:
        distances = np.array([wasserstein_distance(projected_a[:, k], projected_b[:, k])
                              for k in range(projections)])
    return float(distances.mean())


# Training

@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 20
    batch_size: int = 64
    critic_steps: int = 5
    objective: str = 'wgan'
    clip: float = 0.01
    ae_lr: float = 1e-3
    critic_lr: float = 5e-5
    generator_lr: float = 5e-5
    # Adam beta1 of the critic; None means 0 for wgan and 0.9 for vanilla-gan
    critic_beta1: float = None
    seed: int = 0
    alignment_projections: int = 128
    eval_size: int = 512

    def __post_init__(self):
        if self.critic_steps < 1:
            raise ConfigError(f'critic_steps must be at least 1, got {self.critic_steps}.')
        if self.clip <= 0:
            raise ConfigError(f'clip must be positive, got {self.clip}.')
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError('epochs must be non-negative and batch_size at least 1.')
        if self.objective not in OBJECTIVES:
            raise ConfigError(f'Unknown objective "{self.objective}". Known objectives: {", ".join(OBJECTIVES)}.')

    @property
    def critic_momentum(self) -> float:
        if self.critic_beta1 is not None:
            return self.critic_beta1
        return 0.0 if self.objective == 'wgan' else 0.9


@dataclass
class AdaptReport:
    rows: list = field(default_factory=list)
    pre_alignment: float = float('nan')
    post_alignment: float = float('nan')

    HEADER = ('epoch', 'ae_loss', 'critic_loss', 'gen_loss', 'alignment')

    def to_csv(self) -> str:
        lines = [','.join(self.HEADER)]
        for row in self.rows:
            lines.append(','.join([str(row['epoch'])] + [repr(float(row[key])) for key in self.HEADER[1:]]))
        return '\n'.join(lines) + '\n'

    def export(self, path):
        write_atomic(path, self.to_csv())


@dataclass
class AdaptResult:
    encoder: ParameterSet
    decoder: ParameterSet
    critic: ParameterSet
    report: AdaptReport
    optimizers: dict


class Shuffler:
    '''Endless mini-batches over a dataset, reshuffled after every full pass'''

    def __init__(self, size: int, rng):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.cursor = 0

    def next(self, batch_size: int) -> np.ndarray:
        indices = []
        while len(indices) < batch_size:
            if self.cursor == self.size:
                self.order = self.rng.permutation(self.size)
                self.cursor = 0
            take = min(batch_size - len(indices), self.size - self.cursor)
            indices.extend(self.order[self.cursor:self.cursor + take])
            self.cursor += take
        return np.array(indices)


def _join(encoder, decoder) -> ParameterSet:
    return ParameterSet({**encoder.with_prefix('encoder'), **decoder.with_prefix('decoder')})

def ae_step(encoder, decoder, optimizer, frames):
    params = _join(encoder, decoder)
    leaves = watch(params)
    loss = ae_loss(frames, role_view(leaves, 'encoder'), role_view(leaves, 'decoder'))
    params, optimizer = optimizer_update(params, backward(loss, like=params), optimizer)
    return params.prefixed('encoder'), params.prefixed('decoder'), optimizer, float(loss.value)

def critic_step(critic, optimizer, source_embeddings, target_embeddings, config: AdaptConfig):
    loss = critic_loss(source_embeddings, target_embeddings, watch(critic), config.objective)
    critic, optimizer = optimizer_update(critic, backward(loss, like=critic), optimizer)
    if config.objective == 'wgan':
        critic = clip_values(critic, config.clip)
    return critic, optimizer, float(loss.value)

def generator_step(encoder, critic, optimizer, frames, objective):
    loss = generator_loss(frames, watch(encoder), critic, objective)
    encoder, optimizer = optimizer_update(encoder, backward(loss, like=encoder), optimizer)
    return encoder, optimizer, float(loss.value)

def adapt(source: EmbeddingDataset, target: FrameDataset, config: AdaptConfig,
          encoder: ParameterSet = None) -> AdaptResult:
    '''
    Trains a fresh adversarial autoencoder on target frames with the source embeddings
    as its prior and returns the encoder. encoder overrides the fresh initialization.
    '''
    if len(source) == 0 or len(target) == 0:
        raise AdaptError('adapt needs non-empty source embedding and target frame datasets.')
    encoder = initialize('encoder', 0, config.seed) if encoder is None else encoder.copy()
    decoder = initialize('decoder', 0, config.seed)
    critic = initialize('critic', 0, config.seed)
    optimizers = dict(ae=OptimizerState.create(_join(encoder, decoder), learning_rate=config.ae_lr),
                      critic=OptimizerState.create(critic, learning_rate=config.critic_lr,
                                                   beta1=config.critic_momentum),
                      generator=OptimizerState.create(encoder, learning_rate=config.generator_lr))

    rng = np.random.default_rng([config.seed, 0xada])
    source_batches = Shuffler(len(source), rng)
    target_batches = Shuffler(len(target), rng)
    eval_frames = target.frames[rng.permutation(len(target))[:config.eval_size]]
    eval_source = source.embeddings[rng.permutation(len(source))[:config.eval_size]]

    def alignment(encoder):
        return measure_alignment(encode(encoder, eval_frames).value, eval_source,
                                 config.alignment_projections, config.seed)

    report = AdaptReport(pre_alignment=alignment(encoder))
    batch_size = min(config.batch_size, len(target))
    batches = len(target) // batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(target))
        ae_losses, critic_losses, gen_losses = [], [], []
        for j in range(batches):
            frames = target.frames[order[j * batch_size:(j + 1) * batch_size]]
            encoder, decoder, optimizers['ae'], loss = ae_step(encoder, decoder, optimizers['ae'], frames)
            ae_losses.append(loss)

            for _ in range(config.critic_steps):
                source_embeddings = source.embeddings[source_batches.next(batch_size)]
                target_embeddings = encode(encoder, target.frames[target_batches.next(batch_size)]).value
                critic, optimizers['critic'], loss = critic_step(critic, optimizers['critic'], source_embeddings,
                                                                 target_embeddings, config)
                critic_losses.append(loss)

            frames = target.frames[target_batches.next(batch_size)]
            encoder, optimizers['generator'], loss = generator_step(encoder, critic, optimizers['generator'],
                                                                    frames, config.objective)
            gen_losses.append(loss)

        row = dict(epoch=epoch, ae_loss=float(np.mean(ae_losses)), critic_loss=float(np.mean(critic_losses)),
                   gen_loss=float(np.mean(gen_losses)), alignment=alignment(encoder))
        report.rows.append(row)
        log.log_info(status.adapt_status(epoch, row))

    report.post_alignment = report.rows[-1]['alignment'] if report.rows else report.pre_alignment
    return AdaptResult(encoder, decoder, critic, report, optimizers)
