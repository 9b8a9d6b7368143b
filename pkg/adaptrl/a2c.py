'''
Synchronous advantage actor-critic: lanes of games stepped in lockstep, n-step
bootstrapped returns, a combined policy / value / entropy loss and the training loop.
'''
from time import time
from dataclasses import dataclass, field

import numpy as np

from . import log
from . import status
from .games import Environment, EnvironmentSpec
from .errors import ConfigError, ShapeError
from .metrics import CurveRecord, History, MOVING_AVERAGE_WINDOW
from .networks import AGENT_ROLES, NetworkBundle, build, encode, policy, policy_logits, save_checkpoint, value
from .tensor import (ParameterSet, OptimizerState, backward, clip_by_global_norm, log_softmax, mean, optimizer_update,
                     pick, softmax, square, total, watch)

SAMPLE_MODES = ('sample', 'greedy')


@dataclass(frozen=True)
class TrainerConfig:
    n_envs: int = 16
    n_steps: int = 5
    gamma: float = 0.99
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 7e-4
    max_grad_norm: float = 0.5
    total_frames: int = 2_000_000
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100
    sample_mode: str = 'sample'

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f'gamma must be within [0, 1], got {self.gamma}.')
        if self.n_envs < 1 or self.n_steps < 1:
            raise ConfigError('n_envs and n_steps must be at least 1.')
        if self.total_frames < self.n_envs * self.n_steps:
            raise ConfigError(f'The frame budget must cover one update of {self.n_envs * self.n_steps} frames, '
                              f'got {self.total_frames}.')
        if self.max_grad_norm <= 0:
            raise ConfigError(f'max_grad_norm must be positive, got {self.max_grad_norm}.')
        if self.sample_mode not in SAMPLE_MODES:
            raise ConfigError(f'sample_mode must be one of {SAMPLE_MODES}, got "{self.sample_mode}".')

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.n_steps

    @property
    def updates(self) -> int:
        return self.total_frames // self.batch_size


@dataclass(frozen=True)
class EpisodeStats:
    score: float
    frames: int
    episode: int
    trial: int = 0
    update: int = 0


@dataclass
class RolloutBatch:
    '''Arrays are (n_steps, n_envs, ...); bootstrap_values are V of the observations after the last step'''
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    bootstrap_values: np.ndarray
    episodes: list = field(default_factory=list)

    @property
    def transitions(self) -> int:
        return self.actions.size


def lane_seed(seed: int, lane: int, episode: int) -> int:
    '''Environment seed of a lane's n-th episode'''
    return int(np.random.SeedSequence([seed, lane, episode]).generate_state(1)[0])


class Lanes:
    '''
    Independent game lanes, each with a counter-based (Philox) action stream of its own,
    so the random draws never depend on the order lanes are stepped in.
    '''

    def __init__(self, spec: EnvironmentSpec, n_envs: int, seed: int, trial: int = 0):
        self.spec = spec
        self.seed = seed
        self.trial = trial
        self.envs = [Environment(spec, lane_seed(seed, lane, 0)) for lane in range(n_envs)]
        self.rngs = [np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, lane, 0x5a])))
                     for lane in range(n_envs)]
        self.lane_episodes = [0] * n_envs
        self.scores = [0.0] * n_envs
        self.frames = [0] * n_envs
        self.episodes_finished = 0

    def __len__(self):
        return len(self.envs)

    def observations(self) -> np.ndarray:
        return np.stack([env.observation for env in self.envs])

    def choose(self, lane: int, probabilities, mode: str = 'sample') -> int:
        if mode == 'greedy':
            return int(np.argmax(probabilities))
        cumulative = np.cumsum(probabilities)
        index = int(np.searchsorted(cumulative, self.rngs[lane].random() * cumulative[-1], side='right'))
        return min(index, len(probabilities) - 1)

    def step(self, lane: int, action: int, update: int = 0):
        '''Steps one lane; finished episodes restart immediately. Returns (reward, terminal, EpisodeStats or None)'''
        result = self.envs[lane].step(action)
        self.scores[lane] += result.reward
        self.frames[lane] += 1
        finished = None
        if result.terminal:
            self.episodes_finished += 1
            finished = EpisodeStats(self.scores[lane], self.frames[lane], self.episodes_finished, self.trial, update)
            self.lane_episodes[lane] += 1
            self.envs[lane].reset(lane_seed(self.seed, lane, self.lane_episodes[lane]))
            self.scores[lane], self.frames[lane] = 0.0, 0
        return result.reward, result.terminal, finished


def act(bundle: NetworkBundle, observations):
    '''Action probabilities, state values and embeddings of a batch of observations'''
    embeddings = encode(bundle['encoder'], observations)
    return policy(bundle['policy'], embeddings).value, value(bundle['value'], embeddings).value, embeddings.value

def collect_rollout(lanes: Lanes, bundle: NetworkBundle, n_steps: int, sample_mode: str = 'sample',
                    update: int = 0) -> RolloutBatch:
    n = len(lanes)
    observations = np.zeros((n_steps, n) + lanes.envs[0].observation.shape)
    actions = np.zeros((n_steps, n), dtype=np.int64)
    rewards = np.zeros((n_steps, n))
    terminals = np.zeros((n_steps, n), dtype=bool)
    log_probs = np.zeros((n_steps, n))
    values = np.zeros((n_steps, n))
    episodes = []
    for t in range(n_steps):
        observations[t] = lanes.observations()
        probabilities, values[t], _ = act(bundle, observations[t])
        for lane in range(n):
            action = lanes.choose(lane, probabilities[lane], sample_mode)
            actions[t, lane] = action
            log_probs[t, lane] = np.log(max(probabilities[lane, action], np.finfo(float).tiny))
            rewards[t, lane], terminals[t, lane], finished = lanes.step(lane, action, update)
            if finished is not None:
                episodes.append(finished)
    _, bootstrap_values, _ = act(bundle, lanes.observations())
    return RolloutBatch(observations, actions, rewards, terminals, log_probs, values, bootstrap_values, episodes)


def discounted_returns(rewards, terminals, bootstrap, gamma: float) -> np.ndarray:
    '''G_t = r_t + gamma * G_{t+1} per lane, with G_n = bootstrap and terminals cutting the tail'''
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    returns = np.zeros_like(rewards)
    tail = np.asarray(bootstrap, dtype=np.float64).copy()
    for t in reversed(range(rewards.shape[0])):
        tail = rewards[t] + gamma * np.where(terminals[t], 0.0, tail)
        returns[t] = tail
    return returns

def compute_returns(batch: RolloutBatch, gamma: float) -> np.ndarray:
    return discounted_returns(batch.rewards, batch.terminals, batch.bootstrap_values, gamma)


def agent_parameters(bundle: NetworkBundle) -> ParameterSet:
    '''Encoder and head parameters in one set, named "<role>.<parameter>"'''
    tensors = {}
    for role in AGENT_ROLES:
        tensors.update(bundle[role].with_prefix(role).items())
    return ParameterSet(tensors)

def role_view(p, role: str) -> dict:
    start = role + '.'
    return {name[len(start):]: tensor for name, tensor in p.items() if name.startswith(start)}

def advantage_estimates(batch: RolloutBatch, returns, p) -> np.ndarray:
    '''G - V(s) as plain numbers, flat over (n_steps, n_envs)'''
    observations = batch.observations.reshape((-1,) + batch.observations.shape[2:])
    values = value(role_view(p, 'value'), encode(role_view(p, 'encoder'), observations))
    return np.asarray(returns, dtype=np.float64).reshape(-1) - values.value

def a2c_loss(batch: RolloutBatch, returns, p, value_coef: float = 0.5, entropy_coef: float = 0.01,
             advantages=None):
    '''
    mean(-log pi(a|s) * (G - V)) + value_coef * mean((G - V)^2) - entropy_coef * mean(H(pi(.|s))),
    the advantage held constant in the policy term. p maps "<role>.<parameter>" to tensors.
    advantages, one per frame, replaces G - V of the current parameters when given.
    Returns (loss, dict of the three terms as floats).
    '''
    observations = batch.observations.reshape((-1,) + batch.observations.shape[2:])
    actions = batch.actions.reshape(-1)
    returns = np.asarray(returns, dtype=np.float64).reshape(-1)

    embeddings = encode(role_view(p, 'encoder'), observations)
    logits = policy_logits(role_view(p, 'policy'), embeddings)
    log_probabilities = log_softmax(logits)
    probabilities = softmax(logits)
    values = value(role_view(p, 'value'), embeddings)

    if advantages is None:
        advantages = returns - values.value
    else:
        advantages = np.asarray(advantages, dtype=np.float64).reshape(-1)
        if advantages.shape != returns.shape:
            raise ShapeError(f'Expected {returns.shape[0]} advantages, got {advantages.shape[0]}.')
    policy_term = -mean(pick(log_probabilities, actions) * advantages)
    value_term = mean(square(returns - values))
    entropy = -mean(total(probabilities * log_probabilities, axis=-1))
    loss = policy_term + value_coef * value_term - entropy_coef * entropy
    parts = dict(policy=float(policy_term.value), value=float(value_term.value), entropy=float(entropy.value))
    return loss, parts

def split_roles(flat: ParameterSet) -> dict:
    return {role: flat.prefixed(role) for role in AGENT_ROLES}

def update_step(bundle: NetworkBundle, optimizer: OptimizerState, batch: RolloutBatch, config: TrainerConfig):
    '''One synchronous update; returns (bundle, optimizer state, loss terms)'''
    flat = agent_parameters(bundle)
    returns = compute_returns(batch, config.gamma)
    loss, parts = a2c_loss(batch, returns, watch(flat), config.value_coef, config.entropy_coef)
    grads, norm = clip_by_global_norm(backward(loss, like=flat), config.max_grad_norm)
    flat, optimizer = optimizer_update(flat, grads, optimizer)
    parts.update(loss=float(loss.value), grad_norm=norm)
    return bundle.replace(**split_roles(flat)), optimizer, parts


@dataclass
class TrainResult:
    bundle: NetworkBundle
    episodes: list
    records: list
    optimizer: OptimizerState
    updates: int


def episode_records(stats: EpisodeStats, frames_window: History) -> list:
    '''The three curve samples of a finished episode; frames_window streams episode lengths'''
    frames_window.update(stats.frames)
    return [CurveRecord(stats.trial, 'score_vs_batches', stats.update, stats.score),
            CurveRecord(stats.trial, 'score_vs_games', stats.episode, stats.score),
            CurveRecord(stats.trial, 'ep_frames_ma100', stats.episode, frames_window.mean())]

def train(spec: EnvironmentSpec, config: TrainerConfig, bundle: NetworkBundle = None, trial: int = 0,
          checkpoint_path=None) -> TrainResult:
    '''collect -> returns -> loss -> backward -> clip -> Adam, for the whole frame budget'''
    if bundle is None:
        bundle = build(AGENT_ROLES, spec.action_count, config.seed)
    if bundle.action_count != spec.action_count:
        raise ShapeError(f'Bundle has {bundle.action_count} actions, {spec.id} needs {spec.action_count}.')
    lanes = Lanes(spec, config.n_envs, config.seed, trial)
    optimizer = OptimizerState.create(agent_parameters(bundle), learning_rate=config.learning_rate)
    frames_window = History(maxlen=MOVING_AVERAGE_WINDOW)
    score_window = History(maxlen=MOVING_AVERAGE_WINDOW)
    episodes, records = [], []
    process = status.current_process() if status.DEBUG else None

    log.log_info(f'Training on {spec.id}: {config.updates} updates of {config.batch_size} frames, seed {config.seed}.')
    for update in range(1, config.updates + 1):
        iteration_start = time()
        batch = collect_rollout(lanes, bundle, config.n_steps, config.sample_mode, update)
        bundle, optimizer, parts = update_step(bundle, optimizer, batch, config)
        for stats in batch.episodes:
            score_window.update(stats.score)
            records.extend(episode_records(stats, frames_window))
        episodes.extend(batch.episodes)

        if config.log_every and update % config.log_every == 0:
            log.log_info(status.training_status(spec.id, update, update * config.batch_size,
                                                len(episodes), score_window.mean(), parts))
        if process is not None:
            status.debug_runtime_info(process, iteration_start)
        if checkpoint_path is not None and config.checkpoint_every and update % config.checkpoint_every == 0:
            save_checkpoint(bundle, checkpoint_path)

    if checkpoint_path is not None:
        save_checkpoint(bundle, checkpoint_path)
    return TrainResult(bundle, episodes, records, optimizer, config.updates)
