import numpy as np
import pytest

from adaptrl.a2c import (Lanes, TrainerConfig, a2c_loss, advantage_estimates, agent_parameters, collect_rollout,
                         compute_returns, discounted_returns, episode_records, lane_seed, role_view, split_roles, train,
                         update_step)
from adaptrl.errors import ConfigError, ShapeError
from adaptrl.games import get_spec
from adaptrl.metrics import History
from adaptrl.networks import AGENT_ROLES, build, encode, load_checkpoint, value
from adaptrl.tensor import ParameterSet, OptimizerState, backward, finite_difference_check, optimizer_update, watch


def brute_returns(rewards, terminals, bootstrap, gamma):
    n_steps, n_envs = rewards.shape
    returns = np.zeros_like(rewards)
    for lane in range(n_envs):
        for t in range(n_steps):
            total, discount = 0.0, 1.0
            for k in range(t, n_steps):
                total += discount * rewards[k, lane]
                if terminals[k, lane]:
                    break
                discount *= gamma
            else:
                total += discount * bootstrap[lane]
            returns[t, lane] = total
    return returns

def rollout(env_id='mini-pong', n_envs=2, n_steps=3, seed=0, bundle=None, mode='sample'):
    spec = get_spec(env_id)
    bundle = bundle or build(AGENT_ROLES, spec.action_count, seed)
    return collect_rollout(Lanes(spec, n_envs, seed), bundle, n_steps, mode), bundle

def with_random_biases(bundle, seed=0):
    '''Biases of +-U(1.5, 2.5) keep ReLU pre-activations away from zero'''
    rng = np.random.default_rng(seed)

    def shift(params):
        return ParameterSet({name: (rng.uniform(1.5, 2.5, tensor.shape) * rng.choice([-1.0, 1.0], tensor.shape)
                                    if name.endswith('bias') else tensor) for name, tensor in params.items()})
    return bundle.replace(**{role: shift(bundle[role]) for role in bundle.roles})


def test_returns_analytic_cases():
    np.testing.assert_allclose(discounted_returns([[1], [0], [0]], [[False]] * 3, [0.0], 0.5).ravel(), [1, 0, 0])
    np.testing.assert_allclose(discounted_returns([[0], [0], [1]], [[False]] * 3, [0.0], 0.9).ravel(),
                               [0.81, 0.9, 1.0], atol=1e-15)

def test_terminal_cuts_bootstrap():
    returns = discounted_returns([[0.0], [1.0]], [[False], [True]], [100.0], 0.5)
    np.testing.assert_allclose(returns.ravel(), [0.5, 1.0])

def test_returns_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_steps, n_envs = rng.integers(1, 7), rng.integers(1, 5)
        rewards = rng.integers(-1, 2, size=(n_steps, n_envs)).astype(np.float64)
        terminals = rng.random((n_steps, n_envs)) < 0.2
        bootstrap = rng.normal(size=n_envs)
        gamma = rng.random()
        np.testing.assert_allclose(discounted_returns(rewards, terminals, bootstrap, gamma),
                                   brute_returns(rewards, terminals, bootstrap, gamma), rtol=0, atol=1e-10)


def test_trainer_config_defaults_and_validation():
    config = TrainerConfig()
    assert config.batch_size == 80
    assert TrainerConfig(total_frames=80).updates == 1
    for bad in (dict(gamma=1.5), dict(n_envs=0), dict(total_frames=0), dict(total_frames=79),
                dict(sample_mode='random')):
        with pytest.raises(ConfigError):
            TrainerConfig(**bad)

def test_lane_seeds_differ():
    assert len({lane_seed(0, lane, episode) for lane in range(4) for episode in range(4)}) == 16

def test_rollout_shape_and_rewards():
    batch, _ = rollout(n_envs=16, n_steps=5)
    assert batch.transitions == 80
    assert batch.observations.shape == (5, 16, 2, 16, 20)
    assert set(np.unique(batch.rewards)) <= {-1.0, 0.0, 1.0}
    assert batch.bootstrap_values.shape == (16,)

@pytest.mark.parametrize('mode', ['sample', 'greedy'])
def test_rollout_is_reproducible(mode):
    first, _ = rollout(n_envs=4, n_steps=6, seed=3, mode=mode)
    second, _ = rollout(n_envs=4, n_steps=6, seed=3, mode=mode)
    np.testing.assert_array_equal(first.actions, second.actions)
    assert first.observations.tobytes() == second.observations.tobytes()

def test_lane_order_does_not_change_draws():
    spec = get_spec('mini-breakout')
    forward, backward_lanes = Lanes(spec, 3, 1), Lanes(spec, 3, 1)
    probabilities = np.full(4, 0.25)
    first = [forward.choose(lane, probabilities) for lane in range(3)]
    second = [backward_lanes.choose(lane, probabilities) for lane in reversed(range(3))][::-1]
    assert first == second

def test_greedy_choice_is_argmax():
    lanes = Lanes(get_spec('mini-pong'), 1, 0)
    assert lanes.choose(0, np.array([0.1, 0.7, 0.2]), 'greedy') == 1


def test_loss_with_exact_values_is_entropy_only():
    batch, bundle = rollout(n_envs=3, n_steps=4, seed=2)
    flat = agent_parameters(bundle)
    observations = batch.observations.reshape((-1,) + batch.observations.shape[2:])
    returns = value(bundle['value'], encode(bundle['encoder'], observations)).value.reshape(batch.rewards.shape)
    loss, parts = a2c_loss(batch, returns, flat, value_coef=0.5, entropy_coef=0.01)
    assert parts['policy'] == 0.0
    assert parts['value'] == 0.0
    assert float(loss.value) == pytest.approx(-0.01 * parts['entropy'])

def test_zero_advantage_and_entropy_means_no_update():
    batch, bundle = rollout(n_envs=3, n_steps=4, seed=2)
    flat = agent_parameters(bundle)
    observations = batch.observations.reshape((-1,) + batch.observations.shape[2:])
    returns = value(bundle['value'], encode(bundle['encoder'], observations)).value.reshape(batch.rewards.shape)
    loss, _ = a2c_loss(batch, returns, watch(flat), entropy_coef=0.0)
    grads = backward(loss, like=flat)
    assert grads.max_abs() == 0.0
    updated, _ = optimizer_update(flat, grads, OptimizerState.create(flat))
    assert updated.equal(flat)

@pytest.mark.parametrize('action_count, env_id', [(3, 'mini-pong'), (5, 'mini-court')])
def test_uniform_policy_entropy(action_count, env_id):
    batch, bundle = rollout(env_id, seed=1)
    bundle = bundle.replace(policy=bundle['policy'].zeros_like())
    _, parts = a2c_loss(batch, compute_returns(batch, 0.99), agent_parameters(bundle))
    assert parts['entropy'] == pytest.approx(np.log(action_count), abs=1e-12)

def test_a2c_loss_gradient():
    spec = get_spec('mini-breakout')
    bundle = with_random_biases(build(AGENT_ROLES, spec.action_count, 4))
    batch, _ = rollout('mini-breakout', n_envs=2, n_steps=2, seed=4, bundle=bundle)
    returns = compute_returns(batch, 0.99)
    flat = agent_parameters(bundle)
    checked = ParameterSet({name: tensor for name, tensor in flat.items()
                            if not name.startswith('encoder.conv')})
    fixed = {name: tensor for name, tensor in flat.items() if name not in checked}

    # G - V is a constant of the policy term
    advantages = advantage_estimates(batch, returns, flat)

    def graph(p):
        return a2c_loss(batch, returns, {**fixed, **p}, advantages=advantages)[0]

    report = finite_difference_check(graph, checked, step=1e-5, tolerance=1e-4)
    assert report.passed, str(report)

def test_frozen_advantages_match_current_ones():
    batch, bundle = rollout(n_envs=2, n_steps=3, seed=2)
    returns = compute_returns(batch, 0.99)
    flat = agent_parameters(bundle)
    loss, parts = a2c_loss(batch, returns, flat)
    frozen, frozen_parts = a2c_loss(batch, returns, flat, advantages=advantage_estimates(batch, returns, flat))
    assert float(frozen.value) == float(loss.value)
    assert frozen_parts == parts
    with pytest.raises(ShapeError):
        a2c_loss(batch, returns, flat, advantages=np.zeros(5))

def test_a2c_loss_gradient_first_convolution():
    bundle = with_random_biases(build(AGENT_ROLES, 3, 6), seed=6)
    batch, _ = rollout('mini-pong', n_envs=1, n_steps=2, seed=6, bundle=bundle)
    returns = compute_returns(batch, 0.99)
    flat = agent_parameters(bundle)
    checked = ParameterSet({name: flat[name] for name in ('encoder.conv1.bias', 'encoder.conv1.weight')})
    fixed = {name: tensor for name, tensor in flat.items() if name not in checked}

    advantages = advantage_estimates(batch, returns, flat)

    def graph(p):
        return a2c_loss(batch, returns, {**fixed, **p}, advantages=advantages)[0]

    assert finite_difference_check(graph, checked).passed

def test_update_step_clips_and_advances():
    batch, bundle = rollout(n_envs=4, n_steps=5)
    config = TrainerConfig(n_envs=4, n_steps=5, total_frames=20)
    optimizer = OptimizerState.create(agent_parameters(bundle), learning_rate=config.learning_rate)
    updated, optimizer, parts = update_step(bundle, optimizer, batch, config)
    assert optimizer.step == 1
    assert set(parts) >= {'policy', 'value', 'entropy', 'loss', 'grad_norm'}
    assert not updated['policy'].equal(bundle['policy'])
    assert updated.roles == bundle.roles

def test_split_roles_inverts_agent_parameters():
    bundle = build(AGENT_ROLES, 4, 0)
    roles = split_roles(agent_parameters(bundle))
    for role in AGENT_ROLES:
        assert roles[role].equal(bundle[role])
        assert ParameterSet(role_view(agent_parameters(bundle), role)).equal(bundle[role])


def test_one_update_for_80_frames(tmp_path):
    result = train(get_spec('mini-pong'), TrainerConfig(total_frames=80), checkpoint_path=tmp_path / 'a.ckpt')
    assert result.updates == 1
    assert result.optimizer.step == 1
    assert load_checkpoint(tmp_path / 'a.ckpt').equal(result.bundle)

def test_training_is_deterministic(tmp_path):
    config = TrainerConfig(n_envs=4, n_steps=5, total_frames=400, seed=3)
    spec = get_spec('mini-breakout')
    first = train(spec, config, checkpoint_path=tmp_path / 'first.ckpt')
    second = train(spec, config, checkpoint_path=tmp_path / 'second.ckpt')
    assert (tmp_path / 'first.ckpt').read_bytes() == (tmp_path / 'second.ckpt').read_bytes()
    assert first.records == second.records

def test_train_rejects_mismatched_bundle():
    with pytest.raises(ShapeError):
        train(get_spec('mini-court'), TrainerConfig(total_frames=80), build(AGENT_ROLES, 3, 0))

def test_episode_records_share_scores():
    window = History(maxlen=100)
    result = train(get_spec('mini-pong'), TrainerConfig(n_envs=8, n_steps=5, total_frames=8 * 5 * 60, seed=1))
    by_series = {}
    for record in result.records:
        by_series.setdefault(record.series, []).append(record)
    assert sorted(r.y for r in by_series.get('score_vs_batches', [])) == \
        sorted(r.y for r in by_series.get('score_vs_games', []))
    assert all(1 <= r.y <= 1000 for r in by_series.get('ep_frames_ma100', []))
    for stats in result.episodes:
        records = episode_records(stats, window)
        assert [r.series for r in records] == ['score_vs_batches', 'score_vs_games', 'ep_frames_ma100']
        assert records[0].x == stats.update and records[1].x == stats.episode
