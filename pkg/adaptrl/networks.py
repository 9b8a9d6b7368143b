'''
Fixed architectures: convolutional encoder shared by every game, its mirror decoder,
the embedding critic, and the action-count dependent policy and value heads.
'''
from dataclasses import dataclass, field

import numpy as np

from . import container
from .games import OBSERVATION_SHAPE
from .errors import ConfigError, ShapeError
from .tensor import ParameterSet, forward_layer, sigmoid as sigmoid_layer

EMBEDDING_DIM = 32
CRITIC_HIDDEN = 64
ACTION_COUNTS = (3, 4, 5)
CONV = dict(stride=2, pad=1)
KERNEL = 4
CONV_CHANNELS = (8, 16)
# Encoder feature map after both convolutions on a 16x20 input
ENCODED_SHAPE = (CONV_CHANNELS[1], 4, 5)
ENCODED_SIZE = int(np.prod(ENCODED_SHAPE))

ROLES = ('encoder', 'decoder', 'critic', 'policy', 'value')
AGENT_ROLES = ('encoder', 'policy', 'value')
HEAD_ROLES = ('policy', 'value')


def architecture(role: str, action_count: int) -> list:
    '''(parameter name, shape, fan_in) triples of a role'''
    channels = OBSERVATION_SHAPE[0]
    c1, c2 = CONV_CHANNELS
    k2 = KERNEL * KERNEL
    if role == 'encoder':
        return [('conv1.weight', (c1, channels, KERNEL, KERNEL), channels * k2), ('conv1.bias', (c1,), None),
                ('conv2.weight', (c2, c1, KERNEL, KERNEL), c1 * k2), ('conv2.bias', (c2,), None),
                ('dense.weight', (ENCODED_SIZE, EMBEDDING_DIM), ENCODED_SIZE), ('dense.bias', (EMBEDDING_DIM,), None)]
    elif role == 'decoder':
        # transposed convolution weights are (in_channels, out_channels, kh, kw); fan_in uses out_channels
        return [('dense.weight', (EMBEDDING_DIM, ENCODED_SIZE), EMBEDDING_DIM), ('dense.bias', (ENCODED_SIZE,), None),
                ('deconv1.weight', (c2, c1, KERNEL, KERNEL), c1 * k2), ('deconv1.bias', (c1,), None),
                ('deconv2.weight', (c1, channels, KERNEL, KERNEL), channels * k2), ('deconv2.bias', (channels,), None)]
    elif role == 'critic':
        return [('hidden1.weight', (EMBEDDING_DIM, CRITIC_HIDDEN), EMBEDDING_DIM), ('hidden1.bias', (CRITIC_HIDDEN,), None),
                ('hidden2.weight', (CRITIC_HIDDEN, CRITIC_HIDDEN), CRITIC_HIDDEN), ('hidden2.bias', (CRITIC_HIDDEN,), None),
                ('output.weight', (CRITIC_HIDDEN, 1), CRITIC_HIDDEN), ('output.bias', (1,), None)]
    elif role == 'policy':
        return [('dense.weight', (EMBEDDING_DIM, action_count), EMBEDDING_DIM), ('dense.bias', (action_count,), None)]
    elif role == 'value':
        return [('dense.weight', (EMBEDDING_DIM, 1), EMBEDDING_DIM), ('dense.bias', (1,), None)]
    raise ConfigError(f'Unknown network role "{role}". Known roles: {", ".join(ROLES)}.')

def initialize(role: str, action_count: int, seed: int) -> ParameterSet:
    '''Uniform(+-1/sqrt(fan_in)) weights, zero biases; each role has its own stream so subsets agree'''
    rng = np.random.default_rng([seed, ROLES.index(role)])
    tensors = {}
    for name, shape, fan_in in architecture(role, action_count):
        if fan_in is None:
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ParameterSet(tensors)

def check_role_shapes(role: str, params: ParameterSet, action_count: int):
    expected = {name: shape for name, shape, _ in architecture(role, action_count)}
    if sorted(expected) != list(params):
        raise ShapeError(f'{role} parameters {list(params)} do not match the architecture {sorted(expected)}.')
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f'{role} parameter "{name}" has shape {params[name].shape}, expected {shape}.')


# Forward passes: p maps parameter names to Vars or arrays

def _layer(p, prefix):
    return {'weight': p[prefix + '.weight'], 'bias': p[prefix + '.bias']}

def encode(p, observations):
    '''(batch, 2, 16, 20) observations -> (batch, 32) embeddings in (-1, 1)'''
    x = forward_layer('conv2d', observations, _layer(p, 'conv1'), **CONV)
    x = forward_layer('relu', x)
    x = forward_layer('conv2d', x, _layer(p, 'conv2'), **CONV)
    x = forward_layer('relu', x)
    x = forward_layer('flatten', x)
    x = forward_layer('dense', x, _layer(p, 'dense'))
    return forward_layer('tanh', x)

def decode(p, embeddings):
    '''(batch, 32) embeddings -> linear (batch, 2, 16, 20) reconstructions'''
    x = forward_layer('dense', embeddings, _layer(p, 'dense'))
    x = forward_layer('relu', x)
    x = forward_layer('flatten', x, shape=ENCODED_SHAPE)
    x = forward_layer('conv_transpose2d', x, _layer(p, 'deconv1'), **CONV)
    x = forward_layer('relu', x)
    return forward_layer('conv_transpose2d', x, _layer(p, 'deconv2'), **CONV)

def critic_logit(p, embeddings):
    '''(batch, 32) -> (batch,) unbounded critic score'''
    x = forward_layer('dense', embeddings, _layer(p, 'hidden1'))
    x = forward_layer('relu', x)
    x = forward_layer('dense', x, _layer(p, 'hidden2'))
    x = forward_layer('relu', x)
    x = forward_layer('dense', x, _layer(p, 'output'))
    return forward_layer('flatten', x, shape=())

def critic(p, embeddings, sigmoid=False):
    score = critic_logit(p, embeddings)
    return sigmoid_layer(score) if sigmoid else score

def policy_logits(p, embeddings):
    return forward_layer('dense', embeddings, _layer(p, 'dense'))

def policy(p, embeddings):
    return forward_layer('softmax', policy_logits(p, embeddings))

def value(p, embeddings):
    return forward_layer('flatten', forward_layer('dense', embeddings, _layer(p, 'dense')), shape=())


@dataclass(frozen=True)
class NetworkBundle:
    action_count: int
    seed: int
    params: dict = field(default_factory=dict)
    sigmoid_critic: bool = False

    @property
    def roles(self) -> tuple:
        return tuple(role for role in ROLES if role in self.params)

    def __getitem__(self, role) -> ParameterSet:
        if role not in self.params:
            raise KeyError(f'Bundle has no {role} parameters (roles: {", ".join(self.roles)}).')
        return self.params[role]

    def replace(self, **role_params):
        for role, params in role_params.items():
            check_role_shapes(role, params, self.action_count)
        return NetworkBundle(self.action_count, self.seed, {**self.params, **role_params}, self.sigmoid_critic)

    def equal(self, other) -> bool:
        return (self.action_count == other.action_count and self.roles == other.roles
                and all(self[role].equal(other[role]) for role in self.roles))


def build(roles=AGENT_ROLES, action_count: int = 3, seed: int = 0, sigmoid_critic: bool = False) -> NetworkBundle:
    if action_count not in ACTION_COUNTS:
        raise ConfigError(f'action_count must be one of {ACTION_COUNTS}, got {action_count}.')
    unknown = set(roles) - set(ROLES)
    if unknown:
        raise ConfigError(f'Unknown network roles: {", ".join(sorted(unknown))}.')
    params = {role: initialize(role, action_count, seed) for role in ROLES if role in roles}
    return NetworkBundle(action_count, seed, params, sigmoid_critic)


# Checkpoints

def save_checkpoint(bundle: NetworkBundle, path):
    tensors = {'meta.action_count': np.array([bundle.action_count]),
               'meta.seed': np.array([bundle.seed]),
               'meta.sigmoid_critic': np.array([float(bundle.sigmoid_critic)])}
    for role in bundle.roles:
        for name, tensor in bundle[role].items():
            tensors[f'{role}.{name}'] = tensor
    container.write(path, tensors, container.CHECKPOINT_MAGIC)

def load_checkpoint(path, roles=None, action_count: int = None, seed: int = None) -> NetworkBundle:
    '''
    Loads a bundle. Requested roles missing from the file are freshly built from seed
    (the file's seed by default); stored roles must match the requested architecture.
    '''
    tensors = container.read(path, container.CHECKPOINT_MAGIC)
    stored_action_count = int(tensors.pop('meta.action_count', [0])[0])
    stored_seed = int(tensors.pop('meta.seed', [0])[0])
    sigmoid_critic = bool(tensors.pop('meta.sigmoid_critic', [0.0])[0])
    action_count = stored_action_count if action_count is None else action_count
    seed = stored_seed if seed is None else seed

    stored = {}
    for full_name, tensor in tensors.items():
        role, _, name = full_name.partition('.')
        if role not in ROLES:
            raise ShapeError(f'{path}: tensor "{full_name}" belongs to no known role.')
        stored.setdefault(role, {})[name] = tensor
    if roles is None:
        roles = tuple(role for role in ROLES if role in stored)

    params = {}
    for role in roles:
        if role in stored:
            params[role] = ParameterSet(stored[role])
            check_role_shapes(role, params[role], action_count)
        else:
            params[role] = initialize(role, action_count, seed)
    return NetworkBundle(action_count, seed, params, sigmoid_critic)


def graft_encoder(target: NetworkBundle, encoder: ParameterSet) -> NetworkBundle:
    '''Target bundle with its encoder replaced; heads untouched'''
    return target.replace(encoder=encoder.copy())

def graft_heads(target: NetworkBundle, policy_params: ParameterSet, value_params: ParameterSet) -> NetworkBundle:
    '''Target bundle with donor policy/value heads; encoder untouched'''
    donor_actions = policy_params['dense.weight'].shape[-1]
    if donor_actions != target.action_count:
        raise ShapeError(f'Donor policy head has {donor_actions} actions, target bundle has {target.action_count}.')
    return target.replace(policy=policy_params.copy(), value=value_params.copy())
