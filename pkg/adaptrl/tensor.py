#!/usr/bin/python3
'''
Dense float64 tensors, the closed layer vocabulary shared by every network,
reverse-mode gradients for it, Adam, and central-difference gradient checks.

File structure:
ParameterSet
Var / graph recording
LAYERS
LOSS OPS
BACKWARD
GRADIENT CHECK
OPTIMIZER
'''
from dataclasses import dataclass
from collections.abc import Mapping

import numpy as np
from scipy.special import expit

from .errors import ShapeError, AdaptError

DTYPE = np.float64
LAYER_KINDS = ('dense', 'conv2d', 'relu', 'tanh', 'softmax', 'flatten', 'conv_transpose2d')

# Denominator floor of the relative error in gradient checks
RELATIVE_ERROR_FLOOR = 1e-6


class ParameterSet(Mapping):
    '''Named tensors, iterated in lexicographic order of name'''

    def __init__(self, tensors=None):
        tensors = dict(tensors or {})
        self._tensors = {name: np.array(tensors[name], dtype=DTYPE) for name in sorted(tensors)}

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        shapes = ', '.join(f'{name}{tuple(tensor.shape)}' for name, tensor in self._tensors.items())
        return f'ParameterSet({shapes})'

    def shapes(self) -> dict:
        return {name: tensor.shape for name, tensor in self._tensors.items()}

    def check_shapes(self, other, what='gradient'):
        '''Raises ShapeError unless other has exactly the same names and shapes'''
        if list(other) != list(self):
            missing = sorted(set(self) ^ set(other))
            raise ShapeError(f'{what} names differ from parameter names: {missing}')
        for name in self:
            if self[name].shape != np.shape(other[name]):
                raise ShapeError(f'{what} "{name}" has shape {np.shape(other[name])}, '
                                 f'expected {self[name].shape}')

    def copy(self):
        return ParameterSet(self._tensors)

    def map(self, fn):
        return ParameterSet({name: fn(tensor) for name, tensor in self._tensors.items()})

    def zeros_like(self):
        return self.map(np.zeros_like)

    def prefixed(self, prefix: str):
        '''Slice of the parameters named "prefix.<rest>", renamed to <rest>'''
        start = prefix + '.'
        return ParameterSet({name[len(start):]: tensor for name, tensor in self._tensors.items()
                             if name.startswith(start)})

    def with_prefix(self, prefix: str):
        return ParameterSet({f'{prefix}.{name}': tensor for name, tensor in self._tensors.items()})

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(tensor * tensor)) for tensor in self._tensors.values())))

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(tensor))) for tensor in self._tensors.values() if tensor.size),
                   default=0.0)

    def equal(self, other) -> bool:
        '''Bit-exact equality of names, shapes and values'''
        return (list(self) == list(other)
                and all(self[name].shape == other[name].shape
                        and self[name].tobytes() == np.asarray(other[name], dtype=DTYPE).tobytes()
                        for name in self))


# Graph recording

class Var:
    '''
    Node of a recorded computation. Leaves carry a parameter name; inner nodes keep
    their parents and a vector-Jacobian product mapping the output gradient to one
    gradient per parent.
    '''
    __slots__ = ('value', 'parents', 'vjp', 'name')
    # ndarray <op> Var defers to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.name is not None or bool(self.parents)

    def __repr__(self):
        label = f' "{self.name}"' if self.name else ''
        return f'Var{label}(shape={self.value.shape})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)

def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=DTYPE)

def _node(value, inputs, vjp) -> Var:
    '''Records an op; inputs not requiring grad are dropped so constant subgraphs stay unrecorded'''
    tracked = tuple(i for i, x in enumerate(inputs) if x.requires_grad)
    if not tracked:
        return Var(value)
    parents = tuple(inputs[i] for i in tracked)

    def tracked_vjp(grad):
        grads = vjp(grad)
        return tuple(grads[i] for i in tracked)
    return Var(value, parents, tracked_vjp)

def watch(params: ParameterSet, prefix: str = '') -> dict:
    '''Leaf Vars for every parameter, named prefix + name'''
    return {name: Var(tensor, name=prefix + name) for name, tensor in params.items()}

def constant(params) -> dict:
    '''Parameters entering a graph without receiving gradient'''
    return {name: Var(value_of(tensor)) for name, tensor in params.items()}

def stop_gradient(x) -> Var:
    return Var(value_of(x))


def _unbroadcast(grad, shape):
    '''Sums grad over the axes that broadcasting added or stretched'''
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# LAYERS

def dense(x, weight, bias):
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f'dense: input last dimension is {x.shape[-1]}, weight expects {weight.shape[0]}')
    if bias.shape != weight.shape[1:]:
        raise ShapeError(f'dense: bias dimension is {bias.shape}, expected {weight.shape[1:]}')
    out = x.value @ weight.value + bias.value

    def vjp(grad):
        if x.value.ndim == 1:
            grad_weight = np.outer(x.value, grad)
            grad_bias = grad
        else:
            grad_weight = x.value.T @ grad
            grad_bias = grad.sum(axis=0)
        return grad @ weight.value.T, grad_weight, grad_bias
    return _node(out, (x, weight, bias), vjp)

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1

def _check_conv_input(name, x, channels):
    if x.value.ndim != 4:
        raise ShapeError(f'{name}: input must be (batch, channels, rows, cols), got rank {x.value.ndim}')
    if x.shape[1] != channels:
        raise ShapeError(f'{name}: input channel dimension is {x.shape[1]}, weight expects {channels}')

def conv2d(x, weight, bias, stride=1, pad=0):
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    filters, channels, kh, kw = weight.shape
    _check_conv_input('conv2d', x, channels)
    n, _, rows, cols = x.shape
    out_rows, out_cols = conv_output_size(rows, kh, stride, pad), conv_output_size(cols, kw, stride, pad)
    if out_rows < 1 or out_cols < 1:
        raise ShapeError(f'conv2d: kernel {kh}x{kw} does not fit input {rows}x{cols} with pad {pad}')
    padded = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (n, channels, out_rows, out_cols, kh, kw)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight.value, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.value[None, :, None, None]

    def vjp(grad):
        grad_weight = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = grad.sum(axis=(0, 2, 3))
        grad_windows = np.tensordot(grad, weight.value, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * out_rows:stride, j:j + stride * out_cols:stride] += \
                    grad_windows[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return grad_padded[:, :, pad:pad + rows, pad:pad + cols], grad_weight, grad_bias
    return _node(np.ascontiguousarray(out), (x, weight, bias), vjp)

def conv_transpose2d(x, weight, bias, stride=1, pad=0):
    '''Adjoint of conv2d with respect to its input; weight is (in_channels, out_channels, kh, kw)'''
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    channels, filters, kh, kw = weight.shape
    _check_conv_input('conv_transpose2d', x, channels)
    n, _, rows, cols = x.shape
    full_rows, full_cols = (rows - 1) * stride + kh, (cols - 1) * stride + kw
    out_rows, out_cols = full_rows - 2 * pad, full_cols - 2 * pad
    if out_rows < 1 or out_cols < 1:
        raise ShapeError(f'conv_transpose2d: pad {pad} crops input {rows}x{cols} to nothing')
    full = np.zeros((n, filters, full_rows, full_cols), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * rows:stride, j:j + stride * cols:stride] += \
                np.tensordot(x.value, weight.value[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    out = full[:, :, pad:pad + out_rows, pad:pad + out_cols] + bias.value[None, :, None, None]

    def vjp(grad):
        grad_full = np.zeros_like(full)
        grad_full[:, :, pad:pad + out_rows, pad:pad + out_cols] = grad
        grad_x = np.zeros_like(x.value)
        grad_weight = np.zeros_like(weight.value)
        for i in range(kh):
            for j in range(kw):
                window = grad_full[:, :, i:i + stride * rows:stride, j:j + stride * cols:stride]
                grad_x += np.tensordot(window, weight.value[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                grad_weight[:, :, i, j] = np.tensordot(x.value, window, axes=([0, 2, 3], [0, 2, 3]))
        return grad_x, grad_weight, grad.sum(axis=(0, 2, 3))
    return _node(np.ascontiguousarray(out), (x, weight, bias), vjp)

def relu(x):
    x = as_var(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda grad: (grad * mask,))

def tanh(x):
    x = as_var(x)
    out = np.tanh(x.value)
    return _node(out, (x,), lambda grad: (grad * (1.0 - out * out),))

def softmax(x):
    '''Softmax over the last axis'''
    x = as_var(x)
    shifted = np.exp(x.value - x.value.max(axis=-1, keepdims=True))
    out = shifted / shifted.sum(axis=-1, keepdims=True)

    def vjp(grad):
        return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)
    return _node(out, (x,), vjp)

def flatten(x, shape=None):
    '''(batch, ...) -> (batch, prod(...)); with shape, the inverse (batch, prod) -> (batch, *shape)'''
    x = as_var(x)
    in_shape = x.shape
    if shape is None:
        out_shape = (in_shape[0], int(np.prod(in_shape[1:])))
    else:
        if int(np.prod(in_shape[1:])) != int(np.prod(shape)):
            raise ShapeError(f'flatten: cannot reshape {in_shape[1:]} to {tuple(shape)}')
        out_shape = (in_shape[0],) + tuple(shape)
    return _node(x.value.reshape(out_shape), (x,), lambda grad: (grad.reshape(in_shape),))

def forward_layer(kind: str, x, params=None, **options):
    '''Applies one layer of the closed vocabulary; params maps "weight"/"bias" for parametric kinds'''
    if kind == 'dense':
        return dense(x, params['weight'], params['bias'])
    elif kind == 'conv2d':
        return conv2d(x, params['weight'], params['bias'], **options)
    elif kind == 'conv_transpose2d':
        return conv_transpose2d(x, params['weight'], params['bias'], **options)
    elif kind == 'relu':
        return relu(x)
    elif kind == 'tanh':
        return tanh(x)
    elif kind == 'softmax':
        return softmax(x)
    elif kind == 'flatten':
        return flatten(x, **options)
    raise ValueError(f'Unknown layer kind "{kind}". Known kinds: {", ".join(LAYER_KINDS)}.')


# LOSS OPS

def add(a, b):
    a, b = as_var(a), as_var(b)
    return _node(a.value + b.value, (a, b),
                 lambda grad: (_unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)))

def sub(a, b):
    a, b = as_var(a), as_var(b)
    return _node(a.value - b.value, (a, b),
                 lambda grad: (_unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)))

def mul(a, b):
    a, b = as_var(a), as_var(b)
    return _node(a.value * b.value, (a, b),
                 lambda grad: (_unbroadcast(grad * b.value, a.shape), _unbroadcast(grad * a.value, b.shape)))

def square(x):
    x = as_var(x)
    return _node(x.value * x.value, (x,), lambda grad: (2.0 * x.value * grad,))

def total(x, axis=None):
    x = as_var(x)
    out = x.value.sum(axis=axis)

    def vjp(grad):
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, x.shape).copy(),)
    return _node(out, (x,), vjp)

def mean(x, axis=None):
    x = as_var(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(total(x, axis), 1.0 / count)

def log(x):
    x = as_var(x)
    return _node(np.log(x.value), (x,), lambda grad: (grad / x.value,))

def sigmoid(x):
    x = as_var(x)
    out = expit(x.value)
    return _node(out, (x,), lambda grad: (grad * out * (1.0 - out),))

def log_sigmoid(x):
    '''log(sigmoid(x)) without overflow; log(1 - sigmoid(x)) is log_sigmoid(-x)'''
    x = as_var(x)
    return _node(-np.logaddexp(0.0, -x.value), (x,), lambda grad: (grad * expit(-x.value),))

def log_softmax(x):
    x = as_var(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def vjp(grad):
        return (grad - np.exp(out) * grad.sum(axis=-1, keepdims=True),)
    return _node(out, (x,), vjp)

def pick(x, indices):
    '''x[i, indices[i]] for a (batch, k) input'''
    x = as_var(x)
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def vjp(grad):
        grad_x = np.zeros_like(x.value)
        grad_x[rows, indices] = grad
        return (grad_x,)
    return _node(x.value[rows, indices], (x,), vjp)


# BACKWARD

def _topological_order(root: Var) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order

def backward(loss: Var, seed: float = 1.0, like: ParameterSet = None) -> ParameterSet:
    '''
    Reverse-mode gradients of a scalar loss with respect to every named leaf it depends on.
    With like, the result has exactly like's names (zeros for parameters the loss ignores).
    '''
    if not isinstance(loss, Var) or loss.value.shape != ():
        shape = value_of(loss).shape
        raise ShapeError(f'backward needs a scalar loss, got shape {shape}')
    grads = {id(loss): np.asarray(seed, dtype=DTYPE)}
    named = {}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.name is not None:
            if node.name in named and named[node.name] is not node:
                raise AdaptError(f'Two distinct leaves share the parameter name "{node.name}".')
            named[node.name] = node
            grads[node.name] = grads.get(node.name, 0.0) + grad
        if node.parents:
            for parent, parent_grad in zip(node.parents, node.vjp(grad)):
                grads[id(parent)] = grads.get(id(parent), 0.0) + parent_grad
    result = {name: np.broadcast_to(grads[name], named[name].shape).astype(DTYPE) for name in named}
    if like is None:
        return ParameterSet(result)
    return ParameterSet({name: result.get(name, np.zeros_like(like[name])) for name in like})


# GRADIENT CHECK

@dataclass
class GradientReport:
    errors: dict
    tolerance: float

    @property
    def flagged(self) -> list:
        return [name for name, error in self.errors.items() if error > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = [f'{name}\t{error:.3e}{"  <-- above tolerance" if error > self.tolerance else ""}'
                 for name, error in self.errors.items()]
        return '\n'.join(lines)

def finite_difference_check(graph, params: ParameterSet, step: float = 1e-5,
                            tolerance: float = 1e-4, grads: ParameterSet = None) -> GradientReport:
    '''
    Compares analytic gradients of graph(params) against central differences
    (f(w+h) - f(w-h)) / 2h, entry by entry. graph maps a dict of parameter tensors
    (Vars or arrays) to a scalar loss. Supplying grads checks those instead of
    the ones backward computes.
    '''
    if step <= 0:
        raise ValueError('finite difference step must be positive')
    if grads is None:
        grads = backward(as_var(graph(watch(params))), like=params)
    params.check_shapes(grads)
    base = dict(params.items())
    errors = {}
    for name in params:
        analytic = grads[name].ravel()
        worst = 0.0
        for k in range(params[name].size):
            shifted = params[name].copy()
            shifted.flat[k] += step
            plus = float(value_of(graph({**base, name: shifted})))
            shifted.flat[k] -= 2 * step
            minus = float(value_of(graph({**base, name: shifted})))
            numeric = (plus - minus) / (2 * step)
            denominator = max(abs(analytic[k]), abs(numeric), RELATIVE_ERROR_FLOOR)
            worst = max(worst, abs(analytic[k] - numeric) / denominator)
        errors[name] = worst
    return GradientReport(errors, tolerance)


# OPTIMIZER

@dataclass(frozen=True)
class OptimizerState:
    first_moment: ParameterSet
    second_moment: ParameterSet
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, params: ParameterSet, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(params.zeros_like(), params.zeros_like(), 0, learning_rate, beta1, beta2, epsilon)

def optimizer_update(params: ParameterSet, grads: ParameterSet, state: OptimizerState):
    '''Adam step with bias correction; returns (params, state) and leaves the inputs untouched'''
    params.check_shapes(grads)
    params.check_shapes(state.first_moment, what='optimizer moment')
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    first, second, updated = {}, {}, {}
    for name in params:
        g = grads[name]
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        updated[name] = params[name] - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        first[name], second[name] = m, v
    new_state = OptimizerState(ParameterSet(first), ParameterSet(second), t,
                               state.learning_rate, b1, b2, state.epsilon)
    return ParameterSet(updated), new_state

def clip_by_global_norm(grads: ParameterSet, max_norm: float):
    '''Rescales grads so their global norm is at most max_norm; returns (grads, norm before clipping)'''
    norm = grads.global_norm()
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return grads.map(lambda g: g * scale), norm

def clip_values(params: ParameterSet, limit: float) -> ParameterSet:
    return params.map(lambda tensor: np.clip(tensor, -limit, limit))
