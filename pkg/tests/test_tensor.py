import numpy as np
import pytest

from adaptrl.errors import AdaptError, ShapeError
from adaptrl.tensor import (ParameterSet, OptimizerState, Var, backward, clip_by_global_norm, clip_values,
                            conv2d, conv_output_size, finite_difference_check, forward_layer, log_sigmoid,
                            log_softmax, mean, mul, optimizer_update, pick, sigmoid, square, total, watch)


def projection_loss(out, seed=7):
    '''Scalar that depends on every output entry'''
    weights = np.random.default_rng(seed).normal(size=np.shape(out.value))
    return total(mul(out, weights))

def brute_conv2d(x, w, b, stride, pad):
    n, c, rows, cols = x.shape
    f, _, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_rows, out_cols = conv_output_size(rows, kh, stride, pad), conv_output_size(cols, kw, stride, pad)
    out = np.zeros((n, f, out_rows, out_cols))
    for i in range(n):
        for k in range(f):
            for r in range(out_rows):
                for s in range(out_cols):
                    patch = padded[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[i, k, r, s] = np.sum(patch * w[k]) + b[k]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_parameter_set_sorted_and_copied():
    source = {'b': np.ones(2), 'a': np.zeros(3)}
    params = ParameterSet(source)
    assert list(params) == ['a', 'b']
    source['b'][0] = 5.0
    assert params['b'][0] == 1.0
    assert len(params.prefixed('x')) == 0
    assert list(params.with_prefix('net').prefixed('net')) == ['a', 'b']

def test_parameter_set_equal_is_bit_exact():
    a = ParameterSet({'w': np.array([0.1, 0.2])})
    assert a.equal(a.copy())
    assert not a.equal(ParameterSet({'w': np.array([0.1, np.nextafter(0.2, 1.0)])}))

def test_conv2d_matches_brute_force(rng):
    x = rng.normal(size=(2, 3, 7, 9))
    w = rng.normal(size=(4, 3, 4, 4))
    b = rng.normal(size=4)
    for stride, pad in ((1, 0), (2, 1), (3, 2)):
        out = conv2d(x, w, b, stride, pad).value
        np.testing.assert_allclose(out, brute_conv2d(x, w, b, stride, pad), atol=1e-12)

def test_conv2d_channel_mismatch_names_dimension(rng):
    with pytest.raises(ShapeError, match='channel'):
        conv2d(rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 3, 2, 2)), np.zeros(3))

def test_dense_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        forward_layer('dense', rng.normal(size=(2, 5)), {'weight': rng.normal(size=(4, 3)), 'bias': np.zeros(3)})

def test_relu_example():
    np.testing.assert_array_equal(forward_layer('relu', np.array([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])

def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(forward_layer('softmax', np.zeros(3)).value, np.full(3, 1.0 / 3.0), rtol=0, atol=1e-15)

def test_softmax_rows_sum_to_one(rng):
    out = forward_layer('softmax', rng.normal(scale=20.0, size=(50, 5))).value
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(50), rtol=0, atol=1e-12)
    assert (out >= 0).all()

def test_identity_dense_passes_input_through(rng):
    x = rng.normal(size=(4, 6))
    out = forward_layer('dense', x, {'weight': np.eye(6), 'bias': np.zeros(6)})
    np.testing.assert_array_equal(out.value, x)

def test_unknown_layer_kind():
    with pytest.raises(ValueError):
        forward_layer('maxpool', np.zeros((1, 2)))


LAYER_CASES = [
    ('dense', (3, 5), dict(weight=(5, 4), bias=(4,)), {}),
    ('conv2d', (2, 2, 6, 7), dict(weight=(3, 2, 4, 4), bias=(3,)), dict(stride=2, pad=1)),
    ('conv_transpose2d', (2, 3, 3, 4), dict(weight=(3, 2, 4, 4), bias=(2,)), dict(stride=2, pad=1)),
    ('relu', (4, 6), {}, {}),
    ('tanh', (4, 6), {}, {}),
    ('softmax', (4, 5), {}, {}),
    ('flatten', (2, 3, 4), {}, {}),
]

@pytest.mark.parametrize('kind, input_shape, param_shapes, options', LAYER_CASES, ids=[c[0] for c in LAYER_CASES])
def test_layer_gradients(kind, input_shape, param_shapes, options, rng):
    x = rng.normal(size=input_shape)
    if kind == 'relu':
        # keep inputs away from the kink at zero
        x = np.sign(x) * (np.abs(x) + 0.1)
    tensors = {'x': x, **{name: rng.normal(size=shape) for name, shape in param_shapes.items()}}
    params = ParameterSet(tensors)

    def graph(p):
        layer_params = {name: p[name] for name in param_shapes}
        return projection_loss(forward_layer(kind, p['x'], layer_params or None, **options))

    report = finite_difference_check(graph, params, step=1e-5, tolerance=1e-4)
    assert report.passed, str(report)

@pytest.mark.parametrize('op', ['square', 'log_sigmoid', 'sigmoid', 'log_softmax', 'pick', 'mean'])
def test_loss_op_gradients(op, rng):
    params = ParameterSet({'x': rng.normal(size=(5, 3))})
    indices = rng.integers(3, size=5)

    def graph(p):
        x = p['x']
        if op == 'square':
            return total(square(x))
        elif op == 'log_sigmoid':
            return total(log_sigmoid(x))
        elif op == 'sigmoid':
            return projection_loss(sigmoid(x))
        elif op == 'log_softmax':
            return projection_loss(log_softmax(x))
        elif op == 'pick':
            return projection_loss(pick(x, indices))
        return mean(mul(x, x))

    report = finite_difference_check(graph, params)
    assert report.passed, str(report)

def test_broadcast_gradient_is_summed():
    params = ParameterSet({'b': np.array([1.0, 2.0])})
    loss = total(watch(params)['b'] + np.ones((4, 2)))
    np.testing.assert_array_equal(backward(loss)['b'], [4.0, 4.0])

def test_finite_difference_flags_wrong_gradient(rng):
    params = ParameterSet({'x': rng.normal(size=4)})

    def graph(p):
        return total(square(p['x']))

    wrong = ParameterSet({'x': 2.0 * params['x'] + 0.1})
    report = finite_difference_check(graph, params, grads=wrong)
    assert not report.passed
    assert report.flagged == ['x']

def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        backward(watch(ParameterSet({'x': np.ones(3)}))['x'])

def test_backward_like_fills_unused_parameters():
    params = ParameterSet({'used': np.ones(2), 'unused': np.ones((2, 2))})
    loss = total(watch(params)['used'])
    grads = backward(loss, like=params)
    assert list(grads) == ['unused', 'used']
    np.testing.assert_array_equal(grads['unused'], np.zeros((2, 2)))

def test_backward_rejects_duplicate_leaf_names():
    a, b = Var(np.ones(2), name='w'), Var(np.ones(2), name='w')
    with pytest.raises(AdaptError):
        backward(total(a + b))

def test_constant_inputs_are_not_recorded():
    assert not (Var(np.ones(2)) + np.ones(2)).requires_grad


def test_adam_first_step_moves_by_learning_rate(rng):
    params = ParameterSet({'w': rng.normal(size=(3, 3))})
    grads = ParameterSet({'w': rng.uniform(0.5, 2.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))})
    state = OptimizerState.create(params, learning_rate=0.01)
    updated, state = optimizer_update(params, grads, state)
    np.testing.assert_allclose(params['w'] - updated['w'], 0.01 * np.sign(grads['w']), rtol=1e-6)
    assert state.step == 1

def test_optimizer_update_is_pure(rng):
    params = ParameterSet({'w': rng.normal(size=4)})
    grads = ParameterSet({'w': rng.normal(size=4)})
    state = OptimizerState.create(params)
    before = params.copy()
    optimizer_update(params, grads, state)
    assert params.equal(before)
    assert state.step == 0
    assert state.first_moment.equal(params.zeros_like())

def test_optimizer_rejects_mismatched_gradients():
    params = ParameterSet({'w': np.zeros(3)})
    with pytest.raises(ShapeError):
        optimizer_update(params, ParameterSet({'w': np.zeros(4)}), OptimizerState.create(params))

def test_zero_beta1_keeps_no_momentum(rng):
    params = ParameterSet({'w': rng.normal(size=3)})
    state = OptimizerState.create(params, beta1=0.0)
    _, state = optimizer_update(params, ParameterSet({'w': np.ones(3)}), state)
    _, state = optimizer_update(params, ParameterSet({'w': -np.ones(3)}), state)
    np.testing.assert_array_equal(state.first_moment['w'], -np.ones(3))

def test_clip_by_global_norm():
    grads = ParameterSet({'a': np.array([3.0]), 'b': np.array([4.0])})
    clipped, norm = clip_by_global_norm(grads, 0.5)
    assert norm == 5.0
    assert clipped.global_norm() == pytest.approx(0.5)
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same.equal(grads)

def test_clip_values():
    clipped = clip_values(ParameterSet({'w': np.array([-1.0, 0.005, 2.0])}), 0.01)
    np.testing.assert_array_equal(clipped['w'], [-0.01, 0.005, 0.01])


def test_gradient_of_squared_norm():
    w = watch(ParameterSet({'w': np.array([1.0, 2.0])}))['w']
    np.testing.assert_array_equal(backward(total(mul(w, w)))['w'], [2.0, 4.0])

def test_fitted_identity_layer_has_zero_gradient(rng):
    x = rng.normal(size=(8, 5))
    params = ParameterSet({'bias': np.zeros(5), 'weight': np.eye(5)})
    p = watch(params)
    loss = mean(square(forward_layer('dense', x, p) - x))
    grads = backward(loss, like=params)
    assert grads.max_abs() == 0.0

def test_adam_zero_gradient_leaves_parameters(rng):
    params = ParameterSet({'w': rng.normal(size=(3, 2))})
    updated, state = optimizer_update(params, params.zeros_like(), OptimizerState.create(params))
    assert updated.equal(params)
    assert state.step == 1

def test_adam_minimizes_quadratic():
    params = ParameterSet({'w': np.array([0.0])})
    state = OptimizerState.create(params, learning_rate=0.1)
    for _ in range(100):
        w = watch(params)['w']
        grads = backward(total(square(w - 3.0)))
        params, state = optimizer_update(params, grads, state)
    assert abs(params['w'][0] - 3.0) < 0.1

def test_passes_are_bit_identical(rng):
    x = rng.normal(size=(2, 2, 6, 6))
    params = ParameterSet({'conv.weight': rng.normal(size=(3, 2, 3, 3)), 'conv.bias': rng.normal(size=3),
                           'dense.weight': rng.normal(size=(12, 4)), 'dense.bias': rng.normal(size=4)})

    def run():
        p = watch(params)
        hidden = forward_layer('relu', forward_layer('conv2d', x, {'weight': p['conv.weight'],
                                                                   'bias': p['conv.bias']}, stride=2))
        out = forward_layer('dense', forward_layer('flatten', hidden),
                            {'weight': p['dense.weight'], 'bias': p['dense.bias']})
        loss = total(forward_layer('softmax', out) * np.arange(4.0))
        return loss.value.tobytes(), {name: grad.tobytes() for name, grad in backward(loss).items()}

    assert run() == run()
