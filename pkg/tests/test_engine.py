import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from frugalflows.engine import (
    AdamState,
    MaskedMLP,
    Parameter,
    adam_step,
    autoregressive_mask,
    grad,
    no_grad,
    value_and_grad,
)
from frugalflows.engine import tensor as T
from frugalflows.errors import DimensionError, InvalidParameterError, NumericError

from conftest import central_difference, max_rel_err


def _check_op(fn, *shapes, rng, positive=False, h=1e-6, tol=1e-4):
    values = [rng.normal(size=s) for s in shapes]
    if positive:
        values = [np.abs(v) + 0.5 for v in values]
    params = [Parameter(v.copy()) for v in values]
    weights = rng.normal(size=np.shape(fn(*[T.Tensor(v) for v in values]).value))

    def loss():
        return T.tsum(fn(*params) * weights)

    _, grads = value_and_grad(loss, params)
    for k, v in enumerate(values):
        def f(x, k=k):
            args = [T.Tensor(x if j == k else values[j]) for j in range(len(values))]
            with no_grad():
                return float(np.sum(fn(*args).value * weights))
        fd = central_difference(f, v, h)
        assert max_rel_err(grads[k], fd) < tol, fn


UNARY = [
    T.tanh, T.sigmoid, T.softplus, T.log_cosh, T.normal_cdf, T.log_normal_cdf, T.exp,
    T.square, T.neg, lambda a: T.softmax(a, axis=-1), lambda a: T.cumsum(a, axis=-1),
    lambda a: T.mean(a, axis=0), lambda a: T.tsum(a, axis=1, keepdims=True),
    lambda a: T.reshape(a, (2, 6)), lambda a: a[:, 1:3], lambda a: T.power(a, 3.0),
    lambda a: T.broadcast_to(a[:1], (3, 4)),
]
POSITIVE = [T.log, T.sqrt, lambda a: T.power(a, -1.5)]
BINARY = [T.add, T.sub, T.mul, lambda a, b: a @ T.reshape(b, (4, 3))]


@pytest.mark.parametrize("fn", UNARY)
def test_unary_gradients(fn, rng):
    _check_op(fn, (3, 4), rng=rng)


@pytest.mark.parametrize("fn", POSITIVE)
def test_positive_domain_gradients(fn, rng):
    _check_op(fn, (3, 4), rng=rng, positive=True)


@pytest.mark.parametrize("fn", BINARY)
def test_binary_gradients(fn, rng):
    _check_op(fn, (3, 4), (3, 4), rng=rng)


def test_division_and_broadcasting_gradients(rng):
    _check_op(T.div, (3, 4), (4,), rng=rng, positive=True)
    _check_op(lambda a, b: a * b + b, (3, 1), (1, 4), rng=rng)


def test_where_concat_take_gradients(rng):
    cond = rng.random((3, 4)) > 0.5
    _check_op(lambda a, b: T.where(cond, a, b), (3, 4), (3, 4), rng=rng)
    _check_op(lambda a, b: T.concat([a, b], axis=-1), (3, 2), (3, 4), rng=rng)
    idx = rng.integers(0, 5, size=(3, 4, 1))
    _check_op(lambda a: T.take_along_axis(a, idx), (3, 4, 5), rng=rng)


def test_sum_of_squares_gradient():
    p = Parameter(np.array([1.0, -2.0]))
    g, = grad(lambda: T.tsum(p * p), [p])
    assert_allclose(g, [2.0, -4.0])


def test_constant_loss_has_zero_gradient():
    p = Parameter(np.array([0.3, 0.7]))
    g, = grad(lambda: T.tsum(T.Tensor(np.ones(2))) + 0.0 * T.tsum(p), [p])
    assert_array_equal(g, 0.0)


def test_two_layer_network_gradient(rng):
    x = rng.normal(size=(16, 3))
    y = rng.normal(size=(16, 1))
    w1 = Parameter(rng.normal(size=(3, 8)))
    b1 = Parameter(rng.normal(size=8))
    w2 = Parameter(rng.normal(size=(8, 1)))
    params = [w1, b1, w2]

    def forward(a, b, c):
        h = T.tanh(T.Tensor(x) @ a + b)
        return T.mean(T.square(h @ c - y))

    _, grads = value_and_grad(lambda: forward(*params), params)
    base = [p.value.copy() for p in params]
    for k in range(3):
        def f(v, k=k):
            args = [T.Tensor(v if j == k else base[j]) for j in range(3)]
            with no_grad():
                return float(forward(*args).value)
        assert max_rel_err(grads[k], central_difference(f, base[k])) < 1e-4


def test_nonfinite_loss_names_the_op():
    p = Parameter(np.array([-1.0]))
    with pytest.raises(NumericError) as info:
        value_and_grad(lambda: T.tsum(T.log(p)), [p])
    assert info.value.op == "log"


def test_masked_weights_do_not_matter(rng):
    net = MaskedMLP([1, 2, 3], [1, 1, 2, 2, 3, 3], width=10, depth=2, rng=rng,
                    final_bias=np.zeros(6))
    for w in net.weights:
        w.value[:] = rng.normal(size=w.shape)
    x = rng.normal(size=(5, 3))
    with no_grad():
        before = net(x).value
        for w, m in zip(net.weights, net.masks):
            w.value[m == 0] += 10.0
        after = net(x).value
    assert_array_equal(before, after)


def test_zero_network_outputs_zero(rng):
    net = MaskedMLP([1, 2], [1, 2], width=4, depth=2, rng=rng)
    for p in net.parameters():
        p.value[:] = 0.0
    with no_grad():
        assert_array_equal(net(rng.normal(size=(7, 2))).value, 0.0)


def test_jacobian_respects_degrees(rng):
    in_deg = np.array([1, 2, 3])
    out_deg = np.array([1, 1, 2, 2, 3, 3])
    net = MaskedMLP(in_deg, out_deg, width=12, depth=2, rng=rng)
    for w in net.weights:
        w.value[:] = rng.normal(size=w.shape) * net.masks[net.weights.index(w)]
    x0 = rng.normal(size=3)
    for d in range(6):
        def f(x, d=d):
            with no_grad():
                return float(net(x[None, :]).value[0, d])
        jac = central_difference(f, x0)
        for j in range(3):
            if in_deg[j] >= out_deg[d]:
                assert jac[j] == 0.0
    mask = autoregressive_mask(in_deg, out_deg, strict=True)
    assert_array_equal(mask[:2], 0.0)


def test_context_enters_every_output(rng):
    net = MaskedMLP([1], [1, 1], width=4, depth=1, context_dim=2, rng=rng)
    for p in net.parameters():
        p.value[:] = rng.normal(size=p.shape)
    with no_grad():
        a = net(np.zeros((1, 1)), np.zeros((1, 2))).value
        b = net(np.zeros((1, 1)), np.ones((1, 2))).value
    assert np.all(a != b)
    with pytest.raises(DimensionError):
        net(np.zeros((1, 1)))


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.5, -2.0])]
    state = AdamState.fresh(p, lr=0.1)
    adam_step(p, [np.zeros(2)], state)
    assert_array_equal(p[0], [1.5, -2.0])


def test_adam_first_step():
    p = [np.array([0.0])]
    state = AdamState.fresh(p, lr=0.1)
    adam_step(p, [np.array([1.0])], state)
    assert_allclose(p[0], [-0.1 / (1 + 1e-8)], rtol=1e-12)


def test_adam_quadratic():
    p = Parameter(np.array([0.0]))
    state = AdamState.fresh([p], lr=0.05)
    for _ in range(500):
        _, g = value_and_grad(lambda: T.tsum(T.square(p - 3.0)), [p])
        adam_step([p], g, state)
    assert abs(p.value[0] - 3.0) < 1e-2


def test_adam_rejects_bad_input():
    p = [np.zeros(2)]
    with pytest.raises(NumericError):
        adam_step(p, [np.array([np.nan, 0.0])], AdamState.fresh(p))
    with pytest.raises(InvalidParameterError):
        adam_step(p, [np.zeros(2)], AdamState.fresh(p, lr=0.0))
    with pytest.raises(DimensionError):
        adam_step(p, [np.zeros(3)], AdamState.fresh(p))
