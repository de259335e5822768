import math

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from frugalflows.bijectors import (
    Affine,
    Compose,
    Identity,
    Interval,
    RqsSpline,
    affine_bijector,
    compose,
    identity_raw,
    n_spline_params,
    permutation_bijector,
    rqs_apply,
    tanh_bijector,
)
from frugalflows.errors import CompositionError, InvalidParameterError, InvalidSplineError


def random_spline(rng, knots=8, pinned=True, scale=2.0):
    raw = rng.normal(scale=scale, size=n_spline_params(knots, pinned))
    return RqsSpline.from_raw(raw, knots, pinned=pinned)


def test_identity_spline_is_identity():
    spline = RqsSpline.identity(8)
    x = np.linspace(-1, 1, 101)
    y, ld = rqs_apply(x, spline)
    assert_allclose(y, x, atol=1e-12)
    assert_allclose(ld, 0.0, atol=1e-12)


def test_identity_raw_matches_uniform_knots():
    spline = RqsSpline.from_raw(identity_raw(5), 5)
    assert_allclose(spline.knots_x, np.linspace(-1, 1, 6), atol=1e-12)
    assert_allclose(spline.derivatives, 1.0, atol=1e-12)


def test_tails_are_identity(rng):
    spline = random_spline(rng)
    y, ld = rqs_apply(np.array([2.0, -3.5]), spline)
    assert_array_equal(y, [2.0, -3.5])
    assert_array_equal(ld, 0.0)


@pytest.mark.parametrize("pinned", [True, False])
def test_logdet_matches_finite_difference(rng, pinned):
    spline = random_spline(rng, pinned=pinned)
    x = rng.uniform(-0.98, 0.98, size=200)
    h = 1e-6
    fd = (spline.forward(x + h)[0] - spline.forward(x - h)[0]) / (2 * h)
    _, ld = spline.forward(x)
    assert_allclose(np.exp(ld), fd, rtol=1e-4)


@pytest.mark.parametrize("pinned", [True, False])
def test_round_trip(rng, pinned):
    spline = random_spline(rng, pinned=pinned)
    x = np.concatenate([rng.uniform(-1, 1, 500), [-1.0, 1.0, 1.7, -4.0]])
    y, ld = rqs_apply(x, spline, "forward")
    back, ld_inv = rqs_apply(y, spline, "inverse")
    assert_allclose(back, x, atol=1e-8)
    assert_allclose(ld + ld_inv, 0.0, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-5, 5)),
       arrays(np.float64, 30, elements=st.floats(-1.2, 1.2)))
def test_round_trip_property(raw, x):
    spline = RqsSpline.from_raw(np.concatenate([raw, np.zeros(7)])[:23], 8)
    y, _ = spline.forward(x)
    assert np.all(np.diff(y[np.argsort(x)]) >= -1e-12)
    assert_allclose(spline.inverse(y)[0], x, atol=1e-6)


def test_invalid_splines_rejected():
    with pytest.raises(InvalidSplineError):
        RqsSpline([-1, 0.5, 0.2, 1], [-1, 0, 0.5, 1], [1, 1, 1, 1])
    with pytest.raises(InvalidSplineError):
        RqsSpline([-1, 0, 1], [-1, 0, 1], [1, 0, 1])
    with pytest.raises(InvalidSplineError):
        RqsSpline([-1, 0, 0.9], [-1, 0, 1], [1, 1, 1])
    with pytest.raises(InvalidParameterError):
        rqs_apply(0.0, RqsSpline.identity(3), "sideways")


def test_compose_identity_and_inverse_pair(rng):
    x = rng.normal(size=20)
    y, ld = compose([Identity(), Identity()]).forward(x)
    assert_array_equal(y, x)
    assert_array_equal(ld, 0.0)
    y, ld = compose([affine_bijector(2.0, 0.0), affine_bijector(0.5, 0.0)]).forward(x)
    assert_allclose(y, x)
    assert_allclose(ld, 0.0, atol=1e-15)


def test_compose_logdet_is_sum_of_parts(rng):
    x = rng.normal(size=50)
    tanh, aff = tanh_bijector(), affine_bijector(3.0, -1.0)
    y1, ld1 = tanh.forward(x)
    y2, ld2 = aff.forward(y1)
    y, ld = compose([tanh, aff]).forward(x)
    assert_allclose(y, y2)
    assert_allclose(ld, ld1 + ld2)
    back, ld_inv = compose([tanh, aff]).inverse(y)
    assert_allclose(back, x, rtol=1e-9)
    assert_allclose(ld_inv, -ld, rtol=1e-9)


def test_compose_checks_domains():
    bounded = RqsSpline.from_raw(identity_raw(4), 4, bounded=True)
    compose([tanh_bijector(), bounded])
    with pytest.raises(CompositionError):
        compose([affine_bijector(2.0, 0.0), bounded])
    with pytest.raises(CompositionError):
        Compose([])


def test_simple_bijectors():
    y, ld = tanh_bijector().forward(np.array([0.0]))
    assert_array_equal(y, [0.0])
    assert_array_equal(ld, [0.0])
    y, ld = affine_bijector(2.0, 1.0).forward(np.array([3.0]))
    assert_array_equal(y, [7.0])
    assert_allclose(ld, [math.log(2.0)])
    assert Affine(-2.0, 1.0, Interval(0.0, 1.0)).codomain == Interval(-1.0, 1.0)
    with pytest.raises(InvalidParameterError):
        affine_bijector(0.0, 1.0)


def test_tanh_logdet_matches_derivative(rng):
    x = rng.normal(scale=3.0, size=40)
    _, ld = tanh_bijector().forward(x)
    assert_allclose(ld, np.log1p(-np.tanh(x) ** 2), rtol=1e-8)


@given(st.permutations(list(range(6))), arrays(np.float64, (3, 6), elements=st.floats(-1e6, 1e6)))
def test_permutation_round_trip(perm, x):
    p = permutation_bijector(perm)
    y, ld = p.forward(x)
    assert_array_equal(p.inverse(y)[0], x)
    assert_array_equal(ld, 0.0)


def test_permutation_rejects_non_permutation():
    with pytest.raises(InvalidParameterError):
        permutation_bijector([0, 0, 2])
