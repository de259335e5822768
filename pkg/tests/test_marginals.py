import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest
from scipy import integrate, stats
from hypothesis import given, settings, strategies as st

from frugalflows.errors import DegenerateColumnError, DomainError, InsufficientDataError, UnknownLevelError
from frugalflows.marginals import (
    DiscreteMarginal,
    SplineStack,
    StepCdf,
    UnivariateFlow,
    distributional_transform,
    fit_marginal_flow,
    from_ranks,
    inverse_distributional_transform,
    marginal_from_state,
    to_ranks,
)
from frugalflows.training import TrainConfig

BERNOULLI = StepCdf.from_probabilities([0.0, 1.0], [0.5, 0.5])


@pytest.fixture(scope="module")
def gaussian_fit():
    x = np.random.default_rng(1).standard_normal(5000)
    return fit_marginal_flow(x, TrainConfig(), seed=0)


@pytest.fixture(scope="module")
def exponential_fit():
    x = np.random.default_rng(2).exponential(size=5000)
    return fit_marginal_flow(x, TrainConfig(), seed=0)


def test_gaussian_ranks_are_uniform(gaussian_fit):
    held_out = np.random.default_rng(10).standard_normal(5000)
    ks = stats.kstest(to_ranks(gaussian_fit, held_out), "uniform").statistic
    assert ks < 0.03


def test_exponential_ranks_are_uniform(exponential_fit):
    held_out = np.random.default_rng(11).exponential(size=5000)
    ks = stats.kstest(to_ranks(exponential_fit, held_out), "uniform").statistic
    assert ks < 0.03


def test_density_integrates_to_one(exponential_fit):
    grid = np.linspace(-3, 15, 20001)
    total = integrate.trapezoid(np.exp(exponential_fit.log_prob(grid)), grid)
    assert_allclose(total, 1.0, atol=1e-3)


def test_cdf_derivative_is_density(gaussian_fit):
    x = np.linspace(-2.5, 2.5, 41)
    h = 1e-5
    fd = (gaussian_fit.cdf(x + h) - gaussian_fit.cdf(x - h)) / (2 * h)
    assert_allclose(np.exp(gaussian_fit.log_prob(x)), fd, rtol=1e-4)


def test_monotone_and_round_trip(gaussian_fit):
    x = np.sort(np.random.default_rng(3).normal(scale=1.5, size=400))
    u = to_ranks(gaussian_fit, x)
    assert np.all(np.diff(u) >= 0)
    assert_allclose(from_ranks(gaussian_fit, u), x, atol=1e-5)
    assert abs(gaussian_fit.cdf(np.array([0.0]))[0] - 0.5) < 0.03


def test_bijector_matches_cdf(gaussian_fit):
    x = np.linspace(-2, 2, 11)
    u, ld = gaussian_fit.bijector().forward(x)
    assert_allclose(u, gaussian_fit.cdf(x), atol=1e-12)
    assert_allclose(ld, gaussian_fit.log_prob(x), atol=1e-10)


def test_shifted_refit_gives_same_ranks():
    x = np.random.default_rng(4).standard_normal(2000)
    cfg = TrainConfig(max_epochs=400)
    a = fit_marginal_flow(x, cfg, seed=0)
    b = fit_marginal_flow(x + 7.0, cfg, seed=0)
    assert_allclose(to_ranks(b, x + 7.0), to_ranks(a, x), atol=1e-8)


def test_state_round_trip(gaussian_fit):
    copy = marginal_from_state(gaussian_fit.state())
    x = np.linspace(-3, 3, 13)
    assert_array_equal(copy.cdf(x), gaussian_fit.cdf(x))


def test_untrained_flow_is_logistic_in_standard_units():
    flow = UnivariateFlow(0.0, 1.0, SplineStack(2, 8))
    x = np.linspace(-4, 4, 9)
    assert_allclose(flow.cdf(x), 0.5 * (np.tanh(x) + 1.0), atol=1e-12)


@pytest.mark.parametrize("bad, err", [
    (np.ones(100), DegenerateColumnError),
    (np.arange(10.0), InsufficientDataError),
    (np.r_[np.arange(99.0), np.nan], DomainError),
])
def test_fit_rejects_bad_columns(bad, err):
    with pytest.raises(err):
        fit_marginal_flow(bad)


def test_distributional_transform_examples():
    assert_allclose(distributional_transform([0.0], BERNOULLI, v=[0.4]), [0.2])
    assert_allclose(distributional_transform([1.0], BERNOULLI, v=[0.5]), [0.75])
    assert_array_equal(inverse_distributional_transform([0.2, 0.75], BERNOULLI), [0.0, 1.0])


def test_distributional_transform_is_uniform():
    x = (np.random.default_rng(5).random(10_000) < 0.3).astype(float)
    u = distributional_transform(x, StepCdf.from_samples(x), seed=6)
    assert stats.kstest(u, "uniform").pvalue > 0.01


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-3, 6), min_size=1, max_size=60), st.integers(0, 2**16))
def test_discrete_round_trip(values, seed):
    x = np.asarray(values, dtype=float)
    cdf = StepCdf.from_samples(x)
    u = distributional_transform(x, cdf, seed=seed)
    assert np.all((u >= 0) & (u <= 1))
    assert_array_equal(inverse_distributional_transform(u, cdf), x)


def test_discrete_marginal_round_trip_and_unknown_level():
    x = np.array([0.0, 2.0, 2.0, 5.0])
    m = DiscreteMarginal(StepCdf.from_samples(x))
    assert_array_equal(m.from_ranks(m.to_ranks(x)), x)
    assert_array_equal(marginal_from_state(m.state()).cdf.values, m.cdf.values)
    with pytest.raises(UnknownLevelError):
        m.to_ranks(np.array([1.0]))
