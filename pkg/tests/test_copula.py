import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest
from scipy import stats

from frugalflows.copula import (
    CopulaFlow,
    copula_log_density,
    copula_sample,
    default_orders,
    fit_copula_flow,
    frugal_copula,
)
from frugalflows.errors import DimensionError, DomainError
from frugalflows.training import TrainConfig

from conftest import central_difference


def randomised(flow, rng, scale=0.3):
    for p in flow.parameters():
        p.value = rng.normal(scale=scale, size=p.shape)
    return flow


@pytest.fixture
def random_flow(rng):
    return randomised(CopulaFlow(3, layers=2, knots=6, width=8, depth=2, seed=1), rng)


def test_identity_initialisation(rng):
    flow = CopulaFlow(4, layers=3, knots=5, width=10, depth=2)
    v = rng.random((50, 4))
    assert_allclose(copula_log_density(flow, v), 0.0, atol=1e-12)
    assert_allclose(flow.sample(v), v, atol=1e-12)


def test_sample_inverts_to_base(random_flow, rng):
    u = rng.uniform(0.01, 0.99, size=(200, 3))
    v = random_flow.sample(u)
    assert_allclose(random_flow.to_base(v), u, atol=1e-8)


def test_log_density_is_log_jacobian(random_flow, rng):
    for v0 in rng.uniform(0.1, 0.9, size=(4, 3)):
        jac = np.column_stack([
            central_difference(lambda x, i=i: random_flow.to_base(x[None, :])[0, i], v0)
            for i in range(3)
        ])
        expected = np.log(abs(np.linalg.det(jac)))
        assert_allclose(random_flow.log_density(v0[None, :])[0], expected, atol=1e-6)


def test_autoregressive_structure(rng):
    flow = randomised(CopulaFlow(3, layers=1, knots=6, width=8, depth=2), rng)
    order = flow.orders[0]
    v = rng.random((30, 3))
    w = v.copy()
    w[:, order[1:]] = rng.random((30, 2))
    assert_allclose(flow.to_base(w)[:, order[0]], flow.to_base(v)[:, order[0]], atol=1e-12)
    w = v.copy()
    w[:, order[2]] = rng.random(30)
    assert_allclose(flow.to_base(w)[:, order[:2]], flow.to_base(v)[:, order[:2]], atol=1e-12)


def test_two_dim_density_integrates_to_one(rng):
    flow = randomised(CopulaFlow(2, layers=2, knots=8, width=8, depth=2), rng, scale=0.5)
    k = 200
    grid = (np.arange(k) + 0.5) / k
    vv = np.stack(np.meshgrid(grid, grid, indexing="ij"), axis=-1).reshape(-1, 2)
    total = np.exp(flow.log_density(vv)).mean()
    assert abs(total - 1.0) < 1e-2


def test_fixed_dimension_passes_through(rng):
    flow = randomised(frugal_copula(3, TrainConfig(flow_layers=2, nn_width=8, nn_depth=1), seed=0), rng)
    v1 = rng.random(100)
    out = copula_sample(flow, v1, rng.random((100, 3)))
    assert_array_equal(out[:, 0], v1)
    # the fixed rank contributes no density factor of its own
    v = flow.sample(rng.random((20, 4)))
    assert_allclose(flow.to_base(v)[:, 0], v[:, 0])


def test_orders_only_shuffle_permutable():
    orders = default_orders(5, 4, [1, 2, 3, 4], seed=3)
    assert_array_equal(orders[0], np.arange(5))
    for order in orders:
        assert order[0] == 0
        assert sorted(order) == list(range(5))
    assert_array_equal(default_orders(5, 4, [1, 2, 3, 4], seed=3)[2], orders[2])


def test_state_round_trip(random_flow, rng):
    copy = CopulaFlow.from_state(random_flow.state())
    v = rng.random((10, 3))
    assert_array_equal(copy.log_density(v), random_flow.log_density(v))


def test_rejects_bad_ranks(random_flow):
    with pytest.raises(DomainError):
        random_flow.log_density(np.array([[0.2, 1.0, 0.5]]))
    with pytest.raises(DimensionError):
        random_flow.log_density(np.array([[0.2, 0.5]]))
    with pytest.raises(DimensionError):
        copula_sample(random_flow, np.array([0.5]), np.array([[0.1, 0.2, 0.3]]))


def test_small_fit_learns_positive_dependence():
    rng = np.random.default_rng(7)
    g = rng.multivariate_normal([0, 0], [[1, 0.7], [0.7, 1]], size=3000)
    v = stats.norm.cdf(g)
    cfg = TrainConfig(flow_layers=1, nn_width=32, nn_depth=2, learning_rate=1e-2, patience=100)
    flow = fit_copula_flow(v, cfg, seed=0)
    out = flow.sample(np.random.default_rng(8).random((20_000, 2)))
    rho = stats.spearmanr(out[:, 0], out[:, 1])[0]
    assert abs(rho - 6 / np.pi * np.arcsin(0.35)) < 0.07
    for j in range(2):
        assert stats.kstest(out[:, j], "uniform").statistic < 0.02
