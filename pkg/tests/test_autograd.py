"""Finite-difference checks for pidsbench.autograd."""

import numpy as np
import pytest

from pidsbench import autograd as ag
from pidsbench.autograd import Parameter


def numeric_grad(fn, param, eps=1e-6):
    out = np.zeros_like(param.value)
    for idx in np.ndindex(param.value.shape):
        old = param.value[idx]
        param.value[idx] = old + eps
        hi = float(fn().value)
        param.value[idx] = old - eps
        lo = float(fn().value)
        param.value[idx] = old
        out[idx] = (hi - lo) / (2 * eps)
    return out


def check(fn, *params):
    for p in params:
        p.zero_grad()
    ag.backward(fn())
    for p in params:
        assert np.allclose(p.grad, numeric_grad(fn, p), atol=1e-5), p.name


@pytest.fixture
def rng():
    return np.random.default_rng(3)


class TestGradients:
    def test_linear_layer_with_cross_entropy(self, rng):
        x = Parameter("x", rng.normal(size=(4, 3)))
        w = Parameter("w", rng.normal(size=(3, 5)))
        b = Parameter("b", rng.normal(size=5))
        targets = np.array([0, 4, 2, 2])
        check(lambda: ag.mean(ag.softmax_cross_entropy(ag.add_bias(ag.matmul(x, w), b), targets)), x, w, b)

    def test_tanh_and_squared_error(self, rng):
        x = Parameter("x", rng.normal(size=(3, 4)))
        target = rng.normal(size=(3, 4))
        check(lambda: ag.mean(ag.squared_error(ag.tanh(x), target)), x)

    def test_relu_away_from_zero(self):
        x = Parameter("x", np.array([[-1.0, 2.0], [0.5, -0.3]]))
        target = np.zeros((2, 2))
        check(lambda: ag.mean(ag.squared_error(ag.relu(x), target)), x)

    def test_gather_concat_and_aggregate(self, rng):
        h = Parameter("h", rng.normal(size=(4, 2)))
        w = Parameter("w", rng.normal(size=(4, 3)))
        src, dst = np.array([0, 1, 3, 3]), np.array([1, 2, 2, 0])
        targets = np.array([1, 0, 2])

        def fn():
            agg = ag.mean_aggregate(h, src, dst, 4)
            z = ag.concat(ag.gather_rows(h, np.array([0, 2, 2])), ag.gather_rows(agg, np.array([1, 2, 3])))
            return ag.mean(ag.softmax_cross_entropy(ag.matmul(z, w), targets))

        check(fn, h, w)

    def test_shared_node_gradients_accumulate(self):
        x = Parameter("x", np.array([[1.0, 2.0]]))
        two = ag.concat(x, x)
        ag.backward(ag.mean(ag.squared_error(two, np.zeros((1, 4)))))
        assert np.allclose(x.grad, [[1.0, 2.0]])


class TestOps:
    def test_mean_aggregate_values(self):
        x = ag.constant(np.array([[1.0], [3.0], [5.0]]))
        out = ag.mean_aggregate(x, np.array([0, 1, 2]), np.array([2, 2, 0]), 3)
        assert out.value.ravel().tolist() == [5.0, 0.0, 2.0]

    def test_softmax_rows_sum_to_one(self):
        p = ag.softmax(np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]]))
        assert np.allclose(p, [[0.5, 0.5], [0.25, 0.75]])

    def test_cross_entropy_uniform(self):
        loss = ag.softmax_cross_entropy(ag.constant(np.zeros((2, 4))), np.array([0, 3]))
        assert np.allclose(loss.value, np.log(4.0))

    def test_zero_grad(self):
        p = Parameter("p", np.ones(3))
        p.accumulate(np.ones(3))
        p.zero_grad()
        assert not p.grad.any()
