# tests/test_optim.py

import math

import numpy as np
import pytest

from agrg.core.autodiff import Graph, Tensor, gradients, mul, sub, tensor_sum
from agrg.core.nn import parameter
from agrg.core.optim import Adam, AdamW, OptimizerState, adam_step
from agrg.errors import ShapeError


def test_first_step_closed_form():
    # after one step m̂ = g and v̂ = g², so every component moves by lr * g / (|g| + eps)
    p = parameter(np.array([1.0, -2.0, 0.5]))
    grad = np.array([0.3, -4.0, 1e-3])
    state = OptimizerState(lr=0.1)
    adam_step(state, [("p", p)], {"p": grad})
    expected = np.array([1.0, -2.0, 0.5]) - 0.1 * grad / (np.abs(grad) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    assert state.t == 1


def test_zero_learning_rate_keeps_parameters():
    p = parameter(np.array([0.25, 0.75]))
    optimizer = Adam([("p", p)], lr=0.0)
    for _ in range(5):
        p.grad = np.array([1.0, -1.0])
        optimizer.step()
    np.testing.assert_array_equal(p.data, [0.25, 0.75])
    assert optimizer.state.t == 5


def test_adamw_decay_is_decoupled():
    p = parameter(np.array([2.0, -4.0]))
    optimizer = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
    optimizer.step()  # no gradient: only the decay acts
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))


def test_adam_decay_is_coupled():
    p = parameter(np.array([2.0]))
    optimizer = Adam([("p", p)], lr=0.1, weight_decay=0.5)
    optimizer.step()
    # gradient becomes wd * p = 1.0, so the first step moves by ~lr
    assert p.data[0] == pytest.approx(2.0 - 0.1, abs=1e-6)


def test_missing_gradient_counts_as_zero():
    p = parameter(np.array([1.0]))
    optimizer = Adam([("p", p)], lr=0.1)
    optimizer.step()
    np.testing.assert_array_equal(p.data, [1.0])
    assert "p" in optimizer.state.m


def test_gradient_shape_mismatch():
    p = parameter(np.zeros(3))
    with pytest.raises(ShapeError):
        adam_step(OptimizerState(lr=0.1), [("p", p)], {"p": np.zeros(2)})


def test_state_can_be_handed_over():
    p = parameter(np.array([1.0]))
    first = Adam([("p", p)], lr=0.01)
    p.grad = np.array([1.0])
    first.step()
    second = Adam([("p", p)], lr=0.01, state=first.state)
    second.step()
    assert second.state.t == 2


def test_adam_minimizes_quadratic():
    target = np.array([1.5, -0.5, 3.0])
    x = parameter(np.zeros(3))
    optimizer = Adam([("x", x)], lr=0.05)
    for _ in range(2000):
        optimizer.zero_grad()
        with Graph() as graph:
            diff = sub(x, Tensor(target))
            loss = tensor_sum(mul(diff, diff))
        gradients(graph, loss)
        optimizer.step()
    np.testing.assert_allclose(x.data, target, atol=0.05)
    assert math.isfinite(loss.item())
