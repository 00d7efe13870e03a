"""Update-rule contracts."""

import numpy as np
import pytest

from terragan import tensor as T
from terragan.errors import ContractError
from terragan.optim import Adam, Parameter, Sgd, optimizer_step


def test_sgd_pinned_value():
    w = Parameter(T.tensor([1.0]))
    w.tensor.grad = np.array([0.5], dtype=np.float32)
    optimizer_step([w], Sgd(lr=0.1))
    assert w.data[0] == pytest.approx(0.95)
    assert w.grad is None  # cleared after the step


def test_sgd_zero_gradient_no_move():
    w = Parameter(T.tensor([2.5]))
    w.tensor.grad = np.zeros(1, dtype=np.float32)
    optimizer_step([w], Sgd(lr=0.1))
    assert w.data[0] == 2.5


def test_missing_grad_rejected():
    w = Parameter(T.tensor([1.0]))
    with pytest.raises(ContractError):
        optimizer_step([w], Sgd(lr=0.1))


def test_adam_first_step_magnitude():
    # first-step update formula: lr * m_hat / (sqrt(v_hat) + eps) = lr * sign(g)
    for g in (0.001, 0.5, 40.0):
        w = Parameter(T.tensor([0.0]))
        w.tensor.grad = np.array([g], dtype=np.float32)
        rule = Adam(lr=2e-4)
        optimizer_step([w], rule)
        assert abs(w.data[0]) == pytest.approx(rule.lr, rel=1e-3)
        assert w.data[0] < 0  # moves against the gradient


def test_adam_state_matches_direct_formula():
    rule = Adam(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    w = Parameter(T.tensor([1.0], dtype=np.float64))
    grads = [0.3, -0.2, 0.7]
    # direct evaluation of the moment recurrences
    m = v = 0.0
    x = 1.0
    for t, g in enumerate(grads, start=1):
        m = rule.beta1 * m + (1 - rule.beta1) * g
        v = rule.beta2 * v + (1 - rule.beta2) * g * g
        x -= rule.lr * (m / (1 - rule.beta1 ** t)) / (
            np.sqrt(v / (1 - rule.beta2 ** t)) + rule.eps)
    for g in grads:
        w.tensor.grad = np.array([g], dtype=np.float64)
        optimizer_step([w], rule)
    assert w.data[0] == pytest.approx(x, rel=1e-10)


def test_step_descends_quadratic():
    target = 3.0
    w = Parameter(T.tensor([0.0]))
    rule = Adam(lr=0.05)
    for _ in range(400):
        diff = w.tensor - target
        loss = T.reduce_mean(diff * diff)
        loss.backward()
        optimizer_step([w], rule)
    assert w.data[0] == pytest.approx(target, abs=1e-2)
