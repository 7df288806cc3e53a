"""
Unit tests for AdamW and the warmup-cosine schedule
"""

import math

import numpy as np
import pytest

from utils.errors import ArgumentError, CheckpointMismatchError
from utils.optim import AdamW, adamw_step, cosine_warmup_lr
from utils.tensor import Parameter


def reference_adam(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook Adam on a scalar, written out step by step"""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def quadratic_run(optimizer, param, steps):
    """Minimize theta^2 for a number of steps; returns the gradients used"""
    grads = []
    for _ in range(steps):
        optimizer.zero_grad()
        param.grad = 2.0 * param.data
        grads.append(float(param.grad[0]))
        optimizer.step()
    return grads


def test_adamw_without_decay_equals_adam():
    """Test five steps with weight_decay=0 against the textbook recursion"""
    param = Parameter(np.array([1.5]), name="theta")
    optimizer = AdamW([("theta", param)], lr=0.1, weight_decay=0.0)
    grads = quadratic_run(optimizer, param, 5)

    assert param.data[0] == pytest.approx(reference_adam(1.5, grads, 0.1), rel=1e-12)
    assert optimizer.step_count == 5


def test_schedule_step_decouples_rate_from_bias_correction():
    """Test an explicit schedule position with a first, bias-corrected update"""
    param = Parameter(np.array([1.0]), name="theta")
    optimizer = AdamW([("theta", param)], lr=1.0, weight_decay=0.0, schedule=lambda t: 0.01 * t)
    param.grad = np.array([0.3])
    assert optimizer.step(schedule_step=4) == pytest.approx(0.04)
    assert optimizer.step_count == 1
    assert param.data[0] == pytest.approx(1.0 - 0.04, abs=1e-9)


def test_first_step_moves_by_learning_rate():
    """Test the bias-corrected first step has magnitude lr"""
    param = np.array([3.0, -2.0])
    adamw_step(param, np.array([0.5, -4.0]), np.zeros(2), np.zeros(2), 1, lr=0.01, weight_decay=0.0)
    assert np.allclose(param, [3.0 - 0.01, -2.0 + 0.01], rtol=0, atol=1e-9)


def test_weight_decay_is_decoupled():
    """Test that a zero gradient still shrinks the parameter by lr * wd"""
    param = np.array([2.0])
    adamw_step(param, np.zeros(1), np.zeros(1), np.zeros(1), 1, lr=0.1, weight_decay=0.5)
    assert param[0] == pytest.approx(2.0 * (1 - 0.05), rel=1e-12)
    with pytest.raises(ArgumentError):
        adamw_step(param, np.zeros(1), np.zeros(1), np.zeros(1), 0, lr=0.1)


def test_step_skips_parameters_without_gradient():
    """Test that frozen parameters keep their values and moments"""
    used = Parameter(np.array([1.0]), name="used")
    frozen = Parameter(np.array([1.0]), name="frozen")
    optimizer = AdamW([("used", used), ("frozen", frozen)], lr=0.1, weight_decay=0.1)
    used.grad = np.array([1.0])
    optimizer.step()
    assert used.data[0] != 1.0
    assert frozen.data[0] == 1.0
    assert optimizer.v["frozen"][0] == 0.0


def test_duplicate_parameter_names_are_rejected():
    """Test the uniqueness check on parameter names"""
    p = Parameter(np.zeros(1), name="p")
    with pytest.raises(ArgumentError):
        AdamW([("p", p), ("p", p)])


def test_schedule_anchor_values():
    """Test zero at start, peak after warmup, half peak mid-decay and zero at the end"""
    peak = 1e-4
    assert cosine_warmup_lr(0, 10, 110, peak) == 0.0
    assert cosine_warmup_lr(5, 10, 110, peak) == pytest.approx(peak / 2)
    assert cosine_warmup_lr(10, 10, 110, peak) == pytest.approx(peak)
    assert cosine_warmup_lr(60, 10, 110, peak) == pytest.approx(peak / 2)
    assert cosine_warmup_lr(110, 10, 110, peak) == pytest.approx(0.0, abs=1e-20)
    assert cosine_warmup_lr(500, 10, 110, peak) == pytest.approx(0.0, abs=1e-20)


def test_schedule_shape_and_continuity():
    """Test the ramp rises, the decay falls and the joint has no jump"""
    values = [cosine_warmup_lr(t, 20, 200, 1.0) for t in range(201)]
    assert all(b >= a for a, b in zip(values[:20], values[1:21]))
    assert all(b <= a for a, b in zip(values[20:], values[21:]))
    assert abs(values[21] - values[20]) < 1e-3
    assert cosine_warmup_lr(3, 0, 10, 1.0) == pytest.approx(0.5 * (1 + math.cos(math.pi * 0.3)))
    with pytest.raises(ArgumentError):
        cosine_warmup_lr(1, 5, 0)


def test_optimizer_uses_schedule():
    """Test that each step reports the scheduled rate of its own counter"""
    param = Parameter(np.array([1.0]), name="theta")
    optimizer = AdamW([("theta", param)], schedule=lambda t: cosine_warmup_lr(t, 2, 10, 1e-3))
    param.grad = np.array([1.0])
    assert optimizer.step() == pytest.approx(5e-4)
    assert optimizer.step() == pytest.approx(1e-3)


def test_state_round_trip_resumes_identically():
    """Test that restored moments and counter continue the exact trajectory"""
    straight = Parameter(np.array([1.5, -0.5]), name="w")
    reference = AdamW([("w", straight)], lr=0.05)
    quadratic_run(reference, straight, 6)

    first = Parameter(np.array([1.5, -0.5]), name="w")
    optimizer = AdamW([("w", first)], lr=0.05)
    quadratic_run(optimizer, first, 3)
    state = {key: np.array(value) for key, value in optimizer.state_dict().items()}
    assert set(state) == {"optim.step", "optim.m.w", "optim.v.w"}

    resumed_param = Parameter(first.data.copy(), name="w")
    resumed = AdamW([("w", resumed_param)], lr=0.05)
    resumed.load_state_dict(state)
    assert resumed.step_count == 3
    quadratic_run(resumed, resumed_param, 3)
    assert np.array_equal(resumed_param.data, straight.data)


def test_load_state_errors():
    """Test missing optimizer state and missing moments"""
    param = Parameter(np.zeros(2), name="w")
    optimizer = AdamW([("w", param)])
    with pytest.raises(ArgumentError):
        optimizer.load_state_dict({})
    with pytest.raises(CheckpointMismatchError) as info:
        optimizer.load_state_dict({"optim.step": np.array([1.0]), "optim.m.w": np.zeros(2)})
    assert info.value.missing == ["optim.v.w"]
