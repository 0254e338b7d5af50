import math

import numpy as np
import pytest

from rcfusion import Tensor
from rcfusion.optim import (
    MaxNormConfig,
    Rmsprop,
    max_norm_constraint,
    multi_start_init,
    rmsprop_init,
    rmsprop_step,
    sgd_step,
)
from rcfusion import rcft


def t64(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# SGD

def test_sgd_zero_grad_no_change():
    p = t64([1.0, -2.0])
    sgd_step(p, t64([0.0, 0.0]), 0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_sgd_direct_substitution():
    p = t64([1.0])
    sgd_step(p, t64([2.0]), 0.1)
    assert abs(p.data[0] - 0.8) < 1e-12


def test_sgd_quadratic_convergence():
    # f(w) = w^2, grad = 2w, lr = 0.1 gives w_k = 0.8^k
    p = t64([1.0])
    values = []
    for k in range(10):
        values.append(float(p.data[0]))
        sgd_step(p, t64([2.0 * p.data[0]]), 0.1)
    assert all(b < a for a, b in zip(values, values[1:] + [float(p.data[0])]))
    assert abs(float(p.data[0]) - 0.8**10) < 1e-12


def test_sgd_descends_convex_quadratic():
    rng = np.random.default_rng(0)
    curvature = 3.0
    p = t64(rng.standard_normal(4))
    lr = 0.3 / curvature  # below 2/curvature
    prev = float(np.sum(curvature * p.data**2))
    for _ in range(20):
        sgd_step(p, t64(2.0 * curvature * p.data), lr)
        cur = float(np.sum(curvature * p.data**2))
        assert cur < prev
        prev = cur


def test_sgd_shape_mismatch():
    with pytest.raises(Exception):
        sgd_step(t64([1.0, 2.0]), t64([1.0]), 0.1)


# ---------------------------------------------------------------------------
# RMSprop

def test_rmsprop_no_signal_no_motion():
    p = t64([0.5, -0.5])
    st = rmsprop_init(p, weight_decay=0.0)
    for _ in range(5):
        rmsprop_step(st, p, t64([0.0, 0.0]))
    assert np.array_equal(p.data, [0.5, -0.5])


def test_rmsprop_single_step_hand_value():
    p = t64([0.0])
    st = rmsprop_init(p, learning_rate=1e-3, alpha=0.9, momentum=0.0, weight_decay=0.0)
    rmsprop_step(st, p, t64([1.0]))
    assert abs(st.square_avg.data[0] - 0.1) < 1e-12
    expected = -1e-3 / (math.sqrt(0.1) + 1e-8)
    assert abs(p.data[0] - expected) < 1e-9
    assert abs(p.data[0] + 3.1623e-3) < 1e-6


def scalar_rmsprop_reference(p0, grads, lr, alpha, momentum, wd, eps):
    """Independent scalar reference, plain python floats."""
    p, v, m = p0, 0.0, 0.0
    for grad in grads:
        g = grad + wd * p
        v = alpha * v + (1 - alpha) * g * g
        m = momentum * m + g / (math.sqrt(v) + eps)
        p = p - lr * m
    return p


def test_rmsprop_matches_scalar_reference():
    lr, alpha, momentum, wd, eps = 1e-2, 0.9, 0.9, 2e-4, 1e-8
    p = t64([0.3])
    st = rmsprop_init(p, lr, alpha, momentum, wd, eps)
    grads = [0.7, -1.3]
    for g in grads:
        rmsprop_step(st, p, t64([g]))
    expected = scalar_rmsprop_reference(0.3, grads, lr, alpha, momentum, wd, eps)
    assert abs(p.data[0] - expected) < 1e-12


def test_rmsprop_weight_decay_pulls_toward_zero():
    p = t64([2.0])
    st = rmsprop_init(p, learning_rate=1e-2, weight_decay=1e-1)
    for _ in range(50):
        rmsprop_step(st, p, t64([0.0]))
    assert abs(p.data[0]) < 2.0


# ---------------------------------------------------------------------------
# max norm

def test_max_norm_inside_ball_unchanged():
    p = t64([2.0, 0.0])
    max_norm_constraint(p, MaxNormConfig(4.0))
    assert np.array_equal(p.data, [2.0, 0.0])


def test_max_norm_boundary_projection():
    p = t64([8.0, 0.0])
    max_norm_constraint(p, MaxNormConfig(4.0))
    assert np.max(np.abs(p.data - [4.0, 0.0])) < 1e-12


def test_max_norm_postcondition_random():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = t64(rng.standard_normal(10) * 10)
        max_norm_constraint(p, MaxNormConfig(4.0))
        assert float(np.linalg.norm(p.data)) <= 4.0 + 1e-6


def test_max_norm_idempotent():
    rng = np.random.default_rng(2)
    p = t64(rng.standard_normal(6) * 10)
    max_norm_constraint(p, MaxNormConfig(4.0))
    once = p.data.copy()
    max_norm_constraint(p, MaxNormConfig(4.0))
    assert np.array_equal(p.data, once)


def test_max_norm_config_validation():
    with pytest.raises(ValueError):
        MaxNormConfig(0.0)


# ---------------------------------------------------------------------------
# multi-start

class FakeCandidate:
    def __init__(self, seed):
        self.seed = seed
        self.trained = False


def test_multi_start_single_candidate():
    got = multi_start_init(FakeCandidate, 1, lambda c: None, lambda c: 0.0, base_seed=5)
    assert got.seed == 5


def test_multi_start_rigged_score():
    got = multi_start_init(
        FakeCandidate, 4,
        lambda c: setattr(c, "trained", True),
        lambda c: 1.0 if c.seed == 2 else 0.0,
        base_seed=0,
    )
    assert got.seed == 2
    assert got.trained


def test_multi_start_tie_breaks_lowest_seed():
    got = multi_start_init(FakeCandidate, 3, lambda c: None, lambda c: 0.5, base_seed=10)
    assert got.seed == 10


def test_multi_start_deterministic():
    def scorer(c):
        return math.sin(c.seed * 12.9898)  # fixed pseudo-random score per seed

    winners = {multi_start_init(FakeCandidate, 5, lambda c: None, scorer).seed for _ in range(3)}
    assert len(winners) == 1


def test_multi_start_validates_count():
    with pytest.raises(ValueError):
        multi_start_init(FakeCandidate, 0, lambda c: None, lambda c: 0.0)


# ---------------------------------------------------------------------------
# optimizer state persistence

def test_rmsprop_state_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    params = [("w", t64(rng.standard_normal((3, 2)))), ("b", t64(rng.standard_normal(2)))]
    opt = Rmsprop(params, learning_rate=1e-2)
    for _ in range(3):
        for _, p in params:
            p.grad = Tensor(rng.standard_normal(p.shape))
        opt.step()
    path = tmp_path / "opt.ckpt"
    rcft.save_checkpoint(path, opt.state_tensors())

    opt2 = Rmsprop(params, learning_rate=1e-2)
    opt2.load_state_tensors(rcft.load_checkpoint(path))
    for (_, a), (_, b) in zip(opt.state_tensors(), opt2.state_tensors()):
        assert a.data.tobytes() == b.data.tobytes()
