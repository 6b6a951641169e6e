# tests/unit/test_nn_losses_optim.py
import math

import numpy as np
import pytest

from services.nn_losses import kl_rows, loss_ce, loss_ce_and_grad, loss_kl, loss_kl_and_grad
from services.nn_optim import AdamState, SGDState, adam_step, sgd_step
from services.nn_params import ParameterVector, init_params
from services.nn_spec import ModelSpec, affine
from utils.exceptions import NumericError, ShapeError


# ---- cross-entropy ----

def test_ce_saturated_correct_class_goes_to_zero():
    assert loss_ce(np.array([[60.0, 0.0, 0.0]]), np.array([0])) < 1e-20


def test_ce_uniform_logits_is_log_k():
    assert loss_ce(np.zeros((3, 5)), np.array([0, 2, 4])) == pytest.approx(math.log(5))


def test_ce_fixed_case_matches_scalar_arithmetic():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    labels = np.array([0, 2])

    def nll(row, k):
        z = sum(math.exp(v) for v in row)
        return -math.log(math.exp(row[k]) / z)

    expected = (nll([1.0, 2.0, 0.5], 0) + nll([0.0, -1.0, 3.0], 2)) / 2
    assert loss_ce(logits, labels) == pytest.approx(expected, abs=1e-12)


def test_ce_label_out_of_range_rejected():
    with pytest.raises(ValueError):
        loss_ce(np.zeros((1, 3)), np.array([3]))


def test_ce_and_kl_are_shift_invariant():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 6))
    shift = rng.normal(size=(4, 1)) * 10
    y = np.array([0, 5, 2, 3])
    assert abs(loss_ce(logits, y) - loss_ce(logits + shift, y)) < 1e-9
    s = rng.normal(size=(4, 6))
    assert abs(loss_kl(logits, s) - loss_kl(logits + shift, s - shift)) < 1e-9


def test_ce_gradient_is_softmax_minus_onehot_over_n():
    logits = np.array([[0.0, 0.0], [1.0, -1.0]])
    _, g = loss_ce_and_grad(logits, np.array([1, 0]))
    p1 = 1 / (1 + math.exp(-2.0))
    assert np.allclose(g, np.array([[0.5, -0.5], [p1 - 1, 1 - p1]]) / 2)


# ---- KL ----

def test_kl_identical_is_zero():
    t = np.random.default_rng(1).normal(size=(3, 4))
    assert loss_kl(t, t) == 0.0


def test_kl_uniform_teacher_and_shifted_uniform_student_is_zero():
    assert loss_kl(np.zeros((2, 3)), np.full((2, 3), 7.5)) == pytest.approx(0.0, abs=1e-12)


def test_kl_fixed_pair_matches_sum():
    t = np.array([[1.0, 0.0, -1.0]])
    s = np.array([[0.0, 0.5, 0.0]])
    p = np.exp(t[0]) / np.exp(t[0]).sum()
    q = np.exp(s[0]) / np.exp(s[0]).sum()
    expected = float(sum(pi * math.log(pi / qi) for pi, qi in zip(p, q)))
    assert loss_kl(t, s) == pytest.approx(expected, abs=1e-12)
    assert kl_rows(t, s)[0] == pytest.approx(expected, abs=1e-12)


def test_kl_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        loss_kl(np.zeros((2, 3)), np.zeros((2, 4)))


def test_kl_gradients_match_central_differences():
    rng = np.random.default_rng(2)
    t, s = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, d_s, d_t = loss_kl_and_grad(t, s)
    eps = 1e-6
    num_s, num_t = np.zeros_like(s), np.zeros_like(t)
    for idx in np.ndindex(*s.shape):
        sp, sm = s.copy(), s.copy()
        sp[idx] += eps
        sm[idx] -= eps
        num_s[idx] = (loss_kl(t, sp) - loss_kl(t, sm)) / (2 * eps)
        tp, tm = t.copy(), t.copy()
        tp[idx] += eps
        tm[idx] -= eps
        num_t[idx] = (loss_kl(tp, s) - loss_kl(tm, s)) / (2 * eps)
    assert np.allclose(d_s, num_s, atol=1e-7)
    assert np.allclose(d_t, num_t, atol=1e-7)


# ---- SGD ----

def _scalar_params(theta):
    spec = ModelSpec((affine(1),), (1,), 1)
    layout = init_params(spec, np.random.default_rng(0)).layout
    return ParameterVector(np.array([theta, theta]), layout, {})


def test_sgd_zero_gradient_is_fixed_point():
    p = _scalar_params(1.5)
    out, _ = sgd_step(p, p.zeros_like(), lr=0.1, momentum=0.9, weight_decay=0.0)
    assert np.array_equal(out.values, p.values)


def test_sgd_vanilla_step():
    p = _scalar_params(2.0)
    g = p.with_values(np.array([0.5, -1.0]))
    out, _ = sgd_step(p, g, lr=0.1)
    assert np.allclose(out.values, [2.0 - 0.05, 2.0 + 0.1])


def test_sgd_momentum_two_steps_on_quadratic():
    # f(theta) = theta^2 / 2, gradient = theta
    p = _scalar_params(1.0)
    state = SGDState()
    p, state = sgd_step(p, p.with_values(p.values), lr=0.1, momentum=0.9, state=state)
    assert np.allclose(p.values, 0.9)
    p, state = sgd_step(p, p.with_values(p.values), lr=0.1, momentum=0.9, state=state)
    # v2 = 0.9 * 1.0 + 0.9 = 1.81 ; theta2 = 0.9 - 0.181
    assert np.allclose(p.values, 0.719)


def test_sgd_keeps_bn_stats_and_rejects_non_finite():
    spec = ModelSpec((affine(2),), (2,), 2)
    p = init_params(spec, np.random.default_rng(0))
    p.bn_stats[99] = (np.array([1.0]), np.array([2.0]))
    out, _ = sgd_step(p, p.with_values(np.ones_like(p.values)), lr=0.1, weight_decay=5e-4)
    assert np.array_equal(out.bn_stats[99][1], [2.0])
    bad = p.with_values(np.full_like(p.values, np.nan))
    with pytest.raises(NumericError):
        sgd_step(p, bad, lr=0.1)


# ---- Adam ----

def test_adam_first_step_moves_each_entry_by_lr_whatever_the_scale():
    p = _scalar_params(1.0)
    out, state = adam_step(p, p.with_values(np.array([1e4, -1e-3])), lr=0.01)
    assert np.allclose(out.values, [0.99, 1.01], atol=1e-6)
    assert state.step == 1


def test_adam_two_steps_match_hand_computed_moments():
    p = _scalar_params(0.0)
    g = p.with_values(np.array([1.0, 1.0]))
    p, state = adam_step(p, g, lr=0.1, betas=(0.5, 0.999), eps=0.0, state=AdamState())
    p, state = adam_step(p, p.with_values(np.array([3.0, 3.0])), lr=0.1, betas=(0.5, 0.999), eps=0.0, state=state)
    # m = 0.5 * 0.5 + 0.5 * 3 = 1.75 ; s = 0.999 * 0.001 + 0.001 * 9
    m_hat = 1.75 / (1 - 0.25)
    s_hat = (0.999 * 0.001 + 0.001 * 9.0) / (1 - 0.999 ** 2)
    assert np.allclose(p.values, -0.1 - 0.1 * m_hat / math.sqrt(s_hat))
    assert state.step == 2


def test_adam_rejects_non_finite_and_foreign_layouts():
    p = _scalar_params(1.0)
    with pytest.raises(NumericError):
        adam_step(p, p.with_values(np.array([np.inf, 0.0])), lr=0.1)
    other = init_params(ModelSpec((affine(2),), (2,), 2), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        adam_step(p, other, lr=0.1)
