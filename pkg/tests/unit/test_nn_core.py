# tests/unit/test_nn_core.py
import numpy as np
import pytest

from services.nn_core import (
    Batch,
    apply_running_stats,
    backward,
    forward,
    forward_with_tape,
    grad,
    value_and_grad,
)
from services.nn_losses import loss_ce_and_grad
from services.nn_params import ParameterVector, init_params, params_from_bytes, params_to_bytes
from services.nn_spec import (
    ModelSpec,
    affine,
    bn,
    build_classifier_spec,
    build_generator_spec,
    conv,
    flatten,
    relu,
    reshape,
    tanh,
    upsample,
)
from tests._helpers.gradcheck import numeric_input_grad, numeric_param_grad, rel_error
from utils.exceptions import DataError, NumericError, ShapeError


def _ce(labels):
    return lambda out, batch: loss_ce_and_grad(out, labels)


def _ce_scalar(labels):
    return lambda out: loss_ce_and_grad(out, labels)[0]


# ---- forward examples ----

def test_zero_weight_affine_gives_zero_logits():
    spec = ModelSpec((affine(3),), (4,), 3)
    params = ParameterVector(np.zeros(15), init_params(spec, np.random.default_rng(0)).layout)
    out = forward(spec, params, np.random.default_rng(1).normal(size=(5, 4)), "eval")
    assert np.array_equal(out, np.zeros((5, 3)))


def test_identity_affine_returns_input():
    spec = ModelSpec((affine(3),), (3,), 3)
    params = init_params(spec, np.random.default_rng(0))
    params.view(0, "W")[...] = np.eye(3)
    params.view(0, "b")[...] = 0.0
    v = np.array([[0.5, -2.0, 3.0]])
    assert np.array_equal(forward(spec, params, v, "eval"), v)


def test_two_layer_affine_matches_hand_chain():
    spec = ModelSpec((affine(2), affine(2)), (2,), 2)
    params = init_params(spec, np.random.default_rng(0))
    params.view(0, "W")[...] = [[1.0, 2.0], [0.0, -1.0]]
    params.view(0, "b")[...] = [0.5, 0.0]
    params.view(1, "W")[...] = [[1.0, 1.0], [2.0, 0.0]]
    params.view(1, "b")[...] = [0.0, -1.0]
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    # hidden = [[1.5, 0], [2.5, -1], [3.5, -1]]
    expected = np.array([[1.5, 2.0], [1.5, 4.0], [2.5, 6.0]])
    assert np.allclose(forward(spec, params, x, "eval"), expected)


def test_shape_mismatch_rejected_before_compute():
    spec = ModelSpec((affine(2),), (3,), 2)
    params = init_params(spec, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(spec, params, np.zeros((2, 4)), "eval")
    with pytest.raises(ShapeError):
        Batch(np.zeros((2, 3)), labels=np.array([0, 1, 1]))


def test_incompatible_layers_rejected_at_spec_time():
    with pytest.raises(ShapeError):
        ModelSpec((conv(4, 3),), (8,), 4)
    with pytest.raises(ShapeError):
        ModelSpec((affine(4),), (3,), 5)


def test_forward_is_deterministic():
    spec = build_classifier_spec((1, 8, 8), 4, width=2)
    params = init_params(spec, np.random.default_rng(3))
    x = np.random.default_rng(4).uniform(size=(6, 1, 8, 8))
    a = forward(spec, params, x, "train")
    b = forward(spec, params, x, "train")
    assert a.tobytes() == b.tobytes()


# ---- batch norm bookkeeping ----

def test_bn_batch_stats_equal_preactivation_moments():
    spec = ModelSpec((affine(3), bn(), affine(2)), (4,), 2)
    params = init_params(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(7, 4))
    _, tape = forward_with_tape(spec, params, x, "train")
    pre = x @ params.view(0, "W").T + params.view(0, "b")
    mu, var = tape.bn_batch[1]
    assert np.allclose(mu, pre.mean(axis=0), atol=1e-12)
    assert np.allclose(var, ((pre - pre.mean(axis=0)) ** 2).mean(axis=0), atol=1e-12)


def test_running_stats_update_is_ema_and_params_untouched():
    spec = ModelSpec((affine(3), bn(momentum=0.1)), (2,), 3)
    params = init_params(spec, np.random.default_rng(0))
    before = params.copy()
    x = np.random.default_rng(1).normal(size=(5, 2))
    _, tape = forward_with_tape(spec, params, x, "train")
    assert np.array_equal(params.bn_stats[1][0], before.bn_stats[1][0])
    updated = apply_running_stats(params, tape)
    mu, var = tape.bn_batch[1]
    assert np.allclose(updated.bn_stats[1][0], 0.1 * mu)
    assert np.allclose(updated.bn_stats[1][1], 0.9 + 0.1 * var)
    assert np.all(updated.bn_stats[1][1] >= 0)


def test_eval_mode_uses_running_stats():
    spec = ModelSpec((bn(),), (2,), 2)
    params = init_params(spec, np.random.default_rng(0))
    params.bn_stats[0] = (np.array([1.0, -1.0]), np.array([4.0, 1.0]))
    x = np.array([[3.0, 0.0]])
    out = forward(spec, params, x, "eval")
    assert np.allclose(out, [[2.0 / np.sqrt(4.0 + 1e-5), 1.0 / np.sqrt(1.0 + 1e-5)]])


# ---- gradients ----

def test_linear_softmax_gradient_closed_form():
    spec = ModelSpec((affine(3),), (2,), 3)
    params = init_params(spec, np.random.default_rng(0))
    x = np.array([[0.3, -1.2]])
    y = np.array([2])
    g, dx = grad(spec, params, _ce(y), Batch(x, y), "eval")
    logits = x @ params.view(0, "W").T + params.view(0, "b")
    p = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    delta = (p - np.eye(3)[2])[0]
    assert np.allclose(g.view(0, "W"), np.outer(delta, x[0]))
    assert np.allclose(g.view(0, "b"), delta)
    assert np.allclose(dx[0], delta @ params.view(0, "W"))


def test_bias_before_train_mode_bn_has_zero_gradient():
    spec = ModelSpec((affine(3), bn(), affine(2)), (4,), 2)
    params = init_params(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 4))
    y = np.array([0, 1, 0, 1, 1, 0])
    g, _ = grad(spec, params, _ce(y), Batch(x, y), "train")
    assert np.allclose(g.view(0, "b"), 0.0, atol=1e-10)
    assert np.abs(g.view(0, "W")).sum() > 0


def _smooth_specs():
    return {
        "affine": (ModelSpec((affine(4), affine(3)), (3,), 3), (3,)),
        "conv": (ModelSpec((conv(2, 3, 2, 1), flatten(), affine(3)), (1, 5, 5), 3), (1, 5, 5)),
        "bn_features": (ModelSpec((affine(4), bn(), tanh(), affine(3)), (3,), 3), (3,)),
        "bn_spatial": (ModelSpec((conv(2, 3, 1, 1), bn(), flatten(), affine(3)), (1, 4, 4), 3), (1, 4, 4)),
        "upsample_reshape": (
            ModelSpec((affine(8), reshape((2, 2, 2)), upsample(2), conv(1, 3, 1, 1), flatten(), affine(3)), (3,), 3),
            (3,),
        ),
        "tanh_range": (ModelSpec((affine(4), tanh(0.0, 1.0), affine(3)), (3,), 3), (3,)),
    }


@pytest.mark.parametrize("name", sorted(_smooth_specs()))
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_gradients_match_central_differences(name, mode):
    spec, in_shape = _smooth_specs()[name]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = init_params(spec, rng)
        for layer, (m, v) in list(params.bn_stats.items()):
            params.bn_stats[layer] = (rng.normal(size=m.shape) * 0.1, rng.uniform(0.5, 1.5, size=v.shape))
        x = rng.normal(size=(4,) + in_shape)
        y = rng.integers(0, 3, size=4)
        res = value_and_grad(spec, params, _ce(y), Batch(x, y), mode)
        num = numeric_param_grad(spec, params, _ce_scalar(y), Batch(x, y), mode)
        assert rel_error(res.grad.values, num) < 1e-4, (name, mode, seed)
        num_x = numeric_input_grad(spec, params, _ce_scalar(y), x, mode)
        assert rel_error(res.dx, num_x) < 1e-4, (name, mode, seed)


def test_relu_gradient_matches_central_differences_away_from_kinks():
    spec = ModelSpec((affine(5), relu(), affine(3)), (3,), 3)
    checked = 0
    seed = 0
    while checked < 20:
        rng = np.random.default_rng(1000 + seed)
        seed += 1
        params = init_params(spec, rng)
        x = rng.normal(size=(4, 3))
        pre = x @ params.view(0, "W").T + params.view(0, "b")
        if np.abs(pre).min() < 0.05:
            continue
        y = rng.integers(0, 3, size=4)
        g, _ = grad(spec, params, _ce(y), Batch(x, y), "eval")
        num = numeric_param_grad(spec, params, _ce_scalar(y), Batch(x, y), "eval")
        assert rel_error(g.values, num) < 1e-4
        checked += 1


def test_bn_input_gradient_injection_adds_to_preactivation_grad():
    spec = ModelSpec((affine(3), bn()), (2,), 3)
    params = init_params(spec, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 2))
    _, tape = forward_with_tape(spec, params, x, "eval")
    extra = np.ones((4, 3))
    _, dx_plain = backward(spec, params, tape, np.zeros((4, 3)))
    _, dx_inj = backward(spec, params, tape, np.zeros((4, 3)), bn_input_grads={1: extra}, input_only=True)
    assert np.allclose(dx_plain, 0.0)
    assert np.allclose(dx_inj, extra @ params.view(0, "W"))


def test_non_finite_activation_reports_layer():
    spec = ModelSpec((affine(2), affine(2)), (2,), 2)
    params = init_params(spec, np.random.default_rng(0))
    params.view(1, "W")[...] = np.inf
    with pytest.raises(NumericError) as ei:
        forward(spec, params, np.ones((1, 2)), "eval")
    assert ei.value.layer == 1


# ---- builders + serialization ----

def test_builders_produce_expected_shapes():
    clf = build_classifier_spec((1, 16, 16), 8, width=8)
    assert clf.output_shape == (8,) and clf.bn_layers() == [1, 4]
    gen = build_generator_spec(64, (1, 16, 16), low=0.0, high=1.0)
    assert gen.output_shape == (1, 16, 16)
    with pytest.raises(ShapeError):
        build_generator_spec(64, (1, 10, 10))


def test_params_bytes_header_and_values():
    spec = build_classifier_spec((1, 8, 8), 4, width=2)
    params = init_params(spec, np.random.default_rng(0))
    blob = params_to_bytes(params)
    assert blob[:4] == b"FCPV"
    back = params_from_bytes(blob)
    assert back.compatible(params)
    assert np.allclose(back.values, params.values, atol=1e-6)
    assert set(back.bn_stats) == set(params.bn_stats)
    with pytest.raises(DataError):
        params_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DataError):
        params_from_bytes(blob[:-3])
