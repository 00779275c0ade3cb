import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardamage.cnn import PaperCnnConfig, build_paper_cnn
from cardamage.nn import (SGD, BackwardError, Conv, Dense, Dropout, MaxPool, Network, NonFiniteGradient,
                          ReLU, Softmax, TrainConfig, cross_entropy, grad_check, sgd_step, softmax)
from cardamage.synth import as_arrays, synth_dataset
from cardamage.tensor import Prng, ShapeError


def small_net(seed=0, dropout=0.0):
    net = Network((6, 6, 2), [Conv(2, 3, 3), ReLU(), MaxPool(2, 2), Dropout(dropout),
                              Dense(27, 5), ReLU(), Dense(5, 4), Softmax()], seed=seed)
    net.init_params(seed)
    return net


# --- forward ------------------------------------------------------------------

def test_forward_rows_sum_to_one():
    net = small_net()
    p = net.forward(Prng(1).normal((7, 6, 6, 2)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((p > 0) & (p < 1))


def test_zero_final_linear_gives_uniform():
    net = small_net()
    net.layers[6].params["W"][...] = 0.0
    net.layers[6].params["b"][...] = 0.0
    p = net.forward(Prng(1).normal((3, 6, 6, 2)))
    np.testing.assert_allclose(p, 0.25, atol=1e-15)


def test_forward_deterministic():
    x = Prng(2).normal((4, 6, 6, 2))
    a = small_net(seed=5, dropout=0.3).forward(x, "train")
    b = small_net(seed=5, dropout=0.3).forward(x, "train")
    assert a.tobytes() == b.tobytes()


def test_shape_mismatch_reports_layer_index():
    with pytest.raises(ShapeError, match="layer 4"):
        Network((6, 6, 2), [Conv(2, 3, 3), ReLU(), MaxPool(2, 2), Dropout(0.0), Dense(26, 4), Softmax()])
    with pytest.raises(ShapeError, match="layer 0"):
        small_net().forward(np.zeros((1, 5, 6, 2)))


def test_bad_mode():
    with pytest.raises(ValueError):
        small_net().forward(np.zeros((1, 6, 6, 2)), "test")


# --- losses -----------------------------------------------------------------

def test_cross_entropy_examples():
    assert cross_entropy(np.array([[1.0, 0.0]]), [0]) == 0.0
    assert cross_entropy(np.array([[0.5, 0.5]]), [1]) == pytest.approx(math.log(2), abs=1e-12)
    assert round(math.log(2), 6) == 0.693147
    two = cross_entropy(np.array([[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]]), [0, 2])
    assert two == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)
    assert round(two, 6) == 1.039721


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy(np.array([[0.5, 0.5]]), [2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    z = Prng(seed).normal((3, 6)) * 5
    np.testing.assert_allclose(softmax(z + c), softmax(z), atol=1e-9)


# --- backward ---------------------------------------------------------------

def test_combined_softmax_ce_gradient():
    net = Network((3,), [Dense(3, 4), Softmax()])
    net.init_params(0)
    x = Prng(3).normal((5, 3))
    y = np.array([0, 1, 3, 3, 2])
    p = net.forward(x, "train")
    net.backward(p, y)
    onehot = np.eye(4)[y]
    np.testing.assert_allclose(net.layers[0].grads["b"], ((p - onehot) / 5).sum(axis=0), atol=1e-15)
    np.testing.assert_allclose(net.layers[0].grads["W"], x.T @ ((p - onehot) / 5), atol=1e-15)


def test_unused_parameter_gets_zero_gradient():
    net = Network((3,), [Dense(3, 4), ReLU(), Dense(4, 2), Softmax()])
    net.init_params(0)
    # all pre-activations negative: ReLU zeroes every path through the first layer
    net.layers[0].params["W"][...] = 0.0
    net.layers[0].params["b"][...] = -1.0
    p = net.forward(Prng(4).normal((6, 3)), "train")
    grads = net.backward(p, [0, 1, 0, 1, 1, 0])
    assert np.all(grads[(0, "b")] == 0.0) and np.all(grads[(0, "W")] == 0.0)


def test_backward_without_forward_is_error():
    net = small_net()
    with pytest.raises(BackwardError):
        net.backward(np.full((1, 4), 0.25), [0])
    with pytest.raises(BackwardError):
        ReLU().backward(np.zeros(3))


def test_backward_consumes_cache_once():
    net = small_net()
    p = net.forward(np.zeros((1, 6, 6, 2)), "train")
    net.backward(p, [1])
    with pytest.raises(BackwardError):
        net.backward(p, [1])


def test_backward_label_out_of_range():
    net = small_net()
    p = net.forward(np.zeros((1, 6, 6, 2)), "train")
    with pytest.raises(ValueError):
        net.backward(p, [4])


def test_parameter_and_gradient_shapes_match():
    net = small_net()
    net.backward(net.forward(Prng(5).normal((2, 6, 6, 2)), "train"), [0, 3])
    for i, name, p in net.parameters():
        assert net.layers[i].grads[name].shape == p.shape


# --- grad check -------------------------------------------------------------

def test_grad_check_single_fc():
    net = Network((5,), [Dense(5, 3), Softmax()])
    net.init_params(1)
    res = grad_check(net, Prng(6).normal((4, 5)), [0, 2, 1, 2], per_param=None)
    assert res.max_rel_error < 1e-6 and res.kinks == 0 and res.checked == 18


@pytest.mark.parametrize("layers,shape", [
    ([Conv(2, 3, 3), Dense(6 * 6 * 3, 3), Softmax()], (6, 6, 2)),
    ([Conv(2, 3, 3, stride=2, padding="valid"), Dense(2 * 2 * 3, 3), Softmax()], (6, 6, 2)),
    ([MaxPool(2, 2), Dense(3 * 3 * 2, 3), Softmax()], (6, 6, 2)),
    ([Dense(72, 6), ReLU(), Dense(6, 3), Softmax()], (6, 6, 2)),
    ([Dropout(0.5), Dense(72, 3), Softmax()], (6, 6, 2)),
])
def test_grad_check_each_layer_type(layers, shape):
    net = Network(shape, layers)
    net.init_params(2)
    x = Prng(7).normal((3,) + shape)
    res = grad_check(net, x, [0, 1, 2], per_param=None)
    assert res.max_rel_error < 1e-4


def test_grad_check_relu_away_from_kink_has_no_kinks():
    net = Network((4,), [Dense(4, 5), ReLU(), Dense(5, 3), Softmax()])
    net.init_params(3)
    x = Prng(8).normal((6, 4))
    net.layers[0].params["b"][...] = 0.0
    pre = x @ net.layers[0].params["W"]
    # shift inputs so every pre-activation is at least 1e-2 from zero
    net.layers[0].params["b"][...] = np.where(pre.mean(axis=0) >= 0, 1.0, -1.0) * (np.abs(pre).max() + 1e-2)
    res = grad_check(net, x, [0, 1, 2, 0, 1, 2], per_param=None)
    assert res.kinks == 0 and res.max_rel_error < 1e-6


def test_softmax_layer_jvp_matches_finite_difference():
    layer = Softmax()
    z = Prng(9).normal((2, 5))
    g = Prng(10).normal((2, 5))
    layer.forward(z)
    analytic = layer.backward(g)
    h = 1e-6
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = ((softmax(zp) - softmax(zm)) * g).sum() / (2 * h)
    np.testing.assert_allclose(analytic, num, atol=1e-8)


# --- dropout ----------------------------------------------------------------

def test_dropout_eval_is_identity():
    d = Dropout(0.4)
    x = Prng(1).normal((3, 4))
    assert d.forward(x, train=False) is x


@pytest.mark.parametrize("rate", [0.25, 0.5])
def test_dropout_expectation(rate):
    d = Dropout(rate)
    d.rng = Prng(12)
    x = np.ones((40_000, 16))
    out = d.forward(x, train=True)
    assert abs(out.mean() - 1.0) < 0.02
    assert np.all(np.abs(out.mean(axis=0) - 1.0) < 0.02)
    assert set(np.unique(out)) <= {0.0, 1.0 / (1.0 - rate)}


def test_dropout_rate_bounds():
    with pytest.raises(ValueError):
        Dropout(1.0)


# --- SGD --------------------------------------------------------------------

def _one_param_net(w):
    net = Network((1,), [Dense(1, 1)], num_classes=1)
    net.layers[0].params["W"][...] = w
    return net


def test_sgd_zero_lr_is_noop():
    net = small_net()
    before = [p.copy() for _, _, p in net.parameters()]
    net.backward(net.forward(Prng(1).normal((2, 6, 6, 2)), "train"), [0, 1])
    SGD(0.0, 0.9).step(net)
    for b, (_, _, p) in zip(before, net.parameters()):
        assert np.array_equal(b, p)


def test_sgd_one_step_arithmetic():
    net = _one_param_net(1.0)
    grads = {(0, "W"): np.array([[0.5]]), (0, "b"): np.array([0.0])}
    sgd_step(net, grads, TrainConfig(lr=0.1, momentum=0.0), {})
    assert net.layers[0].params["W"][0, 0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_two_steps_hand_unrolled():
    net = _one_param_net(1.0)
    opt = SGD(0.1, 0.9)
    g1, g2 = 0.5, -0.2
    for g in (g1, g2):
        opt.step(net, {(0, "W"): np.array([[g]]), (0, "b"): np.array([0.0])})
    v1 = -0.1 * g1
    v2 = 0.9 * v1 - 0.1 * g2
    assert net.layers[0].params["W"][0, 0] == pytest.approx(1.0 + v1 + v2, abs=1e-15)


def test_sgd_non_finite_gradient_names_layer():
    net = _one_param_net(1.0)
    with pytest.raises(NonFiniteGradient, match="layer 0"):
        SGD(0.1).step(net, {(0, "W"): np.array([[np.nan]]), (0, "b"): np.array([0.0])})


def test_train_config_bounds():
    for bad in (dict(lr=0), dict(momentum=1.0), dict(batch_size=0), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_loss_non_increasing_small_lr():
    x, y = as_arrays(synth_dataset(4, 32, seed=3))
    net = build_paper_cnn(PaperCnnConfig((32, 32, 3), conv_dropout=0.0, fc_dropout=0.0), seed=1)
    opt = SGD(1e-3, 0.0)
    losses = []
    for _ in range(20):
        p = net.forward(x, "train")
        losses.append(cross_entropy(p, y))
        net.backward(p, y)
        opt.step(net)
    assert all(b <= a for a, b in zip(losses, losses[1:]))
