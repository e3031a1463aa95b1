import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdct_auxnet import nn
from sdct_auxnet.nn import GradTape, Parameter, Tensor


def conv_oracle(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation."""
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, f, i, j] = (patch * w[f]).sum() + b[f]
    return out


# -- tensors and tape ---------------------------------------------------------


def test_tensor_defaults_to_float64():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float64 and t.shape == (3,) and t.size == 3


def test_parameter_grad_matches_shape():
    p = Parameter(np.ones((2, 3)))
    assert p.grad.shape == p.shape
    assert not p.grad.any()


def test_tape_replays_in_reverse_order():
    order = []
    x = Parameter(np.array([2.0]))
    with GradTape() as tape:
        a = nn.record(x.data * 3, (x,), lambda g: (order.append("a") or g * 3,))
        b = nn.record(a.data + 1, (a,), lambda g: (order.append("b") or g,))
    tape.backward(b)
    assert order == ["b", "a"]
    np.testing.assert_allclose(x.grad, [3.0])


def test_tape_backward_only_once():
    x = Parameter(np.array([1.0, 2.0]))
    with GradTape() as tape:
        y = nn.weighted_sum(x, np.ones(2))
    tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_parameter_grads_zeroed_before_each_pass():
    x = Parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with GradTape() as tape:
            y = nn.weighted_sum(x, np.array([1.0, 5.0]))
        tape.backward(y)
    np.testing.assert_array_equal(x.grad, [1.0, 5.0])


# -- conv2d -------------------------------------------------------------------


def test_conv_hand_example():
    x = Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
    out = nn.conv2d(x, Parameter(np.ones((1, 1, 2, 2))), Parameter(np.zeros(1)))
    np.testing.assert_array_equal(out.data[0, 0], [[12, 16], [24, 28]])


def test_conv_identity_kernel():
    x = Tensor(np.ones((1, 1, 4, 4)))
    out = nn.conv2d(x, Parameter(np.ones((1, 1, 1, 1))), Parameter(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_c1_shape_at_350():
    out_side = nn.conv_output_size(350, 5, 2, 1)
    assert out_side == 174


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 5), (2, 0, 2), (3, 2, 3)])
def test_conv_matches_loop_oracle(rng, stride, padding, k):
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = nn.conv2d(Tensor(x), Parameter(w), Parameter(b), stride, padding)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ValueError):
        nn.conv2d(Tensor(rng.standard_normal((1, 2, 5, 5))), Parameter(np.ones((1, 3, 3, 3))))


def test_conv_kernel_too_large():
    with pytest.raises(ValueError):
        nn.conv2d(Tensor(np.ones((1, 1, 2, 2))), Parameter(np.ones((1, 1, 5, 5))))


# -- batch norm ---------------------------------------------------------------


def test_batchnorm_train_standardizes(rng):
    x = Tensor(rng.standard_normal((5, 3, 4, 4)) * 7 + 2)
    rm, rv = np.zeros(3), np.ones(3)
    out = nn.batchnorm2d(x, Parameter(np.ones(3)), Parameter(np.zeros(3)), rm, rv, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_eval_is_affine(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    out = nn.batchnorm2d(Tensor(x), Parameter(np.full(3, 2.0)), Parameter(np.full(3, 3.0)),
                         np.zeros(3), np.ones(3), training=False, eps=1e-5)
    np.testing.assert_allclose(out.data, (2 * x / np.sqrt(1 + 1e-5)) + 3, rtol=1e-12)


def test_batchnorm_hand_values():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    out = nn.batchnorm2d(x, Parameter(np.ones(1)), Parameter(np.zeros(1)), np.zeros(1), np.ones(1), True)
    expected = (np.array([1, 2, 3, 4]) - 2.5) / np.sqrt(1.25 + 1e-5)
    np.testing.assert_allclose(out.data.ravel(), expected, rtol=1e-12)


def test_batchnorm_running_stats_update():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    rm, rv = np.zeros(1), np.ones(1)
    nn.batchnorm2d(x, Parameter(np.ones(1)), Parameter(np.zeros(1)), rm, rv, True, momentum=0.1)
    np.testing.assert_allclose(rm, [0.25])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 5.0 / 3.0])


def test_batchnorm_first_batch_seeds_buffers():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    rm, rv, count = np.zeros(1), np.ones(1), np.zeros(())
    nn.batchnorm2d(x, Parameter(np.ones(1)), Parameter(np.zeros(1)), rm, rv, True, num_batches=count)
    np.testing.assert_allclose(rm, [2.5])
    np.testing.assert_allclose(rv, [5.0 / 3.0])
    assert count == 1
    nn.batchnorm2d(Tensor(np.full((1, 1, 2, 2), 10.0)), Parameter(np.ones(1)), Parameter(np.zeros(1)), rm, rv, True, num_batches=count)
    np.testing.assert_allclose(rm, [0.9 * 2.5 + 1.0])


def test_batchnorm_single_value_no_error():
    x = Tensor(np.array([[[[3.0]]]]))
    out = nn.batchnorm2d(x, Parameter(np.ones(1)), Parameter(np.zeros(1)), np.zeros(1), np.ones(1), True)
    assert np.isfinite(out.data).all()


# -- pooling, activations, head -----------------------------------------------


@pytest.mark.parametrize("side,expected", [(174, 87), (87, 43), (43, 21), (21, 10), (2, 1)])
def test_maxpool_floor_sizes(side, expected):
    out = nn.maxpool2d(Tensor(np.zeros((1, 1, side, side))))
    assert out.shape == (1, 1, expected, expected)


def test_maxpool_window_max():
    out = nn.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data.item() == 4.0


def test_maxpool_routes_gradient_to_argmax():
    x = Parameter(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    with GradTape() as tape:
        y = nn.weighted_sum(nn.maxpool2d(x), np.ones((1, 1, 1, 1)))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad[0, 0], [[0, 0], [0, 1]])


def test_relu_values_and_grad():
    np.testing.assert_array_equal(nn.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = Parameter(np.array([-0.5, 0.5]))
    with GradTape() as tape:
        y = nn.weighted_sum(nn.relu(x), np.ones(2))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_linear_hand_example():
    out = nn.linear(Tensor([[1.0, 2.0]]), Parameter(np.array([[3.0, 4.0]])), Parameter(np.array([5.0])))
    assert out.data.item() == 16.0


def test_linear_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(nn.linear(Tensor(x), Parameter(np.eye(4)), Parameter(np.zeros(4))).data, x)


def test_linear_dimension_mismatch():
    with pytest.raises(ValueError):
        nn.linear(Tensor(np.ones((1, 3))), Parameter(np.ones((2, 4))), Parameter(np.zeros(2)))


def test_log_softmax_values():
    np.testing.assert_allclose(nn.log_softmax(Tensor([[0.0, 0.0]])).data, [[math.log(0.5)] * 2])
    np.testing.assert_allclose(nn.log_softmax(Tensor([[1.0, 2.0]])).data, [[-1.31326, -0.31326]], atol=1e-5)
    big = nn.log_softmax(Tensor([[1000.0, 0.0]])).data
    np.testing.assert_allclose(big, [[0.0, -1000.0]], atol=1e-12)


@given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)))
@settings(max_examples=60, deadline=None)
def test_log_softmax_rows_normalised(x):
    lp = nn.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)


def test_nll_loss_cases():
    assert nn.nll_loss(Tensor([[0.0, -5.0]]), [0]).item() == 0.0
    uniform = np.log([[0.5, 0.5], [0.5, 0.5]])
    assert nn.nll_loss(Tensor(uniform), [0, 1]).item() == pytest.approx(math.log(2))
    assert nn.nll_loss(Tensor([[-0.1, -2.4]]), [1]).item() == pytest.approx(2.4)


def test_nll_loss_bad_target():
    with pytest.raises(ValueError):
        nn.nll_loss(Tensor([[0.0, 0.0]]), [2])


def test_sgd_step():
    p = Parameter(np.array([1.0]))
    p.grad[:] = 0.5
    nn.sgd_step([p], 0.1)
    assert p.data.item() == pytest.approx(0.95)
    assert p.grad.item() == 0.0
    frozen = Parameter(np.array([1.0]))
    frozen.grad[:] = 3.0
    nn.sgd_step([frozen], 0.0)
    assert frozen.data.item() == 1.0


def test_sgd_two_steps_constant_grad():
    p = Parameter(np.array([2.0]))
    for _ in range(2):
        p.grad[:] = 0.25
        nn.sgd_step([p], 0.2)
    assert p.data.item() == pytest.approx(2.0 - 2 * 0.2 * 0.25)


def test_forward_deterministic(rng):
    x = rng.standard_normal((2, 3, 10, 10))
    w, b = Parameter(rng.standard_normal((4, 3, 3, 3))), Parameter(rng.standard_normal(4))
    a = nn.conv2d(Tensor(x), w, b, 1, 1).data
    c = nn.conv2d(Tensor(x), w, b, 1, 1).data
    assert a.tobytes() == c.tobytes()


# -- gradient checks at ten random points -----------------------------------


def _away(rng, shape):
    u = rng.standard_normal(shape)
    return np.sign(u) * (0.1 + np.abs(u))


GRAD_CASES = {
    "conv2d": lambda r: (lambda x, w, b: nn.conv2d(x, w, b, 2, 1),
                         [Tensor(r.standard_normal((2, 2, 7, 7))), Parameter(r.standard_normal((3, 2, 3, 3))),
                          Parameter(r.standard_normal(3))]),
    "batchnorm_train": lambda r: (
        lambda x, g, b: nn.batchnorm2d(x, g, b, np.zeros(2), np.ones(2), True),
        [Tensor(r.standard_normal((3, 2, 3, 3))), Parameter(r.uniform(0.5, 2, 2)), Parameter(r.standard_normal(2))]),
    "relu": lambda r: (nn.relu, [Tensor(_away(r, (4, 5)))]),
    "linear": lambda r: (nn.linear, [Tensor(r.standard_normal((3, 6))), Parameter(r.standard_normal((2, 6))),
                                     Parameter(r.standard_normal(2))]),
    "log_softmax": lambda r: (nn.log_softmax, [Tensor(r.standard_normal((4, 2)))]),
    "maxpool": lambda r: (nn.maxpool2d, [Tensor((r.permutation(50) * 0.2).reshape(1, 2, 5, 5))]),
}


@pytest.mark.parametrize("op", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_grad_check_random_points(op, seed):
    fn, inputs = GRAD_CASES[op](np.random.default_rng(seed))
    tol = 1e-5 if op == "conv2d" else 1e-6
    assert nn.grad_check(fn, inputs, seed=seed) < tol


def test_grad_check_detects_wrong_gradient(rng):
    def bad_square(x):
        return nn.record(x.data**2, (x,), lambda g: (g * x.data,))  # should be 2x

    assert nn.grad_check(bad_square, [Tensor(rng.uniform(1, 2, 5))]) > 0.1
