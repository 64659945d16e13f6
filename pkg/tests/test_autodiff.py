import numpy as np
import pytest

from esunetpp.autodiff import (Adam, GradTape, OptimizerState, RunningStats, Tensor, backward, batch_norm,
                               concat_channels, conv2d, conv_transpose2d, grad_check, max_pool2d, no_grad,
                               optimizer_step, relu, sigmoid)
from esunetpp.blocks import bilinear_init
from esunetpp.errors import ContractError, ParameterError, ShapeError

from oracles import adam_single_step, conv2d_direct, conv_transpose2d_direct, max_pool_direct


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv2d ------------------------------------------------------------------

def test_conv_identity_kernel_returns_input():
    x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.array_equal(conv2d(t(x), t(k), pad=1).data, x)


def test_conv_ones_kernel_center_is_45():
    x = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
    out = conv2d(t(x), t(np.ones((1, 1, 3, 3))), pad=1).data
    assert out[0, 0, 1, 1] == 45.0


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (1, 2, 3)])
def test_conv_matches_direct_summation(stride, pad, k):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = conv2d(t(x), t(w), t(b), stride, pad).data
    assert np.max(np.abs(got - conv2d_direct(x, w, b, stride, pad))) < 1e-10


def test_conv_output_size_formula():
    x = t(np.zeros((1, 2, 9, 9)))
    assert conv2d(x, t(np.zeros((5, 2, 3, 3))), stride=2, pad=1).shape == (1, 5, 5, 5)


def test_conv_rejects_bad_arguments():
    x = t(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        conv2d(x, t(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ParameterError):
        conv2d(x, t(np.zeros((1, 2, 3, 3))), stride=0)
    with pytest.raises(ShapeError):
        conv2d(t(np.zeros((2, 4, 4))), t(np.zeros((1, 2, 3, 3))))


def test_conv_kernel_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x, w = t(rng.standard_normal((1, 2, 4, 4))), t(rng.standard_normal((3, 2, 3, 3)))
    assert grad_check(lambda x, w: conv2d(x, w, pad=1).sum(), [x, w]) < 1e-4


# -- transposed conv -----------------------------------------------------------

def test_conv_transpose_matches_direct_scatter():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 2, 4, 4))
    b = rng.standard_normal(2)
    got = conv_transpose2d(t(x), t(w), t(b)).data
    assert got.shape == (2, 2, 8, 10)
    assert np.max(np.abs(got - conv_transpose2d_direct(x, w, b))) < 1e-10


def test_conv_transpose_single_pixel_is_cropped_kernel():
    K = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    out = conv_transpose2d(t([[[[2.5]]]]), t(K)).data
    assert np.array_equal(out[0, 0], 2.5 * K[0, 0, 1:3, 1:3])


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 3, 3))
    y = rng.standard_normal((1, 3, 6, 6))
    w = rng.standard_normal((2, 3, 4, 4))
    # <T x, y> == <x, C y> with C the stride-2 conv sharing the kernel
    lhs = np.sum(conv_transpose2d(t(x), t(w)).data * y)
    # (in, out) transposed-conv weights read as an (out, in) conv kernel from y back to x
    rhs = np.sum(x * conv2d(t(y), t(w), stride=2, pad=1).data)
    assert abs(lhs - rhs) < 1e-10


def test_bilinear_transpose_keeps_constants_inside():
    x = t(np.full((1, 2, 5, 5), 3.0))
    out = conv_transpose2d(x, t(bilinear_init(2, 2))).data
    assert np.allclose(out[:, :, 1:-1, 1:-1], 3.0, atol=1e-12)


# -- pooling -------------------------------------------------------------------

def test_max_pool_small_case():
    assert max_pool2d(t([[[[1, 2], [3, 4]]]])).data.item() == 4.0


def test_max_pool_matches_windowed_oracle():
    x = np.random.default_rng(1).standard_normal((2, 3, 6, 4))
    assert np.array_equal(max_pool2d(t(x)).data, max_pool_direct(x))


def test_max_pool_constant_input_routes_to_first_index():
    x = t(np.ones((1, 1, 4, 4)), grad=True)
    max_pool2d(x).sum().backward()
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    assert np.array_equal(x.grad[0, 0], expected)


def test_max_pool_one_unit_per_window():
    x = t(np.random.default_rng(2).permutation(64).reshape(1, 1, 8, 8).astype(float), grad=True)
    max_pool2d(x).sum().backward()
    win = x.grad[0, 0].reshape(4, 2, 4, 2).sum(axis=(1, 3))
    assert np.array_equal(win, np.ones((4, 4)))


def test_max_pool_odd_size_rejected():
    with pytest.raises(ShapeError):
        max_pool2d(t(np.zeros((1, 1, 3, 4))))


# -- batch norm ----------------------------------------------------------------

def test_batch_norm_constant_channel_gives_shift():
    x = t(np.full((2, 1, 3, 3), 7.0))
    out = batch_norm(x, t([2.0]), t([0.5]), RunningStats.init(1), training=True).data
    assert np.allclose(out, 0.5)


def test_batch_norm_standardized_input_passes_through():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = batch_norm(t(x), t([1.0, 1.0]), t([0.0, 0.0]), RunningStats.init(2), training=True).data
    assert np.allclose(out, x, atol=1e-4)


def test_batch_norm_running_stats_update():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 1, 3, 3)) * 2 + 1
    st = RunningStats.init(1)
    batch_norm(t(x), t([1.0]), t([0.0]), st, training=True)
    assert np.isclose(st.mean[0], 0.1 * x.mean())
    assert np.isclose(st.var[0], 0.9 + 0.1 * x.var(ddof=1))


def test_batch_norm_eval_uses_running_stats():
    st = RunningStats(np.array([1.0]), np.array([4.0]))
    out = batch_norm(t(np.full((1, 1, 2, 2), 5.0)), t([1.0]), t([0.0]), st, training=False, eps=1e-5).data
    assert np.allclose(out, 4.0 / np.sqrt(4.0 + 1e-5))


def test_batch_norm_bad_eps():
    with pytest.raises(ParameterError):
        batch_norm(t(np.zeros((1, 1, 2, 2))), t([1.0]), t([0.0]), RunningStats.init(1), True, eps=0.0)


def test_batch_norm_gradient_training_mode():
    rng = np.random.default_rng(2)
    x = t(rng.standard_normal((2, 2, 3, 3)))
    s, b = t(rng.uniform(0.5, 1.5, 2)), t(rng.standard_normal(2))
    r = rng.standard_normal((2, 2, 3, 3))
    st = RunningStats.init(2)
    assert grad_check(lambda x, s, b: (batch_norm(x, s, b, st, True) * r).sum(), [x, s, b]) < 1e-4


# -- activations / concat --------------------------------------------------------

def test_relu_values_and_gradient():
    x = t([-1.0, 0.0, 2.0], grad=True)
    y = relu(x)
    assert np.array_equal(y.data, [0.0, 0.0, 2.0])
    y.sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_values_and_saturation():
    y = sigmoid(t([0.0, 800.0, -800.0])).data
    assert y[0] == 0.5
    assert 0.0 <= y[2] < 1e-300 or y[2] == 0.0
    assert y[1] <= 1.0 and np.isfinite(y).all()
    x = t(np.random.default_rng(0).standard_normal(5) * 3)
    assert grad_check(lambda x: (sigmoid(x) * sigmoid(x)).sum(), [x]) < 1e-6


def test_concat_channels_shapes_and_gradient_split():
    rng = np.random.default_rng(0)
    a, b = t(rng.standard_normal((2, 3, 4, 4)), True), t(rng.standard_normal((2, 5, 4, 4)), True)
    r = rng.standard_normal((2, 8, 4, 4))
    out = concat_channels([a, b])
    assert out.shape == (2, 8, 4, 4)
    (out * r).sum().backward()
    assert np.array_equal(a.grad, r[:, :3]) and np.array_equal(b.grad, r[:, 3:])
    assert concat_channels([a]) is a
    with pytest.raises(ShapeError):
        concat_channels([a, t(np.zeros((2, 1, 3, 3)))])


# -- backward / tape ----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t(np.random.default_rng(0).standard_normal((2, 3)), grad=True)
    grads = backward(x.sum())
    assert np.array_equal(grads[x], np.ones((2, 3)))


def test_backward_relu_of_negative_is_zero():
    x = t(-np.ones(4), grad=True)
    backward(relu(x).sum())
    assert np.array_equal(x.grad, np.zeros(4))


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        backward(t(np.ones(3), grad=True) * 2.0)


def test_no_grad_for_constants():
    x, c = t([1.0, 2.0], grad=True), t([3.0, 4.0])
    grads = backward((x * c).sum())
    assert c not in grads and c.grad is None


def test_tape_visits_consumers_first():
    x = t([1.0, 2.0], grad=True)
    y = x * 2.0
    z = y + x
    loss = (z * y).sum()
    tape = GradTape.from_output(loss)
    pos = {id(n): k for k, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if id(p) in pos:
                assert pos[id(p)] > pos[id(node)]


def test_no_grad_records_nothing():
    x = t([1.0], grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_two_layer_conv_net_gradient():
    rng = np.random.default_rng(7)
    x = t(rng.standard_normal((1, 1, 5, 5)))
    w1, w2 = t(rng.standard_normal((2, 1, 3, 3))), t(rng.standard_normal((1, 2, 3, 3)))

    def f(w1, w2):
        h = conv2d(x, w1, pad=1)
        return (conv2d(h * h, w2, pad=1) * 0.1).sum()
    assert grad_check(f, [w1, w2]) < 1e-4


def test_forward_is_pure():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    a = conv2d(t(x), t(w), pad=1).data
    b = conv2d(t(x), t(w), pad=1).data
    assert np.array_equal(a, b)


# -- optimizer ------------------------------------------------------------------------

def test_adam_single_step_matches_closed_form():
    p = t([0.7], grad=True)
    state = OptimizerState()
    optimizer_step(state, [p], [np.array([0.3])])
    assert np.allclose(p.data, adam_single_step(np.array([0.7]), np.array([0.3])), atol=0, rtol=1e-15)
    assert state.step == 1


def test_adam_direction_and_zero_gradient():
    p, q = t([1.0], grad=True), t([1.0], grad=True)
    state = OptimizerState()
    optimizer_step(state, [p, q], [np.array([2.0]), None])
    assert p.data[0] < 1.0 and q.data[0] == 1.0


def test_adam_step_counter_increases():
    p = t([1.0], grad=True)
    opt = Adam([p])
    for k in range(1, 4):
        p.grad = np.array([1.0])
        opt.step()
        assert opt.state.step == k


def test_adam_shape_mismatch():
    p = t([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        optimizer_step(OptimizerState(), [p], [np.ones(3)])
