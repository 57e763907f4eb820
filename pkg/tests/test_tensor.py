import numpy as np
import pytest

from feddet import ops
from feddet.errors import ContractError, ShapeError
from feddet.tensor import Tape, Tensor, backward, no_grad

from gradcheck import check_op_grads, numeric_grad, rel_err

RNG = np.random.default_rng(20240817)


def scalarize(t, proj):
    return ops.sum_all(ops.mul(t, Tensor(proj)))


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ops.matmul(a, Tensor(np.eye(2)))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_hand_case():
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_grad_is_row_sums_of_b():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 5))
    ta = Tensor(a, requires_grad=True)
    with Tape() as tape:
        out = ops.sum_all(ops.matmul(ta, Tensor(b)))
    backward(out, tape)
    expected = np.tile(b.sum(axis=1), (3, 1))
    assert rel_err(ta.grad, expected) < 1e-12
    num = numeric_grad(lambda x: (x @ b).sum(), [a], 0)
    assert rel_err(ta.grad, num) <= 1e-4


def test_matmul_gradcheck():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 2))
    proj = RNG.normal(size=(3, 2))
    check_op_grads(lambda x, y: scalarize(ops.matmul(x, y), proj), [a, b])


def test_bmm_gradcheck():
    a = RNG.normal(size=(2, 3, 4))
    b = RNG.normal(size=(2, 4, 5))
    proj = RNG.normal(size=(2, 3, 5))
    check_op_grads(lambda x, y: scalarize(ops.bmm(x, y), proj), [a, b])


# ---------------------------------------------------------------------------
# conv2d

def test_conv2d_scaling_kernel():
    x = RNG.normal(size=(1, 1, 3, 3))
    w = np.full((1, 1, 1, 1), 2.0)
    out = ops.conv2d(Tensor(x), Tensor(w))
    assert np.allclose(out.data, 2.0 * x)


def test_conv2d_hand_case():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = ops.conv2d(x, w, stride=1, pad=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.reshape(()) == 10.0


def test_conv2d_output_shape_with_stride_and_pad():
    out = ops.conv2d(Tensor(np.zeros((2, 3, 9, 9))), Tensor(np.zeros((4, 3, 3, 3))),
                     stride=2, pad=1)
    assert out.shape == (2, 4, 5, 5)


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError, match="kernel"):
        ops.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv2d_gradcheck():
    x = RNG.normal(size=(2, 3, 8, 8))
    w = RNG.normal(size=(4, 3, 3, 3))
    proj = RNG.normal(size=(2, 4, 4, 4))
    check_op_grads(
        lambda a, b: scalarize(ops.conv2d(a, b, stride=2, pad=1), proj), [x, w]
    )


# ---------------------------------------------------------------------------
# softmax

def test_softmax_uniform():
    out = ops.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_stability():
    out = ops.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(1.0)


def test_softmax_slices_sum_to_one():
    x = RNG.normal(size=(4, 6, 5)) * 30
    out = ops.softmax(Tensor(x))
    assert np.all(out.data >= 0)
    assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) <= 1e-12


def test_softmax_gradcheck():
    x = RNG.normal(size=(5,))
    proj = RNG.normal(size=(5,))
    check_op_grads(lambda t: scalarize(ops.softmax(t), proj), [x])


# ---------------------------------------------------------------------------
# batch/layer norm

def test_batch_norm_standardized_batch_is_identity():
    # standardized *for this layer*: variance 1-eps makes the divisor exactly 1
    eps = 1e-5
    x = RNG.normal(size=(8, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    x *= np.sqrt(1.0 - eps)
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                         ops.RunningStats(2), "train", eps=eps)
    assert np.max(np.abs(out.data - x)) < 1e-6


def test_batch_norm_constant_channel_maps_to_zero():
    x = np.full((4, 1, 3, 3), 7.0)
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                         ops.RunningStats(1), "train", eps=1e-5)
    assert np.max(np.abs(out.data)) < 1e-9


def test_batch_norm_single_element_errors():
    with pytest.raises(ContractError, match="B\\*H\\*W"):
        ops.batch_norm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)),
                       Tensor(np.zeros(2)), ops.RunningStats(2), "train")


def test_batch_norm_updates_running_state():
    state = ops.RunningStats(1)
    x = RNG.normal(size=(4, 1, 3, 3)) + 5.0
    ops.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, "train")
    n = x.size
    assert state.mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * x.mean())
    assert state.var[0] == pytest.approx(0.9 * 1.0 + 0.1 * x.var() * n / (n - 1))


def test_batch_norm_gradcheck_train_and_eval():
    x = RNG.normal(size=(4, 2, 3, 3))
    gamma = RNG.normal(size=2) + 1.0
    beta = RNG.normal(size=2)
    proj = RNG.normal(size=(4, 2, 3, 3))
    for mode in ("train", "eval"):
        state = ops.RunningStats(2)
        state.mean = RNG.normal(size=2)
        state.var = RNG.random(2) + 0.5
        check_op_grads(
            lambda a, g, b: scalarize(
                ops.batch_norm(a, g, b, state.clone(), mode), proj),
            [x, gamma, beta],
        )


def test_layer_norm_gradcheck():
    x = RNG.normal(size=(3, 6))
    gamma = RNG.normal(size=6) + 1.0
    beta = RNG.normal(size=6)
    proj = RNG.normal(size=(3, 6))
    check_op_grads(
        lambda a, g, b: scalarize(ops.layer_norm(a, g, b), proj), [x, gamma, beta]
    )


# ---------------------------------------------------------------------------
# backward contract

def test_backward_sum_gives_ones():
    x = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    backward(loss, tape)
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic_gives_x():
    data = RNG.normal(size=(5,))
    x = Tensor(data, requires_grad=True)
    with Tape() as tape:
        loss = ops.mul_scalar(ops.sum_all(ops.mul(x, x)), 0.5)
    backward(loss, tape)
    assert rel_err(x.grad, data) < 1e-12


def test_backward_accumulates_without_reset():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    backward(loss, tape)
    backward(loss, tape)
    assert np.array_equal(x.grad, 2.0 * np.ones(3))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = ops.mul_scalar(x, 2.0)
    with pytest.raises(ContractError):
        backward(out, tape)


def test_disconnected_tensor_keeps_grad_none():
    x = Tensor(np.ones(3), requires_grad=True)
    other = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    backward(loss, tape)
    assert other.grad is None


def test_no_grad_suspends_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            ops.sum_all(x)
    assert len(tape) == 0


def test_diamond_graph_gradient():
    # y = x*x + x used twice: d/dx = 2x + 1
    data = RNG.normal(size=(4,))
    x = Tensor(data, requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(ops.add(ops.mul(x, x), x))
    backward(loss, tape)
    assert rel_err(x.grad, 2 * data + 1) < 1e-12


# ---------------------------------------------------------------------------
# elementwise and shape ops

@pytest.mark.parametrize("build,n_inputs", [
    (lambda a, b: ops.add(a, b), 2),
    (lambda a, b: ops.sub(a, b), 2),
    (lambda a, b: ops.mul(a, b), 2),
    (lambda a, b: ops.div(a, b), 2),
    (lambda a, b: ops.minimum(a, b), 2),
    (lambda a, b: ops.maximum(a, b), 2),
])
def test_binary_elementwise_gradchecks(build, n_inputs):
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(3, 4)) + 2.5  # keep div well conditioned
    proj = RNG.normal(size=(3, 4))
    check_op_grads(lambda x, y: scalarize(build(x, y), proj), [a, b])


@pytest.mark.parametrize("build", [
    lambda x: ops.relu(x),
    lambda x: ops.sigmoid(x),
    lambda x: ops.neg(x),
    lambda x: ops.add_scalar(x, 1.7),
    lambda x: ops.mul_scalar(x, -2.3),
    lambda x: ops.reshape(x, (4, 3)),
    lambda x: ops.transpose(x, (1, 0)),
    lambda x: ops.slice_axis(x, 1, 1, 3),
])
def test_unary_gradchecks(build):
    x = RNG.normal(size=(3, 4)) + 0.13  # avoid relu kinks at exactly 0
    out_shape = build(Tensor(x)).shape
    proj = RNG.normal(size=out_shape)
    check_op_grads(lambda t: scalarize(build(t), proj), [x])


def test_minimum_tie_subgradient_is_zero():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([1.0, 5.0]), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(ops.minimum(a, b))
    backward(loss, tape)
    assert np.array_equal(a.grad, [0.0, 1.0])
    assert np.array_equal(b.grad, [0.0, 0.0])


def test_concat_gradcheck():
    a = RNG.normal(size=(2, 3))
    b = RNG.normal(size=(2, 2))
    proj = RNG.normal(size=(2, 5))
    check_op_grads(lambda x, y: scalarize(ops.concat([x, y], axis=1), proj), [a, b])


def test_take_rows_gradcheck_with_repeats():
    x = RNG.normal(size=(4, 3))
    proj = RNG.normal(size=(3, 3))
    check_op_grads(
        lambda t: scalarize(ops.take_rows(t, [2, 0, 2]), proj), [x]
    )


def test_tile_batch_gradcheck():
    x = RNG.normal(size=(2, 3))
    proj = RNG.normal(size=(4, 2, 3))
    check_op_grads(lambda t: scalarize(ops.tile_batch(t, 4), proj), [x])


def test_bias_add_gradcheck():
    x = RNG.normal(size=(2, 3, 4, 4))
    b = RNG.normal(size=3)
    proj = RNG.normal(size=(2, 3, 4, 4))
    check_op_grads(lambda t, c: scalarize(ops.bias_add(t, c, axis=1), proj), [x, b])


def test_mean_all_gradcheck():
    x = RNG.normal(size=(3, 4))
    check_op_grads(lambda t: ops.mean_all(t), [x])


# ---------------------------------------------------------------------------
# dropout

def test_dropout_eval_is_identity_bit_exact():
    x = Tensor(RNG.normal(size=(5, 5)))
    out = ops.dropout(x, 0.3, None, train=False)
    assert out is x


def test_dropout_train_scales_kept_units():
    rng = np.random.default_rng(7)
    x = Tensor(np.ones((100, 100)))
    out = ops.dropout(x, 0.25, rng, train=True)
    vals = np.unique(out.data)
    assert set(np.round(vals, 12)) <= {0.0, np.round(1 / 0.75, 12)}
    assert abs((out.data == 0).mean() - 0.25) < 0.02


def test_dropout_same_stream_is_reproducible():
    x = Tensor(RNG.normal(size=(8, 8)))
    a = ops.dropout(x, 0.5, np.random.default_rng(3), train=True)
    b = ops.dropout(x, 0.5, np.random.default_rng(3), train=True)
    assert np.array_equal(a.data, b.data)


def test_dropout_gradient_masks_match_forward():
    rng_data = RNG.normal(size=(6, 6))
    x = Tensor(rng_data, requires_grad=True)
    with Tape() as tape:
        out = ops.dropout(x, 0.5, np.random.default_rng(11), train=True)
        loss = ops.sum_all(out)
    backward(loss, tape)
    mask = out.data != 0
    assert np.array_equal(x.grad != 0, mask | (rng_data == 0))


# ---------------------------------------------------------------------------
# losses

def test_cross_entropy_hand_value():
    logits = Tensor(np.log(np.array([[0.7, 0.2, 0.1]])))
    out = ops.cross_entropy_with_logits(logits, np.array([0]))
    assert out.data[0] == pytest.approx(-np.log(0.7))


def test_cross_entropy_gradcheck():
    logits = RNG.normal(size=(4, 3))
    targets = np.array([0, 2, 1, 1])
    proj = RNG.normal(size=4)
    check_op_grads(
        lambda t: scalarize(ops.cross_entropy_with_logits(t, targets), proj),
        [logits],
    )


def test_l1_loss_gradcheck():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(3, 4))
    for reduction in ("sum", "mean"):
        check_op_grads(lambda x, y: ops.l1_loss(x, y, reduction), [a, b])


def test_l1_loss_value():
    a = Tensor([1.0, -2.0])
    b = Tensor([0.0, 1.0])
    assert ops.l1_loss(a, b, "sum").item() == pytest.approx(4.0)
    assert ops.l1_loss(a, b, "mean").item() == pytest.approx(2.0)
