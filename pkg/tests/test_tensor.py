"""Tensor / autodiff core: hand values, loop oracles, finite differences."""

import json

import numpy as np
import pytest

from normlab import tensor as T


def rel_err(got, want, floor=1e-3):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(got), np.abs(want)))
    return float(np.max(np.abs(got - want) / denom))


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def test_add_hand_value():
    out = T.elementwise("add", T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_relu_hand_value():
    out = T.elementwise("relu", T.Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_scale_and_scalar_operands():
    a = T.Tensor([2.0, -4.0])
    np.testing.assert_array_equal(T.elementwise("scale", a, 0.5).data, [1.0, -2.0])
    np.testing.assert_array_equal((a + 1.0).data, [3.0, -3.0])
    np.testing.assert_array_equal((3.0 * a).data, [6.0, -12.0])


def test_mul_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    loss = T.reduce_sum(T.mul(a, b))
    T.backward(loss)
    fd_a = T.fd_gradient(lambda t: T.reduce_sum(T.mul(t, T.Tensor(b.data))), a, 1e-6)
    fd_b = T.fd_gradient(lambda t: T.reduce_sum(T.mul(T.Tensor(a.data), t)), b, 1e-6)
    assert rel_err(a.grad, fd_a.data) <= 1e-6
    assert rel_err(b.grad, fd_b.data) <= 1e-6


def test_broadcast_limited_to_unit_axes():
    a = T.Tensor(np.ones((2, 3)))
    b = T.Tensor(np.ones((1, 3)))
    assert T.add(a, b).shape == (2, 3)
    with pytest.raises(T.ShapeError):
        T.add(a, T.Tensor(np.ones(3)))  # rank promotion is not implicit
    with pytest.raises(T.ShapeError):
        T.add(a, T.Tensor(np.ones((2, 2))))


def test_broadcast_gradient_sums_over_expanded_axes():
    a = T.Tensor(np.ones((2, 3)), requires_grad=True)
    b = T.Tensor(np.ones((1, 3)), requires_grad=True)
    T.backward(T.reduce_sum(a * b))
    np.testing.assert_array_equal(b.grad, np.full((1, 3), 2.0))


def test_div_by_zero_is_an_error():
    with pytest.raises(T.NumericsError):
        T.div(T.Tensor([1.0]), T.Tensor([0.0]))
    with pytest.raises(T.NumericsError):
        T.div(T.Tensor([1.0]), 0.0)


def test_non_finite_result_is_reported():
    with pytest.raises(T.NumericsError):
        T.exp(T.Tensor([1000.0]))
    with pytest.raises(T.NumericsError):
        T.log(T.Tensor([0.0]))
    with pytest.raises(T.NumericsError):
        T.Tensor([np.nan])


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def test_mean_hand_value():
    out = T.reduce("mean", T.Tensor([[1.0, 3.0], [5.0, 7.0]]), axes={0, 1})
    np.testing.assert_array_equal(out.data, [[4.0]])


def test_max_hand_value():
    out = T.reduce("max", T.Tensor([[1.0, 3.0], [5.0, 7.0]]), axes={1})
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_mean_matches_scalar_loop_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4, 2, 5))
    total = 0.0
    for v in x.reshape(-1):
        total += v
    want = total / x.size
    got = T.reduce_mean(T.Tensor(x)).item()
    assert rel_err(got, want, floor=1e-12) <= 1e-14


def test_reduce_empty_axis_set_is_identity():
    x = T.Tensor([[1.0, 2.0]])
    assert T.reduce("sum", x, axes=set()) is x


def test_reduce_invalid_axis_is_error():
    with pytest.raises(T.ShapeError):
        T.reduce_sum(T.Tensor([1.0, 2.0]), axes={3})


def test_reduced_axes_kept_for_broadcasting():
    x = T.Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
    out = T.reduce_mean(x, axes={0, 2})
    assert out.shape == (1, 3, 1)
    centered = T.sub(x, T.broadcast_to(out, x.shape))
    remean = T.reduce_mean(centered, axes={0, 2})
    assert np.max(np.abs(remean.data)) <= 1e-12


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

def test_matmul_identity():
    x = np.arange(6, dtype=np.float64).reshape(2, 3)
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_value():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((5, 4))
    b = rng.standard_normal((4, 3))
    want = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    assert rel_err(got, want, floor=1e-9) <= 1e-12


def test_matmul_dimension_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


# --------------------------------------------------------------------------
# conv2d
# --------------------------------------------------------------------------

def conv2d_loop_oracle(x, w, b, pad):
    """Direct 6-loop cross-correlation for oracle comparison."""
    n, cin, h, w_in = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = h + 2 * pad - kh + 1
    wo = w_in + 2 * pad - kw + 1
    out = np.zeros((n, cout, ho, wo))
    for i_n in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[co]
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += x_padded_at(xp, i_n, ci, i + di, j + dj) * w[co, ci, di, dj]
                    out[i_n, co, i, j] = acc
    return out


def x_padded_at(xp, n, c, i, j):
    return xp[n, c, i, j]


def test_conv2d_1x1_equals_channel_matmul():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((5, 3, 1, 1))
    b = rng.standard_normal(5)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 0).data
    want = np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0]) + b.reshape(1, 5, 1, 1)
    assert rel_err(out, want, floor=1e-9) <= 1e-12


def test_conv2d_all_ones_interior():
    cin = 3
    x = np.ones((1, cin, 5, 5))
    w = np.ones((1, cin, 3, 3))
    b = np.zeros(1)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1).data
    assert out.shape == (1, 1, 5, 5)
    np.testing.assert_array_equal(out[0, 0, 1:-1, 1:-1], np.full((3, 3), 9.0 * cin))


@pytest.mark.parametrize("k,pad", [(3, 1), (1, 0)])
def test_conv2d_matches_loop_oracle(k, pad):
    rng = np.random.default_rng(13 + k)
    x = rng.standard_normal((2, 3, 5, 4))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), pad).data
    want = conv2d_loop_oracle(x, w, b, pad)
    assert rel_err(got, want, floor=1e-9) <= 1e-12


def test_conv2d_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    x = T.Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
    b = T.Tensor(rng.standard_normal(3), requires_grad=True)
    probe = T.Tensor(rng.standard_normal((2, 3, 4, 4)))

    def loss_of(xv, wv, bv):
        return T.reduce_sum(T.mul(T.conv2d(xv, wv, bv, 1), probe))

    loss = loss_of(x, w, b)
    T.backward(loss)
    fd_x = T.fd_gradient(lambda t: loss_of(t, T.Tensor(w.data), T.Tensor(b.data)), x, 1e-6)
    fd_w = T.fd_gradient(lambda t: loss_of(T.Tensor(x.data), t, T.Tensor(b.data)), w, 1e-6)
    fd_b = T.fd_gradient(lambda t: loss_of(T.Tensor(x.data), T.Tensor(w.data), t), b, 1e-6)
    assert rel_err(x.grad, fd_x.data) <= 1e-5
    assert rel_err(w.grad, fd_w.data) <= 1e-5
    assert rel_err(b.grad, fd_b.data) <= 1e-5


def test_conv2d_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((1, 3, 3, 3))),
                 T.Tensor(np.ones(1)), 1)


def test_conv2d_kernel_larger_than_padded_input():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.ones((1, 1, 2, 2))), T.Tensor(np.ones((1, 1, 3, 3))),
                 T.Tensor(np.ones(1)), 0)


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    T.backward(T.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares_gives_2x():
    x = T.Tensor(np.arange(1.0, 7.0).reshape(2, 3), requires_grad=True)
    T.backward(T.reduce_sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=0, atol=0)


def test_backward_accumulates_once_per_use():
    x = T.Tensor([2.0], requires_grad=True)
    y = T.add(x, x)  # two uses of the same operand
    T.backward(T.reduce_sum(y))
    np.testing.assert_array_equal(x.grad, [2.0])


def test_backward_requires_scalar_loss():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, x))


def test_backward_twice_is_an_error():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.reduce_sum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(T.GraphError):
        T.backward(loss)


def test_backward_on_shared_consumed_subgraph_is_an_error():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.reduce_sum(y))
    with pytest.raises(T.GraphError):
        T.backward(T.reduce_mean(y))


def test_untracked_tensors_receive_no_gradient():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    c = T.Tensor([3.0, 4.0])
    T.backward(T.reduce_sum(T.mul(x, c)))
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, c.data)


# --------------------------------------------------------------------------
# fd_gradient
# --------------------------------------------------------------------------

def test_fd_gradient_of_sum_is_ones():
    x = T.Tensor(np.arange(4.0).reshape(2, 2))
    fd = T.fd_gradient(lambda t: T.reduce_sum(t), x, 1e-6)
    np.testing.assert_allclose(fd.data, np.ones((2, 2)), atol=1e-6)


def test_fd_gradient_of_square_at_3():
    fd = T.fd_gradient(lambda t: T.mul(t, t), T.Tensor([3.0]), 1e-6)
    assert abs(fd.item() - 6.0) <= 1e-6


def test_fd_gradient_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        T.fd_gradient(lambda t: T.reduce_sum(t), T.Tensor([1.0]), 0.0)


# --------------------------------------------------------------------------
# shape ops, embedding, misc
# --------------------------------------------------------------------------

def test_reshape_roundtrip_gradient():
    x = T.Tensor(np.arange(8.0).reshape(2, 4), requires_grad=True)
    y = T.reshape(x, (4, 2))
    T.backward(T.reduce_sum(T.mul(y, y)))
    np.testing.assert_allclose(x.grad, 2.0 * x.data)


def test_reshape_size_mismatch():
    with pytest.raises(T.ShapeError):
        T.reshape(T.Tensor(np.ones((2, 3))), (7,))


def test_transpose_gradient():
    x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    probe = np.arange(6.0).reshape(3, 2)
    T.backward(T.reduce_sum(T.mul(T.transpose(x), T.Tensor(probe))))
    np.testing.assert_array_equal(x.grad, probe.T)


def test_embedding_lookup_and_scatter_grad():
    table = T.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    ids = np.array([1, 1, 3])
    out = T.embedding(table, ids)
    np.testing.assert_array_equal(out.data, table.data[ids])
    T.backward(T.reduce_sum(out))
    want = np.zeros((4, 3))
    want[1] = 2.0
    want[3] = 1.0
    np.testing.assert_array_equal(table.grad, want)


def test_embedding_out_of_vocabulary():
    table = T.Tensor(np.ones((4, 3)))
    with pytest.raises(T.ShapeError):
        T.embedding(table, np.array([4]))


def test_rank_limit_enforced():
    with pytest.raises(T.ShapeError):
        T.Tensor(np.ones((2, 2, 2, 2, 2)))


def test_json_debug_dump():
    t = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    obj = json.loads(t.to_json())
    assert obj == {"shape": [2, 2], "data": [1.0, 2.0, 3.0, 4.0]}


def test_determinism_bit_identical():
    def build(seed):
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((3, 3, 3, 3)), requires_grad=True)
        y = T.conv2d(x, w, T.Tensor(np.zeros(3)), 1)
        loss = T.reduce_mean(T.mul(y, y))
        T.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = build(99)
    l2, gx2, gw2 = build(99)
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)
