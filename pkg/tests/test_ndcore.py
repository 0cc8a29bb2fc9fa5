import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmgreedy import ndcore as nd
from mmgreedy.ndcore import ShapeError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- oracles ---------------------------------------------------------------


def matmul_oracle(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv_oracle(x, w, stride, pad):
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for b in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                s += xp[b, c, i * stride + u, j * stride + v] * w[f, c, u, v]
                    out[b, f, i, j] = s
    return out


def ce_oracle(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


# -- elementwise -----------------------------------------------------------


def test_sigmoid_and_relu_points():
    assert nd.sigmoid(Tensor(0.0)).data == 0.5
    assert nd.relu(Tensor(-3.0)).data == 0.0
    assert nd.relu(Tensor(3.0)).data == 3.0
    assert nd.sigmoid(Tensor(math.log(3))).data == pytest.approx(0.75, abs=1e-15)


def test_elementwise_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        nd.elementwise("add", np.zeros(2), np.zeros(3))


def test_elementwise_scalar_operand_gradient():
    a, b = leaf([1.0, 2.0, 3.0]), leaf(2.0)
    nd.backward(nd.total(nd.elementwise("mul", a, b)))
    np.testing.assert_allclose(a.grad, [2, 2, 2])
    assert b.grad == pytest.approx(6.0)


def test_scale_kind():
    a = leaf([1.0, -2.0])
    out = nd.elementwise("scale", a, 3)
    nd.backward(nd.total(out))
    np.testing.assert_array_equal(out.data, [3.0, -6.0])
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])


def test_unknown_kind():
    with pytest.raises(ValueError):
        nd.elementwise("div", np.ones(2), np.ones(2))


# -- matmul ----------------------------------------------------------------


def test_matmul_examples():
    m = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(nd.matmul(np.eye(2), m).data, m)
    np.testing.assert_array_equal(nd.matmul([[1.0, 2]], [[3.0], [4]]).data, [[11.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(nd.matmul(a, b).data, matmul_oracle(a, b), atol=1e-12)


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        nd.matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- conv2d ----------------------------------------------------------------


def test_conv_identity_and_zero_kernel():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 1, 5, 5))
    np.testing.assert_array_equal(nd.conv2d(x, np.ones((1, 1, 1, 1))).data, x)
    np.testing.assert_array_equal(nd.conv2d(x, np.zeros((3, 1, 3, 3)), 1, 1).data, np.zeros((2, 3, 5, 5)))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_nested_loops(stride, pad):
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(nd.conv2d(x, w, stride, pad).data, conv_oracle(x, w, stride, pad), atol=1e-12)


def test_conv_output_extent():
    out = nd.conv2d(np.zeros((1, 1, 12, 12)), np.zeros((4, 1, 3, 3)), stride=2, padding=1)
    assert out.shape == (1, 4, 6, 6)


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        nd.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)), padding=1)


def test_conv_gradients_fd():
    def build(seed):
        rng = np.random.default_rng(seed)
        x, w = leaf(rng.normal(size=(2, 2, 5, 5))), leaf(rng.normal(size=(3, 2, 3, 3)))
        r = rng.normal(size=(2, 3, 3, 3))
        return [x, w], lambda: nd.total(nd.elementwise("mul", nd.conv2d(x, w, 2, 1), r))
    assert nd.grad_check(build, 0) < 1e-6


# -- pooling, concat, gating -----------------------------------------------


def test_gap_examples():
    assert nd.global_avg_pool(np.array([[1.0, 3], [5, 7]])[None], batched=False).data == pytest.approx([4.0])
    np.testing.assert_array_equal(nd.global_avg_pool(np.full((2, 3, 4, 4), 2.5)).data, np.full((2, 3), 2.5))
    v = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(nd.global_avg_pool(v).data, v)


def test_gap_channel_last_layout():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(2, 3, 4, 5))
    cl = nd.global_avg_pool(a.transpose(0, 2, 3, 1), channel_first=False).data
    np.testing.assert_allclose(cl, nd.global_avg_pool(a).data, atol=1e-14)


def test_gap_empty():
    with pytest.raises(ShapeError):
        nd.global_avg_pool(np.zeros((0, 3, 2, 2)))


def test_gap_gradient_is_uniform():
    a = leaf(np.ones((1, 2, 2, 2)))
    nd.backward(nd.total(nd.global_avg_pool(a)))
    np.testing.assert_array_equal(a.grad, np.full((1, 2, 2, 2), 0.25))


@settings(max_examples=30, deadline=None)
@given(arrays(float, (2, 3, 4, 4), elements=st.floats(-10, 10)),
       arrays(float, (2, 3, 4, 4), elements=st.floats(-10, 10)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_gap_linearity(A, B, alpha, beta):
    lhs = nd.global_avg_pool(alpha * A + beta * B).data
    rhs = alpha * nd.global_avg_pool(A).data + beta * nd.global_avg_pool(B).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_concat_examples_and_gradient():
    a, b = leaf([1.0, 2.0]), leaf([3.0])
    out = nd.concat_channels(a, b)
    np.testing.assert_array_equal(out.data, [1, 2, 3])
    nd.backward(nd.total(out))
    np.testing.assert_array_equal(a.grad, [1, 1])
    np.testing.assert_array_equal(b.grad, [1])
    np.testing.assert_array_equal(nd.concat_channels(np.zeros(0), [5.0]).data, [5.0])


def test_concat_batch_mismatch():
    with pytest.raises(ShapeError):
        nd.concat_channels(np.zeros((2, 3)), np.zeros((3, 1)))


def test_channel_scale_identity_is_exact():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 4, 5, 5))
    np.testing.assert_array_equal(nd.channel_scale(a, np.zeros(4)).data, a)
    np.testing.assert_array_equal(nd.channel_scale(a, np.zeros((3, 4))).data, a)


def test_channel_scale_examples():
    assert nd.channel_scale(np.array([4.0]), np.array([math.log(3)])).data[0] == pytest.approx(6.0, abs=1e-14)
    big = nd.channel_scale(np.ones((1, 1, 2, 2)), np.array([40.0])).data
    np.testing.assert_allclose(big, 2.0)


def test_channel_scale_mismatch():
    with pytest.raises(ShapeError):
        nd.channel_scale(np.zeros((1, 3, 2, 2)), np.zeros(4))


def test_channel_scale_gradients_fd():
    def build(seed):
        rng = np.random.default_rng(seed)
        a, w = leaf(rng.normal(size=(2, 3, 4, 4))), leaf(rng.normal(size=(2, 3)))
        r = rng.normal(size=(2, 3, 4, 4))
        return [a, w], lambda: nd.total(nd.elementwise("mul", nd.channel_scale(a, w), r))
    assert nd.grad_check(build, 1) < 1e-7


# -- cross-entropy ---------------------------------------------------------


def test_ce_uniform_and_saturated():
    assert nd.softmax_cross_entropy(np.zeros((3, 7)), [0, 3, 6]).data == pytest.approx(math.log(7), abs=1e-14)
    logits = np.zeros((1, 5))
    logits[0, 2] = 1e3
    assert nd.softmax_cross_entropy(logits, [2]).data == pytest.approx(0.0, abs=1e-12)


def test_ce_matches_logsumexp_oracle():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(3, 4)) * 5
    labels = [0, 3, 1]
    assert float(nd.softmax_cross_entropy(logits, labels).data) == pytest.approx(
        ce_oracle(logits.tolist(), labels), abs=1e-10)


def test_ce_gradient_closed_form():
    rng = np.random.default_rng(7)
    z = leaf(rng.normal(size=(4, 3)))
    y = np.array([0, 2, 1, 1])
    nd.backward(nd.softmax_cross_entropy(z, y))
    expected = nd.softmax_np(z.data) - np.eye(3)[y]
    np.testing.assert_allclose(z.grad, expected / 4, atol=1e-15)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        nd.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


# -- backward --------------------------------------------------------------


def test_backward_linear_and_quadratic():
    t = leaf([1.0, -2.0, 0.5])
    nd.backward(nd.total(t))
    np.testing.assert_array_equal(t.grad, np.ones(3))
    t = leaf([1.0, -2.0, 0.5])
    half_sq = nd.elementwise("scale", nd.total(nd.elementwise("mul", t, t)), 0.5)
    nd.backward(half_sq)
    np.testing.assert_array_equal(t.grad, t.data)


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        nd.backward(nd.relu(leaf([1.0, 2.0])))


def test_unreachable_leaf_has_no_gradient():
    a, b = leaf([1.0]), leaf([2.0])
    nd.backward(nd.total(a))
    assert b.grad is None  # None stands for a zero gradient everywhere in the package


def test_shared_subexpression_accumulates():
    a = leaf([3.0])
    s = nd.elementwise("add", a, a)
    nd.backward(nd.total(nd.elementwise("mul", s, a)))  # 2a^2
    np.testing.assert_allclose(a.grad, [12.0])


def test_no_grad_skips_graph():
    a = leaf([1.0])
    with nd.no_grad():
        out = nd.relu(a)
    assert not out.requires_grad and out._parents == ()


# -- batch norm ------------------------------------------------------------


def test_batch_norm_train_and_running_stats():
    rng = np.random.default_rng(8)
    x = rng.normal(loc=2.0, scale=3.0, size=(6, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    out = nd.batch_norm(Tensor(x), leaf(np.ones(2)), leaf(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    n = 6 * 9
    batch_var = x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * batch_var, atol=1e-12)


def test_batch_norm_gradients_fd():
    def build(seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng.normal(size=(4, 3, 3, 3)))
        g, b = leaf(rng.uniform(0.5, 1.5, 3)), leaf(rng.normal(size=3))
        r = rng.normal(size=(4, 3, 3, 3))
        rm, rv = np.zeros(3), np.ones(3)
        return [x, g, b], lambda: nd.total(nd.elementwise(
            "mul", nd.batch_norm(x, g, b, rm.copy(), rv.copy(), training=True), r))
    assert nd.grad_check(build, 2) < 1e-5


# -- grad_check ------------------------------------------------------------


def test_grad_check_linear_model():
    def build(seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 4))
        W, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3))
        y = rng.integers(0, 3, 5)
        return [W, b], lambda: nd.softmax_cross_entropy(nd.linear(Tensor(x), W, b), y)
    assert nd.grad_check(build, 3) < 1e-8


def _gate_net(seed, scale_rule=None):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 2, 6, 6)))
    k = leaf(rng.normal(size=(4, 2, 3, 3)) * 0.3)
    Wg = leaf(rng.normal(size=(4, 4)) * 0.3)
    Wh = leaf(rng.normal(size=(4, 5)) * 0.3)
    y = np.array([0, 4, 2])
    gate = scale_rule or nd.channel_scale

    def loss():
        a = nd.relu(nd.conv2d(x, k, 1, 1))
        w = nd.linear(nd.global_avg_pool(a), Wg)
        h = nd.global_avg_pool(gate(a, w))
        return nd.softmax_cross_entropy(nd.linear(h, Wh), y)
    return [k, Wg, Wh], loss


def test_grad_check_conv_gap_gate():
    assert nd.grad_check(_gate_net, 4) < 1e-4


def _broken_channel_scale(a, w):
    # forward is right; the backward drops the sigmoid derivative for the gate
    good = nd.channel_scale(a, w)
    fb = 2.0 * nd.sigmoid_np(w.data)[:, :, None, None]

    def bw(g):
        nd._accumulate(a, g * fb)
        nd._accumulate(w, np.sum(g * a.data, axis=(2, 3)) * 2.0)
    return nd._result(good.data, (a, w), bw)


def test_grad_check_negative_control():
    err = nd.grad_check(lambda s: _gate_net(s, _broken_channel_scale), 4)
    assert err > 1e-2


# -- misc ------------------------------------------------------------------


def test_group_sq_norm():
    assert nd.group_sq_norm([np.array([3.0, 4.0])]) == 25.0
    assert nd.group_sq_norm([[1.0], [2.0], [2.0]]) == 9.0
    assert nd.group_sq_norm([np.zeros((2, 2))]) == 0.0
    with pytest.raises(ValueError):
        nd.group_sq_norm([])


def test_rng_determinism():
    a = nd.make_rng(11).normal(size=5)
    b = nd.make_rng(11).normal(size=5)
    np.testing.assert_array_equal(a, b)
    t1 = nd.fan_in_uniform(nd.make_rng(3), (4, 4), 4)
    t2 = nd.fan_in_uniform(nd.make_rng(3), (4, 4), 4)
    np.testing.assert_array_equal(t1.data, t2.data)
    assert np.all(np.abs(t1.data) <= 0.5)
