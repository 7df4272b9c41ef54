import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hssn.exceptions import ContractError, DegenerateBatchError, DimensionError
from hssn.tensor import (
    Graph,
    RunningStats,
    Tensor,
    batchnorm,
    conv2d,
    dense,
    finite_diff_check,
    gram_matrix,
    maxpool2,
    no_grad,
    relu,
    zero_grad,
)

from oracles import conv2d_loops, dense_loops, gram_loops, maxpool2_loops


def T(a, grad=False):
    return Tensor(a, requires_grad=grad)


# conv2d ---------------------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(3, 5, 4))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c] = 1
    out = conv2d(T(x), T(w), T(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.astype(np.float32))


def test_conv_zero_weight_gives_zero(rng):
    out = conv2d(T(rng.normal(size=(2, 6, 6))), T(np.zeros((4, 2, 3, 3))), T(np.zeros(4)), 1, 1)
    assert not out.data.any()


def test_conv_matches_loops_2x3x5x5(rng):
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    out = conv2d(T(x), T(w), T(b))
    assert out.shape == (2, 4, 3, 3)
    for i in range(2):
        np.testing.assert_allclose(out.data[i], conv2d_loops(x[i], w, b), atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(
    c_in=st.integers(1, 3),
    c_out=st.integers(1, 3),
    h=st.integers(1, 8),
    w=st.integers(1, 8),
    k=st.sampled_from([1, 3, 5]),
    stride=st.integers(1, 3),
    padding=st.integers(0, 2),
    seed=st.integers(0, 2**16),
)
def test_conv_matches_loops_random_shapes(c_in, c_out, h, w, k, stride, padding, seed):
    if k > h + 2 * padding or k > w + 2 * padding:
        return
    r = np.random.default_rng(seed)
    x = r.normal(size=(c_in, h, w)).astype(np.float32)
    wt = r.normal(size=(c_out, c_in, k, k)).astype(np.float32)
    b = r.normal(size=c_out).astype(np.float32)
    out = conv2d(T(x), T(wt), T(b), stride, padding)
    np.testing.assert_allclose(out.data, conv2d_loops(x, wt, b, stride, padding), atol=1e-5)


def test_conv_output_size_formula():
    out = conv2d(T(np.ones((1, 7, 6))), T(np.ones((2, 1, 3, 3))), T(np.zeros(2)), stride=2, padding=1)
    assert out.shape == (2, (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(T(np.ones((2, 4, 4))), T(np.ones((1, 3, 3, 3))), T(np.zeros(1)))


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        conv2d(T(np.ones((1, 2, 2))), T(np.ones((1, 1, 3, 3))), T(np.zeros(1)))


# maxpool ----------------------------------------------------------------------------


def test_maxpool_constant():
    out = maxpool2(T(np.full((2, 4, 6), 2.5)))
    np.testing.assert_array_equal(out.data, np.full((2, 2, 3), 2.5, dtype=np.float32))


def test_maxpool_2x2():
    assert maxpool2(T([[[1, 2], [3, 4]]])).data.tolist() == [[[4.0]]]


def test_maxpool_matches_loops(rng):
    x = rng.normal(size=(3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(maxpool2(T(x)).data, maxpool2_loops(x).astype(np.float32))


def test_maxpool_odd_rejected():
    with pytest.raises(DimensionError):
        maxpool2(T(np.ones((1, 3, 4))))


def test_maxpool_tie_goes_to_first_in_row_major_order():
    x = T([[[5.0, 5.0], [5.0, 5.0]]], grad=True)
    maxpool2(x).sum().backward()
    assert x.grad.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


# batchnorm --------------------------------------------------------------------------


def test_batchnorm_constant_channels_normalise_to_zero():
    x = np.zeros((4, 3, 2, 2))
    x[:, 0], x[:, 1], x[:, 2] = 0.1, -7.3, 42.0
    out = batchnorm(T(x), T(np.ones(3)), T(np.zeros(3)), RunningStats.fresh(3))
    assert not out.data.any()


def test_batchnorm_gamma_zero_gives_beta(rng):
    beta = np.array([0.5, -1.0, 2.0])
    out = batchnorm(T(rng.normal(size=(4, 3, 2, 2))), T(np.zeros(3)), T(beta), RunningStats.fresh(3))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), (4, 3, 2, 2)).astype(np.float32))


def test_batchnorm_moments(rng):
    x = rng.normal(3.0, 5.0, size=(4, 3, 2, 2))
    out = batchnorm(T(x), T(np.ones(3)), T(np.zeros(3)), RunningStats.fresh(3)).data.astype(np.float64)
    for c in range(3):
        vals = out[:, c].ravel()
        # direct moment computation
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        assert abs(mean) < 1e-5
        assert abs(var - 1) < 1e-3


def test_batchnorm_running_stats_and_eval(rng):
    x = rng.normal(size=(5, 2, 3))
    stats = RunningStats.fresh(2)
    batchnorm(T(x), T(np.ones(2)), T(np.zeros(2)), stats, momentum=0.1)
    mean = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2))
    np.testing.assert_allclose(stats.mean, 0.1 * mean, rtol=1e-5)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * var, rtol=1e-5)
    before = (stats.mean.copy(), stats.var.copy())
    out = batchnorm(T(x[:1]), T(np.ones(2)), T(np.zeros(2)), stats, mode="eval")
    np.testing.assert_array_equal(stats.mean, before[0])
    expected = (x[:1] - stats.mean[None, :, None]) / np.sqrt(stats.var[None, :, None] + 1e-5)
    np.testing.assert_allclose(out.data, expected, rtol=1e-5, atol=1e-6)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        batchnorm(T(np.ones((1, 2, 2))), T(np.ones(2)), T(np.zeros(2)), RunningStats.fresh(2))


# gram --------------------------------------------------------------------------------


def test_gram_small():
    assert gram_matrix(T([[1, 1], [2, 2]])).data.tolist() == [[2, 4], [4, 8]]


def test_gram_zero():
    assert not gram_matrix(T(np.zeros((3, 4)))).data.any()


def test_gram_matches_loops(rng):
    f = rng.normal(size=(4, 9)).astype(np.float32)
    np.testing.assert_allclose(gram_matrix(T(f)).data, gram_loops(f), atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(c=st.integers(1, 8), m=st.integers(1, 8), batch=st.booleans(), seed=st.integers(0, 2**16))
def test_gram_exactly_symmetric_and_psd(c, m, batch, seed):
    r = np.random.default_rng(seed)
    f = r.normal(size=(2, c, m) if batch else (c, m)) * r.uniform(0.1, 10)
    g = gram_matrix(T(f)).data.astype(np.float64)
    np.testing.assert_array_equal(g, np.swapaxes(g, -1, -2))
    for gm in g.reshape(-1, c, c):
        v = r.normal(size=c)
        assert v @ gm @ v >= -1e-4 * (v @ v) * np.linalg.norm(gm)


# dense / relu --------------------------------------------------------------------------


def test_dense_identity(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(dense(T(x), T(np.eye(4)), T(np.zeros(4))).data, x.astype(np.float32))


def test_dense_zero_weight(rng):
    b = np.array([1.0, -2.0])
    out = dense(T(rng.normal(size=(3, 4))), T(np.zeros((2, 4))), T(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)).astype(np.float32))


def test_dense_matches_loops(rng):
    x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
    np.testing.assert_allclose(dense(T(x), T(w), T(b)).data, dense_loops(x, w, b), atol=1e-5)


def test_dense_mismatch():
    with pytest.raises(DimensionError):
        dense(T(np.ones((2, 3))), T(np.ones((4, 2))), T(np.zeros(4)))


def test_relu_values():
    assert relu(T([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_relu_all_negative_has_zero_grad():
    x = T([-1.0, -0.5, -3.0], grad=True)
    out = relu(x)
    out.sum().backward()
    assert not out.data.any() and not x.grad.any()


def test_relu_elementwise(rng):
    x = rng.normal(size=(3, 7)).astype(np.float32)
    expected = [[v if v > 0 else 0.0 for v in row] for row in x.tolist()]
    np.testing.assert_array_equal(relu(T(x)).data, np.array(expected, dtype=np.float32))


# tape ------------------------------------------------------------------------------------


def test_graph_order_and_single_visit():
    a = T([1.0, 2.0], grad=True)
    b = a * 3.0
    c = b + b
    d = (c * b).sum()
    nodes = Graph(d).nodes
    assert [n._order for n in nodes] == sorted(n._order for n in nodes)
    assert len(nodes) == len({id(n) for n in nodes}) == 4
    d.backward()
    # d = 2 * (3a)^2 summed -> 36 a
    np.testing.assert_allclose(a.grad, 36 * a.data)


def test_gradients_accumulate_until_cleared():
    a = T([1.0, -2.0], grad=True)
    (a * a).sum().backward()
    (a * a).sum().backward()
    np.testing.assert_allclose(a.grad, 4 * a.data)
    zero_grad([a])
    assert not a.grad.any()


def test_no_grad_records_nothing():
    a = T([1.0], grad=True)
    with no_grad():
        out = a * 2.0
    assert not out.requires_grad and out._backward is None


def test_forward_is_bitwise_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w, b = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)

    def run():
        h = relu(conv2d(T(x), T(w), T(b), 1, 1))
        h = batchnorm(maxpool2(h), T(np.ones(4)), T(np.zeros(4)), RunningStats.fresh(4))
        return gram_matrix(h.reshape(2, 4, 16)).data

    assert run().tobytes() == run().tobytes()


# finite differences -----------------------------------------------------------------------


def test_fd_quadratic():
    assert finite_diff_check(lambda t: (t * t).sum(), T([3.0]), eps=1e-3) < 1e-6


def test_fd_constant():
    assert finite_diff_check(lambda t: T(2.0), T([1.0, 2.0])) == 0.0


def test_fd_non_scalar_rejected():
    with pytest.raises(ContractError):
        finite_diff_check(lambda t: t * 2.0, T([1.0, 2.0]))


def test_fd_detects_wrong_gradient():
    def broken(t):
        out = Tensor._from_op((t.data**2).sum(), (t,), lambda g: None)
        return out

    x = T([1.0, 2.0])
    # tape never writes a gradient, so analytic is 0 vs numeric 2x
    assert finite_diff_check(broken, x) > 0.5
