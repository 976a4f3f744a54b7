import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protovae import numerics as nx
from protovae.errors import DomainError, ShapeError

from conftest import central_difference, max_rel_error


def naive_conv2d(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


def gradcheck(build, arrays, step=1e-5):
    """Compare tape gradients of scalar ``build(*tensors)`` against central differences."""
    with nx.precision(np.float64):
        tensors = [nx.Tensor(a, requires_grad=True) for a in arrays]
        build(*tensors).backward()
        analytic = [t.grad for t in tensors]

        def f():
            with nx.no_grad():
                return build(*[nx.Tensor(a) for a in arrays]).item()

        numeric = central_difference(f, arrays, step)
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))


# -- conv2d ---------------------------------------------------------------------


def test_conv2d_sum_of_ones():
    out = nx.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 4))
    out = nx.conv2d(x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_naive_loops(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = nx.conv2d(x, w, b, stride=2, padding=1)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, 2, 1), atol=1e-6)


def test_conv2d_channel_mismatch_names_dimension():
    with pytest.raises(ShapeError) as err:
        nx.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
    assert err.value.dim == 1


# -- conv_transpose2d -------------------------------------------------------------


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    w = rng.normal(size=(1, 1, 3, 3))
    y = rng.normal(size=(1, 1, 2, 2))
    cx = nx.conv2d(x, w, stride=2, padding=1).data
    cty = nx.conv_transpose2d(y, w, stride=2, padding=1, output_padding=1).data
    assert cty.shape == x.shape
    assert abs(np.sum(cx * y) - np.sum(x * cty)) < 1e-5


@pytest.mark.parametrize("stride,padding,size", [(1, 0, 5), (2, 1, 7), (2, 1, 8), (3, 2, 9)])
def test_adjoint_identity_multichannel(rng, stride, padding, size):
    x = rng.normal(size=(2, 3, size, size))
    w = rng.normal(size=(4, 3, 3, 3))
    cx = nx.conv2d(x, w, stride=stride, padding=padding).data
    y = rng.normal(size=cx.shape)
    op = size - nx.conv_transpose_output_size(cx.shape[2], 3, stride, padding)
    cty = nx.conv_transpose2d(y, w, stride=stride, padding=padding, output_padding=op).data
    assert cty.shape == x.shape
    np.testing.assert_allclose(np.sum(cx * y), np.sum(x * cty), rtol=1e-10)


def test_conv_transpose_scaling_kernel(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    out = nx.conv_transpose2d(x, np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_allclose(out.data, 2 * x)


def test_conv_transpose_upsampling_shape():
    x = np.ones((1, 1, 2, 2))
    assert nx.conv_transpose2d(x, np.ones((1, 1, 2, 2)), stride=2).shape == (1, 1, 4, 4)
    out = nx.conv_transpose2d(x, np.ones((1, 1, 3, 3)), stride=2, padding=1, output_padding=1)
    assert out.shape == (1, 1, 4, 4)
    assert nx.conv_transpose_output_size(2, 3, 2, 1, 1) == 4


# -- linear -----------------------------------------------------------------------


def test_linear_identity(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(nx.linear(x, np.eye(4), np.zeros(4)).data, x)


def test_linear_hand_arithmetic():
    out = nx.linear(np.array([1.0, 1.0]), np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [3.0, 7.0])


def test_linear_weight_gradient_is_outer_product(rng):
    x = rng.normal(size=(1, 3))
    with nx.precision(np.float64):
        w = nx.parameter(rng.normal(size=(2, 3)))
        nx.linear(x, w).sum().backward()
    np.testing.assert_allclose(w.grad, np.outer(np.ones(2), x[0]))
    err = gradcheck(lambda w: nx.linear(x, w).sum(), [rng.normal(size=(2, 3))])
    assert err < 1e-6


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.linear(np.ones((2, 3)), np.ones((4, 2)))


# -- elementwise --------------------------------------------------------------------


def test_relu_and_tanh_values():
    np.testing.assert_array_equal(nx.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
    assert nx.tanh(np.array(0.0)).item() == 0.0


def test_log_derivative_at_two():
    with nx.precision(np.float64):
        x = nx.parameter(np.array(2.0))
        nx.log(x).backward()
    assert x.grad == pytest.approx(0.5)
    (fd,) = central_difference(lambda: np.log(arr[()]), [arr := np.array(2.0)])
    assert fd == pytest.approx(0.5, rel=1e-8)


def test_log_domain_error():
    with pytest.raises(DomainError):
        nx.log(np.array([1.0, 0.0]))


def test_log1p_tiny_argument_and_domain():
    assert nx.log1p(np.array([1e-30])).item() == 1e-30
    with pytest.raises(DomainError):
        nx.log1p(np.array([-1.0]))


def test_leaky_relu_slope():
    out = nx.leaky_relu(np.array([-2.0, 3.0]), 0.01).data
    np.testing.assert_allclose(out, [-0.02, 3.0])


# -- backward -----------------------------------------------------------------------


def test_square_gradient():
    x = nx.parameter(np.array(3.0))
    nx.square(x).backward()
    assert x.grad == 6.0


def test_constant_has_zero_gradient():
    x = nx.parameter(np.array([1.0, -2.0]))
    (x * 0.0 + 5.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_requires_scalar():
    x = nx.parameter(np.ones(3))
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_graph_consumed_once():
    x = nx.parameter(np.array(2.0))
    y = x * x
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()


def test_gradients_match_leaf_shapes(rng):
    w = nx.parameter(rng.normal(size=(2, 1, 3, 3)))
    b = nx.parameter(np.zeros(2))
    nx.conv2d(rng.normal(size=(1, 1, 5, 5)), w, b, padding=1).sum().backward()
    assert w.grad.shape == w.shape and b.grad.shape == b.shape


# -- avg_pool2d -------------------------------------------------------------------------


def test_avg_pool_values():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert nx.avg_pool2d(x, 2, 2).item() == 2.5
    const = nx.avg_pool2d(np.full((1, 2, 4, 4), 7.0), 2, 2).data
    np.testing.assert_array_equal(const, np.full((1, 2, 2, 2), 7.0))


def test_avg_pool_backward_distributes_equally():
    x = nx.parameter(np.ones((1, 1, 4, 4)))
    nx.avg_pool2d(x, 2, 2).sum().backward()
    np.testing.assert_allclose(x.grad, np.full((1, 1, 4, 4), 0.25))


# -- adjoint correctness on randomized shapes --------------------------------------------


def _fd_case(draw_seed, op):
    r = np.random.default_rng(draw_seed)
    n = int(r.integers(1, 3))
    c = int(r.integers(1, 3))
    h = int(r.integers(4, 7))
    if op == "conv2d":
        stride, pad = int(r.integers(1, 3)), int(r.integers(0, 2))
        o = int(r.integers(1, 3))
        args = [r.normal(size=(n, c, h, h)), r.normal(size=(o, c, 3, 3)), r.normal(size=o)]
        proj = r.normal(size=nx.conv2d(*args, stride=stride, padding=pad).shape)
        return args, lambda x, w, b: (nx.conv2d(x, w, b, stride, pad) * proj).sum()
    if op == "conv_transpose2d":
        stride, pad = int(r.integers(1, 3)), int(r.integers(0, 2))
        o = int(r.integers(1, 3))
        op_pad = int(r.integers(0, stride))
        args = [r.normal(size=(n, c, 3, 3)), r.normal(size=(c, o, 3, 3)), r.normal(size=o)]
        shape = nx.conv_transpose2d(*args, stride=stride, padding=pad, output_padding=op_pad).shape
        proj = r.normal(size=shape)
        return args, lambda x, w, b: (nx.conv_transpose2d(x, w, b, stride, pad, op_pad) * proj).sum()
    if op == "avg_pool2d":
        args = [r.normal(size=(n, c, h, h))]
        proj = r.normal(size=nx.avg_pool2d(args[0], 2, 2).shape)
        return args, lambda x: (nx.avg_pool2d(x, 2, 2) * proj).sum()
    if op == "linear":
        args = [r.normal(size=(n, 4)), r.normal(size=(3, 4)), r.normal(size=3)]
        proj = r.normal(size=(n, 3))
        return args, lambda x, w, b: (nx.linear(x, w, b) * proj).sum()
    if op == "elementwise":
        args = [r.normal(size=(n, 5)), r.uniform(0.5, 2.0, size=(n, 5))]

        def f(a, b):
            y = nx.tanh(a) * nx.exp(b) - nx.square(a) / b + nx.log(b) + nx.log1p(b) + nx.leaky_relu(a, 0.1)
            return (nx.relu(y + 3.0) * nx.softmax(a)).sum()

        return args, f
    if op == "sqdist":
        args = [r.normal(size=(n, 4)), r.normal(size=(3, 4))]
        proj = r.normal(size=(n, 3))
        return args, lambda z, p: (nx.pairwise_sqdist(z, p) * proj).sum()
    if op == "matmul":
        args = [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3))]
        return args, lambda a, b: nx.square(nx.matmul(a, b) @ nx.swapaxes(b, -1, -2)).mean()
    raise AssertionError(op)


@pytest.mark.parametrize(
    "op",
    ["conv2d", "conv_transpose2d", "avg_pool2d", "linear", "elementwise", "sqdist", "matmul"],
)
@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_adjoints_match_finite_differences(op, seed):
    arrays, build = _fd_case(seed, op)
    assert gradcheck(build, arrays) < 1e-4


# -- determinism and replay -----------------------------------------------------------------


def _small_net(rng_seed):
    r = np.random.default_rng(rng_seed)
    w1 = nx.parameter(r.normal(size=(4, 1, 3, 3)).astype(np.float32))
    w2 = nx.parameter(r.normal(size=(3, 16)).astype(np.float32))
    x = r.normal(size=(2, 1, 8, 8)).astype(np.float32)
    return x, w1, w2


def _run(rng_seed):
    x, w1, w2 = _small_net(rng_seed)
    with nx.Tape() as tape:
        h = nx.leaky_relu(nx.conv2d(x, w1, stride=2, padding=1))
        h = nx.avg_pool2d(h, 2, 2).reshape(2, -1)
        loss = nx.square(nx.linear(h, w2)).sum()
    loss.backward()
    return tape, loss, w1.grad, w2.grad


def test_determinism_bit_identical():
    _, l1, g1a, g1b = _run(5)
    _, l2, g2a, g2b = _run(5)
    assert l1.data.tobytes() == l2.data.tobytes()
    assert g1a.tobytes() == g2a.tobytes() and g1b.tobytes() == g2b.tobytes()


def test_tape_replay_reproduces_forward():
    tape, loss, _, _ = _run(9)
    env = tape.replay()
    assert len(tape) >= 5
    for rec in tape:
        assert np.ascontiguousarray(env[id(rec.output)]).tobytes() == np.ascontiguousarray(rec.output.data).tobytes(), rec.op


def test_no_grad_builds_no_graph():
    w = nx.parameter(np.ones(3))
    with nx.no_grad():
        y = (w * 2.0).sum()
    assert not y.requires_grad


def test_precision_switch():
    with nx.precision(np.float64):
        assert nx.Tensor([1.0]).dtype == np.float64
    assert nx.Tensor([1.0]).dtype == np.float32
