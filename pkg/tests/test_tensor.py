import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ramcxr import tensor as T
from ramcxr.gradcheck import check, numeric_grad, rel_error
from ramcxr.tensor import ConfigError, DimensionError, GraphError, Tensor

TOL_OP = 1e-6


def leaf(rng, *shape, name=None, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, name=name)


def assert_gradcheck(build, params, tol=TOL_OP):
    errors = check(build, params)
    assert max(errors.values()) < tol, errors


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_hand_case():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, b.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 5, 4, name="a"), leaf(rng, 4, 3, name="b")
    w = rng.normal(size=(5, 3))
    assert_gradcheck(lambda: T.sum(T.mul(T.matmul(a, b), Tensor(w))), [a, b])


def test_matmul_backward_rule():
    rng = np.random.default_rng(1)
    a, b = leaf(rng, 3, 2), leaf(rng, 2, 4)
    w = rng.normal(size=(3, 4))
    T.backward(T.sum(T.mul(T.matmul(a, b), Tensor(w))))
    np.testing.assert_allclose(a.grad, w @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ w, rtol=1e-14)


def test_linear_and_bias_gradcheck():
    rng = np.random.default_rng(2)
    x, w, b = leaf(rng, 3, 4, name="x"), leaf(rng, 4, 2, name="w"), leaf(rng, 2, name="b")
    assert_gradcheck(lambda: T.sum(T.tanh(T.linear(x, w, b))), [x, w, b])
    with pytest.raises(DimensionError):
        T.linear(x, w, Tensor(np.zeros(3)))


# ---------------------------------------------------------------- conv2d


def conv_reference(x, k, b, padding):
    """Six nested loops, cross-correlation."""
    c_in, h, w = x.shape
    c_out, _, kk, _ = k.shape
    p = kk // 2 if padding == "same" else 0
    xp = np.zeros((c_in, h + 2 * p, w + 2 * p))
    xp[:, p : p + h, p : p + w] = x
    ho, wo = h + 2 * p - kk + 1, w + 2 * p - kk + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for di in range(kk):
                        for dj in range(kk):
                            acc += k[o, c, di, dj] * xp[c, i + di, j + dj]
                out[o, i, j] = acc
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(3).normal(size=(1, 6, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)), "same")
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_kernels_give_bias():
    x = np.random.default_rng(4).normal(size=(2, 5, 5))
    out = T.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor([1.0, -2.0, 0.5]), "same")
    np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([1.0, -2.0, 0.5])[:, None, None], (3, 5, 5)))


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_matches_loop_reference(padding):
    rng = np.random.default_rng(5)
    x, k, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), padding)
    np.testing.assert_allclose(out.data, conv_reference(x, k, b, padding), atol=1e-12, rtol=0)


def test_conv_batch_equals_per_sample():
    rng = np.random.default_rng(6)
    x, k, b = rng.normal(size=(3, 2, 6, 6)), rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
    batched = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], T.conv2d(Tensor(x[i]), Tensor(k), Tensor(b)).data, atol=1e-13)


def test_conv_errors():
    with pytest.raises(ConfigError):
        T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_gradcheck(padding):
    rng = np.random.default_rng(7)
    x, k, b = leaf(rng, 2, 5, 5, name="x"), leaf(rng, 3, 2, 3, 3, name="k"), leaf(rng, 3, name="b")
    shape = (3, 5, 5) if padding == "same" else (3, 3, 3)
    w = Tensor(rng.normal(size=shape))
    assert_gradcheck(lambda: T.sum(T.mul(T.conv2d(x, k, b, padding), w)), [x, k, b])


# --------------------------------------------------------------- maxpool


def test_maxpool_hand_case_routes_to_argmax():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]), requires_grad=True)
    out, _ = T.maxpool2d(x)
    assert out.data.item() == 4.0
    T.backward(T.sum(out))
    np.testing.assert_array_equal(x.grad, [[[0.0, 0.0], [0.0, 1.0]]])


def test_maxpool_ties_go_to_first_position():
    x = Tensor(np.full((1, 2, 2), 0.7), requires_grad=True)
    out, _ = T.maxpool2d(x)
    assert out.data.item() == 0.7
    T.backward(T.sum(out))
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_maxpool_matches_brute_force():
    x = np.random.default_rng(8).normal(size=(3, 8, 8))
    out, _ = T.maxpool2d(Tensor(x))
    ref = np.array([[[x[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max() for j in range(4)] for i in range(4)]
                    for c in range(3)])
    np.testing.assert_array_equal(out.data, ref)


def test_maxpool_odd_extent_rejected():
    with pytest.raises(DimensionError):
        T.maxpool2d(Tensor(np.ones((1, 3, 4))))


def test_maxpool_and_upsample_gradcheck():
    rng = np.random.default_rng(9)
    x = leaf(rng, 2, 4, 4, name="x")
    w = Tensor(rng.normal(size=(2, 4, 4)))
    assert_gradcheck(lambda: T.sum(T.mul(T.upsample2(T.maxpool2d(x)[0]), w)), [x])


@given(arrays(np.float64, (2, 4, 6), elements=st.floats(-5, 5)))
def test_maxpool_constant_and_bounds(x):
    out, _ = T.maxpool2d(Tensor(x))
    assert out.shape == (2, 2, 3)
    assert out.data.max() == x.max()
    c, _ = T.maxpool2d(Tensor(np.full((1, 4, 4), 2.5)))
    assert np.all(c.data == 2.5)


# ----------------------------------------------------------- elementwise


def test_activation_fixed_points():
    assert T.tanh(Tensor([0.0])).data[0] == 0.0
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    x = Tensor([-3.0], requires_grad=True)
    y = T.relu(x)
    assert y.data[0] == 0.0
    T.backward(T.sum(y))
    assert x.grad[0] == 0.0


def test_sigmoid_is_stable_at_extremes():
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


@pytest.mark.parametrize("op", ["relu", "tanh", "sigmoid"])
def test_unary_gradcheck(op):
    rng = np.random.default_rng(10)
    # keep relu inputs away from the kink where central differences are not valid
    x = Tensor(rng.choice([-1, 1], size=7) * rng.uniform(0.1, 2.0, size=7), requires_grad=True, name="x")
    w = Tensor(rng.normal(size=7))
    assert_gradcheck(lambda: T.sum(T.mul(T.elementwise(op, x), w)), [x])


@pytest.mark.parametrize("op", ["add", "mul", "sub"])
def test_binary_gradcheck(op):
    rng = np.random.default_rng(11)
    a, b = leaf(rng, 3, 2, name="a"), leaf(rng, 3, 2, name="b")
    w = Tensor(rng.normal(size=(3, 2)))
    assert_gradcheck(lambda: T.sum(T.mul(T.elementwise(op, a, b), w)), [a, b])


def test_scale_concat_reshape_mean_dot_gradcheck():
    rng = np.random.default_rng(12)
    a, b = leaf(rng, 2, 3, name="a"), leaf(rng, 2, 2, name="b")
    w = Tensor(rng.normal(size=10))

    def build():
        c = T.reshape(T.concat([T.scale(a, 1.5), b], axis=1), (10,))
        return T.add(T.dot(c, w), T.mean(T.tanh(c)))

    assert_gradcheck(build, [a, b])


def test_binary_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 2))), Tensor(np.ones(4)))


# -------------------------------------------------------- cross entropy


def test_cross_entropy_uniform_and_stable():
    assert T.softmax_cross_entropy(Tensor([0.3, 0.3]), 1).item() == pytest.approx(np.log(2), abs=1e-12)
    big = T.softmax_cross_entropy(Tensor([1000.0, 0.0]), 0)
    assert np.isfinite(big.item()) and big.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient_identity():
    rng = np.random.default_rng(13)
    logits = leaf(rng, 5, lo=-3, hi=3)
    T.backward(T.softmax_cross_entropy(logits, 2))
    p = np.exp(logits.data - logits.data.max())
    p /= p.sum()
    np.testing.assert_allclose(logits.grad, p - np.eye(5)[2], atol=1e-10)


def test_cross_entropy_batch_and_errors():
    rng = np.random.default_rng(14)
    z = rng.normal(size=(4, 3))
    batch = T.softmax_cross_entropy(Tensor(z), np.array([0, 2, 1, 2])).data
    single = [T.softmax_cross_entropy(Tensor(z[i]), k).item() for i, k in enumerate([0, 2, 1, 2])]
    np.testing.assert_allclose(batch, single, rtol=1e-14)
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor([0.0, 1.0]), 2)


# -------------------------------------------------------- gaussian log pdf


def test_gaussian_log_pdf_mode_and_symmetry():
    m = Tensor([0.2, -0.4])
    assert T.gaussian_log_pdf(m.data, m, 1.0).item() == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    d = np.array([0.05, -0.13])
    up = T.gaussian_log_pdf(m.data + d, m, 0.3).item()
    down = T.gaussian_log_pdf(m.data - d, m, 0.3).item()
    assert up == down


def test_gaussian_log_pdf_matches_density():
    x, m, s = np.array([0.1, 0.3]), np.array([-0.2, 0.25]), 0.1
    dens = np.exp(-((x - m) ** 2).sum() / (2 * s * s)) / (2 * np.pi * s * s)
    assert T.gaussian_log_pdf(x, Tensor(m), s).item() == pytest.approx(np.log(dens), rel=1e-12)


def test_gaussian_log_pdf_gradcheck_and_errors():
    rng = np.random.default_rng(15)
    mean = leaf(rng, 2, name="mean")
    x = rng.uniform(-1, 1, size=2)
    assert_gradcheck(lambda: T.gaussian_log_pdf(x, mean, 0.1), [mean])
    with pytest.raises(ConfigError):
        T.gaussian_log_pdf(x, mean, 0.0)


# -------------------------------------------------------------- backward


def test_backward_linear_and_quadratic():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones(3))
    T.backward(T.dot(x, x))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.scale(x, 2.0))
    loss = T.sum(x)
    T.backward(loss)
    with pytest.raises(GraphError):
        T.backward(loss)
    with pytest.raises(GraphError):
        T.backward(T.sum(T.detach(x)))


def test_backward_accumulates_when_asked():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.dot(x, x))
    T.backward(T.sum(x), accumulate=True)
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones(2))


def test_shared_subexpression_visited_once():
    x = Tensor([0.5, -1.5], requires_grad=True)
    y = T.tanh(x)
    T.backward(T.sum(T.add(T.mul(y, y), y)))
    t = np.tanh(x.data)
    np.testing.assert_allclose(x.grad, (2 * t + 1) * (1 - t * t), rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), arrays(np.float64, 4, elements=st.floats(-10, 10)))
def test_backward_is_linear(a, b, xv):
    def grad_of(fn):
        x = Tensor(xv.copy(), requires_grad=True)
        T.backward(fn(x))
        return x.grad

    l1 = lambda x: T.sum(T.tanh(x))  # noqa: E731
    l2 = lambda x: T.dot(x, x)  # noqa: E731
    combined = grad_of(lambda x: T.add(T.scale(l1(x), a), T.scale(l2(x), b)))
    np.testing.assert_allclose(combined, a * grad_of(l1) + b * grad_of(l2), rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-10, 10)))
def test_outputs_and_grads_finite_on_bounded_inputs(xv):
    x = Tensor(xv, requires_grad=True)
    w = Tensor(np.ones((3, 2)))
    out = T.softmax_cross_entropy(T.sigmoid(T.matmul(T.tanh(x), w)), np.array([0, 1]))
    T.backward(T.sum(out))
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(x.grad))


def test_nonfinite_values_are_rejected():
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        T.scale(Tensor([1e308]), 10.0)


# ------------------------------------------------------------- optimizer


def test_sgd_plain_step_and_fixed_point():
    p = Tensor([1.0], requires_grad=True)
    v = [np.zeros(1)]
    T.sgd_momentum_step([p], [np.array([2.0])], lr=0.1, momentum=0.0, velocity=v)
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)
    q = Tensor([0.3, -0.2])
    T.sgd_momentum_step([q], [np.zeros(2)], 0.1, 0.9, [np.zeros(2)])
    np.testing.assert_array_equal(q.data, [0.3, -0.2])


def heavy_ball_reference(p0, lr, momentum, steps):
    """Scalar recurrence for f(p) = p^2, written out by hand."""
    p, v = p0, 0.0
    for _ in range(steps):
        v = momentum * v + 2.0 * p
        p = p - lr * v
    return p


def test_sgd_converges_on_quadratic_bowl():
    p = Tensor([1.0], requires_grad=True)
    opt = T.SGDMomentum([p], lr=0.1, momentum=0.9)
    for _ in range(100):
        opt.zero_grad()
        T.backward(T.dot(p, p))
        opt.step()
    assert p.data[0] == heavy_ball_reference(1.0, 0.1, 0.9, 100)
    # the iteration contracts by sqrt(0.9) per step, so 100 steps leave |p| near 3e-3;
    # 1e-3 is reached a few dozen steps later
    assert abs(p.data[0]) < 5e-3
    assert abs(heavy_ball_reference(1.0, 0.1, 0.9, 150)) < 1e-3


def test_sgd_shape_mismatch():
    with pytest.raises(DimensionError):
        T.sgd_momentum_step([Tensor(np.ones(2))], [np.ones(3)], 0.1, 0.0, [np.zeros(2)])


# ---------------------------------------------------------- the oracle


def test_finite_difference_oracle_on_known_function():
    x = Tensor(np.array([0.3, -0.7]))
    num = numeric_grad(lambda: float(np.sin(x.data).sum()), x)
    np.testing.assert_allclose(num, np.cos(x.data), atol=1e-9)
    assert rel_error(np.zeros(2), np.zeros(2)) == 0.0
