import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check, numeric_grad, op_cases, relative_error
from lesionseg import tensor as T
from lesionseg.errors import ContractError, DimensionError, DomainError
from lesionseg.tensor import DiffTensor


def test_rank4_only():
    with pytest.raises(DimensionError):
        DiffTensor(np.zeros((3, 3)))


def test_conv_all_ones():
    out = T.conv2d(DiffTensor(np.ones((1, 1, 3, 3))), DiffTensor(np.ones((1, 1, 3, 3))), DiffTensor(np.zeros((1, 1, 1, 1))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5))
    out = T.conv2d(DiffTensor(x), DiffTensor(np.ones((1, 1, 1, 1))), DiffTensor(np.zeros((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("h,k,stride,pad", [(4, 3, 1, 1), (5, 3, 2, 1), (6, 2, 2, 0), (7, 3, 3, 2)])
def test_conv_output_size(h, k, stride, pad):
    x = DiffTensor(np.zeros((1, 2, h, h)))
    w = DiffTensor(np.zeros((3, 2, k, k)))
    out = T.conv2d(x, w, None, stride=stride, padding=pad)
    expect = (h + 2 * pad - k) // stride + 1
    assert out.shape == (1, 3, expect, expect)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal((1, 4, 1, 1))
    out = T.conv2d(DiffTensor(x), DiffTensor(w), DiffTensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[0, o, 0, 0]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(DimensionError, match="axis C"):
        T.conv2d(DiffTensor(np.zeros((1, 2, 4, 4))), DiffTensor(np.zeros((1, 3, 3, 3))))


def test_conv_fd_on_4x4_input():
    rng = np.random.default_rng(2)
    arrays = [rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((1, 2, 1, 1))]
    err = check(lambda t: T.conv2d(t[0], t[1], t[2], padding=1), arrays, rng.standard_normal((1, 2, 4, 4)))
    assert err < 1e-4


def test_sigmoid_values():
    assert T.sigmoid(DiffTensor.scalar(0.0)).item() == 0.5
    x = DiffTensor.param(np.full((1, 1, 1, 1), -50.0))
    y = T.sigmoid(x)
    assert 0.0 < y.item() < 1.0
    T.backward(y)
    assert np.isfinite(x.grad).all() and x.grad.item() > 0.0


def test_sigmoid_stays_open_interval_when_saturated():
    y = T.sigmoid(DiffTensor(np.array([-800.0, -40.0, 40.0, 800.0]).reshape(1, 1, 2, 2))).data
    assert np.all((y > 0.0) & (y < 1.0))


def test_sigmoid_gradient_closed_form():
    x = np.random.default_rng(3).standard_normal((2, 2, 3, 3)) * 3
    xt = DiffTensor.param(x)
    T.backward(T.sum(T.sigmoid(xt)))
    s = 1.0 / (1.0 + np.exp(-x))
    np.testing.assert_allclose(xt.grad, s * (1 - s), rtol=0, atol=1e-10)


def test_relu_values():
    out = T.relu(DiffTensor(np.array([-1.0, 2.0]).reshape(1, 1, 1, 2)))
    np.testing.assert_array_equal(out.data.ravel(), [0.0, 2.0])


def test_upsample_replicates():
    out = T.upsample_nearest_x2(DiffTensor(np.full((1, 1, 1, 1), 3.0)))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, 3.0)


def test_maxpool_routes_to_argmax():
    x = DiffTensor.param(np.array([[1.0, 5.0], [2.0, 0.0]]).reshape(1, 1, 2, 2))
    out = T.maxpool2x2(x)
    assert out.item() == 5.0
    T.backward(out)
    np.testing.assert_array_equal(x.grad.reshape(2, 2), [[0, 1], [0, 0]])


def test_maxpool_needs_even_size():
    with pytest.raises(DimensionError):
        T.maxpool2x2(DiffTensor(np.zeros((1, 1, 3, 4))))


def test_log_domain():
    with pytest.raises(DomainError):
        T.log(DiffTensor(np.array([1.0, 0.0]).reshape(1, 1, 1, 2)))


def test_mul_shape_mismatch_names_axes():
    with pytest.raises(DimensionError, match="H"):
        T.mul(DiffTensor(np.zeros((1, 1, 2, 2))), DiffTensor(np.zeros((1, 1, 3, 2))))


def test_div_zero_by_zero_convention():
    a = DiffTensor.param(np.zeros((1, 1, 1, 1)))
    b = DiffTensor.param(np.zeros((1, 1, 1, 1)))
    out = T.div(a, b, zero_by_zero=1.0)
    assert out.item() == 1.0
    T.backward(out)
    assert a.grad.item() == 0.0 and b.grad.item() == 0.0
    with pytest.raises(DomainError):
        T.div(DiffTensor.scalar(1.0), DiffTensor.scalar(0.0), zero_by_zero=1.0)


@pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0))))
def test_op_gradient_finite_difference(name):
    build, arrays, weight = op_cases(np.random.default_rng(11))[name]
    assert check(build, arrays, weight) < 1e-4


def test_backward_of_sum_is_ones():
    x = DiffTensor.param(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_of_sum_of_squares():
    data = np.random.default_rng(1).standard_normal((1, 2, 3, 3))
    x = DiffTensor.param(data)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * data)


def test_backward_composite_fd():
    rng = np.random.default_rng(4)
    arrays = [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((1, 3, 1, 1))]

    def build(t):
        return T.mean(T.sigmoid(T.relu(T.conv2d(t[0], t[1], t[2], padding=1))))

    assert check(build, arrays) < 1e-4


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(DiffTensor.param(np.zeros((1, 1, 2, 2))))


def test_backward_accumulates():
    x = DiffTensor.param(np.ones((1, 1, 2, 2)))
    y = T.sum(x)
    T.backward(y)
    T.backward(y)
    np.testing.assert_array_equal(x.grad, 2.0)
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, 0.0)


def test_unreachable_parameter_has_zero_grad():
    x = DiffTensor.param(np.ones((1, 1, 2, 2)))
    unused = DiffTensor.param(np.ones((1, 1, 2, 2)))
    T.backward(T.sum(x))
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_trace_is_topological():
    x = DiffTensor.param(np.ones((1, 1, 2, 2)))
    y = T.sum(T.mul(T.relu(x), T.sigmoid(x)))
    nodes = T.trace(y)
    pos = {n.node_id: i for i, n in enumerate(nodes)}
    for n in nodes:
        assert all(pos[i] < pos[n.node_id] for i in n.input_ids)
    assert nodes[-1].node_id == y.node_id


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))

    def run():
        return T.maxpool2x2(T.relu(T.conv2d(DiffTensor(x), DiffTensor(w), padding=1))).data

    assert run().tobytes() == run().tobytes()


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**32 - 1))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((1, 2, 4, 4))

    def grad_of(build):
        x = DiffTensor.param(data)
        T.backward(build(x))
        return x.grad

    def f(x):
        return T.sum(T.sigmoid(x))

    def g(x):
        return T.mean(T.mul(x, x))

    combined = grad_of(lambda x: T.add(T.affine(f(x), a, 0.0), T.affine(g(x), b, 0.0)))
    np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), rtol=1e-12, atol=1e-14)


def test_numeric_grad_oracle_on_known_function():
    x = np.array([1.0, -2.0, 0.5]).reshape(1, 1, 1, 3)
    g = numeric_grad(lambda arrs: float(np.sum(arrs[0] ** 3)), [x.copy()], 0)
    assert relative_error(g, 3 * x**2) < 1e-8
