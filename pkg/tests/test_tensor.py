import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_conv2d
from draco_dehaze.tensor import (
    ConfigurationError,
    ContractError,
    ConvSpec,
    DimensionError,
    Tensor,
    backward,
    concat_channels,
    conv2d,
    depthwise_conv2d,
    elementwise,
    grad_check,
    max_pool2x2,
    mean_all,
    mul,
    no_grad,
    pool,
    relu,
    scale,
    sigmoid,
    sum_all,
)


def _bias(c, value=0.0):
    return Tensor(np.full((1, c, 1, 1), value))


# ----------------------------------------------------------------------------
# conv2d
# ----------------------------------------------------------------------------

def test_conv2d_scalar_product():
    out = conv2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]), _bias(1), ConvSpec(1, 1, 1))
    assert out.item() == 6.0


def test_conv2d_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 1, 5, 7)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = conv2d(x, Tensor(k), _bias(1), ConvSpec(1, 1, 3))
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("dilation", [1, 2, 3])
def test_conv2d_matches_naive_loops(rng, dilation):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b.reshape(1, 3, 1, 1)), ConvSpec(2, 3, 3, dilation))
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, dilation), atol=1e-5)


def test_conv2d_shape_errors(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), _bias(1), ConvSpec(3, 1, 3))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((1, 2, 1, 1))), _bias(1), ConvSpec(2, 1, 3))
    with pytest.raises(ConfigurationError):
        ConvSpec(2, 2, 2)


@pytest.mark.parametrize("kernel,dilation", [(1, 1), (3, 1), (3, 2), (3, 3), (3, 5)])
def test_same_padding_preserves_extent(rng, kernel, dilation):
    x = Tensor(rng.standard_normal((1, 2, 7, 9)))
    w = Tensor(rng.standard_normal((4, 2, kernel, kernel)))
    out = conv2d(x, w, _bias(4), ConvSpec(2, 4, kernel, dilation))
    assert out.shape == (1, 4, 7, 9)


def test_conv2d_linearity(rng):
    x = rng.standard_normal((1, 3, 6, 6))
    y = rng.standard_normal((1, 3, 6, 6))
    w = Tensor(rng.standard_normal((2, 3, 3, 3)))
    spec = ConvSpec(3, 2, 3, 2)
    a, b = 0.7, -1.3
    lhs = conv2d(Tensor(a * x + b * y), w, _bias(2), spec).data
    rhs = a * conv2d(Tensor(x), w, _bias(2), spec).data + b * conv2d(Tensor(y), w, _bias(2), spec).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


# ----------------------------------------------------------------------------
# depthwise
# ----------------------------------------------------------------------------

def test_depthwise_counts_taps():
    out = depthwise_conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))),
                           _bias(1), ConvSpec(1, 1, 3))
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == out.data[0, 0, 2, 2] == 4.0
    assert out.data[0, 0, 0, 1] == 6.0


def test_depthwise_large_dilation_only_center_tap(rng):
    x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
    w = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    out = depthwise_conv2d(Tensor(x), Tensor(w), _bias(2), ConvSpec(2, 2, 3, 5))
    np.testing.assert_allclose(out.data, x * w[:, 0, 1, 1].reshape(1, 2, 1, 1), rtol=1e-6)


@pytest.mark.parametrize("dilation", [1, 2, 5])
def test_depthwise_single_channel_equals_conv2d(rng, dilation):
    x = Tensor(rng.standard_normal((2, 1, 6, 5)))
    w = Tensor(rng.standard_normal((1, 1, 3, 3)))
    b = _bias(1, 0.3)
    spec = ConvSpec(1, 1, 3, dilation)
    np.testing.assert_allclose(depthwise_conv2d(x, w, b, spec).data, conv2d(x, w, b, spec).data,
                               atol=1e-6)


def test_depthwise_channel_isolation(rng):
    x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
    w = Tensor(rng.standard_normal((4, 1, 3, 3)))
    spec = ConvSpec(4, 4, 3, 2)
    base = depthwise_conv2d(Tensor(x), w, _bias(4), spec).data
    bumped = x.copy()
    bumped[0, 2] += rng.standard_normal((6, 6)).astype(np.float32)
    out = depthwise_conv2d(Tensor(bumped), w, _bias(4), spec).data
    changed = np.abs(out - base).reshape(4, -1).max(axis=1) > 0
    assert changed.tolist() == [False, False, True, False]
    # zeroing channel c zeroes exactly channel c's contribution (bias 0)
    zeroed = x.copy()
    zeroed[0, 1] = 0
    out = depthwise_conv2d(Tensor(zeroed), w, _bias(4), spec).data
    assert np.all(out[0, 1] == 0)
    np.testing.assert_array_equal(out[0, [0, 2, 3]], base[0, [0, 2, 3]])


def test_depthwise_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        depthwise_conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))),
                         _bias(2), ConvSpec(2, 2, 3))


# ----------------------------------------------------------------------------
# pooling and elementwise
# ----------------------------------------------------------------------------

def test_global_avg_examples():
    assert pool(Tensor(np.ones((1, 1, 7, 7))), "global_avg").item() == 1.0
    assert pool(Tensor(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2)), "global_avg").item() == 2.5


def test_max_pool_matches_window_oracle(rng):
    x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
    expected = np.array([[x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(4)]
                         for i in range(4)])
    np.testing.assert_array_equal(pool(Tensor(x), "max2x2").data[0, 0], expected)


def test_max_pool_drops_odd_edge(rng):
    x = rng.standard_normal((1, 2, 5, 7))
    assert max_pool2x2(Tensor(x)).shape == (1, 2, 2, 3)
    with pytest.raises(DimensionError):
        max_pool2x2(Tensor(np.zeros((1, 1, 1, 4))))
    with pytest.raises(ConfigurationError):
        pool(Tensor(x), "median")


def test_elementwise_examples():
    assert relu(Tensor.scalar(-1.5)).item() == 0.0
    assert relu(Tensor.scalar(2.0)).item() == 2.0
    assert sigmoid(Tensor.scalar(0.0)).item() == 0.5
    a = Tensor(np.zeros((1, 2, 3, 3)))
    b = Tensor(np.ones((1, 3, 3, 3)))
    out = elementwise("concat_channels", a, b)
    assert out.shape == (1, 5, 3, 3)
    assert np.all(out.data[:, :2] == 0) and np.all(out.data[:, 2:] == 1)
    with pytest.raises(DimensionError):
        elementwise("add", a, b)
    with pytest.raises(DimensionError):
        elementwise("concat_channels", a, Tensor(np.zeros((1, 1, 2, 3))))


def test_sigmoid_extreme_inputs_finite():
    out = sigmoid(Tensor(np.array([-1e4, -50.0, 50.0, 1e4]).reshape(1, 1, 1, 4)))
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0, 0, 0] == 0.0 and out.data[0, 0, 0, 3] == 1.0


def test_tensor_must_be_rank4():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((3, 3)))


# ----------------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------------

def test_backward_linear():
    x = Tensor.scalar(0.7)
    x.requires_grad = True
    backward(sum_all(scale(x, 3.0)))
    assert x.grad.item() == pytest.approx(3.0)


def test_backward_inactive_relu_and_kink():
    for value in (-1.0, 0.0):
        x = Tensor.scalar(value)
        x.requires_grad = True
        backward(sum_all(relu(x)))
        assert x.grad.item() == 0.0


def test_backward_requires_scalar():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(relu(x))


def test_unreachable_leaf_gets_zero_grad():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    unused = Tensor(np.ones((1, 2, 1, 1)), requires_grad=True)
    unused.grad = np.full((1, 2, 1, 1), 5.0)
    backward(mean_all(x), [x, unused])
    np.testing.assert_array_equal(unused.grad, 0.0)
    np.testing.assert_allclose(x.grad, 0.25)


def test_shared_subexpression_accumulates():
    x = Tensor.scalar(2.0)
    x.requires_grad = True
    backward(sum_all(mul(x, x)))
    assert x.grad.item() == pytest.approx(4.0)


def test_no_grad_records_nothing():
    x = Tensor.scalar(1.0)
    x.requires_grad = True
    with no_grad():
        y = relu(x)
    assert not y.requires_grad and y._parents == ()


def _probe(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


@pytest.mark.parametrize("dilation", [1, 2, 5])
def test_grad_conv2d(rng, dilation):
    probe = _probe(rng, (2, 3, 6, 5))
    leaves = {"x": Tensor(rng.standard_normal((2, 2, 6, 5))),
              "w": Tensor(rng.standard_normal((3, 2, 3, 3))),
              "b": Tensor(rng.standard_normal((1, 3, 1, 1)))}
    report = grad_check(lambda x, w, b: sum_all(mul(conv2d(x, w, b, ConvSpec(2, 3, 3, dilation)), probe)),
                        leaves, 1e-4)
    assert report.passed, report


@pytest.mark.parametrize("dilation", [1, 3])
def test_grad_depthwise(rng, dilation):
    probe = _probe(rng, (2, 4, 5, 6))
    leaves = {"x": Tensor(rng.standard_normal((2, 4, 5, 6))),
              "w": Tensor(rng.standard_normal((4, 1, 3, 3))),
              "b": Tensor(rng.standard_normal((1, 4, 1, 1)))}
    report = grad_check(
        lambda x, w, b: sum_all(mul(depthwise_conv2d(x, w, b, ConvSpec(4, 4, 3, dilation)), probe)),
        leaves, 1e-4)
    assert report.passed, report


@pytest.mark.parametrize("kind", ["max2x2", "global_avg"])
def test_grad_pool(rng, kind):
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    probe_shape = (2, 3, 3, 3) if kind == "max2x2" else (2, 3, 1, 1)
    probe = _probe(rng, probe_shape)
    report = grad_check(lambda x: sum_all(mul(pool(x, kind), probe)), {"x": x}, 1e-4)
    assert report.passed, report


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "add", "mul", "concat_channels"])
def test_grad_elementwise(rng, kind):
    a = Tensor(rng.standard_normal((1, 2, 4, 4)))
    b = Tensor(rng.standard_normal((1, 2, 4, 4)))
    shape = (1, 4, 4, 4) if kind == "concat_channels" else (1, 2, 4, 4)
    probe = _probe(rng, shape)
    if kind in ("relu", "sigmoid"):
        report = grad_check(lambda a: sum_all(mul(elementwise(kind, a), probe)), {"a": a}, 1e-4)
    else:
        report = grad_check(lambda a, b: sum_all(mul(elementwise(kind, a, b), probe)),
                            {"a": a, "b": b}, 1e-4)
    assert report.passed, report


def test_grad_broadcast_add_and_div(rng):
    a = Tensor(rng.standard_normal((2, 3, 4, 4)))
    b = Tensor(rng.uniform(1.0, 2.0, (2, 3, 1, 1)))
    probe = _probe(rng, (2, 3, 4, 4))
    report = grad_check(lambda a, b: sum_all(mul((a + b) / b, probe)), {"a": a, "b": b}, 1e-4)
    assert report.passed, report


def test_grad_check_rejects_non_scalar(rng):
    with pytest.raises(ContractError):
        grad_check(lambda x: relu(x), {"x": Tensor(np.ones((1, 1, 2, 2)))})


def test_grad_check_reports_wrong_gradient(rng):
    # a deliberately broken op must fail the check
    from draco_dehaze.tensor import _make

    def bad_square(x):
        return _make(x.data ** 2, (x,), lambda g: (g * x.data,))

    x = Tensor(rng.uniform(1, 2, (1, 1, 2, 2)))
    report = grad_check(lambda x: sum_all(bad_square(x)), {"x": x}, 1e-4)
    assert not report.passed
    assert report.max_rel_error == pytest.approx(0.5, rel=1e-3)


def test_float32_forward_stays_float32(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    out = conv2d(x, Tensor(rng.standard_normal((2, 2, 3, 3))), _bias(2), ConvSpec(2, 2, 3))
    assert out.dtype == np.float32


# ----------------------------------------------------------------------------
# shape algebra
# ----------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 2), cin=st.integers(1, 4), cout=st.integers(1, 4),
    h=st.integers(1, 9), w=st.integers(1, 9),
    kd=st.sampled_from([(1, 1), (3, 1), (3, 2), (3, 3), (3, 5)]),
)
def test_shape_algebra(n, cin, cout, h, w, kd):
    k, d = kd
    x = Tensor(np.ones((n, cin, h, w)))
    assert conv2d(x, Tensor(np.ones((cout, cin, k, k))), _bias(cout),
                  ConvSpec(cin, cout, k, d)).shape == (n, cout, h, w)
    assert depthwise_conv2d(x, Tensor(np.ones((cin, 1, k, k))), _bias(cin),
                            ConvSpec(cin, cin, k, d)).shape == (n, cin, h, w)
    assert pool(x, "global_avg").shape == (n, cin, 1, 1)
    if h >= 2 and w >= 2:
        assert pool(x, "max2x2").shape == (n, cin, h // 2, w // 2)
    assert concat_channels([x, x]).shape == (n, 2 * cin, h, w)
    out = relu(x)
    assert out.shape == x.shape and np.all(np.isfinite(out.data))
