import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xrl import autodiff as ad
from xrl.autodiff import Var

FIRST_ORDER = 1e-6
SECOND_ORDER = 1e-4

finite = st.floats(-2.0, 2.0, allow_nan=False, width=64)


def weighted(f, shape, seed=0):
    """Scalarise f with fixed random weights so every output entry contributes."""
    w = np.random.default_rng(seed).standard_normal(shape)
    return lambda x: ad.sum_(ad.mul(f(x), Var(w)))


UNARY = {
    "exp": ad.exp,
    # shifted so gradients stay O(1) on [-2, 2], where central differences resolve them
    "log": lambda x: ad.log(ad.add(x, 3.0)),
    "neg": ad.neg,
    "sigmoid": lambda x: ad.sigmoid(x, 2.0),
    "softplus": lambda x: ad.softplus(x, 3.0),
    "square": lambda x: ad.mul(x, x),
    "div": lambda x: ad.div(1.0, ad.add(x, 3.0)),
    "scale": lambda x: ad.scale(x, -1.7),
    "log_softmax": lambda x: ad.log_softmax(x, axis=-1),
    "logsumexp": lambda x: ad.logsumexp(x, axis=0, keepdims=True),
    "transpose": lambda x: ad.mul(ad.transpose(x), ad.transpose(x)),
    "reshape": lambda x: ad.exp(ad.reshape(x, (-1,))),
    "mean_axis": lambda x: ad.mean(ad.mul(x, x), axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=finite))
def test_unary_primitives_match_finite_differences(name, x):
    f = UNARY[name]
    out_shape = f(Var(x)).shape
    assert ad.finite_diff_check(weighted(f, out_shape), x) < FIRST_ORDER


@settings(max_examples=15, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=finite), y=arrays(np.float64, (4,), elements=finite))
def test_broadcast_binary_ops(x, y):
    for op in (ad.add, ad.sub, ad.mul):
        assert ad.finite_diff_check(weighted(lambda a: op(a, Var(y)), (3, 4)), x) < FIRST_ORDER
        assert ad.finite_diff_check(weighted(lambda b: op(Var(x), b), (3, 4)), y) < FIRST_ORDER


def test_matmul_both_arguments():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
    assert ad.finite_diff_check(weighted(lambda v: ad.matmul(v, Var(b)), (3, 2)), a) < FIRST_ORDER
    assert ad.finite_diff_check(weighted(lambda v: ad.matmul(Var(a), v), (3, 2)), b) < FIRST_ORDER


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_gradients(stride, padding):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = ad.conv2d(Var(x), Var(w), stride, padding).shape
    assert ad.finite_diff_check(weighted(lambda v: ad.conv2d(v, Var(w), stride, padding), out), x) < FIRST_ORDER
    assert ad.finite_diff_check(weighted(lambda v: ad.conv2d(Var(x), v, stride, padding), out), w) < FIRST_ORDER


def test_conv2d_against_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    got = ad.conv2d(Var(x), Var(w), 1, 1).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 2, 5, 5))
    for o in range(2):
        for i in range(5):
            for j in range(5):
                want[0, o, i, j] = (xp[0, :, i : i + 3, j : j + 3] * w[o]).sum()
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("pool", [ad.avg_pool2d, ad.sum_pool2d, ad.max_pool2d])
def test_pooling_gradients(pool):
    x = np.random.default_rng(4).standard_normal((2, 2, 5, 6))  # odd side exercises the floor crop
    out = pool(Var(x), 2).shape
    assert out == (2, 2, 2, 3)
    assert ad.finite_diff_check(weighted(lambda v: pool(v, 2), out), x) < FIRST_ORDER


def test_max_pool_ties_pick_first_index():
    x = Var(np.ones((1, 1, 2, 2)), requires_grad=True)
    (g,) = ad.grad(ad.sum_(ad.max_pool2d(x, 2)), [x])
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


HVP_CASES = {
    "softplus_quadratic": (lambda x: ad.sum_(ad.mul(ad.softplus(x, 2.0), ad.softplus(x, 1.0))), (3, 4)),
    "logsumexp": (lambda x: ad.sum_(ad.logsumexp(x, axis=1)), (3, 4)),
    "sigmoid_div": (lambda x: ad.sum_(ad.div(ad.sigmoid(x), ad.add(ad.mul(x, x), 1.0))), (5,)),
    "conv_softplus": (lambda x: ad.sum_(ad.softplus(ad.conv2d(
        x, Var(np.random.default_rng(5).standard_normal((2, 1, 3, 3))), 1, 1))), (1, 1, 4, 4)),
    "pool_chain": (lambda x: ad.sum_(ad.exp(ad.scale(ad.avg_pool2d(ad.mul(x, x), 2), 0.3))), (1, 2, 4, 4)),
    "maxpool": (lambda x: ad.sum_(ad.mul(ad.max_pool2d(x, 2), ad.max_pool2d(x, 2))), (1, 1, 4, 4)),
}


@pytest.mark.parametrize("name", sorted(HVP_CASES))
def test_double_backprop_hvp(name):
    f, shape = HVP_CASES[name]
    rng = np.random.default_rng(6)
    assert ad.hvp_check(f, rng.standard_normal(shape), rng.standard_normal(shape)) < SECOND_ORDER


def test_third_derivative_of_exp():
    x = Var(np.array(0.7), requires_grad=True)
    (g1,) = ad.grad(ad.exp(x), [x], create_graph=True)
    (g2,) = ad.grad(g1, [x], create_graph=True)
    (g3,) = ad.grad(g2, [x])
    assert g3 == pytest.approx(np.exp(0.7), rel=1e-14)


def test_guided_softplus_forward_and_backward():
    x = Var(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    y = ad.guided_softplus(x, 2.0)
    np.testing.assert_allclose(y.value, ad.softplus(Var(x.value), 2.0).value)
    g_out = np.array([1.0, -1.0, 3.0])
    (g,) = ad.grad(ad.sum_(ad.mul(y, Var(g_out))), [x])
    want = np.maximum(g_out, 0) / (1 + np.exp(-2.0 * x.value))
    np.testing.assert_allclose(g, want, rtol=1e-14)


def test_softplus_is_overflow_safe():
    x = Var(np.array([-800.0, 0.0, 800.0]), requires_grad=True)
    y = ad.softplus(x, 1.0)
    assert np.all(np.isfinite(y.value))
    assert y.value[2] == 800.0
    (g,) = ad.grad(ad.sum_(y), [x])
    np.testing.assert_allclose(g, [0.0, 0.5, 1.0], atol=1e-300)


def test_sign_is_not_differentiable():
    x = Var(np.array([1.0, -2.0]), requires_grad=True)
    with pytest.raises(ad.NonDifferentiableError):
        ad.grad(ad.sum_(ad.sign(x)), [x])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Var(np.ones((2, 3))), Var(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.add(Var(np.ones(3)), Var(np.ones(4)))


def test_grad_requires_scalar_output():
    x = Var(np.ones(3), requires_grad=True)
    with pytest.raises(ad.AutodiffError):
        ad.grad(ad.exp(x), [x])


def test_unreachable_input_gets_zeros():
    x = Var(np.ones(3), requires_grad=True)
    y = Var(np.ones((2, 2)), requires_grad=True)
    gx, gy = ad.grad(ad.sum_(ad.exp(x)), [x, y])
    np.testing.assert_array_equal(gy, np.zeros((2, 2)))
    np.testing.assert_allclose(gx, np.e)


def test_no_grad_records_nothing():
    x = Var(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad and y.parents == ()
    assert ad.is_grad_enabled()


@settings(max_examples=30, deadline=None)
@given(x=arrays(np.float64, (4,), elements=finite), c=st.floats(-3, 3))
def test_gradient_is_linear_in_output_scale(x, c):
    """grad(c * f) == c * grad(f), a linearity property of reverse mode."""
    v = Var(x, requires_grad=True)
    (g1,) = ad.grad(ad.sum_(ad.softplus(v)), [v])
    (g2,) = ad.grad(ad.scale(ad.sum_(ad.softplus(v)), c), [v])
    np.testing.assert_allclose(g2, c * g1, rtol=1e-12, atol=1e-15)


def test_diamond_graph_accumulates():
    x = Var(np.array(1.5), requires_grad=True)
    a = ad.mul(x, x)
    y = ad.add(ad.mul(a, x), a)  # x^3 + x^2
    (g,) = ad.grad(y, [x])
    assert g == pytest.approx(3 * 1.5 ** 2 + 2 * 1.5, rel=1e-15)


def test_deep_chain_has_no_recursion_limit():
    x = Var(np.array(0.1), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ad.add(y, 0.0)
    (g,) = ad.grad(y, [x])
    assert g == 1.0
