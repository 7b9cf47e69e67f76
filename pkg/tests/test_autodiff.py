import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metafit import autodiff as ad
from metafit.autodiff import Tensor, backward, gradcheck, no_grad
from metafit.errors import DomainError, NumericError, ShapeError, UsageError


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_square_gradient():
    x = leaf(3.0)
    g = backward(x * x, [x])[0]
    assert g.item() == 6.0


def test_second_derivative_of_cube():
    x = leaf(2.0)
    (g,) = backward(x ** 3, [x], higher_order=True).values()
    assert g.requires_grad
    (gg,) = backward(g, [x]).values()
    assert gg.item() == pytest.approx(12.0, abs=1e-12)


def test_first_order_result_is_off_graph():
    x = leaf(2.0)
    g = backward(x ** 3, [x])[0]
    assert not g.requires_grad


def test_tiny_sigmoid_mlp_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((5, 3)))
    point = {"w1": rng.standard_normal((3, 4)), "w2": rng.standard_normal((4, 2))}
    err = gradcheck(lambda p: ad.sigmoid(ad.sigmoid(x @ p["w1"]) @ p["w2"]).sum(), point)
    assert err < 1e-4


def test_gradcheck_quadratic_form():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 4))
    a = Tensor(a @ a.T)
    err = gradcheck(lambda p: (p["x"].reshape(1, 4) @ a @ p["x"].reshape(4, 1)).sum(), {"x": rng.standard_normal(4)})
    assert err < 1e-7


def test_gradcheck_constant_function_is_exact():
    assert gradcheck(lambda p: Tensor(3.0) + 0.0 * p["x"].sum(), {"x": np.ones(3)}) == 0.0


def test_gradcheck_catches_wrong_gradient(monkeypatch):
    orig = ad.Exp.backward
    monkeypatch.setattr(ad.Exp, "backward", staticmethod(lambda ctx, g: tuple(2.0 * t for t in orig(ctx, g))))
    assert gradcheck(lambda p: p["x"].exp().sum(), {"x": np.array([0.1, 0.5])}) > 0.4


def test_gradcheck_rejects_bad_step_and_nonfinite():
    with pytest.raises(UsageError):
        gradcheck(lambda p: p["x"].sum(), {"x": np.ones(2)}, step=0.0)
    with pytest.raises(NumericError):
        gradcheck(lambda p: p["x"].sum() * np.inf, {"x": np.ones(2)})


def test_relu_example():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_relu_gradient_at_kink_is_zero():
    x = leaf([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(backward(ad.relu(x).sum(), [x])[0].data, [0.0, 0.0, 1.0])


def test_conv_with_zero_kernel_is_zero():
    x = np.random.default_rng(3).standard_normal((2, 3, 6, 5))
    out = ad.conv2d(x, np.zeros((4, 3, 3, 3)), np.zeros(4))
    assert out.shape == (2, 4, 6, 5)
    assert not out.data.any()


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(4)
    x, w, b = rng.standard_normal((2, 2, 4, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 3, 4, 5))
    for n in range(2):
        for f in range(3):
            for i in range(4):
                for j in range(5):
                    want[n, f, i, j] = (padded[n, :, i:i + 3, j:j + 3] * w[f]).sum() + b[f]
    np.testing.assert_allclose(ad.conv2d(x, w, b).data, want, rtol=1e-12, atol=1e-12)


def test_maxpool_values_and_odd_crop():
    x = np.arange(2 * 5 * 5, dtype=float).reshape(1, 2, 5, 5)
    out = ad.maxpool2d(x).data
    assert out.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(out[0, 0], [[6, 8], [16, 18]])


def test_batchnorm_output_moments():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 3, 4, 4)) * np.array([1.0, 5.0, 0.2]).reshape(1, 3, 1, 1) + 7.0
    out = ad.batchnorm2d(x, np.ones(3), np.zeros(3)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    var = out.var(axis=(0, 2, 3))
    xv = x.var(axis=(0, 2, 3))
    # the stabilizer shrinks the variance to var / (var + eps)
    np.testing.assert_allclose(var, xv / (xv + ad.BN_EPS), rtol=1e-10)
    assert np.all(np.abs(var - 1.0) <= 1e-5 / xv.min() + 1e-12)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    z = np.random.default_rng(6).standard_normal((4, 3))
    p = ad.softmax(z).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(ad.softmax(z + 100.0).data, p, rtol=1e-12)


def test_broadcasting_gradients_sum_back():
    a, b = leaf(np.ones((3, 2))), leaf([2.0, 3.0])
    g = backward((a * b).sum(), {"a": a, "b": b})
    np.testing.assert_array_equal(g["a"].data, np.tile([2.0, 3.0], (3, 1)))
    np.testing.assert_array_equal(g["b"].data, [3.0, 3.0])


def test_clamp_gradient_gates():
    x = leaf([0.1, 0.5, 2.0])
    g = backward(ad.clamp_min(x, 0.3).sum(), [x])[0]
    np.testing.assert_array_equal(g.data, [0.0, 1.0, 1.0])


def test_shared_subexpression_accumulates():
    x = leaf(1.5)
    y = x * x
    g = backward(y + y * x, [x])[0]
    assert g.item() == pytest.approx(2 * 1.5 + 3 * 1.5 ** 2)


def test_root_off_graph_gives_zeros():
    x = leaf([1.0, 2.0])
    with no_grad():
        root = (x * x).sum()
    g = backward(root, [x])[0]
    np.testing.assert_array_equal(g.data, [0.0, 0.0])


def test_non_scalar_root_and_detached_parameter():
    x = leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        backward(x * 2.0, [x])
    with pytest.raises(UsageError):
        backward((x * 2.0).sum(), [Tensor([1.0])])


def test_domain_and_shape_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        Tensor([-2.0]) ** 0.5
    with pytest.raises(DomainError):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(ShapeError):
        ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((3, 1, 3, 3)), np.ones(3))


def test_determinism():
    rng = np.random.default_rng(7)
    point = {"w": rng.standard_normal((3, 3))}
    x = Tensor(rng.standard_normal((4, 3)))

    def grads():
        w = leaf(point["w"])
        return backward(ad.softmax(x @ w).log().sum(), [w])[0].data

    assert np.array_equal(grads(), grads())


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    x=st.floats(-2, 2),
)
def test_linearity_of_backward(a, b, x):
    t = leaf(x)
    f, g = t.sigmoid(), t.exp()
    combined = backward(f * a + g * b, [t])[0].item()
    separate = a * backward(f, [t])[0].item() + b * backward(g, [t])[0].item()
    assert combined == pytest.approx(separate, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(0.2, 3.0))
def test_second_derivatives_of_compositions(x):
    # d2/dx2 log(sigmoid(x) * x**2) against the closed form
    t = leaf(x)
    (g,) = backward((t.sigmoid() * t ** 2).log(), [t], higher_order=True).values()
    (gg,) = backward(g, [t]).values()
    s = 1.0 / (1.0 + np.exp(-x))
    want = -s * (1.0 - s) - 2.0 / x ** 2
    assert gg.item() == pytest.approx(want, rel=1e-6, abs=1e-9)


def test_third_order():
    x = leaf(1.3)
    (g1,) = backward(x.exp() * x, [x], higher_order=True).values()
    (g2,) = backward(g1, [x], higher_order=True).values()
    (g3,) = backward(g2, [x]).values()
    assert g3.item() == pytest.approx(np.exp(1.3) * (1.3 + 3.0), rel=1e-12)


def test_higher_order_through_conv_bn_pool():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((2, 1, 4, 4)))
    point = {"w": rng.standard_normal((2, 1, 3, 3)) * 0.5}

    def fn(p):
        w = p["w"]
        out = ad.maxpool2d(ad.relu(ad.batchnorm2d(ad.conv2d(x, w, np.zeros(2)), np.ones(2), np.zeros(2))))
        g = backward((out * out).sum(), {"w": w}, higher_order=True)["w"]
        return (g * g).sum()

    assert gradcheck(fn, point) < 1e-4
