import numpy as np
import pytest

from dflift import autodiff as ad


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


def test_quadratic_gradient_is_identity_map():
    x = np.array([1.0, -2.0, 3.0])
    g = ad.gradient(lambda p: ad.mul(0.5, ad.vdot(p, p)), x)
    np.testing.assert_array_equal(g, x)


def test_constant_loss_zero_gradient():
    x = np.array([1.0, 2.0])
    g = ad.gradient(lambda p: ad.constant(3.0), x)
    np.testing.assert_array_equal(g, np.zeros(2))


def test_grad_of_leaf_wrt_itself():
    p = ad.leaf(np.array(2.0))
    (g,) = ad.grad(p, [p])
    assert g.data == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_composite_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    b = rng.normal(size=4)

    def fn_np(x):
        h = np.tanh(A @ x + b)
        s = 1.0 / (1.0 + np.exp(-h))
        return float(np.sum(s * x) + np.sum(np.maximum(x, 0.0) ** 2))

    def fn_t(p):
        h = ad.tanh(ad.add(ad.reshape(ad.matmul(ad.constant(A), ad.reshape(p, (4, 1))), (4,)), b))
        s = ad.sigmoid(h)
        return ad.add(ad.vdot(s, p), ad.sum_(ad.power(ad.relu(p), 2.0)))

    x = rng.normal(size=4) + 0.05  # keep away from the relu kink
    g = ad.gradient(fn_t, x)
    assert rel_err(g, central_diff(fn_np, x)) < 1e-7


def test_broadcasting_gradients():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 3))

    def fn(p):
        return ad.sum_(ad.mul(ad.constant(X), ad.add(X, p)))  # p broadcasts over rows

    b = rng.normal(size=3)
    g = ad.gradient(fn, b)
    np.testing.assert_allclose(g, X.sum(axis=0), rtol=1e-12)


def test_softmax_rows_sum_to_one_and_shift_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 4)) * 10
    s = ad.softmax(ad.constant(x)).data
    np.testing.assert_allclose(s.sum(axis=1), np.ones(6), atol=1e-12)
    s2 = ad.softmax(ad.constant(x + 123.0)).data
    np.testing.assert_allclose(s, s2, atol=1e-12)


def test_softmax_gradient_matches_fd():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 4))

    def fn_t(p):
        return ad.sum_(ad.mul(ad.softmax(ad.reshape(p, (3, 4))), w))

    def fn_np(x):
        z = x.reshape(3, 4)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return float(np.sum(e / e.sum(axis=1, keepdims=True) * w))

    x = rng.normal(size=12)
    assert rel_err(ad.gradient(fn_t, x), central_diff(fn_np, x)) < 1e-7


def test_hvp_quadratic_exact():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 5))
    A = (A + A.T) / 2

    def fn(p):
        col = ad.reshape(p, (5, 1))
        return ad.mul(0.5, ad.sum_(ad.mul(col, ad.matmul(ad.constant(A), col))))

    x = rng.normal(size=5)
    v = rng.normal(size=5)
    hv = ad.hessian_vector_product(fn, x, v)
    np.testing.assert_allclose(hv, A @ v, atol=1e-12)


def test_hvp_zero_vector():
    x = np.array([1.0, 2.0])
    hv = ad.hessian_vector_product(lambda p: ad.vdot(p, p), x, np.zeros(2))
    np.testing.assert_array_equal(hv, np.zeros(2))


@pytest.mark.parametrize("seed", range(3))
def test_hvp_matches_fd_of_gradient(seed):
    rng = np.random.default_rng(seed + 10)
    A = rng.normal(size=(4, 6))

    def fn(p):
        h = ad.tanh(ad.reshape(ad.matmul(ad.constant(A), ad.reshape(p, (6, 1))), (4,)))
        return ad.sum_(ad.power(h, 2.0))

    x = rng.normal(size=6)
    v = rng.normal(size=6)
    hv = ad.hessian_vector_product(fn, x, v)
    h = 1e-5
    fd = (ad.gradient(fn, x + h * v) - ad.gradient(fn, x - h * v)) / (2 * h)
    assert rel_err(hv, fd) < 1e-3


def test_hvp_symmetry():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(3, 5))

    def fn(p):
        h = ad.sigmoid(ad.reshape(ad.matmul(ad.constant(A), ad.reshape(p, (5, 1))), (3,)))
        return ad.sum_(ad.power(h, 3.0))

    x = rng.normal(size=5)
    op = ad.hvp_operator(fn, x)
    for _ in range(5):
        u, v = rng.normal(size=5), rng.normal(size=5)
        assert abs(np.dot(u, op(v)) - np.dot(v, op(u))) < 1e-8


def test_mixed_vjp_bilinear_form():
    rng = np.random.default_rng(8)
    phi = rng.normal(size=4)
    theta = rng.normal(size=4)
    v = rng.normal(size=4)
    out = ad.mixed_vjp(lambda p, t: ad.vdot(p, t), phi, theta, v)
    np.testing.assert_allclose(out, v, atol=1e-12)


def test_mixed_vjp_independent_loss_is_zero():
    phi = np.ones(3)
    theta = np.ones(2)
    out = ad.mixed_vjp(lambda p, t: ad.vdot(t, t), phi, theta, np.ones(2))
    np.testing.assert_array_equal(out, np.zeros(3))


def test_mixed_vjp_matches_fd():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(3, 4))

    def fn(p, t):
        gate = ad.sigmoid(ad.reshape(ad.matmul(ad.constant(A), ad.reshape(p, (4, 1))), (3,)))
        return ad.vdot(gate, ad.power(ad.reshape(t, (3,)), 2.0))

    phi = rng.normal(size=4)
    theta = rng.normal(size=3)
    v = rng.normal(size=3)
    got = ad.mixed_vjp(fn, phi, theta, v)
    # finite differences of <v, grad_theta fn> in phi
    h = 1e-6

    def inner(ph):
        gt = ad.gradient(lambda t: fn(ad.constant(ph), t), theta)
        return float(np.dot(v, gt))

    fd = np.zeros_like(phi)
    for i in range(phi.size):
        pp, pm = phi.copy(), phi.copy()
        pp[i] += h
        pm[i] -= h
        fd[i] = (inner(pp) - inner(pm)) / (2 * h)
    assert rel_err(got, fd) < 1e-3


def test_determinism_bitwise():
    rng = np.random.default_rng(11)
    A = rng.normal(size=(4, 4))

    def fn(p):
        return ad.sum_(ad.tanh(ad.matmul(ad.constant(A), ad.reshape(p, (4, 1)))))

    x = rng.normal(size=4)
    v = rng.normal(size=4)
    g1, g2 = ad.gradient(fn, x), ad.gradient(fn, x)
    assert np.array_equal(g1, g2)
    h1 = ad.hessian_vector_product(fn, x, v)
    h2 = ad.hessian_vector_product(fn, x, v)
    assert np.array_equal(h1, h2)


def test_no_grad_blocks_recording():
    p = ad.leaf(np.array([1.0, 2.0]))
    with ad.no_grad():
        out = ad.sum_(ad.mul(p, p))
    assert not out.requires_grad


def test_take_scatter_roundtrip_gradient():
    def fn(p):
        m = ad.reshape(p, (2, 3))
        return ad.sum_(ad.power(m[:, 1:], 2.0))

    x = np.arange(6, dtype=float)
    g = ad.gradient(fn, x)
    expected = 2 * x * np.array([0, 1, 1, 0, 1, 1], dtype=float)
    np.testing.assert_allclose(g, expected, atol=1e-12)
