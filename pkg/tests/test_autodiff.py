import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import Polynomial
from scipy import special

from collapsed_ns import autodiff as ad
from collapsed_ns.errors import InvalidDirection, NonFiniteDerivative


def central_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def central_hessian(f, x, h=1e-4):
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h
            ej[j] = h
            H[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


UNARY = [
    (ad.exp, np.exp, 0.3),
    (ad.log, np.log, 1.7),
    (ad.sqrt, np.sqrt, 2.2),
    (ad.tanh, np.tanh, 0.4),
    (ad.logistic, special.expit, -0.6),
    (ad.lgamma, special.gammaln, 3.3),
    (lambda x: ad.power(x, 2.5), lambda x: x ** 2.5, 1.4),
    (lambda x: 1.0 / x, lambda x: 1.0 / x, 0.8),
]


@pytest.mark.parametrize("fj,fn,x0", UNARY)
def test_unary_derivatives_match_finite_differences(fj, fn, x0):
    c = ad.directional_taylor(lambda x: fj(x[..., 0]), [x0], [1.0], 4)
    assert c[0] == pytest.approx(fn(x0), rel=1e-14)
    h = 1e-3
    # five-point stencils for the first two derivatives
    d1 = (fn(x0 - 2 * h) - 8 * fn(x0 - h) + 8 * fn(x0 + h) - fn(x0 + 2 * h)) / (12 * h)
    d2 = (-fn(x0 - 2 * h) + 16 * fn(x0 - h) - 30 * fn(x0) + 16 * fn(x0 + h) - fn(x0 + 2 * h)) / (12 * h * h)
    assert c[1] == pytest.approx(d1, rel=1e-8)
    assert 2 * c[2] == pytest.approx(d2, rel=1e-6)


def test_exp_taylor_series_is_exact():
    c = ad.directional_taylor(lambda x: ad.exp(x[..., 0]), [0.0], [1.0], 4)
    np.testing.assert_allclose(c, [1, 1, 1 / 2, 1 / 6, 1 / 24], rtol=1e-15)


def test_log_taylor_series_is_exact():
    c = ad.directional_taylor(lambda x: ad.log(x[..., 0]), [1.0], [1.0], 4)
    np.testing.assert_allclose(c, [0, 1, -1 / 2, 1 / 3, -1 / 4], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(coef=st.lists(st.floats(-3, 3), min_size=6, max_size=6),
       x=st.lists(st.floats(-2, 2), min_size=2, max_size=2),
       angle=st.floats(0, 2 * np.pi))
def test_directional_taylor_exact_on_quartic_polynomials(coef, x, angle):
    a = np.asarray(coef)

    def f(z):
        z0, z1 = z[..., 0], z[..., 1]
        return (a[0] + a[1] * z0 + a[2] * z0 * z1 + a[3] * z1 * z1 * z1
                + a[4] * z0 * z0 * z1 * z1 + a[5] * z0 * z0 * z0 * z0)

    v = np.array([np.cos(angle), np.sin(angle)])
    v /= np.linalg.norm(v)
    got = ad.directional_taylor(f, x, v, 4)
    p0 = Polynomial([x[0], v[0]])
    p1 = Polynomial([x[1], v[1]])
    ref = (a[0] + a[1] * p0 + a[2] * p0 * p1 + a[3] * p1 ** 3 + a[4] * p0 ** 2 * p1 ** 2
           + a[5] * p0 ** 4)
    want = np.zeros(5)
    want[:ref.coef.size] = ref.coef
    np.testing.assert_allclose(got, want, atol=1e-12 * (1 + np.abs(want).max()))


def test_directional_taylor_rejects_non_unit_direction():
    with pytest.raises(InvalidDirection):
        ad.directional_taylor(lambda x: x[..., 0], [0.0, 0.0], [1.0, 1.0], 2)


@pytest.mark.parametrize("order", [0, 5])
def test_directional_taylor_rejects_bad_order(order):
    with pytest.raises(ValueError):
        ad.directional_taylor(lambda x: x[..., 0], [0.0], [1.0], order)


def rosen(x):
    x0, x1, x2 = x[..., 0], x[..., 1], x[..., 2]
    return 100 * (x1 - x0 * x0) ** 2 + (1 - x0) ** 2 + ad.exp(0.3 * x2) * ad.log(1.0 + x0 * x0)


def rosen_np(x):
    return 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2 + np.exp(0.3 * x[2]) * np.log1p(x[0] ** 2)


def test_gradient_hvp_and_dense_hessian_agree_with_finite_differences():
    x = np.array([0.4, -0.7, 1.1])
    g = ad.gradient(rosen, x)
    np.testing.assert_allclose(g, central_grad(rosen_np, x), rtol=1e-7)
    H = ad.hessian_dense(rosen, x)
    np.testing.assert_allclose(H, central_hessian(rosen_np, x), rtol=1e-5, atol=1e-5)
    np.testing.assert_array_equal(H, H.T)
    v = np.array([0.2, 1.0, -0.5])
    np.testing.assert_allclose(ad.hvp(rosen, x, v), H @ v, rtol=1e-12)


def test_batched_gradient_matches_rowwise():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(7, 3))
    G = ad.gradient(rosen, X)
    for i in range(7):
        np.testing.assert_allclose(G[i], ad.gradient(rosen, X[i]), rtol=1e-14)


def test_dense_hessian_chunking_does_not_change_result():
    x = np.array([0.4, -0.7, 1.1])
    np.testing.assert_array_equal(ad.hessian_dense(rosen, x, max_elements=10),
                                  ad.hessian_dense(rosen, x))


def test_matvec_and_sum_follow_numpy():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))

    def f(z):
        w = ad.matvec(A, z)
        return ad.sum(w * w, axis=-1)

    x = rng.normal(size=4)
    np.testing.assert_allclose(ad.gradient(f, x), 2 * A.T @ (A @ x), rtol=1e-13)
    np.testing.assert_allclose(ad.hessian_dense(f, x), 2 * A.T @ A, rtol=1e-12)


def test_non_finite_derivative_raises():
    with pytest.raises(NonFiniteDerivative):
        ad.gradient(lambda x: ad.log(x[..., 0]), [-1.0])
    with np.errstate(invalid="ignore"):
        val, _ = ad.value_and_gradient(lambda x: ad.log(x[..., 0]), [-1.0], check=False)
    assert np.isnan(val)
