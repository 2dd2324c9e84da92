import math

import numpy as np
import pytest

from kinetic_deeponet import autodiff as ad
from kinetic_deeponet.quadrature import gauss_legendre_slab


def _grad(fn, x):
    p = ad.Tensor(x, requires_grad=True)
    return ad.backward(fn(p), [p])[0]


def test_sum_gradient_is_ones():
    np.testing.assert_array_equal(_grad(ad.tsum, np.arange(6.0).reshape(2, 3)), np.ones((2, 3)))


def test_square_gradient():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(_grad(lambda p: ad.tsum(p * p), x), 2 * x)


def test_tanh_gradient():
    x = np.linspace(-2, 2, 7)
    np.testing.assert_allclose(_grad(lambda p: ad.tsum(ad.tanh(p)), x), 1 - np.tanh(x) ** 2, rtol=1e-14)


def test_matmul_gradient(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    pa, pb = ad.Tensor(a, requires_grad=True), ad.Tensor(b, requires_grad=True)
    ga, gb = ad.backward(ad.tsum(pa @ pb), [pa, pb])
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.T)
    np.testing.assert_allclose(gb, a.T @ np.ones((3, 2)))


def test_shared_subexpression_accumulates():
    # x used twice: d/dx (x + x) = 2
    np.testing.assert_allclose(_grad(lambda p: ad.tsum(p + p), np.ones(3)), 2 * np.ones(3))


def test_unconnected_param_gets_zero():
    p = ad.Tensor(np.ones(2), requires_grad=True)
    q = ad.Tensor(np.ones(3), requires_grad=True)
    gp, gq = ad.backward(ad.tsum(p), [p, q])
    np.testing.assert_array_equal(gq, np.zeros(3))


def test_orthonormalize_one_and_mu():
    g = gauss_legendre_slab(10)
    B = np.stack([np.ones(10), g.points])
    Q = ad.orthonormalize_weighted(B, g.weights, pinned_row=0).value
    np.testing.assert_allclose(Q[0], 1 / math.sqrt(2), atol=1e-15)
    np.testing.assert_allclose(Q[1], math.sqrt(1.5) * g.points, atol=1e-14)


def test_orthonormalize_pinned_row_only_scaled(rng):
    g = gauss_legendre_slab(20)
    B = rng.normal(size=(5, 20))
    Q = ad.orthonormalize_weighted(B, g.weights, pinned_row=3).value
    scale = math.sqrt(g.weights @ B[3] ** 2)
    np.testing.assert_allclose(Q[3], B[3] / scale, rtol=1e-14)
    np.testing.assert_allclose((Q * g.weights) @ Q.T, np.eye(5), atol=1e-14)


def test_orthonormalize_idempotent(rng):
    g = gauss_legendre_slab(20)
    Q = ad.orthonormalize_weighted(rng.normal(size=(4, 20)), g.weights, 0).value
    Q2 = ad.orthonormalize_weighted(Q, g.weights, 0).value
    np.testing.assert_allclose(Q2, Q, atol=1e-14)


def test_orthonormalize_deterministic(rng):
    g = gauss_legendre_slab(20)
    B = rng.normal(size=(4, 20))
    a = ad.orthonormalize_weighted(B, g.weights, 0).value
    b = ad.orthonormalize_weighted(B, g.weights, 0).value
    assert np.array_equal(a, b)


def test_degenerate_rows():
    g = gauss_legendre_slab(8)
    B = np.stack([np.ones(8), g.points, 2 * g.points])
    with pytest.raises(ad.DegenerateBasisError):
        ad.orthonormalize_weighted(B, g.weights, 0)
    Q = ad.orthonormalize_weighted(B, g.weights, 0, drop_degenerate=True).value
    np.testing.assert_array_equal(Q[2], 0.0)
    with pytest.raises(ad.DegenerateBasisError):
        ad.orthonormalize_weighted(np.zeros((2, 8)), g.weights, 0)


def test_orthonormalize_gradient_matches_fd(rng):
    g = gauss_legendre_slab(12)
    B = rng.normal(size=(3, 12))
    c = rng.normal(size=(3, 12))
    loss = lambda X: ad.tsum(ad.hadamard(ad.orthonormalize_weighted(X, g.weights, 1), ad.Tensor(c)))
    grad = _grad(loss, B)
    h = 1e-6
    for idx in [(0, 0), (1, 5), (2, 11)]:
        e = np.zeros_like(B)
        e[idx] = h
        fd = (loss(ad.Tensor(B + e)).value - loss(ad.Tensor(B - e)).value) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-7 * max(1.0, abs(fd))


def test_errors():
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
        ad.scale(ad.Tensor([1e308]), 10.0)
    with pytest.raises(ValueError):
        ad.backward(ad.Tensor(np.ones(2)), [])
    with pytest.raises(ValueError):
        ad.weighted_inner(ad.Tensor(np.ones(3)), np.ones(4))
    with pytest.raises(IndexError):
        ad.mgs2(np.ones((2, 3)), np.ones(3), pinned_row=2)
