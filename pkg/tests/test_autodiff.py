import numpy as np
import pytest

from sda import autodiff as ad


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def close(a, b, rel=1e-6, floor=1e-8):
    return np.all(np.abs(a - b) <= np.maximum(rel * np.maximum(np.abs(a), np.abs(b)), floor))


@pytest.mark.parametrize("seed", range(5))
def test_each_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(5)
    g = rng.standard_normal(5) + 1.0
    beta = rng.standard_normal(5)
    other = rng.standard_normal((3, 2))

    def build(xv, wv, bv, gv, betav, ov):
        h = ad.affine(xv, wv, bv)
        h = ad.layer_norm(h, gv, betav)
        h = ad.add(ad.silu(h), bv)
        h = ad.concat(h, ov)
        return ad.mean_square(h, scale=2.5)

    leaves = [ad.leaf(v, requires_grad=True) for v in (x, w, b, g, beta, other)]
    out = build(*leaves)
    ad.backward(out)
    for leaf, arr in zip(leaves, (x, w, b, g, beta, other)):
        fd = numeric_grad(lambda: float(build(x, w, b, g, beta, other).value), arr)
        assert close(leaf.grad, fd), leaf


def test_half_squared_norm_gradient_is_identity():
    rng = np.random.default_rng(1)
    p = rng.standard_normal(17)
    v = ad.leaf(p, requires_grad=True)
    # 0.5 * |p|^2 = (n/2) * mean(p^2)
    ad.backward(ad.mean_square(v, scale=p.size / 2))
    np.testing.assert_allclose(v.grad, p, rtol=1e-14)


def test_constant_loss_has_zero_gradient():
    p = ad.leaf(np.ones(4), requires_grad=True)
    c = ad.leaf(np.arange(4.0))
    loss = ad.mean_square(ad.add(c, ad.affine(p, np.zeros((4, 4)), np.zeros(4))))
    ad.backward(loss)
    np.testing.assert_array_equal(p.grad, np.zeros(4))


def test_shared_node_gradients_accumulate():
    x = ad.leaf(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = ad.add(x, x)
    ad.backward(ad.mean_square(y, scale=3.0))  # sum((2x)^2) = 4 sum x^2
    np.testing.assert_allclose(x.grad, 8 * x.value)


def test_vector_cotangent():
    rng = np.random.default_rng(2)
    x = ad.leaf(rng.standard_normal((2, 3)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    out = ad.affine(x, w, np.zeros(4))
    cot = rng.standard_normal((2, 4))
    ad.backward(out, cot)
    np.testing.assert_allclose(x.grad, cot @ w.T)
    with pytest.raises(ValueError):
        ad.backward(out)


@pytest.mark.parametrize("op", [
    lambda v: v * 2.0, lambda v: v - 1.0, lambda v: -v, lambda v: v / 2.0, lambda v: v ** 2,
    lambda v: v @ np.eye(3), lambda v: v[0], lambda v: np.exp(v), lambda v: np.tanh(v),
    lambda v: np.sum(v),
])
def test_unsupported_operations_raise(op):
    v = ad.leaf(np.ones(3), requires_grad=True)
    with pytest.raises(ad.UnsupportedPrimitive):
        op(v)


def test_foreign_node_is_rejected_by_backward():
    x = ad.leaf(np.ones(3), requires_grad=True)
    rogue = ad.Var(np.exp(x.value), "exp", [(x, lambda g: g)])
    with pytest.raises(ad.UnsupportedPrimitive):
        ad.backward(ad.mean_square(rogue))


def test_deep_graph_does_not_recurse():
    x = ad.leaf(np.ones(2), requires_grad=True)
    h = x
    for _ in range(5000):
        h = ad.add(h, np.zeros(2))
    ad.backward(ad.mean_square(h, scale=2.0))
    np.testing.assert_allclose(x.grad, 2.0 * np.ones(2))
