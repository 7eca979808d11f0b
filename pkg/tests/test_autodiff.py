import numpy as np
import pytest

from farzi import autodiff as ad
from farzi.autodiff import NumericError, ParamVector


def _fd(f, x, h=1e-6):
    g = np.empty_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def _composite(xv):
    """Scalar exercising most primitives."""
    a = ad.reshape(xv, (2, 3))
    b = ad.softmax(ad.matmul(a, ad.transpose(a)), axis=-1)
    c = ad.log(b + ad.const(0.1)) + ad.tanh(a @ ad.const(np.ones((3, 2))))
    d = ad.sigmoid(ad.vsum(c, axis=0))
    return ad.vmean(ad.mul(d, d)) + ad.vsum(ad.sqrt(ad.exp(a)))


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=6)
    xv = ad.leaf(x)
    (g,) = ad.grad(_composite(xv), [xv])
    fd = _fd(lambda a: float(_composite(ad.leaf(a)).val), x)
    assert np.max(np.abs(g.val - fd)) < 1e-6


def test_hvp_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=6)
    v = rng.normal(size=6)

    def grad_at(a):
        xv = ad.leaf(a)
        (g,) = ad.grad(_composite(xv), [xv])
        return g.val

    xv = ad.leaf(x, tangent=v)
    (g,) = ad.grad(_composite(xv), [xv])
    h = 1e-6
    fd_hvp = (grad_at(x + h * v) - grad_at(x - h * v)) / (2 * h)
    assert np.max(np.abs(g.tan - fd_hvp)) < 1e-5


def test_double_backward():
    rng = np.random.default_rng(2)
    x = rng.normal(size=6)
    v = rng.normal(size=6)
    xv = ad.leaf(x)
    (g,) = ad.grad(_composite(xv), [xv])
    inner = ad.vsum(ad.mul(g, ad.const(v)))
    (hv,) = ad.grad(inner, [xv])
    h = 1e-6

    def grad_at(a):
        lv = ad.leaf(a)
        (gg,) = ad.grad(_composite(lv), [lv])
        return gg.val

    fd = (grad_at(x + h * v) - grad_at(x - h * v)) / (2 * h)
    assert np.max(np.abs(hv.val - fd)) < 1e-5


def test_grad_stop_treats_node_as_leaf():
    x = ad.leaf(np.array([1.0, 2.0]))
    y = ad.mul(x, x)           # y = x^2
    z = ad.vsum(ad.mul(y, y))  # z = sum(y^2)
    (gy,) = ad.grad(z, [y], stop=[y])
    assert np.allclose(gy.val, 2.0 * y.val)
    # without stop the cotangent at x is also populated
    (gx,) = ad.grad(z, [x])
    assert np.allclose(gx.val, 4.0 * x.val ** 3)


def test_softmax_rows_normalized_and_logsoftmax_consistent():
    rng = np.random.default_rng(3)
    z = ad.leaf(rng.normal(size=(4, 7)) * 10)
    p = ad.softmax(z)
    assert np.allclose(p.val.sum(axis=-1), 1.0)
    assert np.allclose(np.log(p.val), ad.log_softmax(z).val)


def test_broadcast_unbroadcast_roundtrip():
    a = ad.leaf(np.ones((1, 3)))
    b = ad.leaf(np.ones((4, 1)))
    out = ad.vsum(ad.mul(a + b, a))
    ga, gb = ad.grad(out, [a, b])
    assert ga.val.shape == (1, 3) and gb.val.shape == (4, 1)


def test_param_vector_flatten_roundtrip():
    pv = ParamVector([("a", np.arange(6.0).reshape(2, 3)),
                      ("b", np.ones(4))])
    flat = pv.flatten()
    back = pv.unflatten(flat)
    for n, arr in pv.items():
        assert np.array_equal(back[n], arr)
    with pytest.raises(ValueError):
        pv.unflatten(flat[:-1])
    with pytest.raises(ValueError):
        ParamVector([("a", np.ones(1)), ("a", np.ones(1))])


def test_value_and_grad_flags_nonfinite():
    p = ParamVector([("w", np.array([0.0]))])

    def bad(pvars, _):
        return ad.log(pvars["w"])  # log 0 = -inf

    with pytest.raises(NumericError):
        ad.value_and_grad(bad, p, None)


def test_grad_and_hvps_matches_separate_passes():
    rng = np.random.default_rng(4)
    p = ParamVector([("w", rng.normal(size=(3, 2)))])
    x = rng.normal(size=(2, 3))
    v = ParamVector([("w", rng.normal(size=(3, 2)))])

    def loss(pvars, xv):
        if not isinstance(xv, ad.Var):
            xv = ad.leaf(xv)
        return ad.vmean(ad.mul(ad.matmul(xv, pvars["w"]),
                               ad.tanh(ad.matmul(xv, pvars["w"]))))

    gw, hw, hx = ad.grad_and_hvps(loss, p, x, v)
    _, gw2 = ad.value_and_grad(loss, p, x)
    hw2 = ad.hvp_param(loss, p, x, v)
    hx2 = ad.hvp_data(loss, p, x, v)
    assert np.allclose(gw["w"], gw2["w"])
    assert np.allclose(hw["w"], hw2["w"])
    assert np.allclose(hx, hx2)
