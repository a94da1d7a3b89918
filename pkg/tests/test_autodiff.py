import zlib

import numpy as np
import pytest

from mumodig import autodiff as ad


def rel_err(a, b):
    # Denominator floor of 1e-5: near that size a central difference with
    # h=1e-5 carries ~1e-10 of roundoff plus truncation error on O(1) outputs.
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1e-5, np.maximum(np.abs(a), np.abs(b))))


# Each entry builds a scalar function of one random input and any fixed
# parameters; relu/log inputs are kept away from their kinks/poles.
def _primitive_cases(rng):
    w = rng.normal(size=(4, 3))
    k = rng.normal(size=(2, 3, 3, 3))
    kb = rng.normal(size=2)
    probe = rng.normal(size=(2, 3, 5, 5))
    return {
        "add": ((3, 4), lambda t: ad.mean(ad.mul(ad.add(t, np.ones((3, 4))), ad.add(t, t)))),
        "add_bias": ((4,), lambda t: ad.sum_all(ad.mul(ad.add(np.arange(12.0).reshape(3, 4), t), np.arange(12.0).reshape(3, 4)))),
        "sub": ((3, 4), lambda t: ad.sum_all(ad.mul(ad.sub(1.0, t), t))),
        "mul": ((3, 4), lambda t: ad.sum_all(ad.mul(ad.mul(t, t), t))),
        "matmul": ((2, 4), lambda t: ad.sum_all(ad.mul(ad.matmul(t, w), ad.matmul(t, w)))),
        "conv2d": (
            (2, 3, 5, 5),
            lambda t: ad.sum_all(ad.mul(ad.conv2d(t, k, kb, stride=2, padding=1), ad.conv2d(t, k, kb, stride=2, padding=1))),
        ),
        "conv2d_weight": ((2, 3, 3, 3), lambda t: ad.sum_all(ad.mul(ad.conv2d(probe, t, padding=1), 0.3))),
        "relu": ("relu", lambda t: ad.sum_all(ad.mul(ad.relu(t), np.arange(1.0, 13.0).reshape(3, 4)))),
        "softplus": ((3, 4), lambda t: ad.sum_all(ad.mul(ad.softplus(t), ad.softplus(t)))),
        "bilinear_resize": ((2, 5, 6), lambda t: ad.sum_all(ad.mul(ad.bilinear_resize(t, (4, 9)), ad.bilinear_resize(t, (4, 9))))),
        "pad": ((2, 3, 3), lambda t: ad.sum_all(ad.mul(ad.pad(t, (1, 2, 0, 1)), ad.pad(t, (1, 2, 0, 1))))),
        "mean": ((2, 3, 4), lambda t: ad.sum_all(ad.mul(ad.mean(ad.mul(t, t), axis=(1, 2)), np.array([1.0, -2.0])))),
        "log": ("positive", lambda t: ad.sum_all(ad.log(t))),
        "softmax": ((2, 5), lambda t: ad.sum_all(ad.mul(ad.softmax(t), np.arange(10.0).reshape(2, 5)))),
        "log_softmax": ((2, 5), lambda t: ad.sum_all(ad.mul(ad.log_softmax(t), np.arange(10.0).reshape(2, 5)))),
        "reshape": ((2, 6), lambda t: ad.sum_all(ad.mul(ad.reshape(t, (3, 4)), np.arange(12.0).reshape(3, 4)))),
    }


def _draw(rng, shape):
    if shape == "relu":
        x = rng.uniform(0.05, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
        return x
    if shape == "positive":
        return rng.uniform(0.2, 2.0, size=(3, 4))
    return rng.normal(size=shape)


@pytest.mark.parametrize("name", sorted(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        shape, fn = _primitive_cases(rng)[name]
        x = _draw(rng, shape)
        t = ad.Tensor(x, requires_grad=True)
        g = ad.grad(fn(t), t)
        fd = ad.finite_difference_gradient(lambda v: fn(ad.Tensor(v)).data, x, 1e-5)
        worst = max(worst, rel_err(g, fd) if np.abs(fd).max() > 1e-6 else np.abs(g - fd).max())
    assert worst < 1e-4


def test_relu_and_softmax_examples():
    np.testing.assert_array_equal(ad.relu(ad.Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    np.testing.assert_allclose(ad.softmax(ad.Tensor([0.0, 0.0, 0.0, 0.0])).data, [0.25] * 4, atol=1e-15)


def test_identity_kernel_conv_is_identity():
    x = np.random.default_rng(1).normal(size=(2, 3, 6, 5))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c] = 1.0
    np.testing.assert_array_equal(ad.conv2d(x, k).data, x)


def test_scalar_examples():
    x = ad.Tensor(2.0, requires_grad=True)
    assert ad.grad(ad.mul(x, 3.0), x) == 3.0
    x = ad.Tensor(-1.0, requires_grad=True)
    assert ad.grad(ad.relu(x), x) == 0.0


def test_finite_difference_examples():
    g = ad.finite_difference_gradient(lambda v: float((v**2).sum()), np.array([3.0]), 1e-4)
    assert abs(g[0] - 6.0) < 1e-6
    np.testing.assert_array_equal(ad.finite_difference_gradient(lambda v: 4.0, np.ones((2, 2))), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ad.finite_difference_gradient(lambda v: 0.0, np.ones(2), 0.0)


def _softplus_net(rng):
    ws = [rng.normal(size=(6, 8)) / 2, rng.normal(size=(8, 8)) / 2, rng.normal(size=(8, 1)) / 2]

    def f(t):
        h = t
        for i, w in enumerate(ws):
            h = ad.matmul(h, w)
            if i < 2:
                h = ad.softplus(h)
        return ad.sum_all(h)

    return f


def test_three_layer_softplus_net_input_gradient():
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = _softplus_net(rng)
        x = rng.normal(size=(1, 6))
        t = ad.Tensor(x, requires_grad=True)
        g = ad.grad(f(t), t)
        fd = ad.finite_difference_gradient(lambda v: f(ad.Tensor(v)).data, x, 1e-5)
        assert rel_err(g, fd) < 1e-4


def test_non_scalar_backward_rejected():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.mul(t, 2.0))


def test_shape_mismatch_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_unreachable_leaf_gets_zero_gradient():
    a = ad.Tensor(np.ones(3), requires_grad=True)
    b = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    grads = ad.backward(ad.sum_all(ad.mul(a, a)), [a, b])
    np.testing.assert_array_equal(grads[b], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads[a], 2 * np.ones(3))


def test_shared_node_visited_once_and_accumulates():
    x = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    h = ad.mul(x, x)
    out = ad.sum_all(ad.add(h, h))  # 2x^2
    np.testing.assert_array_equal(ad.grad(out, x), 4 * x.data)
    record = ad.ComputationRecord(out)
    ids = [id(n) for n in record.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(record.nodes)}
    for node in record.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_linearity_of_backward():
    rng = np.random.default_rng(5)
    x = ad.Tensor(rng.normal(size=(1, 6)), requires_grad=True)
    f1, f2 = _softplus_net(rng), _softplus_net(rng)
    a, b = 0.7, -1.3
    g1 = ad.grad(f1(x), x)
    g2 = ad.grad(f2(x), x)
    combo = ad.add(ad.mul(f1(x), a), ad.mul(f2(x), b))
    np.testing.assert_allclose(ad.grad(combo, x), a * g1 + b * g2, atol=1e-10)


def test_determinism_bitwise():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))

    def run():
        t = ad.Tensor(x, requires_grad=True)
        out = ad.sum_all(ad.softplus(ad.conv2d(t, k, stride=2, padding=1)))
        return out.data.copy(), ad.grad(out, t)

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes() and g1.tobytes() == g2.tobytes()


def test_forward_op_dispatch():
    out = ad.forward_op("relu", ad.Tensor([-3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [0.0, 4.0])
    with pytest.raises(ValueError):
        ad.forward_op("tanh", ad.Tensor([1.0]))


def test_no_graph_without_requires_grad():
    out = ad.relu(ad.Tensor([1.0, -1.0]))
    assert out.is_leaf and not out.requires_grad


def test_forward_outputs_finite():
    rng = np.random.default_rng(11)
    x = rng.normal(scale=50, size=(4, 7))
    for op in (ad.softmax, ad.log_softmax, ad.softplus, ad.relu):
        assert np.all(np.isfinite(op(ad.Tensor(x)).data))
