import numpy as np
import pytest

from lwfs import autodiff as ad


def test_add_elementwise():
    out = ad.add(ad.leaf([1.0, 2.0]), ad.leaf([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_matmul_identity():
    v = np.array([[2.0], [-1.0], [0.5]])
    out = ad.matmul(ad.leaf(np.eye(3)), ad.leaf(v))
    assert np.array_equal(out.data, v)


def test_softmax_symmetry():
    out = ad.softmax(ad.leaf([0.0, 0.0]))
    assert np.array_equal(out.data, [0.5, 0.5])


def test_logsumexp_known_value():
    out = ad.logsumexp(ad.leaf(np.log([1.0, 2.0, 3.0])))
    assert abs(float(out.data) - np.log(6.0)) < 1e-12


def test_conv1d_same_padding_values():
    x = ad.leaf(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1))
    w = ad.leaf(np.ones((3, 1, 1)))
    out = ad.conv1d(x, w)
    assert np.array_equal(out.data.ravel(), [3.0, 6.0, 9.0, 7.0])


def test_conv1d_stride_two():
    x = ad.leaf(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1))
    w = ad.leaf(np.ones((3, 1, 1)))
    out = ad.conv1d(x, w, stride=2)
    assert out.data.shape == (1, 2, 1)
    assert np.array_equal(out.data.ravel(), [3.0, 9.0])
    assert ad.conv1d_output_length(4, 3, 2) == 2


def test_backward_sum_gives_ones():
    x = ad.leaf([1.0, -2.0, 3.0, 0.0], trainable=True)
    ad.sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones(4))


def test_backward_square():
    x = ad.leaf(3.0, trainable=True)
    ad.mul(x, x).backward()
    assert float(x.grad) == 6.0


def test_backward_resets_accumulators():
    # same graph twice: grads zeroed first, so x+x stays 2, never 4
    x = ad.leaf([1.0, 1.0], trainable=True)
    root = ad.sum_all(ad.add(x, x))
    root.backward()
    first = x.grad.copy()
    root.backward()
    assert np.array_equal(first, [2.0, 2.0])
    assert np.array_equal(x.grad, first)


def test_nll_softmax_gradient_closed_form():
    rng = np.random.default_rng(0)
    z = ad.leaf(rng.normal(size=5), name="z")
    k = 2
    nll = ad.mul(ad.slice_axis(ad.log_softmax(z), 0, k, k + 1), -1.0)
    nll.backward()
    p = np.exp(z.data - np.logaddexp.reduce(z.data))
    onehot = np.eye(5)[k]
    assert np.allclose(z.grad, p - onehot, atol=1e-12)

    def build(leaf):
        return ad.mul(ad.slice_axis(ad.log_softmax(leaf), 0, k, k + 1), -1.0)

    assert ad.grad_check(build, z, eps=1e-5) < 1e-6


def test_grad_check_quadratic():
    x = ad.leaf([1.5, -0.5, 2.0], name="x")

    def build(leaf):
        return ad.sum_all(ad.mul(leaf, leaf))

    assert ad.grad_check(build, x, eps=1e-5) < 1e-6


def test_grad_check_constant_is_zero():
    x = ad.leaf([1.0, 2.0], name="x")

    def build(leaf):
        return ad.sum_all(ad.mul(leaf, 0.0))

    assert ad.grad_check(build, x, eps=1e-5) == 0.0


def _weighted(out: ad.Tensor, rng) -> ad.Tensor:
    w = ad.constant(rng.normal(size=out.data.shape))
    return ad.sum_all(ad.mul(out, w))


# every differentiable op against central finite differences
OP_CASES = {
    "add_broadcast": lambda p, rng: ad.add(p, ad.constant(rng.normal(size=(4,)))),
    "mul": lambda p, rng: ad.mul(p, ad.constant(rng.normal(size=p.data.shape))),
    "matmul_left": lambda p, rng: ad.matmul(p, ad.constant(rng.normal(size=(4, 2)))),
    "sigmoid": lambda p, rng: ad.sigmoid(p),
    "tanh": lambda p, rng: ad.tanh(p),
    "softmax": lambda p, rng: ad.softmax(p),
    "log_softmax": lambda p, rng: ad.log_softmax(p),
    "logsumexp": lambda p, rng: ad.logsumexp(p),
    "concat": lambda p, rng: ad.concat([p, ad.constant(rng.normal(size=p.data.shape))], axis=1),
    "slice": lambda p, rng: ad.slice_axis(p, 1, 1, 3),
    "sum": lambda p, rng: ad.sum_all(p),
    "mean": lambda p, rng: ad.mean_all(p),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_matches_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    p = ad.leaf(rng.normal(size=(3, 4)), name="p")

    def build(leaf):
        return _weighted(OP_CASES[name](leaf, rng), np.random.default_rng(7))

    assert ad.grad_check(build, p, eps=1e-5) < 1e-4


def test_matmul_batched_finite_differences():
    rng = np.random.default_rng(11)
    p = ad.leaf(rng.normal(size=(2, 3, 4)), name="p")

    def build(leaf):
        return _weighted(ad.matmul(leaf, ad.constant(rng.normal(size=(4, 2)))),
                         np.random.default_rng(8))

    assert ad.grad_check(build, p, eps=1e-5) < 1e-4


@pytest.mark.parametrize("stride", [1, 2])
def test_conv1d_finite_differences(stride):
    rng = np.random.default_rng(13 + stride)
    w_const = ad.constant(rng.normal(size=(3, 3, 4)))
    b_const = ad.constant(rng.normal(size=(4,)))

    x = ad.leaf(rng.normal(size=(2, 5, 3)), name="x")

    def build_x(leaf):
        return _weighted(ad.conv1d(leaf, w_const, b_const, stride=stride),
                         np.random.default_rng(9))

    assert ad.grad_check(build_x, x, eps=1e-5) < 1e-4

    x_const = ad.constant(rng.normal(size=(2, 5, 3)))
    w = ad.leaf(rng.normal(size=(3, 3, 4)), name="w")

    def build_w(leaf):
        return _weighted(ad.conv1d(x_const, leaf, b_const, stride=stride),
                         np.random.default_rng(10))

    assert ad.grad_check(build_w, w, eps=1e-5) < 1e-4


def test_backward_determinism():
    rng = np.random.default_rng(3)
    x = ad.leaf(rng.normal(size=(4, 4)), name="x")
    root = ad.sum_all(ad.tanh(ad.matmul(x, ad.constant(rng.normal(size=(4, 3))))))
    root.backward()
    g1 = x.grad.copy()
    root.backward()
    assert np.array_equal(g1, x.grad)


def test_forward_rebinding():
    x = ad.leaf([1.0, 2.0], name="x")
    root = ad.sum_all(ad.mul(x, x))
    assert float(root.data) == 5.0
    assert float(ad.forward(root, {"x": np.array([3.0, 4.0])})) == 25.0
    # graph stays usable with the new values
    root.backward()
    assert np.array_equal(x.grad, [6.0, 8.0])


def test_forward_unknown_binding():
    x = ad.leaf([1.0], name="x")
    root = ad.sum_all(x)
    with pytest.raises(ad.GraphError, match="nope"):
        ad.forward(root, {"nope": np.array([1.0])})


def test_forward_binding_shape_mismatch():
    x = ad.leaf([1.0, 2.0], name="x")
    root = ad.sum_all(x)
    with pytest.raises(ad.ShapeMismatch):
        ad.forward(root, {"x": np.zeros((3,))})


def test_backward_requires_scalar_root():
    x = ad.leaf([1.0, 2.0])
    with pytest.raises(ad.GraphError, match="scalar"):
        ad.add(x, x).backward()


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeMismatch, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(ad.leaf([1.0, 2.0]), ad.leaf([1.0, 2.0, 3.0]))
    with pytest.raises(ad.ShapeMismatch, match="matmul"):
        ad.matmul(ad.leaf(np.ones((2, 3))), ad.leaf(np.ones((4, 2))))
    with pytest.raises(ad.ShapeMismatch, match="concat"):
        ad.concat([ad.leaf(np.ones((2, 2))), ad.leaf(np.ones((3, 3)))], axis=0)
    with pytest.raises(ad.ShapeMismatch, match="slice"):
        ad.slice_axis(ad.leaf(np.ones((2, 2))), 0, 1, 5)


def test_non_finite_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        ad.leaf([1.0, np.nan])
    x = ad.leaf([1.0, 2.0], name="x")
    root = ad.sum_all(x)
    with pytest.raises(ValueError, match="non-finite"):
        ad.forward(root, {"x": np.array([np.inf, 0.0])})


def test_grad_check_rejects_bad_eps():
    x = ad.leaf([1.0], name="x")
    with pytest.raises(ValueError, match="eps"):
        ad.grad_check(lambda p: ad.sum_all(p), x, eps=0.0)
