import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rockssl import autodiff as ad
from rockssl.autodiff import Tensor, backward
from rockssl.errors import HeadsDontDivide, InvalidEpsilon, NonFiniteValue, NonScalarLoss, ShapeMismatch
from rockssl.gradcheck import grad_check, relative_error

TOL = 1e-4


def conv_oracle(x, w, b):
    """Direct zero-padded cross-correlation, one output value at a time."""
    C, H, W = x.shape
    F, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    pad = np.zeros((C, H + 2 * ph, W + 2 * pw))
    pad[:, ph:ph + H, pw:pw + W] = x
    out = np.empty((F, H, W))
    for f in range(F):
        for i in range(H):
            for j in range(W):
                out[f, i, j] = np.sum(pad[:, i:i + kh, j:j + kw] * w[f]) + b[f]
    return out


def attn_params(rng, d, scale=0.5, k_bias=True):
    p = {}
    for n in "qkvo":
        p[f"{n}.weight"] = rng.normal(0, scale, (d, d))
        if n != "k" or k_bias:
            p[f"{n}.bias"] = rng.normal(0, 0.1, d)
    return p


def as_leaves(p):
    return {k: Tensor(v) for k, v in p.items()}


# conv2d

def test_conv_zero_kernels_give_bias(rng):
    x = Tensor(rng.random((3, 5, 5)))
    out = ad.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.arange(4.0)))
    for f in range(4):
        assert np.all(out.data[f] == f)


def test_conv_center_kernel_is_identity(rng):
    x = rng.random((1, 7, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_cube_shape(rng):
    out = ad.conv2d(Tensor(rng.random((10, 10, 10))), Tensor(rng.random((10, 10, 3, 3))), Tensor(np.zeros(10)))
    assert out.shape == (10, 10, 10)


@pytest.mark.parametrize("c,f,h,w,k", [(1, 1, 3, 3, 1), (2, 3, 5, 4, 3), (3, 2, 6, 7, 5), (4, 4, 8, 8, 3)])
def test_conv_matches_oracle(rng, c, f, h, w, k):
    x, wt, b = rng.normal(size=(c, h, w)), rng.normal(size=(f, c, k, k)), rng.normal(size=f)
    out = ad.conv2d(Tensor(x), Tensor(wt), Tensor(b))
    np.testing.assert_allclose(out.data, conv_oracle(x, wt, b), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 9), st.integers(1, 9),
       st.sampled_from([1, 3, 5]), st.integers(1, 3))
def test_conv_preserves_spatial_extent(c, f, h, w, k, batch):
    x = Tensor(np.zeros((batch, c, h, w)))
    out = ad.conv2d(x, Tensor(np.zeros((f, c, k, k))), Tensor(np.zeros(f)))
    assert out.shape == (batch, f, h, w)


def test_conv_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ShapeMismatch):
        ad.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeMismatch):
        ad.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros(1)))


def test_conv_gradient(rng):
    p = {"x": rng.normal(size=(2, 3, 5, 5)), "w": rng.normal(size=(4, 3, 3, 3)), "b": rng.normal(size=4)}
    t = rng.normal(size=(2, 4, 5, 5))
    assert grad_check(lambda q: ad.mse(ad.conv2d(q["x"], q["w"], q["b"]), t), p) < TOL


# attention

@given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)))
def test_softmax_rows(x):
    s = ad.softmax(Tensor(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_rows_sum_to_one(rng):
    p = as_leaves(attn_params(rng, 12, scale=2.0))
    _, w = ad.multi_head_attention(Tensor(rng.normal(size=(2, 5, 12))), p, heads=3, return_weights=True)
    assert w.shape == (2, 3, 5, 5)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_single_token(rng):
    raw = attn_params(rng, 6)
    x = rng.normal(size=(1, 6))
    out, w = ad.multi_head_attention(Tensor(x), as_leaves(raw), heads=2, return_weights=True)
    assert np.all(w.data == 1.0)
    v = x @ raw["v.weight"].T + raw["v.bias"]
    expected = v @ raw["o.weight"].T + raw["o.bias"]
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_attention_permutation_equivariance(rng):
    p = as_leaves(attn_params(rng, 10))
    x = rng.normal(size=(7, 10))
    perm = rng.permutation(7)
    a = ad.multi_head_attention(Tensor(x), p, heads=5).data
    b = ad.multi_head_attention(Tensor(x[perm]), p, heads=5).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-12, atol=1e-12)


def test_heads_must_divide(rng):
    with pytest.raises(HeadsDontDivide):
        ad.multi_head_attention(Tensor(rng.normal(size=(3, 10))), as_leaves(attn_params(rng, 10)), heads=7)


def test_key_bias_has_no_effect(rng):
    raw = attn_params(rng, 8)
    x = Tensor(rng.normal(size=(5, 8)))
    with_bias = ad.multi_head_attention(x, as_leaves(raw), heads=2).data
    raw.pop("k.bias")
    without = ad.multi_head_attention(x, as_leaves(raw), heads=2).data
    np.testing.assert_allclose(with_bias, without, rtol=1e-10, atol=1e-12)


def test_attention_gradient(rng):
    p = attn_params(rng, 8, k_bias=False)
    p["x"] = rng.normal(size=(2, 4, 8))
    t = rng.normal(size=(2, 4, 8))

    def fn(q):
        return ad.mse(ad.multi_head_attention(q["x"], q, heads=2), t)
    assert grad_check(fn, p) < TOL


def test_layer_norm_gradient(rng):
    p = {"x": rng.normal(size=(3, 6)), "g": rng.normal(1, 0.2, 6), "b": rng.normal(size=6)}
    t = rng.normal(size=(3, 6))
    assert grad_check(lambda q: ad.mse(ad.layer_norm(q["x"], q["g"], q["b"]), t), p) < TOL


# dense and activations

def test_dense_examples(rng):
    x = Tensor(rng.normal(size=5))
    assert np.all(ad.dense(x, Tensor(np.zeros((3, 5))), Tensor(np.zeros(3)), "relu").data == 0)
    out = ad.dense(x, Tensor(np.eye(5)), Tensor(np.zeros(5)), "linear")
    np.testing.assert_array_equal(out.data, x.data)
    assert ad.sigmoid(Tensor(np.array(0.0))).data == 0.5
    assert ad.tanh(Tensor(np.array(0.0))).data == 0.0
    with pytest.raises(ShapeMismatch):
        ad.dense(x, Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))


def test_sigmoid_is_stable_at_extremes():
    out = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


@pytest.mark.parametrize("act", ["relu", "sigmoid", "tanh", "linear"])
def test_dense_gradient(rng, act):
    x = rng.normal(size=(4, 6))
    p = {"W": rng.normal(size=(3, 6)), "b": rng.normal(size=3)}
    if act == "relu":  # keep pre-activations away from the kink
        z = x @ p["W"].T + p["b"]
        p["b"] = p["b"] + np.where(np.abs(z) < 1e-3, 1e-2, 0.0).max(axis=0)
    t = rng.normal(size=(4, 3))
    assert grad_check(lambda q: ad.mse(ad.dense(Tensor(x), q["W"], q["b"], act), t), p) < 1e-6


def test_elementwise_gradients(rng):
    p = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}

    def fn(q):
        y = ad.mul(ad.sub(q["a"], q["b"]), ad.add(q["a"], 2.0))
        return ad.mean_all(ad.tanh(ad.mul(y, 0.2)))  # stay off the tanh plateau
    assert grad_check(fn, p) < TOL


def test_reshape_transpose_matmul_gradient(rng):
    p = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 5))}

    def fn(q):
        m = ad.matmul(q["a"], q["b"])
        return ad.sum_all(ad.mul(ad.reshape(ad.transpose(m, (0, 2, 1)), (10, 3)), 0.5))
    assert grad_check(fn, p) < TOL


# backward

def test_square_derivative():
    x = Tensor(np.array(3.0), requires_grad=True)
    grads = backward(x * x, {"x": x})
    assert grads["x"] == 6.0


def test_mse_at_minimum_has_zero_grad(rng):
    w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    x = rng.normal(size=(4, 3))
    pred = ad.linear(Tensor(x), w)
    grads = backward(ad.mse(pred, pred.data.copy()), {"w": w})
    assert np.all(grads["w"] == 0)


def test_unused_parameter_gets_zero(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    grads = backward(ad.sum_all(a * a), {"a": a, "b": b})
    assert grads["b"].shape == (2, 2) and np.all(grads["b"] == 0)


def test_shared_node_accumulates_once_per_pass(rng):
    x = Tensor(np.array(2.0), requires_grad=True)
    y = x * x
    loss = y + y
    assert backward(loss, {"x": x})["x"] == 8.0
    assert backward(loss, {"x": x})["x"] == 8.0  # grads reset between calls


def test_backward_errors():
    v = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarLoss):
        backward(v * 2.0, {"v": v})
    with pytest.raises(NonFiniteValue):
        backward(ad.sum_all(v * np.inf), {"v": v})


def test_relu_derivative_at_zero_is_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    g = backward(ad.sum_all(ad.relu(x)), {"x": x})["x"]
    assert g.tolist() == [0.0, 1.0, 0.0]


def test_deep_graph_does_not_recurse(rng):
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    assert backward(y, {"x": x})["x"] == 1.0


def test_float32_graph_stays_float32(rng):
    x = Tensor(rng.random((2, 3)).astype(np.float32), requires_grad=True)
    y = ad.sigmoid(x * 2.0 + 1.0)
    assert y.dtype == np.float32


# gradient checker

def test_grad_check_affine_is_exact(rng):
    c = rng.normal(size=(5,))
    assert grad_check(lambda q: ad.sum_all(ad.mul(q["x"], c)), {"x": rng.normal(size=5)}) < 1e-9


def test_grad_check_rejects_bad_epsilon():
    with pytest.raises(InvalidEpsilon):
        grad_check(lambda q: ad.sum_all(q["x"]), {"x": np.ones(2)}, fd_epsilon=0.0)


def test_grad_check_samples_large_tensors(rng):
    report = {}
    err = grad_check(lambda q: ad.sum_all(q["x"] * q["x"]), {"x": rng.normal(size=5000)},
                     coords_per_tensor=200, report=report)
    assert err < 1e-6 and set(report) == {"x"}


def test_grad_check_detects_wrong_gradient(rng):
    def bad_square(x):
        def bw(g):
            x._accumulate(g * 3.0 * x.data)  # true derivative is 2x
        return ad._result(x.data * x.data, (x,), bw, "bad_square")
    assert grad_check(lambda q: ad.sum_all(bad_square(q["x"])), {"x": rng.normal(size=4)}) > 0.1


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0 + 1e-12) < 1e-11
