import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from toc3d.numerics import (
    Linear,
    gelu,
    gelu_grad,
    layer_norm,
    layer_norm_backward,
    make_rng,
    matmul,
    sigmoid,
    softmax,
    trunc_normal,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_hand_case():
    b = np.array([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), b), b)
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_rejects_non_finite():
    with pytest.raises(ValueError):
        matmul([[np.nan]], [[1.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_associative(m, k, l, n, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, l)), rng.normal(size=(l, n))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-9)


def test_layer_norm_examples():
    np.testing.assert_array_equal(layer_norm(np.full(3, 4.2)), np.zeros(3))
    np.testing.assert_allclose(layer_norm(np.array([1.0, -1.0]), eps=0.0), [1.0, -1.0])
    with pytest.raises(ValueError):
        layer_norm(np.zeros(0))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 64), elements=finite))
def test_layer_norm_statistics(x):
    if x.var() < 1e-2:
        x = x + np.linspace(-1, 1, len(x))
    y = layer_norm(x)
    assert abs(y.mean()) <= 1e-10
    assert abs(y.var() - 1) <= 1e-6 * (1 + 1 / x.var()) * 100


def test_layer_norm_backward_matches_fd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 7))
    g = rng.normal(size=(3, 7))
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = ((layer_norm(xp) - layer_norm(xm)) * g).sum() / (2 * h)
    np.testing.assert_allclose(layer_norm_backward(g, x), fd, rtol=1e-6, atol=1e-8)


def test_sigmoid_examples():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    with np.errstate(over="raise"):
        hi = sigmoid(np.array([50.0, 1000.0, -1000.0]))
    assert hi[0] == pytest.approx(1.0) and hi[1] == 1.0 and hi[2] == 0.0


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-700, 700)))
def test_sigmoid_symmetry_range_monotone(x):
    s = sigmoid(x)
    np.testing.assert_allclose(s + sigmoid(-x), 1.0, atol=1e-12)
    assert np.all((s >= 0) & (s <= 1))
    order = np.argsort(x)
    assert np.all(np.diff(s[order]) >= 0)


def test_gelu_grad_matches_fd():
    x = np.linspace(-5, 5, 101)
    h = 1e-6
    np.testing.assert_allclose(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), atol=1e-8)
    # in-place arithmetic must not touch the input
    x0 = x.copy()
    gelu(x)
    np.testing.assert_array_equal(x, x0)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(1).normal(size=(4, 9)) * 100
    np.testing.assert_allclose(softmax(x).sum(axis=-1), 1.0, atol=1e-12)


def test_rng_streams_are_reproducible():
    a = trunc_normal(make_rng(11), (50, 50))
    b = trunc_normal(make_rng(11), (50, 50))
    np.testing.assert_array_equal(a, b)
    assert np.abs(a).max() <= 0.04
    assert abs(a.std() - 0.02) < 0.003


def test_linear_shapes_and_validation():
    lin = Linear.init(make_rng(0), 5, 3)
    assert lin.weight.shape == (3, 5) and lin.in_dim == 5 and lin.out_dim == 3
    assert np.all(lin.bias == 0)
    assert lin(np.ones((4, 5))).shape == (4, 3)
    with pytest.raises(ValueError):
        Linear(np.zeros((3, 5)), np.zeros(4))
    assert lin.astype(np.float32).weight.dtype == np.float32
    c = lin.copy()
    c.weight[0, 0] = 9.0
    assert lin.weight[0, 0] != 9.0
