import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgfa.errors import ConfigError
from fgfa.nets import ConvLayer, ConvStack
from fgfa.weighting import (
    cosine_similarity,
    cosine_similarity_backward,
    embed,
    make_embedding_net,
    normalize_weights,
    normalize_weights_backward,
    raw_weight,
    softmax_weights,
)
from oracles import naive_conv2d


def vec_field(*vs):
    """[E,1,n] field from per-pixel vectors."""
    return np.array(vs, dtype=float).T[:, None, :]


def test_identical_vectors_give_e(rng):
    a = rng.normal(size=(4, 3, 3))
    np.testing.assert_allclose(raw_weight(a, a), math.e, rtol=1e-12)


def test_orthogonal_vectors_give_one():
    assert raw_weight(vec_field((1, 0)), vec_field((0, 1)))[0, 0] == pytest.approx(1.0)


def test_diagonal_example():
    # cos = 1/sqrt(2), computed here by hand
    expected = math.exp(1 / math.sqrt(2))
    assert expected == pytest.approx(2.028115, abs=1e-6)
    assert raw_weight(vec_field((1, 1)), vec_field((1, 0)))[0, 0] == pytest.approx(expected, abs=1e-12)


def test_zero_norm_guard():
    a = vec_field((0, 0), (1, 2))
    b = vec_field((1, 0), (0, 0))
    np.testing.assert_array_equal(cosine_similarity(a, b), [[0.0, 0.0]])
    np.testing.assert_array_equal(raw_weight(a, b), [[1.0, 1.0]])
    ga, gb = cosine_similarity_backward(a, b, np.ones((1, 2)))
    assert not ga.any() and not gb.any()


def test_cosine_shape_mismatch():
    with pytest.raises(ConfigError):
        cosine_similarity(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(0.01, 100))
def test_scale_invariance(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 3, 4, 4))
    np.testing.assert_allclose(raw_weight(a * x, b * y), raw_weight(x, y), atol=1e-6)


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_weights([np.full((2, 2), 3.0)])[0], 1.0)
    for w in normalize_weights([np.full((2, 2), 0.4)] * 5):
        np.testing.assert_allclose(w, 0.2)
    w = normalize_weights([np.full((1, 1), math.e), np.ones((1, 1))])
    assert w[0][0, 0] == pytest.approx(0.731059, abs=1e-6)
    assert w[1][0, 0] == pytest.approx(0.268941, abs=1e-6)


def test_normalize_errors():
    with pytest.raises(ConfigError):
        normalize_weights([])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(-5, 5))
def test_normalize_properties(seed, n, c):
    r = np.random.default_rng(seed)
    raw = list(r.uniform(0.1, 3.0, size=(n, 3, 3)))
    w = normalize_weights(raw)
    np.testing.assert_allclose(np.sum(w, axis=0), 1.0, atol=1e-6)
    assert all(((x > 0) & (x <= 1)).all() for x in w)
    # shift invariance in log space
    np.testing.assert_allclose(normalize_weights([x * math.exp(c) for x in raw]), w, atol=1e-6)
    # permutation symmetry
    perm = r.permutation(n)
    np.testing.assert_allclose(normalize_weights([raw[p] for p in perm]), [w[p] for p in perm], atol=1e-12)
    # softmax over log raw is the same map
    np.testing.assert_allclose(softmax_weights([np.log(x) for x in raw]), w, atol=1e-12)


def test_normalize_grad_rows_sum_to_zero(rng):
    raw = list(rng.uniform(0.5, 2.0, size=(3, 2, 2)))
    # the Jacobian applied to a constant upstream gradient vanishes
    g = normalize_weights_backward(raw, [np.full((2, 2), 1.7)] * 3)
    np.testing.assert_allclose(np.stack(g), 0.0, atol=1e-6)


def test_raw_weight_grad_fd(rng):
    a, b = rng.normal(size=(2, 3, 2, 2))
    up = rng.normal(size=(2, 2))
    # d exp(cos) = exp(cos) d cos
    ga, gb = cosine_similarity_backward(a, b, up * raw_weight(a, b))
    h = 1e-4
    for arr, g in ((a, ga), (b, gb)):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = np.sum(up * raw_weight(a, b))
            arr[idx] = orig - h
            fm = np.sum(up * raw_weight(a, b))
            arr[idx] = orig
            num = (fp - fm) / (2 * h)
            assert abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6) < 1e-4


def _identity_stack(c):
    layers = []
    for k in (1, 3, 1):
        w = np.zeros((c, c, k, k))
        for i in range(c):
            w[i, i, k // 2, k // 2] = 1.0
        layers.append(ConvLayer(w, np.zeros(c)))
    return ConvStack(layers, relu_last=False, kind="embedding")


def test_embed_identity_and_zero(rng):
    x = rng.uniform(0.0, 1.0, size=(3, 5, 5))  # nonnegative so the ReLUs pass it through
    np.testing.assert_array_equal(embed(_identity_stack(3), x), x)
    net = make_embedding_net(3, (4, 4, 6), rng)
    for l in net.layers:
        l.weight[:] = 0
        l.bias[:] = 0
    out = embed(net, x)
    assert out.shape == (6, 5, 5) and not out.any()


def test_embed_matches_conv_chain_oracle(rng):
    net = make_embedding_net(2, (3, 3, 4), rng)
    for l in net.layers:
        l.bias[:] = rng.normal(size=l.bias.shape)
    x = rng.normal(size=(2, 2, 2))
    h = x
    for idx, l in enumerate(net.layers):
        h = naive_conv2d(h, l.weight, l.bias)
        if idx < 2:
            h = np.maximum(h, 0)
    np.testing.assert_allclose(embed(net, x), h, atol=1e-5)


def test_embed_channel_mismatch(rng):
    with pytest.raises(ConfigError):
        embed(make_embedding_net(3, rng=rng), np.zeros((2, 4, 4)))


def test_embedding_kernel_sizes(rng):
    net = make_embedding_net(4, rng=rng)
    assert [l.kernel_size for l in net.layers] == [1, 3, 1]
    assert embed(net, rng.normal(size=(4, 6, 7))).shape[1:] == (6, 7)


def test_end_to_end_weight_grad_fd(rng):
    from fgfa.weighting import adaptive_weights, adaptive_weights_backward
    net = make_embedding_net(2, (3, 3, 4), rng)
    # nonzero biases keep every embedding away from the zero-norm guard, where the cosine jumps
    for l in net.layers:
        l.bias[:] = rng.normal(size=l.bias.shape)
    warped = [rng.normal(size=(2, 2, 2)) for _ in range(3)]
    ref = warped[1]
    ups = [rng.normal(size=(2, 2)) for _ in range(3)]

    def loss():
        return sum(np.sum(u * w) for u, w in zip(ups, adaptive_weights(net, warped, ref)))

    w, state = adaptive_weights(net, warped, ref, keep_cache=True)
    _, _, pg = adaptive_weights_backward(net, w, state, ups)
    h = 1e-5
    errs = []
    for p, g in zip(net.params(), pg):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            fp = loss()
            p[idx] = orig - h
            fm = loss()
            p[idx] = orig
            num = (fp - fm) / (2 * h)
            errs.append(abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6))
    assert max(errs) < 1e-3
