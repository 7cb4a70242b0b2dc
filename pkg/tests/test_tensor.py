import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgfa.errors import ConfigError, TensorFormatError
from fgfa.tensor import conv2d, conv2d_backward, decode_tensor, encode_tensor, read_tensor, write_tensor
from oracles import naive_conv2d


def test_identity_kernel_returns_input(rng):
    x = rng.normal(size=(3, 5, 6))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c, 0, 0] = 1.0
    np.testing.assert_array_equal(conv2d(x, k, np.zeros(3)), x)


def test_zero_input_gives_bias(rng):
    out = conv2d(np.zeros((2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), np.array([0.5, -1.0, 2.0]))
    for o, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(out[o] == b)


def test_ones_kernel_on_1_to_9():
    x = np.arange(1.0, 10.0).reshape(1, 3, 3)
    k = np.ones((1, 1, 3, 3))
    ref = naive_conv2d(x, k)
    out = conv2d(x, k, np.zeros(1))
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)
    # frozen from the oracle: center sums everything, corners see 4 taps
    assert ref[0, 1, 1] == 45.0
    np.testing.assert_array_equal(ref[0], [[12, 21, 16], [27, 45, 33], [24, 39, 28]])


@pytest.mark.parametrize("stride,dilation,k", [(1, 1, 3), (2, 1, 3), (1, 2, 3), (3, 1, 5), (2, 1, 1)])
def test_matches_naive_oracle(rng, stride, dilation, k):
    x = rng.normal(size=(3, 7, 9))
    kern = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = conv2d(x, kern, b, stride, dilation)
    ref = naive_conv2d(x, kern, b, stride, dilation)
    assert out.shape == (4, -(-7 // stride), -(-9 // stride))
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 2, 6, 5))
    k = r.normal(size=(3, 2, 3, 3))
    lhs = conv2d(a * x + b * y, k)
    rhs = a * conv2d(x, k) + b * conv2d(y, k)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-9)


def test_channel_mismatch():
    with pytest.raises(ConfigError, match="channel"):
        conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))


def test_backward_matches_finite_differences(rng):
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    g = rng.normal(size=(3, 3, 3))
    gx, gk, gb = conv2d_backward(x, k, g, stride=2)
    h = 1e-6
    for arr, grad in ((x, gx), (k, gk)):
        for idx in [(0, 1, 2), (1, 4, 0)] if arr.ndim == 3 else [(0, 1, 2, 2), (2, 0, 0, 1)]:
            p = arr.copy(); p[idx] += h
            m = arr.copy(); m[idx] -= h
            args = (p, k) if arr is x else (x, p)
            argm = (m, k) if arr is x else (x, m)
            num = (np.sum(g * conv2d(*args, stride=2)) - np.sum(g * conv2d(*argm, stride=2))) / (2 * h)
            assert abs(num - grad[idx]) < 1e-6 * max(1, abs(num))
    np.testing.assert_allclose(gb, g.sum(axis=(1, 2)))


def test_round_trip_bitwise(tmp_path, rng):
    t = rng.normal(size=(3, 4, 5)).astype(np.float32)
    write_tensor(tmp_path / "t.fgt", t)
    back = read_tensor(tmp_path / "t.fgt")
    assert back.dtype == np.float32
    assert back.tobytes() == t.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**31))
def test_round_trip_property(dims, seed):
    t = np.random.default_rng(seed).normal(size=dims).astype(np.float32)
    assert decode_tensor(encode_tensor(t)).tobytes() == t.tobytes()


def test_header_layout():
    buf = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert buf[:4] == b"FGT1"
    assert buf[4] == 0 and buf[5] == 2
    assert buf[6:14] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 14 + 6 * 4


def test_bad_magic():
    buf = bytearray(encode_tensor(np.zeros(3, dtype=np.float32)))
    buf[:4] = b"XXXX"
    with pytest.raises(TensorFormatError, match="bad magic"):
        decode_tensor(bytes(buf))


def test_truncated_payload():
    header = b"FGT1" + bytes([0, 2]) + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    with pytest.raises(TensorFormatError, match="truncated payload"):
        decode_tensor(header + np.zeros(5, dtype="<f4").tobytes())


def test_unsupported_dtype():
    buf = bytearray(encode_tensor(np.zeros(3, dtype=np.float32)))
    buf[4] = 7
    with pytest.raises(TensorFormatError, match="unsupported dtype"):
        decode_tensor(bytes(buf))
