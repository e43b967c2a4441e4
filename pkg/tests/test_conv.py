import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_correlate
from posegraph import conv
from posegraph.conv import ConvError, ConvKernel, Padding


def delta(size):
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def test_ones_valid():
    out = conv.conv2d_direct(np.ones((3, 3)), np.ones((3, 3)), "valid")
    np.testing.assert_array_equal(out, [[9.0]])


def test_scalar_kernel_same():
    x = np.random.default_rng(0).normal(size=(5, 7))
    np.testing.assert_array_equal(conv.conv2d_direct(x, [[2.0]], "same"), 2 * x)


def test_delta_identity_direct():
    x = np.random.default_rng(1).normal(size=(6, 6))
    np.testing.assert_array_equal(conv.conv2d_direct(x, ConvKernel(delta(5)), "same"), x)


def test_delta_identity_fft():
    x = np.random.default_rng(2).normal(size=(9, 11))
    np.testing.assert_allclose(conv.conv2d_fft(x, delta(7), "same"), x, atol=1e-12)


def test_correlation_convention():
    # no kernel flip: an off-centre tap at (0, 0) reads the up-left neighbour
    x = np.zeros((5, 5))
    x[2, 2] = 1.0
    k = np.zeros((3, 3))
    k[0, 0] = 1.0
    out = conv.conv2d_direct(x, k, "same")
    assert out[3, 3] == 1.0 and out.sum() == 1.0


@pytest.mark.parametrize("ksize,mode", [(17, "same"), (17, "valid"), (65, "full")])
def test_fft_matches_loop_oracle(ksize, mode):
    rng = np.random.default_rng(ksize)
    x = rng.uniform(-1, 1, size=(32, 32))
    k = rng.uniform(-1, 1, size=(ksize, ksize))
    pad = Padding(mode).amounts(ksize, ksize)
    ref = naive_correlate(x, k, pad) if ksize < 30 else conv.conv2d_direct(x, k, mode)
    np.testing.assert_allclose(conv.conv2d_direct(x, k, mode), ref, atol=1e-12)
    assert np.max(np.abs(conv.conv2d_fft(x, k, mode) - ref)) < 1e-9


def test_direct_matches_scalar_loops_small():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 5))
    k = rng.normal(size=(3, 5))
    for mode in ("valid", "same", "full"):
        pad = Padding(mode).amounts(*k.shape)
        np.testing.assert_allclose(conv.conv2d_direct(x, k, mode), naive_correlate(x, k, pad), atol=1e-12)


def test_kernel_larger_than_input_errors():
    with pytest.raises(ConvError):
        conv.conv2d_direct(np.ones((3, 3)), np.ones((5, 5)), "valid")
    with pytest.raises(ConvError):
        conv.conv2d_fft(np.ones((3, 3)), np.ones((5, 5)), "valid")


def test_even_kernel_and_bad_padding():
    with pytest.raises(ConvError):
        ConvKernel(np.ones((2, 3)))
    with pytest.raises(ConvError):
        Padding("explicit", -1)
    with pytest.raises(ConvError):
        Padding("reflect")


def test_auto_dispatch_agrees():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 20))
    for size in (3, 15, 21):
        k = rng.normal(size=(size, size))
        np.testing.assert_allclose(conv.conv2d(x, k, "same"), conv.conv2d_direct(x, k, "same"), atol=1e-10)


@pytest.mark.parametrize("size", [3, 9, 17, 33, 65])
def test_fft_direct_property(size):
    for seed in range(4):
        rng = np.random.default_rng([size, seed])
        h, w = rng.integers(4, 40, size=2)
        x = rng.uniform(-1, 1, size=(h, w))
        k = rng.uniform(-1, 1, size=(size, size))
        mode = "full" if size > min(h, w) else ("same", "valid", "full")[seed % 3]
        assert np.max(np.abs(conv.conv2d_fft(x, k, mode) - conv.conv2d_direct(x, k, mode))) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 10, 9))
    k = rng.normal(size=(5, 5))
    lhs = conv.conv2d_direct(a * x + b * y, k, "same")
    rhs = a * conv.conv2d_direct(x, k, "same") + b * conv.conv2d_direct(y, k, "same")
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * (1 + abs(a) + abs(b)) * 10)


def test_translation_equivariance_interior():
    rng = np.random.default_rng(5)
    x = np.zeros((20, 20))
    x[5:12, 5:12] = rng.normal(size=(7, 7))
    k = rng.normal(size=(3, 3))
    shifted = np.roll(x, (2, 3), axis=(0, 1))
    a = conv.conv2d_direct(x, k, "same")
    b = conv.conv2d_direct(shifted, k, "same")
    np.testing.assert_allclose(b[4:18, 4:18], np.roll(a, (2, 3), axis=(0, 1))[4:18, 4:18], atol=1e-14)


def test_maxpool_basic():
    pooled, idx = conv.maxpool2(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert pooled.tolist() == [[4.0]]
    assert divmod(int(idx[0, 0]), 2) == (1, 1)


def test_maxpool_constant_first_occurrence():
    pooled, idx = conv.maxpool2(np.full((4, 6), 7.0))
    assert np.all(pooled == 7.0) and np.all(idx == 0)


def test_maxpool_ramp():
    x = np.arange(16.0).reshape(4, 4)
    pooled, _ = conv.maxpool2(x)
    np.testing.assert_array_equal(pooled, [[5.0, 7.0], [13.0, 15.0]])


def test_maxpool_odd_errors():
    with pytest.raises(ConvError):
        conv.maxpool2(np.zeros((3, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_maxpool_dominates_block(seed):
    x = np.random.default_rng(seed).normal(size=(2, 6, 8))
    pooled, idx = conv.maxpool2(x)
    up = conv.upsample(pooled, 2)
    assert np.all(up >= x)
    routed = conv.maxpool2_backward(np.ones_like(pooled), idx)
    assert routed.sum() == pooled.size
    np.testing.assert_array_equal(x[routed == 1], up[routed == 1])


def test_upsample():
    x = np.random.default_rng(6).normal(size=(3, 4))
    np.testing.assert_array_equal(conv.upsample(x, 1), x)
    np.testing.assert_array_equal(conv.upsample(np.array([[1.0]]), 2), np.ones((2, 2)))
    assert conv.upsample(x, 3).shape == (9, 12)
    with pytest.raises(ConvError):
        conv.upsample(x, 0)


def test_upsample_bilinear_closed_form():
    out = conv.upsample(np.array([[0.0, 1.0]]), 2, "bilinear")
    assert out.shape == (2, 4)
    np.testing.assert_allclose(out, [[0, 1 / 3, 2 / 3, 1]] * 2, atol=1e-15)


def test_downsample_constant():
    out = conv.antialias_downsample(np.full((12, 8), 3.25), 4)
    assert out.shape == (3, 2)
    np.testing.assert_allclose(out, 3.25, atol=1e-14)


def test_downsample_factor_one_is_blur():
    x = np.random.default_rng(7).normal(size=(10, 10))
    out = conv.antialias_downsample(x, 1)
    # sigma 0.5, radius 2, edge-renormalized, applied separably
    g = np.exp(-(np.arange(-2, 3) ** 2) / (2 * 0.25))
    m = np.zeros((10, 10))
    for i in range(10):
        for d in range(-2, 3):
            if 0 <= i + d < 10:
                m[i, i + d] = g[d + 2]
    m /= m.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, m @ x @ m.T, atol=1e-14)


def test_downsample_reduces_aliasing():
    # period-4 stripes alias to the output Nyquist rate under factor-2 decimation
    stripes = np.tile(np.array([1.0, 1.0, 0.0, 0.0]), (16, 4))
    naive = stripes[::2, ::2]
    blurred = conv.antialias_downsample(stripes, 2)
    amp = lambda m: np.ptp(m[2:-2, 2:-2])  # noqa: E731
    assert amp(blurred) < amp(naive)


def test_downsample_indivisible():
    with pytest.raises(ConvError):
        conv.antialias_downsample(np.zeros((9, 8)), 2)
